"""Late fusion of the two tower features, frame-difference ensembling,
and the regression objective.

Predictions are normalized survival times; the head output is linear
(no squashing). The raw volume and its two difference volumes share one
parameter set, so the ensemble is three forward passes of one network.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, UsageError
from .params import ParameterStore, uniform_fan_in

FRAME_DIFF_MODES = ("on", "forward-only", "backward-only", "off")


def init_head_params(store: ParameterStore, in_dim: int, hidden: int, rng, dtype=np.float32, prefix="head"):
    store.add(f"{prefix}.w1", uniform_fan_in(rng, (in_dim, hidden), in_dim, dtype))
    store.add(f"{prefix}.b1", np.zeros(hidden, dtype=dtype))
    store.add(f"{prefix}.w2", uniform_fan_in(rng, (hidden, 1), hidden, dtype))
    # start predictions mid-range of the [0,1]-normalized targets
    store.add(f"{prefix}.b2", np.full(1, 0.5, dtype=dtype))


def fuse_predict(store: ParameterStore, features: ad.Tensor, prefix="head") -> ad.Tensor:
    """Two-layer ReLU MLP with linear output: (n, in_dim) -> (n, 1)."""
    w1 = store[f"{prefix}.w1"]
    if features.shape[1] != w1.shape[0]:
        raise ConfigError(
            f"fusion head expects width {w1.shape[0]}, got features of width {features.shape[1]}"
        )
    hidden = ad.relu(ad.add(ad.matmul(features, w1), ad.reshape(store[f"{prefix}.b1"], (1, -1))))
    return ad.add(ad.matmul(hidden, store[f"{prefix}.w2"]), ad.reshape(store[f"{prefix}.b2"], (1, -1)))


def frame_difference(volume: np.ndarray, direction: str) -> np.ndarray:
    """Consecutive-slice subtraction along the frame axis, zero-padded.

    forward: out[i] = v[i+1] - v[i], last slice zero.
    backward: out[i] = v[i-1] - v[i], first slice zero.
    """
    if volume.ndim != 3:
        raise DimensionError(f"expected a (f,h,w) volume, got shape {volume.shape}")
    if volume.shape[0] < 2:
        raise DimensionError(f"frame difference needs at least 2 slices, got {volume.shape[0]}")
    out = np.zeros_like(volume)
    if direction == "forward":
        out[:-1] = volume[1:] - volume[:-1]
    elif direction == "backward":
        out[1:] = volume[:-1] - volume[1:]
    else:
        raise ConfigError(f"direction must be 'forward' or 'backward', got {direction!r}")
    return out


def ensemble_predict(t_hat, t_fwd, t_bwd, omega: float):
    """Trade-off between the raw-volume prediction and the difference pair.

    Works on floats and on Tensors, so the same formula serves training
    (gradients flow into all three passes) and evaluation.
    """
    if not 0.0 <= omega <= 1.0:
        raise ConfigError(f"omega must lie in [0,1], got {omega}")
    if isinstance(t_hat, ad.Tensor):
        avg = ad.mul(ad.add(t_fwd, t_bwd), 0.5)
        return ad.add(ad.mul(t_hat, float(omega)), ad.mul(avg, float(1.0 - omega)))
    return omega * t_hat + (1.0 - omega) * 0.5 * (t_fwd + t_bwd)


def mse_loss(predictions: ad.Tensor, targets: np.ndarray) -> ad.Tensor:
    if predictions.data.size == 0:
        raise UsageError("loss needs a non-empty batch")
    t = np.asarray(targets, dtype=predictions.dtype).reshape(predictions.shape)
    resid = ad.sub(predictions, ad.Tensor(t, dtype=predictions.dtype))
    return ad.mean_over(ad.mul(resid, resid), tuple(range(resid.data.ndim)))


def training_loss(
    predictions: ad.Tensor,
    targets: np.ndarray,
    store: ParameterStore,
    lam: float,
) -> ad.Tensor:
    """Mean squared error plus lam * sum of squared decayed parameters."""
    loss = mse_loss(predictions, targets)
    if lam:
        loss = ad.add(loss, ad.mul(store.l2_penalty(), float(lam)))
    return loss
