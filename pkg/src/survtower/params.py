"""Named parameter tensors with weight-decay flags and init helpers."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ConfigError


class ParameterStore:
    """Ordered name -> Tensor map for one model.

    ``decay`` marks tensors included in the L2 penalty; normalization
    gains/biases opt out.
    """

    def __init__(self):
        self._params: dict[str, ad.Tensor] = {}
        self._decay: dict[str, bool] = {}

    def add(self, name: str, array: np.ndarray, decay: bool = True) -> ad.Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = ad.Tensor(array, requires_grad=True, dtype=array.dtype)
        self._params[name] = t
        self._decay[name] = decay
        return t

    def __getitem__(self, name: str) -> ad.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def decays(self, name: str) -> bool:
        return self._decay[name]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def l2_penalty(self) -> ad.Tensor:
        """Sum of squared entries over every decayed parameter tensor."""
        total = None
        for name, t in self._params.items():
            if not self._decay[name]:
                continue
            sq = ad.sum_over(ad.mul(t, t))
            total = sq if total is None else ad.add(total, sq)
        if total is None:
            raise ConfigError("no decayed parameters registered")
        return total

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore()
        for name, t in self._params.items():
            out.add(name, t.data.astype(dtype), decay=self._decay[name])
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        if set(arrays) != set(self._params):
            missing = set(self._params) - set(arrays)
            extra = set(arrays) - set(self._params)
            raise ConfigError(f"parameter name mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
        for name, arr in arrays.items():
            t = self._params[name]
            if tuple(arr.shape) != tuple(t.data.shape):
                raise ConfigError(f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """Symmetric uniform init with bound 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
