"""Volume tower: a small 3D residual network whose blocks carry
channel and temporal squeeze-and-excitation joint gates.

Feature maps are laid out [n, c, f, h, w] (batch, channels, frames,
in-plane). The channel gate combines a global descriptor (pooled over
frames and space) with per-frame local descriptors produced by the SAME
bottleneck weights; the temporal gate mirrors the construction with the
frame and channel axes swapped. Each joint gate entry is a product of
two sigmoids, so it lies strictly inside (0,1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError
from .params import ParameterStore, uniform_fan_in

SE_MODES = ("joint", "global", "local", "off")
SE_ORDERS = ("channel-first", "temporal-first")
SE_BLOCKS = ("both", "channel", "temporal")


@dataclass
class SqueezeExciteConfig:
    ratio: int = 2
    mode: str = "joint"
    order: str = "channel-first"
    blocks: str = "both"

    def __post_init__(self):
        if self.ratio < 1:
            raise ConfigError(f"reduction ratio must be >= 1, got {self.ratio}")
        if self.mode not in SE_MODES:
            raise ConfigError(f"se mode must be one of {SE_MODES}, got {self.mode!r}")
        if self.order not in SE_ORDERS:
            raise ConfigError(f"se order must be one of {SE_ORDERS}, got {self.order!r}")
        if self.blocks not in SE_BLOCKS:
            raise ConfigError(f"se blocks must be one of {SE_BLOCKS}, got {self.blocks!r}")

    @property
    def channel_enabled(self) -> bool:
        return self.mode != "off" and self.blocks in ("both", "channel")

    @property
    def temporal_enabled(self) -> bool:
        return self.mode != "off" and self.blocks in ("both", "temporal")


@dataclass
class VisualBackboneConfig:
    frames: int = 8
    in_plane: int = 96
    widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    stem_stride: tuple = (1, 2, 2)
    stage_stride: tuple = (1, 2, 2)
    se: SqueezeExciteConfig = field(default_factory=SqueezeExciteConfig)

    def __post_init__(self):
        if isinstance(self.se, dict):
            self.se = SqueezeExciteConfig(**self.se)
        self.widths = tuple(self.widths)
        self.stem_stride = tuple(self.stem_stride)
        self.stage_stride = tuple(self.stage_stride)
        if not self.widths:
            raise ConfigError("backbone needs at least one stage width")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        r = self.se.ratio
        if self.se.temporal_enabled and self.frames % r:
            raise ConfigError(f"frame count {self.frames} not divisible by SE ratio {r}")
        for w in self.widths:
            if self.se.channel_enabled and w % r:
                raise ConfigError(f"stage width {w} not divisible by SE ratio {r}")
        dims = self._trace_dims()
        if min(dims[-1]) < 1:
            raise ConfigError(
                f"downsampling schedule reduces dims below 1: input {dims[0]} -> {dims[-1]}"
            )

    def _trace_dims(self):
        dims = [(self.frames, self.in_plane, self.in_plane)]
        cur = tuple(
            (d + 2 - 3) // s + 1 for d, s in zip(dims[0], self.stem_stride)
        )
        dims.append(cur)
        for i in range(1, len(self.widths)):
            cur = tuple((d + 2 - 3) // s + 1 for d, s in zip(cur, self.stage_stride))
            dims.append(cur)
        return dims

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]


def channel_squeeze(feature: ad.Tensor) -> ad.Tensor:
    """Per-channel mean over frames and space: (n,c,f,h,w) -> (n,c)."""
    return ad.mean_over(feature, (2, 3, 4))


def excitation(pooled: ad.Tensor, w1: ad.Tensor, w2: ad.Tensor) -> ad.Tensor:
    """Bottleneck gate sigmoid(W1 relu(W2 p)) applied to rows of pooled."""
    c = pooled.shape[-1]
    if w2.shape[1] != c or w1.shape[0] != c or w1.shape[1] != w2.shape[0]:
        raise DimensionError(
            f"excitation weights {tuple(w1.shape)}/{tuple(w2.shape)} do not match width {c}"
        )
    hidden = ad.relu(ad.matmul(pooled, ad.transpose(w2)))
    return ad.sigmoid(ad.matmul(hidden, ad.transpose(w1)))


def temporal_preserving_pool(feature: ad.Tensor) -> ad.Tensor:
    """Spatial mean that keeps the frame axis: (n,c,f,h,w) -> (n,f,c)."""
    return ad.transpose(ad.mean_over(feature, (3, 4)), (0, 2, 1))


def per_frame_gates(frame_pooled: ad.Tensor, w1: ad.Tensor, w2: ad.Tensor) -> ad.Tensor:
    """Row-wise excitation of (n,f,c) descriptors with the shared weights."""
    n, f, c = frame_pooled.shape
    flat = ad.reshape(frame_pooled, (n * f, c))
    return ad.reshape(excitation(flat, w1, w2), (n, f, c))


def joint_gate(global_gate: ad.Tensor, local_gates: ad.Tensor, mode: str = "joint") -> ad.Tensor:
    """Combine global (n,c) and per-frame (n,f,c) gates into (n,f,c)."""
    n, f, c = local_gates.shape
    expanded = ad.reshape(global_gate, (n, 1, c))
    if mode == "joint":
        return ad.mul(local_gates, expanded)
    if mode == "global":
        return ad.mul(ad.Tensor(np.ones((1, f, 1), dtype=local_gates.dtype)), expanded)
    if mode == "local":
        return local_gates
    raise ConfigError(f"unknown gate mode {mode!r}")


def channel_se_apply(feature: ad.Tensor, gate: ad.Tensor) -> ad.Tensor:
    """Scale each (frame, channel) plane of (n,c,f,h,w) by gate (n,f,c)."""
    n, f, c = gate.shape
    aligned = ad.reshape(ad.transpose(gate, (0, 2, 1)), (n, c, f, 1, 1))
    return ad.mul(feature, aligned)


def channel_se(feature: ad.Tensor, w1: ad.Tensor, w2: ad.Tensor, mode: str = "joint") -> ad.Tensor:
    pooled = channel_squeeze(feature)
    global_gate = excitation(pooled, w1, w2)
    local_gates = per_frame_gates(temporal_preserving_pool(feature), w1, w2)
    return channel_se_apply(feature, joint_gate(global_gate, local_gates, mode))


def temporal_se(feature: ad.Tensor, w1: ad.Tensor, w2: ad.Tensor, mode: str = "joint") -> ad.Tensor:
    """Mirror of the channel gate along the frame axis.

    Global descriptor pools over (c,h,w) to (n,f); local descriptors pool
    over (h,w) to per-channel frame profiles (n,c,f), excited by the same
    shared bottleneck.
    """
    n, c, f = feature.shape[0], feature.shape[1], feature.shape[2]
    global_gate = excitation(ad.mean_over(feature, (1, 3, 4)), w1, w2)  # (n,f)
    local_pool = ad.mean_over(feature, (3, 4))                          # (n,c,f)
    local_flat = ad.reshape(local_pool, (n * c, f))
    local_gates = ad.reshape(excitation(local_flat, w1, w2), (n, c, f))
    if mode == "joint":
        gate = ad.mul(local_gates, ad.reshape(global_gate, (n, 1, f)))
    elif mode == "global":
        ones = ad.Tensor(np.ones((1, c, 1), dtype=feature.dtype))
        gate = ad.mul(ones, ad.reshape(global_gate, (n, 1, f)))
    elif mode == "local":
        gate = local_gates
    else:
        raise ConfigError(f"unknown gate mode {mode!r}")
    return ad.mul(feature, ad.reshape(gate, (n, c, f, 1, 1)))


def _conv(store, prefix, x, stride=1, padding=1):
    out = ad.conv3d(x, store[f"{prefix}.weight"], stride=stride, padding=padding)
    bias = store[f"{prefix}.bias"]
    return ad.add(out, ad.reshape(bias, (-1, 1, 1, 1)))


def init_block_params(store, prefix, c_in, c_out, frames, se: SqueezeExciteConfig, rng, dtype, strided):
    k = (c_out, c_in, 3, 3, 3)
    store.add(f"{prefix}.conv1.weight", uniform_fan_in(rng, k, c_in * 27, dtype))
    store.add(f"{prefix}.conv1.bias", np.zeros(c_out, dtype=dtype))
    store.add(f"{prefix}.conv2.weight", uniform_fan_in(rng, (c_out, c_out, 3, 3, 3), c_out * 27, dtype))
    store.add(f"{prefix}.conv2.bias", np.zeros(c_out, dtype=dtype))
    if se.channel_enabled:
        store.add(f"{prefix}.se_c.w1", uniform_fan_in(rng, (c_out, c_out // se.ratio), c_out // se.ratio, dtype))
        store.add(f"{prefix}.se_c.w2", uniform_fan_in(rng, (c_out // se.ratio, c_out), c_out, dtype))
    if se.temporal_enabled:
        store.add(f"{prefix}.se_t.w1", uniform_fan_in(rng, (frames, frames // se.ratio), frames // se.ratio, dtype))
        store.add(f"{prefix}.se_t.w2", uniform_fan_in(rng, (frames // se.ratio, frames), frames, dtype))
    if strided or c_in != c_out:
        store.add(f"{prefix}.shortcut.weight", uniform_fan_in(rng, (c_out, c_in, 1, 1, 1), c_in, dtype))


def se_resblock_forward(store, prefix, x, se: SqueezeExciteConfig, stride=1):
    """Residual block: conv-relu-conv, SE gates on the branch, then add.

    The gate stack runs after the second convolution and before the
    residual addition; its order is configurable.
    """
    branch = ad.relu(_conv(store, f"{prefix}.conv1", x, stride=stride))
    branch = _conv(store, f"{prefix}.conv2", branch)
    stages = []
    if se.channel_enabled:
        stages.append(lambda t: channel_se(t, store[f"{prefix}.se_c.w1"], store[f"{prefix}.se_c.w2"], se.mode))
    if se.temporal_enabled:
        stages.append(lambda t: temporal_se(t, store[f"{prefix}.se_t.w1"], store[f"{prefix}.se_t.w2"], se.mode))
    if se.order == "temporal-first":
        stages.reverse()
    for stage in stages:
        branch = stage(branch)
    if f"{prefix}.shortcut.weight" in store:
        shortcut = ad.conv3d(x, store[f"{prefix}.shortcut.weight"], stride=stride, padding=0)
    else:
        shortcut = x
    return ad.add(shortcut, branch)


def init_visual_params(store, config: VisualBackboneConfig, rng, dtype=np.float32, prefix="visual"):
    first = config.widths[0]
    store.add(f"{prefix}.stem.weight", uniform_fan_in(rng, (first, 1, 3, 3, 3), 27, dtype))
    store.add(f"{prefix}.stem.bias", np.zeros(first, dtype=dtype))
    c_in = first
    for s, width in enumerate(config.widths):
        for b in range(config.blocks_per_stage):
            strided = s > 0 and b == 0
            init_block_params(
                store, f"{prefix}.stage{s}.block{b}", c_in, width, config.frames,
                config.se, rng, dtype, strided,
            )
            c_in = width


def backbone_forward(store, config: VisualBackboneConfig, volumes: ad.Tensor, prefix="visual") -> ad.Tensor:
    """(n,1,f,h,w) volume batch -> (n, feature_dim) pooled features."""
    n = volumes.shape[0]
    expected = (config.frames, config.in_plane, config.in_plane)
    if tuple(volumes.shape[2:]) != expected or volumes.shape[1] != 1:
        raise ConfigError(
            f"volume batch shape {tuple(volumes.shape)} does not match configured input {expected}"
        )
    x = ad.relu(_conv(store, f"{prefix}.stem", volumes, stride=config.stem_stride))
    for s in range(len(config.widths)):
        for b in range(config.blocks_per_stage):
            stride = config.stage_stride if (s > 0 and b == 0) else 1
            x = se_resblock_forward(store, f"{prefix}.stage{s}.block{b}", x, config.se, stride=stride)
    return ad.mean_over(x, (2, 3, 4))
