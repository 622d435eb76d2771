"""Query-key cache updating: intra-layer gating and inter-layer score modulation.

The intra cache is rebuilt in every attention layer from the heads' queries
and keys. The inter cache is a single ``C' x C'`` map carried through the
attention layers of one forward pass and refreshed as an exponential moving
average of the layers' score maps. It is held outside the autodiff graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import erf

from . import tensor as T
from .attention import HeadPartition
from .errors import ConfigError, DimensionError
from .nn import Conv2d, Module, Parameter
from .tensor import Tensor


def _gelu64(x: float) -> float:
    return 0.5 * x * (1.0 + float(erf(x / math.sqrt(2.0))))


# GELU(b) == 1: a zero-weight gate conv with this bias passes its input through.
GATE_IDENTITY_BIAS = brentq(lambda b: _gelu64(b) - 1.0, 0.5, 3.0, xtol=1e-16, rtol=1e-15)


# -- intra-layer --------------------------------------------------------------------
def intra_cache_build(heads_qk: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Concatenate ``Q_i + K_i`` over heads along channels, in head order."""
    if not heads_qk:
        raise DimensionError("intra_cache_build needs at least one head")
    hw = {q.shape[-1] for q, _ in heads_qk} | {k.shape[-1] for _, k in heads_qk}
    if len(hw) != 1 or any(q.shape != k.shape for q, k in heads_qk):
        raise DimensionError(
            f"intra_cache_build: inconsistent head shapes {[(q.shape, k.shape) for q, k in heads_qk]}")
    return T.concat([q + k for q, k in heads_qk], axis=0)


class IntraModulation(Module):
    """Gate ``cache + f_out`` then squeeze and re-expand channels."""

    def __init__(self, channels: int, reduction: int = 4):
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"intra reduction {reduction} must divide channel count {channels}")
        self.gate = Conv2d(channels, channels, 3, padding=1, groups=channels, bias=True)
        self.down = Conv2d(channels, channels // reduction, 1, bias=True)
        self.up = Conv2d(channels // reduction, channels, 1, bias=True)
        self.reduction = reduction

    def forward(self, cache: Tensor, f_out: Tensor) -> Tensor:
        if cache.shape != f_out.shape:
            raise DimensionError(f"intra_modulate: cache {cache.shape} vs output {f_out.shape}")
        fs = cache + f_out
        gated = T.gelu(self.gate(fs)) * fs
        return self.up(self.down(gated))


def intra_modulate(cache: Tensor, f_out: Tensor, params: IntraModulation) -> Tensor:
    """Both inputs are ``[C, H, W]`` views of the ``C x HW`` features."""
    return params(cache, f_out)


# -- inter-layer ----------------------------------------------------------------------
def interpolation_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic 1-D linear interpolation matrix, corners aligned."""
    a = np.zeros((n_out, n_in))
    if n_in == 1:
        a[:, 0] = 1.0
        return a
    if n_out == 1:
        a[0, 0] = 1.0
        return a
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    a[np.arange(n_out), lo] = 1.0 - frac
    a[np.arange(n_out), lo + 1] += frac
    return a


def resize_bilinear(m: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a square map to ``size x size`` (align-corners)."""
    m = np.asarray(m)
    if m.shape[0] == size and m.shape[1] == size:
        return m.copy()
    rows = interpolation_matrix(size, m.shape[0])
    cols = interpolation_matrix(size, m.shape[1])
    return (rows @ m @ cols.T).astype(m.dtype)


@dataclass
class InterCache:
    """Cross-layer EMA of score maps.

    ``replay`` optionally supplies the map each layer should read, in update
    order, instead of the live one; finite-difference checks use it to hold
    the cache constant the same way backprop does.
    """

    map: np.ndarray
    alpha: float = 0.9
    updates: int = 0
    replay: object | None = None

    @classmethod
    def zeros(cls, size: int, alpha: float = 0.9, dtype=np.float64) -> "InterCache":
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
        return cls(np.zeros((size, size), dtype=dtype), float(alpha))

    @property
    def size(self) -> int:
        return self.map.shape[0]

    def reset(self) -> None:
        self.map[...] = 0.0
        self.updates = 0

    def read(self) -> np.ndarray:
        if self.replay is not None:
            return self.replay.cache_maps[self.updates]
        return self.map


class InterHeadParams(Module):
    """Scale/shift projections and score-map gate for one head.

    Initialised to the identity: scale weights 0 with bias 1, shift 0, and a
    zero-weight gate whose bias makes GELU output exactly 1.
    """

    def __init__(self, size: int):
        self.scale_weight = Parameter((size, size))
        self.scale_bias = Parameter((size,), ("const", 1.0))
        self.shift_weight = Parameter((size, size))
        self.shift_bias = Parameter((size,))
        self.gate = Conv2d(1, 1, 3, padding=1, bias=True)
        self.gate.weight.init = ("const", 0.0)
        self.gate.bias.init = ("const", GATE_IDENTITY_BIAS)
        self.size = size


class InterModulation(Module):
    def __init__(self, partition: HeadPartition):
        self.heads = [InterHeadParams(s) for s in partition.sizes]


def inter_modulate(cache: InterCache, f_att: Tensor, params: InterHeadParams) -> Tensor:
    """Modulate one head's pre-softmax score map with the (resized) inter cache."""
    if f_att.ndim != 2 or f_att.shape[0] != f_att.shape[1]:
        raise DimensionError(f"inter_modulate needs a square score map, got {f_att.shape}")
    n = f_att.shape[0]
    if params.size != n:
        raise DimensionError(f"inter head params sized {params.size}, score map is {n}x{n}")
    resized = Tensor(resize_bilinear(cache.read(), n).astype(f_att.dtype))
    fs = f_att + resized
    f_scale = fs @ params.scale_weight + params.scale_bias
    f_shift = fs @ params.shift_weight + params.shift_bias
    f_m = f_scale * f_att + f_shift
    gate = params.gate(f_m.reshape(1, n, n)).reshape(n, n)
    return T.gelu(gate) * f_m


def inter_cache_layer(att_maps: Sequence, partition: HeadPartition, size: int) -> np.ndarray:
    """Channel-weighted sum of the heads' maps, each resized to ``size x size``."""
    if len(att_maps) != partition.heads:
        raise DimensionError(f"{len(att_maps)} score maps for a {partition.heads}-head partition")
    total = np.zeros((size, size))
    for m, s, w in zip(att_maps, partition.sizes, partition.weights):
        m = m.data if isinstance(m, Tensor) else np.asarray(m)
        if m.shape != (s, s):
            raise DimensionError(f"score map {m.shape} does not match head width {s}")
        total += resize_bilinear(m.astype(np.float64), size) * w
    return total


def inter_cache_update(cache: InterCache, layer_map: np.ndarray) -> InterCache:
    """EMA update in place; returns the same cache."""
    layer_map = layer_map.data if isinstance(layer_map, Tensor) else np.asarray(layer_map)
    if layer_map.shape != cache.map.shape:
        raise DimensionError(f"inter_cache_update: cache {cache.map.shape} vs layer map {layer_map.shape}")
    cache.map[...] = cache.alpha * cache.map + (1.0 - cache.alpha) * layer_map
    cache.updates += 1
    return cache
