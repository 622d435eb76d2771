"""Hierarchical multi-head channel attention.

Channels of Q, K and V are reordered by how strongly each correlates with the
mean channel, then split contiguously into heads of non-decreasing width.
Each head runs transposed attention: its score map is ``C_i x C_i`` and the
spatial extent is the reduction axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import Conv2d, Module, Parameter
from .tensor import Tensor

RERANK_METHODS = ("pearson", "cosine", "dot", "manhattan", "none", "shuffle")


def pearson_correlation(a, b) -> float:
    """Pearson correlation of two vectors; 0 when either is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"pearson_correlation: lengths differ ({a.size} vs {b.size})")
    if a.size < 2:
        raise DimensionError("pearson_correlation needs at least 2 samples")
    da = a - a.mean()
    db = b - b.mean()
    den = math.sqrt(float(da @ da)) * math.sqrt(float(db @ db))
    if den == 0.0:
        return 0.0
    return float(np.clip((da @ db) / den, -1.0, 1.0))


def similarity_to_mean(v: np.ndarray, method: str = "pearson") -> np.ndarray:
    """Score each row of ``v`` ([C, N]) against the mean row. Higher = more similar."""
    v = np.asarray(v, dtype=np.float64)
    m = v.mean(axis=0)
    if method == "pearson":
        if v.shape[1] < 2:
            return np.zeros(v.shape[0])
        vc = v - v.mean(axis=1, keepdims=True)
        mc = m - m.mean()
        den = np.sqrt((vc * vc).sum(axis=1)) * math.sqrt(float(mc @ mc))
        num = vc @ mc
        safe = np.where(den > 0, den, 1.0)
        return np.where(den > 0, np.clip(num / safe, -1.0, 1.0), 0.0)
    if method == "cosine":
        den = np.linalg.norm(v, axis=1) * np.linalg.norm(m)
        return np.where(den > 0, (v @ m) / np.where(den > 0, den, 1.0), 0.0)
    if method == "dot":
        return v @ m
    if method == "manhattan":
        return -np.abs(v - m).sum(axis=1)
    raise ConfigError(f"no similarity score for rerank method {method!r}")


@dataclass(frozen=True)
class ChannelPermutation:
    """Bijection on channel positions. ``forward[i]`` is the source of position i."""

    forward: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_forward(cls, forward) -> "ChannelPermutation":
        forward = np.asarray(forward, dtype=np.intp)
        inverse = np.empty_like(forward)
        inverse[forward] = np.arange(forward.size)
        return cls(forward, inverse)

    @classmethod
    def identity(cls, n: int) -> "ChannelPermutation":
        return cls.from_forward(np.arange(n))

    def __len__(self) -> int:
        return self.forward.size

    def apply(self, x, axis: int = 0):
        if isinstance(x, Tensor):
            return T.take(x, self.forward, axis)
        return np.take(x, self.forward, axis=axis)

    def invert(self, x, axis: int = 0):
        if isinstance(x, Tensor):
            return T.take(x, self.inverse, axis)
        return np.take(x, self.inverse, axis=axis)


def channel_shuffle_permutation(c: int, groups: int) -> ChannelPermutation:
    """ShuffleNet-style interleave; falls back to identity when groups does not divide c."""
    if groups <= 1 or c % groups:
        return ChannelPermutation.identity(c)
    return ChannelPermutation.from_forward(np.arange(c).reshape(groups, c // groups).T.ravel())


def rerank_permutation(v, method: str = "pearson") -> ChannelPermutation:
    """Order channels of ``v`` ([C, HW]) by descending similarity to the mean channel.

    Ties keep ascending original index. With fewer than two spatial samples
    every Pearson score is 0, which yields the identity.
    """
    v = v.data if isinstance(v, Tensor) else np.asarray(v)
    if v.ndim != 2:
        raise DimensionError(f"rerank_permutation expects [C, HW], got {v.shape}")
    if method == "none":
        return ChannelPermutation.identity(v.shape[0])
    scores = similarity_to_mean(v, method)
    return ChannelPermutation.from_forward(np.argsort(-scores, kind="stable"))


@dataclass(frozen=True)
class HeadPartition:
    sizes: tuple[int, ...]
    ratio: tuple[int, ...]

    @property
    def channels(self) -> int:
        return sum(self.sizes)

    @property
    def heads(self) -> int:
        return len(self.sizes)

    @property
    def bounds(self) -> list[tuple[int, int]]:
        edges = np.concatenate([[0], np.cumsum(self.sizes)])
        return [(int(lo), int(hi)) for lo, hi in zip(edges[:-1], edges[1:])]

    @property
    def weights(self) -> list[float]:
        c = self.channels
        return [s / c for s in self.sizes]


def hierarchical_partition(channels: int, ratio: Sequence[int]) -> HeadPartition:
    ratio = tuple(int(r) for r in ratio)
    if not ratio or any(r <= 0 for r in ratio):
        raise ConfigError(f"head ratio must be positive integers, got {list(ratio)}")
    if any(a > b for a, b in zip(ratio, ratio[1:])):
        raise ConfigError(f"head ratio must be non-decreasing, got {list(ratio)}")
    total = sum(ratio)
    if channels % total:
        raise ConfigError(f"channel count {channels} is not divisible by sum(ratio) = {total}")
    return HeadPartition(tuple(channels * r // total for r in ratio), ratio)


@dataclass
class HmhaResult:
    out: Tensor
    heads_qk: list[tuple[Tensor, Tensor]]
    att_maps: list[Tensor]
    scores: list[Tensor]
    permutation: ChannelPermutation


class HMHA(Module):
    """QKV projection, reranking, unequal head split and per-head channel attention."""

    def __init__(self, channels: int, partition: HeadPartition, rerank: str = "pearson"):
        if partition.channels != channels:
            raise ConfigError(f"partition {partition.sizes} does not sum to {channels}")
        if rerank not in RERANK_METHODS:
            raise ConfigError(f"unknown rerank method {rerank!r}; choose from {RERANK_METHODS}")
        self.qkv_pointwise = Conv2d(channels, 3 * channels, 1)
        self.qkv_depthwise = Conv2d(3 * channels, 3 * channels, 3, padding=1, groups=3 * channels)
        self.out_proj = Conv2d(channels, channels, 1)
        self.temperature = Parameter((partition.heads,), ("const", 1.0))
        self.channels = channels
        self.partition = partition
        self.rerank = rerank

    def permutation_for(self, v: np.ndarray) -> ChannelPermutation:
        if self.rerank == "shuffle":
            return channel_shuffle_permutation(self.channels, self.partition.heads)
        return rerank_permutation(v, self.rerank)

    def forward(self, x: Tensor, modulate: Callable[[int, Tensor], Tensor] | None = None,
                permutation: ChannelPermutation | None = None) -> HmhaResult:
        """``modulate(head_index, f_att)`` rewrites each pre-softmax score map.

        ``permutation`` overrides the data-dependent channel order.
        """
        c, h, w = x.shape
        if c != self.channels:
            raise DimensionError(f"HMHA built for {self.channels} channels, got input {x.shape}")
        qkv = self.qkv_depthwise(self.qkv_pointwise(x)).reshape(3 * c, h * w)
        q, k, v = qkv[:c], qkv[c:2 * c], qkv[2 * c:]
        perm = permutation or self.permutation_for(v.data)
        q, k, v = perm.apply(q), perm.apply(k), perm.apply(v)

        outs, heads_qk, maps, scores = [], [], [], []
        for i, (lo, hi) in enumerate(self.partition.bounds):
            qi = T.l2_normalize(q[lo:hi], axis=-1)
            ki = T.l2_normalize(k[lo:hi], axis=-1)
            f_att = (qi @ ki.T) * self.temperature[i]
            if modulate is not None:
                f_att = modulate(i, f_att)
            attn = T.softmax(f_att, axis=-1)
            outs.append(attn @ v[lo:hi])
            heads_qk.append((qi, ki))
            maps.append(f_att)
            scores.append(attn)
        merged = perm.invert(T.concat(outs, axis=0)).reshape(c, h, w)
        return HmhaResult(self.out_proj(merged), heads_qk, maps, scores, perm)
