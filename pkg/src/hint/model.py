"""HINT: asymmetric encoder-decoder restoration network.

Encoder levels hold feed-forward blocks only. The bottleneck, decoder and
refinement blocks carry HMHA with QKCU. The network predicts a residual that
is added to the degraded input.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import HMHA, RERANK_METHODS, hierarchical_partition
from .errors import ConfigError, DimensionError, InputError
from .nn import Conv2d, LayerNorm2d, Module
from .qkcu import (
    InterCache,
    InterModulation,
    IntraModulation,
    inter_cache_layer,
    inter_cache_update,
    inter_modulate,
    intra_cache_build,
    intra_modulate,
)
from .tensor import Tensor


@dataclass
class ModelConfig:
    base_channels: int = 48
    levels: int = 4
    blocks_per_level: tuple[int, ...] = (4, 6, 6, 6)
    refinement_blocks: int = 4
    heads: int = 4
    head_ratio: tuple[int, ...] = (1, 2, 2, 3)
    alpha: float = 0.9
    ffn_expansion: float = 2.66
    intra_reduction: int = 4
    intra: bool = True
    inter: bool = True
    rerank: str = "pearson"
    in_channels: int = 3

    def __post_init__(self):
        self.blocks_per_level = tuple(int(n) for n in self.blocks_per_level)
        self.head_ratio = tuple(int(r) for r in self.head_ratio)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(base_channels=16, blocks_per_level=(1, 1, 1, 1), refinement_blocks=1)
        base.update(overrides)
        return cls(**base)

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.levels)]

    @property
    def multiple(self) -> int:
        """Input height and width must be multiples of this."""
        return 2 ** (self.levels - 1)

    def problems(self) -> list[str]:
        found = []
        if self.base_channels < 1:
            found.append(f"base_channels must be positive, got {self.base_channels}")
        if self.levels < 1:
            found.append(f"levels must be >= 1, got {self.levels}")
        if len(self.blocks_per_level) != self.levels:
            found.append(f"blocks_per_level has {len(self.blocks_per_level)} entries, levels = {self.levels}")
        if any(n < 0 for n in self.blocks_per_level) or self.refinement_blocks < 0:
            found.append("block counts must be non-negative")
        if len(self.head_ratio) != self.heads:
            found.append(f"head_ratio {list(self.head_ratio)} has {len(self.head_ratio)} entries, heads = {self.heads}")
        if any(r <= 0 for r in self.head_ratio):
            found.append(f"head_ratio entries must be positive, got {list(self.head_ratio)}")
        elif any(a > b for a, b in zip(self.head_ratio, self.head_ratio[1:])):
            found.append(f"head_ratio must be non-decreasing, got {list(self.head_ratio)}")
        total = sum(self.head_ratio) or 1
        for level, width in enumerate(self.widths, start=1):
            if width % total:
                found.append(f"level {level} width {width} not divisible by sum(head_ratio) = {total}")
            if self.intra_reduction < 1 or width % self.intra_reduction:
                found.append(f"level {level} width {width} not divisible by intra_reduction = {self.intra_reduction}")
        if not 0.0 <= self.alpha <= 1.0:
            found.append(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.ffn_expansion <= 0:
            found.append(f"ffn_expansion must be positive, got {self.ffn_expansion}")
        if self.rerank not in RERANK_METHODS:
            found.append(f"rerank must be one of {RERANK_METHODS}, got {self.rerank!r}")
        return found

    def validate(self) -> "ModelConfig":
        found = self.problems()
        if found:
            raise ConfigError("invalid model config:\n  - " + "\n  - ".join(found))
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["blocks_per_level"] = list(self.blocks_per_level)
        d["head_ratio"] = list(self.head_ratio)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


class GatedFFN(Module):
    """Pointwise expand, depthwise 3x3, GELU gate, pointwise project."""

    def __init__(self, channels: int, expansion: float):
        hidden = int(channels * expansion)
        self.project_in = Conv2d(channels, 2 * hidden, 1)
        self.depthwise = Conv2d(2 * hidden, 2 * hidden, 3, padding=1, groups=2 * hidden)
        self.project_out = Conv2d(hidden, channels, 1)
        self.hidden = hidden

    def forward(self, x: Tensor) -> Tensor:
        y = self.depthwise(self.project_in(x))
        return self.project_out(T.gelu(y[:self.hidden]) * y[self.hidden:])


class EncoderBlock(Module):
    def __init__(self, channels: int, cfg: ModelConfig):
        self.norm = LayerNorm2d(channels)
        self.ffn = GatedFFN(channels, cfg.ffn_expansion)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.ffn(self.norm(x))


def _row_entropy(p: np.ndarray) -> float:
    return float(-(p * np.log(np.clip(p, 1e-30, None))).sum(axis=-1).mean())


class DecoderBlock(Module):
    """Pre-norm attention (HMHA + QKCU) and feed-forward, each residual."""

    def __init__(self, channels: int, cfg: ModelConfig):
        self.partition = hierarchical_partition(channels, cfg.head_ratio)
        self.norm1 = LayerNorm2d(channels)
        self.attn = HMHA(channels, self.partition, cfg.rerank)
        self.inter = InterModulation(self.partition) if cfg.inter else None
        self.intra = IntraModulation(channels, cfg.intra_reduction) if cfg.intra else None
        self.norm2 = LayerNorm2d(channels)
        self.ffn = GatedFFN(channels, cfg.ffn_expansion)

    def forward(self, x: Tensor, cache: InterCache, stats: list | None = None) -> Tensor:
        c, h, w = x.shape
        modulate = None
        if self.inter is not None:
            heads = self.inter.heads
            modulate = lambda i, f_att: inter_modulate(cache, f_att, heads[i])  # noqa: E731
        if stats is not None:
            seen = cache.read().copy()
        fixed = cache.replay.permutations[cache.updates] if cache.replay is not None else None
        res = self.attn(self.norm1(x), modulate, fixed)
        inter_cache_update(cache, inter_cache_layer(res.att_maps, self.partition, cache.size))
        branch = res.out
        if self.intra is not None:
            # cache is in reranked order; restore channel order to line up with the output
            intra = res.permutation.invert(intra_cache_build(res.heads_qk)).reshape(c, h, w)
            branch = intra_modulate(intra, res.out, self.intra)
        if stats is not None:
            stats.append({
                "cache_in": seen,
                "permutation": res.permutation,
                "channels": c,
                "heads": list(self.partition.sizes),
                "entropy": [_row_entropy(s.data) for s in res.scores],
                "max_score": [float(s.data.max()) for s in res.scores],
                "scores": [s.data.copy() for s in res.scores],
            })
        x = x + branch
        return x + self.ffn(self.norm2(x))


class EncoderStage(Module):
    """Feed-forward blocks, then 3x3 conv halving channels and pixel-unshuffle."""

    def __init__(self, channels: int, n_blocks: int, cfg: ModelConfig):
        self.blocks = [EncoderBlock(channels, cfg) for _ in range(n_blocks)]
        self.down = Conv2d(channels, channels // 2, 3, padding=1)

    def downsample(self, x: Tensor) -> Tensor:
        return T.pixel_unshuffle(self.down(x), 2)


class DecoderStage(Module):
    """1x1 channel-doubling conv + pixel-shuffle, skip fusion, attention blocks."""

    def __init__(self, channels: int, n_blocks: int, cfg: ModelConfig):
        self.up = Conv2d(2 * channels, 4 * channels, 1)
        self.fuse = Conv2d(2 * channels, channels, 1)
        self.blocks = [DecoderBlock(channels, cfg) for _ in range(n_blocks)]

    def upsample(self, x: Tensor) -> Tensor:
        return T.pixel_shuffle(self.up(x), 2)


@dataclass
class Replay:
    """Per-block inter-cache reads and channel orders recorded from one forward pass.

    Feeding it back holds both fixed. Backprop treats the cache as a constant
    and the reranking as piecewise constant, so finite differences taken
    under a replay see the same function the analytic gradient describes.
    """

    cache_maps: list
    permutations: list


@dataclass
class Diagnostics:
    blocks: list = field(default_factory=list)
    cache_map: np.ndarray | None = None
    cache_updates: int = 0

    @property
    def cache_inputs(self) -> list[np.ndarray]:
        """The inter-cache map each attention block read, in execution order."""
        return [b["cache_in"] for b in self.blocks]

    def replay(self) -> Replay:
        return Replay(self.cache_inputs, [b["permutation"] for b in self.blocks])


class HINT(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        widths = cfg.widths
        n = cfg.blocks_per_level
        self.patch_embed = Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)
        self.encoder = [EncoderStage(widths[i], n[i], cfg) for i in range(cfg.levels - 1)]
        self.bottleneck = [DecoderBlock(widths[-1], cfg) for _ in range(n[-1])]
        self.decoder = [DecoderStage(widths[i], n[i], cfg) for i in reversed(range(cfg.levels - 1))]
        self.refinement = [DecoderBlock(widths[0], cfg) for _ in range(cfg.refinement_blocks)]
        self.output = Conv2d(cfg.base_channels, cfg.in_channels, 3, padding=1)
        self.output.weight.init = ("const", 0.0)

    @property
    def dtype(self) -> np.dtype:
        return self.output.weight.dtype

    def attention_blocks(self) -> list[DecoderBlock]:
        blocks = list(self.bottleneck)
        for stage in self.decoder:
            blocks.extend(stage.blocks)
        return blocks + list(self.refinement)

    def new_cache(self) -> InterCache:
        return InterCache.zeros(self.cfg.base_channels, self.cfg.alpha)

    def encode(self, fs: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Returns the downsampled feature entering the bottleneck and the per-level skips."""
        x, skips = fs, []
        for stage in self.encoder:
            for block in stage.blocks:
                x = block(x)
            skips.append(x)
            x = stage.downsample(x)
        return x, skips

    def decode(self, bottom: Tensor, skips: list[Tensor], cache: InterCache,
               stats: list | None = None) -> Tensor:
        if len(skips) != len(self.decoder):
            raise DimensionError(f"{len(skips)} skip features for {len(self.decoder)} decoder stages")
        x = bottom
        for block in self.bottleneck:
            x = block(x, cache, stats)
        for stage, skip in zip(self.decoder, reversed(skips)):
            x = stage.upsample(x)
            x = stage.fuse(T.concat([x, skip], axis=0))
            for block in stage.blocks:
                x = block(x, cache, stats)
        return x

    def refine(self, x: Tensor, cache: InterCache, stats: list | None = None) -> Tensor:
        for block in self.refinement:
            x = block(x, cache, stats)
        return x

    def check_input(self, shape) -> None:
        if len(shape) != 3 or shape[0] != self.cfg.in_channels:
            raise InputError(f"expected a [{self.cfg.in_channels}, H, W] image, got shape {tuple(shape)}")
        m = self.cfg.multiple
        if shape[1] % m or shape[2] % m:
            raise InputError(f"image size {shape[1]}x{shape[2]} must be a multiple of {m}")

    def forward(self, image, replay: Replay | None = None) -> tuple[Tensor, Diagnostics]:
        """Restore ``image``; ``replay`` pins cache reads and channel orders."""
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.dtype))
        self.check_input(x.shape)
        cache = self.new_cache()
        cache.replay = replay
        diag = Diagnostics()
        bottom, skips = self.encode(self.patch_embed(x))
        fd = self.refine(self.decode(bottom, skips, cache, diag.blocks), cache, diag.blocks)
        restored = x + self.output(fd)
        diag.cache_map = cache.map.copy()
        diag.cache_updates = cache.updates
        return restored, diag


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> HINT:
    """Deterministic construction: same ``(cfg, seed)`` gives bit-identical weights."""
    with T.default_dtype(dtype):
        model = HINT(cfg)
    return model.initialize(seed)


def analytic_macs(cfg: ModelConfig, height: int, width: int) -> int:
    """Multiply-accumulates of conv and matmul ops in one forward pass.

    Counted from the architecture alone; elementwise ops, norms and softmax
    are excluded.
    """
    cfg.validate()
    k = 9

    def ffn(c, n):
        h = int(c * cfg.ffn_expansion)
        return 2 * h * c * n + 2 * h * k * n + c * h * n

    def attn_block(c, n):
        part = hierarchical_partition(c, cfg.head_ratio)
        total = 3 * c * c * n + 3 * c * k * n + c * c * n
        for ci in part.sizes:
            total += 2 * ci * ci * n
            if cfg.inter:
                total += 2 * ci ** 3 + k * ci * ci
        if cfg.intra:
            r = c // cfg.intra_reduction
            total += c * k * n + 2 * r * c * n
        return total + ffn(c, n)

    n0 = height * width
    widths = cfg.widths
    sizes = [n0 // 4 ** i for i in range(cfg.levels)]
    total = cfg.base_channels * cfg.in_channels * k * n0 * 2
    for i in range(cfg.levels - 1):
        c, n = widths[i], sizes[i]
        total += cfg.blocks_per_level[i] * ffn(c, n)
        total += (c // 2) * c * k * n                         # downsample conv
        total += 4 * c * 2 * c * sizes[i + 1]                 # upsample conv at the coarser level
        total += c * 2 * c * n                                # skip fusion
        total += cfg.blocks_per_level[i] * attn_block(c, n)   # decoder blocks
    total += cfg.blocks_per_level[-1] * attn_block(widths[-1], sizes[-1])
    total += cfg.refinement_blocks * attn_block(widths[0], n0)
    return int(total)
