"""Component ablations at desk scale.

Every variant trains from the same seed-derived data and initial weights
(parameters are seeded by name, so shared layers start identical) for the
same number of steps. Runs are scored by L1 loss over a fixed patch set
drawn from the training images, which is far less noisy than the last
mini-batch loss.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import DegradationSpec, derive_seed, sample_patches
from .errors import ConfigError
from .model import HINT
from .train import TrainConfig, l1_loss, train, training_pairs

log = logging.getLogger(__name__)

# ModelConfig overrides per variant
VARIANTS: dict[str, dict] = {
    "full": {},
    "hmha_only": {"intra": False, "inter": False},
    "intra_only": {"inter": False},
    "inter_only": {"intra": False},
    "no_rerank": {"rerank": "none"},
    "shuffle": {"rerank": "shuffle"},
    "equal_heads": {"head_ratio": (1, 1, 1, 1)},
    "ratio_1115": {"head_ratio": (1, 1, 1, 5)},
    "cosine": {"rerank": "cosine"},
    "dot": {"rerank": "dot"},
    "manhattan": {"rerank": "manhattan"},
}

DEFAULT_VARIANTS = ("full", "hmha_only", "intra_only", "inter_only", "no_rerank")

EVAL_PATCHES = 8


def three_degradation_suite() -> list[DegradationSpec]:
    return [DegradationSpec("gaussian_noise"), DegradationSpec("low_light_gamma"),
            DegradationSpec("rain_streaks")]


@dataclass
class AblationRun:
    variant: str
    seed: int
    final_loss: float
    last_batch_loss: float
    steps: int
    seconds: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def variant_config(base: TrainConfig, variant: str, seed: int) -> TrainConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; choose from {sorted(VARIANTS)}")
    cfg = dataclasses.replace(base, seed=seed, model=base.model.replace(**VARIANTS[variant]),
                              eval_every=0, checkpoint_every=0)
    return cfg.validate()


def fixed_patch_loss(model: HINT, patches) -> float:
    with T.no_grad():
        total = 0.0
        for clean, degraded in patches:
            restored, _ = model(degraded.astype(model.dtype))
            total += l1_loss(restored, clean.astype(model.dtype)).item()
    return total / len(patches)


def run_ablation(base: TrainConfig, variants=DEFAULT_VARIANTS, seeds=(0, 1, 2),
                 out_dir=None, progress: Callable[[dict], None] | None = None) -> list[AblationRun]:
    runs = []
    for seed in seeds:
        probe = variant_config(base, "full", seed)
        pairs = training_pairs(probe)
        patches = sample_patches(pairs, probe.patch_size, EVAL_PATCHES, derive_seed(seed, 2),
                                 probe.model.multiple)
        for variant in variants:
            cfg = variant_config(base, variant, seed)
            start = time.perf_counter()
            run_dir = Path(out_dir) / f"{variant}_seed{seed}" if out_dir else None
            result = train(cfg, run_dir, pairs=pairs)
            losses = result.log.losses()
            run = AblationRun(variant, seed, fixed_patch_loss(result.model, patches),
                              losses[-1] if losses else float("nan"), len(losses),
                              time.perf_counter() - start)
            log.info("ablation %s seed %d: final loss %.5f", variant, seed, run.final_loss)
            if progress:
                progress(run.as_dict())
            runs.append(run)
    return runs


def direction_check(runs, better: str = "full", worse: str = "hmha_only", needed: int = 2) -> dict:
    """Count seeds where ``better`` ends with loss no higher than ``worse``. Never raises."""
    by_key = {(r.variant, r.seed): r.final_loss for r in runs}
    seeds = sorted({r.seed for r in runs if (better, r.seed) in by_key and (worse, r.seed) in by_key})
    wins = [s for s in seeds if by_key[(better, s)] <= by_key[(worse, s)]]
    return {"event": "direction", "better": better, "worse": worse, "seeds": seeds,
            "wins": wins, "needed": needed,
            "status": "pass" if len(wins) >= needed else "warn"}


def write_results(runs, out_dir) -> dict[str, Path]:
    """Write ``ablation.jsonl``, ``ablation.csv`` and ``ablation.png`` into ``out_dir``."""
    from .plotting import ablation_bars

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [r.as_dict() for r in runs]
    jsonl = out_dir / "ablation.jsonl"
    with jsonl.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
        fh.write(json.dumps(direction_check(runs)) + "\n")
    table = out_dir / "ablation.csv"
    with table.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=[f.name for f in dataclasses.fields(AblationRun)])
        writer.writeheader()
        writer.writerows(rows)
    figure = ablation_bars(rows, out_dir / "ablation.png")
    return {"jsonl": jsonl, "csv": table, "figure": figure}


def summarize(runs) -> dict[str, dict]:
    out = {}
    for variant in dict.fromkeys(r.variant for r in runs):
        vals = np.array([r.final_loss for r in runs if r.variant == variant])
        out[variant] = {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(vals.size)}
    return out
