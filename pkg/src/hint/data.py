"""Synthetic clean/degraded pairs, PPM/PNG I/O and patch sampling.

Images are float arrays shaped ``[3, H, W]`` with values in ``[0, 1]``.
Every random generator is seeded explicitly; derived streams use
:func:`derive_seed` so results do not depend on call order or platform.
"""

from __future__ import annotations

import dataclasses
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigError, FormatError, InputError, ParseError

DEGRADATION_KINDS = ("gaussian_noise", "low_light_gamma", "rain_streaks")
PPM_SUFFIXES = (".ppm", ".pnm")
IMAGE_SUFFIXES = PPM_SUFFIXES + (".png",)


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for stream ``keys`` of ``seed`` (hash of the tuple via SeedSequence)."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1, np.uint32)[0])


def check_image(img: np.ndarray, min_size: int = 8) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise InputError(f"expected a [3, H, W] image, got shape {img.shape}")
    if img.shape[1] < min_size or img.shape[2] < min_size:
        raise InputError(f"image {img.shape[1]}x{img.shape[2]} is smaller than {min_size}x{min_size}")
    if not np.all((img >= 0.0) & (img <= 1.0)):
        raise InputError("pixel values must lie in [0, 1]")
    return img


# -- degradations -------------------------------------------------------------------
@dataclass
class DegradationSpec:
    kind: str = "gaussian_noise"
    sigma: float = 25 / 255
    gamma: float = 2.2
    gain: float = 0.8
    streaks: int = 40
    angle: float = 70.0
    length: int = 9
    intensity: float = 0.35
    seed: int = 0

    def validate(self) -> "DegradationSpec":
        bad = []
        if self.kind not in DEGRADATION_KINDS:
            bad.append(f"kind must be one of {DEGRADATION_KINDS}, got {self.kind!r}")
        if self.sigma < 0:
            bad.append(f"sigma must be >= 0, got {self.sigma}")
        if self.kind == "low_light_gamma" and self.gamma <= 1:
            bad.append(f"gamma must exceed 1 to darken, got {self.gamma}")
        if self.gain <= 0:
            bad.append(f"gain must be positive, got {self.gain}")
        if self.streaks < 0 or self.length < 1:
            bad.append("streaks must be >= 0 and length >= 1")
        if not 0 <= self.intensity <= 1:
            bad.append(f"intensity must lie in [0, 1], got {self.intensity}")
        if bad:
            raise ConfigError("invalid degradation spec: " + "; ".join(bad))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown degradation keys: {unknown}")
        return cls(**d).validate()


def rain_mask(height: int, width: int, spec: DegradationSpec, rng: np.random.Generator) -> np.ndarray:
    """Oriented streaks of unit peak drawn as short line segments."""
    mask = np.zeros((height, width))
    theta = math.radians(spec.angle)
    dy, dx = math.sin(theta), math.cos(theta)
    steps = np.arange(spec.length)
    for _ in range(spec.streaks):
        y0 = rng.uniform(0, height)
        x0 = rng.uniform(0, width)
        strength = rng.uniform(0.6, 1.0)
        ys = np.floor(y0 + steps * dy).astype(int)
        xs = np.floor(x0 + steps * dx).astype(int)
        keep = (ys >= 0) & (ys < height) & (xs >= 0) & (xs < width)
        mask[ys[keep], xs[keep]] = np.maximum(mask[ys[keep], xs[keep]], strength)
    return mask


def degrade(clean: np.ndarray, spec: DegradationSpec, seed: int | None = None) -> np.ndarray:
    """Apply one degradation; ``seed`` overrides ``spec.seed``."""
    spec.validate()
    clean = np.asarray(clean, dtype=np.float64)
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    if spec.kind == "gaussian_noise":
        out = clean + rng.standard_normal(clean.shape) * spec.sigma
    elif spec.kind == "low_light_gamma":
        out = spec.gain * clean ** spec.gamma
    else:
        out = clean + rain_mask(clean.shape[-2], clean.shape[-1], spec, rng) * spec.intensity
    return np.clip(out, 0.0, 1.0)


def synth_clean(size: int | tuple[int, int], seed: int) -> np.ndarray:
    """A smooth, textured RGB test image: colour gradients, blobs and a few hard edges."""
    h, w = (size, size) if isinstance(size, int) else size
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    img = np.empty((3, h, w))
    for c in range(3):
        a, b, base = rng.uniform(-0.3, 0.3, size=3)
        img[c] = 0.5 + base + a * yy + b * xx
    for _ in range(4):
        cy, cx = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.08, 0.3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img += rng.uniform(-0.35, 0.35, size=(3, 1, 1)) * blob
    for _ in range(2):
        y0, x0 = rng.integers(0, h // 2), rng.integers(0, w // 2)
        y1, x1 = y0 + rng.integers(h // 8, h // 2), x0 + rng.integers(w // 8, w // 2)
        img[:, y0:y1, x0:x1] += rng.uniform(-0.25, 0.25, size=(3, 1, 1))
    fx, fy = rng.uniform(2, 8, size=2)
    img += 0.05 * np.sin(2 * np.pi * (fx * xx + fy * yy))[None]
    return np.clip(img, 0.0, 1.0)


def make_pairs(n: int, size: int, specs, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n`` clean images degraded by ``specs`` in round-robin order."""
    specs = [specs] if isinstance(specs, DegradationSpec) else list(specs)
    if not specs:
        raise ConfigError("at least one degradation spec is required")
    pairs = []
    for i in range(n):
        clean = synth_clean(size, derive_seed(seed, 0, i))
        spec = specs[i % len(specs)]
        pairs.append((clean, degrade(clean, spec, derive_seed(spec.seed, seed, i))))
    return pairs


def sample_patches(pairs, patch: int, count: int, seed: int,
                   multiple: int = 1) -> list[tuple[np.ndarray, np.ndarray]]:
    """Aligned random crops; image choice and top-left corner are uniform."""
    if patch % multiple:
        raise ConfigError(f"patch size {patch} must be a multiple of {multiple}")
    for clean, _ in pairs:
        if patch > clean.shape[-2] or patch > clean.shape[-1]:
            raise ConfigError(f"patch size {patch} exceeds image size {clean.shape[-2]}x{clean.shape[-1]}")
    if count <= 0:
        return []
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        clean, degraded = pairs[int(rng.integers(len(pairs)))]
        y = int(rng.integers(0, clean.shape[-2] - patch + 1))
        x = int(rng.integers(0, clean.shape[-1] - patch + 1))
        out.append((clean[:, y:y + patch, x:x + patch], degraded[:, y:y + patch, x:x + patch]))
    return out


# -- file I/O ---------------------------------------------------------------------------
def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise InputError(f"expected a [3, H, W] image, got shape {img.shape}")
    _, h, w = img.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + _quantize(img).transpose(1, 2, 0).tobytes()


def decode_ppm(raw: bytes) -> np.ndarray:
    """Binary PPM (P6, maxval 255). Header comments are allowed."""
    if raw[:2] != b"P6":
        raise ParseError("missing P6 magic", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(raw):
            raise ParseError("truncated PPM header", pos)
        ch = raw[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            end = raw.find(b"\n", pos)
            if end < 0:
                raise ParseError("unterminated header comment", pos)
            pos = end + 1
        elif ch.isdigit():
            start = pos
            while pos < len(raw) and raw[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(raw[start:pos]))
        else:
            raise ParseError(f"unexpected byte {ch!r} in PPM header", pos)
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ParseError("header must end with a single whitespace byte", pos)
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"only 8-bit PPM (maxval 255) is supported, got maxval {maxval}")
    if width < 1 or height < 1:
        raise ParseError(f"invalid dimensions {width}x{height}", pos)
    need = width * height * 3
    if len(raw) - pos < need:
        raise ParseError(f"pixel data truncated: need {need} bytes, have {len(raw) - pos}", len(raw))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_png(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise InputError(f"expected a [3, H, W] image, got shape {img.shape}")
    buf = io.BytesIO()
    PILImage.fromarray(np.ascontiguousarray(_quantize(img).transpose(1, 2, 0))).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(raw: bytes) -> np.ndarray:
    try:
        pic = PILImage.open(io.BytesIO(raw))
        pic.load()
    except Exception as exc:  # Pillow raises a zoo of types for corrupt data
        raise ParseError(f"corrupt PNG: {exc}") from exc
    if pic.mode not in ("RGB", "RGBA", "L", "P"):
        raise FormatError(f"unsupported PNG mode {pic.mode}; need 8-bit RGB")
    arr = np.asarray(pic.convert("RGB"), dtype=np.uint8)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def load_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] == b"P6":
        return decode_ppm(raw)
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        return decode_png(raw)
    raise FormatError(f"{path}: unrecognised image format (expected binary PPM or PNG)")


def save_image(img: np.ndarray, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in PPM_SUFFIXES:
        data = encode_ppm(img)
    elif suffix == ".png":
        data = encode_png(img)
    else:
        raise FormatError(f"{path}: cannot infer format from suffix {suffix!r}; use .ppm or .png")
    path.write_bytes(data)


def save_pair_dir(pairs, root, suffix: str = ".png") -> None:
    """Write pairs as ``root/clean/NNNN`` and ``root/degraded/NNNN``."""
    root = Path(root)
    (root / "clean").mkdir(parents=True, exist_ok=True)
    (root / "degraded").mkdir(parents=True, exist_ok=True)
    for i, (clean, degraded) in enumerate(pairs):
        save_image(clean, root / "clean" / f"{i:04d}{suffix}")
        save_image(degraded, root / "degraded" / f"{i:04d}{suffix}")


def load_pair_dir(root, with_names: bool = False) -> list[tuple]:
    """Pairs matched by filename between ``root/clean`` and ``root/degraded``.

    With ``with_names`` each entry is ``(name, clean, degraded)``.
    """
    root = Path(root)
    clean_dir, deg_dir = root / "clean", root / "degraded"
    if not clean_dir.is_dir() or not deg_dir.is_dir():
        raise InputError(f"{root} must contain 'clean' and 'degraded' subdirectories")
    names = sorted(p.name for p in clean_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not names:
        raise InputError(f"no images found in {clean_dir}")
    pairs = []
    for name in names:
        if not (deg_dir / name).exists():
            raise InputError(f"{deg_dir / name} missing for clean image {name}")
        clean, degraded = load_image(clean_dir / name), load_image(deg_dir / name)
        if clean.shape != degraded.shape:
            raise InputError(f"{name}: clean {clean.shape} and degraded {degraded.shape} differ")
        pairs.append((name, clean, degraded) if with_names else (clean, degraded))
    return pairs
