"""Synthetic distorted patches with type, level, and a proxy quality score.

Seven distortion families at five severity levels stand in for a full
distortion bank. Severity strengths are calibrated so PSNR against the
clean patch falls strictly as the level rises. The proxy score for a
(type, level) cell is Gaussian around a strictly decreasing per-level
mean, mimicking how human ratings of one distortion spread by content.

All generators are pure functions of integer seeds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

FAMILIES = ("blur", "additive-noise", "impulse-noise", "block-quantize",
            "brightness", "contrast", "pixelate")

LEVELS = (1, 2, 3, 4, 5)

# rng stream salts, so one content seed feeds independent draws
_SALT_CONTENT = 101
_SALT_MOS = 202
_SALT_NOISE = 303

DEFAULT_JITTER_STD = 0.2


class DistortionError(ValueError):
    """Bad family name, level, or batch request."""


@dataclass(frozen=True)
class DistortionSpec:
    """One distortion family with a per-level severity knob.

    ``strengths`` must strictly increase with level; each family's kernel
    interprets the knob in its own units (blur sigma, noise std, ...).
    """

    type_id: int
    family: str
    strengths: tuple[float, float, float, float, float]

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DistortionError(
                f"unknown distortion family {self.family!r}; known: {FAMILIES}")
        if len(self.strengths) != 5:
            raise DistortionError("a spec needs exactly 5 per-level strengths")
        if not all(a < b for a, b in zip(self.strengths, self.strengths[1:])):
            raise DistortionError(
                f"strengths must strictly increase with level, got {self.strengths}")


@dataclass
class DistortionSample:
    """A distorted patch plus its labels."""

    patch: np.ndarray  # (H, W, 3) float64 in [0, 1]
    type_id: int
    level: int
    proxy_mos: float
    content_seed: int


_DEFAULT_STRENGTHS: dict[str, tuple[float, ...]] = {
    "blur": (0.5, 0.9, 1.5, 2.4, 4.0),            # gaussian sigma
    "additive-noise": (0.02, 0.05, 0.10, 0.18, 0.30),  # gaussian std
    "impulse-noise": (0.01, 0.03, 0.07, 0.15, 0.30),   # corrupted fraction
    "block-quantize": (1 / 12, 1 / 8, 1 / 5, 1 / 3, 1 / 2),  # 1 / levels
    "brightness": (0.05, 0.12, 0.22, 0.36, 0.55),  # additive offset
    "contrast": (0.15, 0.30, 0.45, 0.60, 0.78),    # 1 - compression factor
    "pixelate": (2, 3, 5, 8, 12),                  # block edge in pixels
}


def default_specs(type_ids: Sequence[int] | None = None) -> list[DistortionSpec]:
    """The calibrated 7-family bank; ``type_ids`` selects a subset by id."""
    ids = range(len(FAMILIES)) if type_ids is None else type_ids
    specs = []
    for tid in ids:
        if not 0 <= tid < len(FAMILIES):
            raise DistortionError(f"type_id {tid} outside the default bank 0..{len(FAMILIES) - 1}")
        fam = FAMILIES[tid]
        specs.append(DistortionSpec(tid, fam, tuple(_DEFAULT_STRENGTHS[fam])))
    return specs


# ---------------------------------------------------------------------------
# clean content
# ---------------------------------------------------------------------------


@lru_cache(maxsize=4096)
def _clean_patch_cached(content_seed: int, h: int, w: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((content_seed, _SALT_CONTENT)))
    yy, xx = np.mgrid[0:h, 0:w]
    yy = yy / max(h - 1, 1)
    xx = xx / max(w - 1, 1)

    gx, gy = rng.normal(size=2)
    base = gx * xx + gy * yy
    span = base.max() - base.min()
    if span > 1e-12:
        base = (base - base.min()) / span
    img = np.empty((h, w, 3))
    for c in range(3):
        img[:, :, c] = 0.2 + 0.55 * base * rng.uniform(0.5, 1.0) + rng.uniform(-0.1, 0.2)

    for _ in range(int(rng.integers(3, 8))):
        y0, y1 = np.sort(rng.integers(0, h, size=2))
        x0, x1 = np.sort(rng.integers(0, w, size=2))
        y1 = min(h, y1 + 1)
        x1 = min(w, x1 + 1)
        color = rng.uniform(0.0, 1.0, size=3)
        alpha = rng.uniform(0.3, 0.9)
        img[y0:y1, x0:x1] = (1 - alpha) * img[y0:y1, x0:x1] + alpha * color

    noise = rng.normal(size=(h, w, 3))
    noise = ndimage.gaussian_filter(noise, sigma=(rng.uniform(0.8, 2.0),) * 2 + (0,))
    img += noise * (rng.uniform(0.04, 0.12) / (noise.std() + 1e-9))

    # pin global statistics so brightness/contrast distortions are not
    # confounded by per-content exposure differences
    img = (img - img.mean()) / (img.std() + 1e-9) * 0.18 + 0.45

    out = np.clip(img, 0.0, 1.0)
    out.flags.writeable = False
    return out


def make_clean_patch(content_seed: int, size: int | tuple[int, int] = 32) -> np.ndarray:
    """Deterministic procedural texture: gradient + rectangles + soft noise."""
    h, w = (size, size) if isinstance(size, int) else size
    if h < 8 or w < 8:
        raise DistortionError(f"patch size must be at least 8x8, got {h}x{w}")
    return _clean_patch_cached(int(content_seed), int(h), int(w)).copy()


# ---------------------------------------------------------------------------
# distortion kernels (strength semantics documented per family above)
# ---------------------------------------------------------------------------


def _blur(patch, sigma, rng):
    return ndimage.gaussian_filter(patch, sigma=(sigma, sigma, 0), mode="reflect")


def _additive_noise(patch, std, rng):
    return patch + rng.normal(0.0, std, size=patch.shape)


def _impulse_noise(patch, fraction, rng):
    out = patch.copy()
    h, w = patch.shape[:2]
    hits = rng.random((h, w)) < fraction
    salt = rng.random((h, w)) < 0.5
    out[hits & salt] = 1.0
    out[hits & ~salt] = 0.0
    return out


def _block_quantize(patch, coarseness, rng):
    n_levels = max(2, round(1.0 / coarseness))
    return np.round(patch * (n_levels - 1)) / (n_levels - 1)


def _brightness(patch, offset, rng):
    return patch + offset


def _contrast(patch, strength, rng):
    return 0.5 + (patch - 0.5) * (1.0 - strength)


def _pixelate(patch, block, rng):
    block = int(block)
    h, w = patch.shape[:2]
    ys = np.arange(0, h, block)
    xs = np.arange(0, w, block)
    sums = np.add.reduceat(np.add.reduceat(patch, ys, axis=0), xs, axis=1)
    counts = np.outer(np.diff(np.append(ys, h)), np.diff(np.append(xs, w)))
    means = sums / counts[:, :, None]
    up = np.repeat(np.repeat(means, block, axis=0), block, axis=1)
    return up[:h, :w]


_KERNELS = {
    "blur": _blur,
    "additive-noise": _additive_noise,
    "impulse-noise": _impulse_noise,
    "block-quantize": _block_quantize,
    "brightness": _brightness,
    "contrast": _contrast,
    "pixelate": _pixelate,
}


def apply_distortion(patch: np.ndarray, spec: DistortionSpec, level: int,
                     noise_seed: int) -> np.ndarray:
    """Apply ``spec``'s kernel at the given level; output clamped to [0, 1]."""
    if level not in LEVELS:
        raise DistortionError(f"level must be in 1..5, got {level}")
    kernel = _KERNELS.get(spec.family)
    if kernel is None:
        raise DistortionError(f"unknown distortion family {spec.family!r}")
    rng = np.random.default_rng(
        np.random.SeedSequence((int(noise_seed), _SALT_NOISE, spec.type_id, level)))
    out = kernel(np.asarray(patch, dtype=np.float64), spec.strengths[level - 1], rng)
    return np.clip(out, 0.0, 1.0)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images."""
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


# ---------------------------------------------------------------------------
# proxy quality scores
# ---------------------------------------------------------------------------


def default_level_mean(level: int) -> float:
    return 5.0 - 0.8 * (level - 1)


def proxy_mos(type_id: int, level: int, content_seed: int,
              level_means: Sequence[float] | Mapping[int, Sequence[float]] | None = None,
              jitter_std: float = DEFAULT_JITTER_STD) -> float:
    """clamp(m(type, level) + eta, 1, 5) with eta ~ N(0, jitter_std^2).

    The jitter is a deterministic function of the content seed alone, so one
    content carries a consistent rating bias across types and levels.
    """
    if level not in LEVELS:
        raise DistortionError(f"level must be in 1..5, got {level}")
    if level_means is None:
        mean = default_level_mean(level)
    elif isinstance(level_means, Mapping):
        mean = float(level_means[type_id][level - 1])
    else:
        mean = float(level_means[level - 1])
    rng = np.random.default_rng(np.random.SeedSequence((int(content_seed), _SALT_MOS)))
    eta = rng.normal(0.0, jitter_std)
    return float(np.clip(mean + eta, 1.0, 5.0))


def make_sample(spec: DistortionSpec, level: int, content_seed: int,
                patch_size: int | tuple[int, int] = 32,
                level_means=None, jitter_std: float = DEFAULT_JITTER_STD) -> DistortionSample:
    """Clean patch -> distorted patch -> labeled sample, all from the seed."""
    clean = make_clean_patch(content_seed, patch_size)
    patch = apply_distortion(clean, spec, level, noise_seed=content_seed)
    score = proxy_mos(spec.type_id, level, content_seed, level_means, jitter_std)
    return DistortionSample(patch=patch, type_id=spec.type_id, level=level,
                            proxy_mos=score, content_seed=int(content_seed))


# ---------------------------------------------------------------------------
# batch and triplet sampling
# ---------------------------------------------------------------------------


def _draw_levels(n: int, rng: np.random.Generator) -> list[int]:
    # full round-robin cycles cover every level; the remainder is random
    levels = list(LEVELS) * (n // 5)
    levels += list(rng.integers(1, 6, size=n % 5))
    rng.shuffle(levels)
    return [int(v) for v in levels]


def _draw_seeds(n: int, rng: np.random.Generator, seed_range: tuple[int, int],
                exclude: frozenset[int]) -> list[int]:
    lo, hi = seed_range
    seeds: list[int] = []
    taken = set(exclude)
    while len(seeds) < n:
        s = int(rng.integers(lo, hi))
        if s not in taken:
            taken.add(s)
            seeds.append(s)
    return seeds


def sample_type_batch(spec: DistortionSpec, n: int, rng: np.random.Generator,
                      patch_size: int | tuple[int, int] = 32,
                      seed_range: tuple[int, int] = (0, 2 ** 31),
                      exclude_seeds: frozenset[int] = frozenset(),
                      level_means=None,
                      jitter_std: float = DEFAULT_JITTER_STD) -> list[DistortionSample]:
    """N same-type samples with round-robin level coverage and distinct seeds."""
    if n < 2:
        raise DistortionError(f"a graph batch needs at least 2 samples, got {n}")
    levels = _draw_levels(n, rng)
    seeds = _draw_seeds(n, rng, seed_range, exclude_seeds)
    return [make_sample(spec, lvl, seed, patch_size, level_means, jitter_std)
            for lvl, seed in zip(levels, seeds)]


def sample_triplet(specs: Sequence[DistortionSpec], n: int, rng: np.random.Generator,
                   patch_size: int | tuple[int, int] = 32,
                   seed_range: tuple[int, int] = (0, 2 ** 31),
                   level_means=None, jitter_std: float = DEFAULT_JITTER_STD
                   ) -> tuple[list[DistortionSample], list[DistortionSample], list[DistortionSample]]:
    """(anchor, positive, negative) batches: anchor/positive share a type with
    disjoint content seeds; the negative type is drawn uniformly from the rest."""
    if len(specs) < 2:
        raise DistortionError("triplet sampling needs at least 2 distortion types")
    anchor_spec = specs[int(rng.integers(len(specs)))]
    others = [s for s in specs if s.type_id != anchor_spec.type_id]
    negative_spec = others[int(rng.integers(len(others)))]

    kwargs = dict(patch_size=patch_size, seed_range=seed_range,
                  level_means=level_means, jitter_std=jitter_std)
    anchor = sample_type_batch(anchor_spec, n, rng, **kwargs)
    anchor_seeds = frozenset(s.content_seed for s in anchor)
    positive = sample_type_batch(anchor_spec, n, rng, exclude_seeds=anchor_seeds, **kwargs)
    negative = sample_type_batch(negative_spec, n, rng, **kwargs)
    return anchor, positive, negative


def sample_mixed_batch(specs: Sequence[DistortionSpec], n: int, rng: np.random.Generator,
                       patch_size: int | tuple[int, int] = 32,
                       seed_range: tuple[int, int] = (0, 2 ** 31),
                       level_means=None,
                       jitter_std: float = DEFAULT_JITTER_STD) -> list[DistortionSample]:
    """N samples with uniformly random type per sample (finetune batches)."""
    levels = _draw_levels(n, rng)
    seeds = _draw_seeds(n, rng, seed_range, frozenset())
    picks = [specs[int(rng.integers(len(specs)))] for _ in range(n)]
    return [make_sample(spec, lvl, seed, patch_size, level_means, jitter_std)
            for spec, lvl, seed in zip(picks, levels, seeds)]


def patches_array(samples: Sequence[DistortionSample]) -> np.ndarray:
    return np.stack([s.patch for s in samples])


# ---------------------------------------------------------------------------
# dataset export
# ---------------------------------------------------------------------------


def export_dataset(samples: Sequence[DistortionSample], out_dir: str | Path) -> Path:
    """Write PNG patches plus a ``manifest.csv`` (path,type_id,level,proxy_mos,seed)."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "type_id", "level", "proxy_mos", "seed"])
        for i, s in enumerate(samples):
            name = f"patch_{i:05d}_t{s.type_id}_l{s.level}.png"
            arr = np.clip(np.round(s.patch * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(out / name)
            writer.writerow([name, s.type_id, s.level, repr(s.proxy_mos), s.content_seed])
    return manifest
