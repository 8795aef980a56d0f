"""Synthetic clean images, parametric degradations, augmentation and PNG I/O.

Every generator is a pure function of its inputs and seed.  Pixels live in
``[0, 1]``; noise sigma is given on the 8-bit scale and divided by 255.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

TASKS = ("derain", "dehaze", "denoise")
TASK_OF_KIND = {"rain": "derain", "haze": "dehaze", "noise": "denoise"}


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(e) % (1 << 63) for e in entropy]))


@dataclass
class DegradationSpec:
    """``kind`` is noise | rain | haze.

    noise: ``sigma`` (8-bit scale).  rain: ``count``, ``length`` (px),
    ``angle`` (deg from vertical), ``intensity``.  haze: ``airlight``,
    ``transmission``.
    """

    kind: str
    seed: int = 0
    sigma: float | None = None
    count: int | None = None
    length: float | None = None
    angle: float | None = None
    intensity: float | None = None
    airlight: float | None = None
    transmission: float | None = None

    def validate(self) -> None:
        if self.kind == "noise":
            if self.sigma is None or self.sigma < 0:
                raise ValueError(f"noise needs sigma >= 0, got {self.sigma}")
        elif self.kind == "rain":
            if self.count is None or self.count < 0 or not self.length or self.length <= 0:
                raise ValueError("rain needs count >= 0 and length > 0")
            if self.angle is None or self.intensity is None or not 0 <= self.intensity <= 1:
                raise ValueError("rain needs an angle and an intensity in [0, 1]")
        elif self.kind == "haze":
            if self.airlight is None or not 0 <= self.airlight <= 1:
                raise ValueError("haze airlight must be in [0, 1]")
            if self.transmission is None or not 0 < self.transmission <= 1:
                raise ValueError("haze transmission must be in (0, 1]")
        else:
            raise ValueError(f"unknown degradation kind {self.kind!r}")

    @property
    def task(self) -> str:
        return TASK_OF_KIND[self.kind]

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        return cls(**d)


@dataclass
class ImagePair:
    degraded: np.ndarray
    clean: np.ndarray
    task: str
    source: str = ""
    spec: DegradationSpec | None = None
    aug_seed: int = 0

    def __post_init__(self):
        if self.degraded.shape != self.clean.shape:
            raise ValueError(
                f"pair {self.source!r}: degraded {self.degraded.shape} vs clean {self.clean.shape}")


@dataclass
class Dataset:
    pairs: list[ImagePair]
    split: str = "train"
    name: str = ""
    balance: dict[str, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def by_task(self) -> dict[str, list[ImagePair]]:
        out: dict[str, list[ImagePair]] = {}
        for p in self.pairs:
            out.setdefault(p.task, []).append(p)
        return out


# clean images ---------------------------------------------------------------

def _smooth_blobs(rng, size, n):
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.zeros((size, size, 3))
    for _ in range(n):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.08, 0.3)
        amp = rng.uniform(-0.35, 0.35, 3)
        out += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))[..., None]
    return out


def _clean_image(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.3, 0.7, 3)
    # linear colour gradient
    gdir = rng.normal(size=2)
    grad = (gdir[0] * (yy - 0.5) + gdir[1] * (xx - 0.5))[..., None] * rng.uniform(-0.3, 0.3, 3)
    img = base + grad
    # sinusoid texture
    freq = rng.uniform(1.0, 4.0)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    img = img + wave[..., None] * rng.uniform(0.0, 0.15, 3)
    img = img + _smooth_blobs(rng, size, int(rng.integers(1, 4)))
    # sharp-edged shapes
    for _ in range(int(rng.integers(1, 3))):
        colour = rng.uniform(0.1, 0.9, 3)
        if rng.uniform() < 0.5:
            y0, x0 = rng.integers(0, size - 2, 2)
            y1 = rng.integers(y0 + 2, size + 1)
            x1 = rng.integers(x0 + 2, size + 1)
            m = np.zeros((size, size), bool)
            m[y0:y1, x0:x1] = True
        else:
            cy, cx = rng.uniform(0.2, 0.8, 2)
            r = rng.uniform(0.1, 0.3)
            m = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        alpha = rng.uniform(0.5, 1.0)
        img[m] = (1 - alpha) * img[m] + alpha * colour
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_clean(n: int, size: int, seed: int) -> list[np.ndarray]:
    """``n`` procedural ``size x size x 3`` images in [0, 1]."""
    if size % 8:
        raise ValueError(f"image size {size} must be divisible by 8")
    return [_clean_image(_rng(seed, i), size) for i in range(n)]


# degradations ------------------------------------------------------------------

def _rain_layer(shape, spec: DegradationSpec) -> np.ndarray:
    h, w = shape[:2]
    rng = _rng(spec.seed, 7)
    layer = np.zeros((h, w), dtype=np.float64)
    a = math.radians(spec.angle)
    dy, dx = math.cos(a), math.sin(a)
    steps = max(int(math.ceil(spec.length)), 1)
    for _ in range(spec.count):
        y0 = rng.uniform(-spec.length, h)
        x0 = rng.uniform(0, w)
        for s in range(steps):
            y = int(round(y0 + s * dy))
            x = int(round(x0 + s * dx))
            if 0 <= y < h and 0 <= x < w:
                layer[y, x] = max(layer[y, x], spec.intensity)
    return layer


def degrade(clean: np.ndarray, spec: DegradationSpec, source: str = "", aug_seed: int = 0) -> ImagePair:
    """Apply ``spec`` to ``clean`` and clamp to [0, 1]."""
    spec.validate()
    clean = np.asarray(clean, dtype=np.float32)
    if clean.size and (clean.min() < 0 or clean.max() > 1):
        raise ValueError("clean image must lie in [0, 1]")
    x = clean.astype(np.float64)
    if spec.kind == "noise":
        if spec.sigma == 0:
            out = x
        else:
            out = x + _rng(spec.seed, 5).normal(0.0, spec.sigma / 255.0, size=x.shape)
    elif spec.kind == "rain":
        out = x + _rain_layer(x.shape, spec)[..., None]
    else:
        t = spec.transmission
        out = x * t + spec.airlight * (1 - t)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return ImagePair(out, clean, spec.task, source, spec, aug_seed)


def sample_spec(kind: str, seed: int, index: int = 0, noise_sigmas: Sequence[float] = (15, 25, 50),
                rain: dict | None = None, haze: dict | None = None) -> DegradationSpec:
    """Draw a concrete spec; noise levels go round-robin over ``noise_sigmas`` by ``index``."""
    rng = _rng(seed, 11)
    if kind == "noise":
        return DegradationSpec("noise", seed=seed, sigma=float(noise_sigmas[index % len(noise_sigmas)]))
    if kind == "rain":
        r = {"count": (6, 16), "length": (4.0, 10.0), "angle": (-20.0, 20.0), "intensity": (0.25, 0.6)}
        r.update(rain or {})
        return DegradationSpec(
            "rain", seed=seed, count=int(rng.integers(r["count"][0], r["count"][1] + 1)),
            length=float(rng.uniform(*r["length"])), angle=float(rng.uniform(*r["angle"])),
            intensity=float(rng.uniform(*r["intensity"])))
    if kind == "haze":
        r = {"airlight": (0.7, 1.0), "transmission": (0.4, 0.8)}
        r.update(haze or {})
        return DegradationSpec("haze", seed=seed, airlight=float(rng.uniform(*r["airlight"])),
                               transmission=float(rng.uniform(*r["transmission"])))
    raise ValueError(f"unknown degradation kind {kind!r}")


# augmentation --------------------------------------------------------------------

def crop_offset(h: int, w: int, patch: int, rng: np.random.Generator) -> tuple[int, int]:
    return int(rng.integers(0, h - patch + 1)), int(rng.integers(0, w - patch + 1))


def crop_patch(pair: ImagePair, patch: int, seed) -> tuple[ImagePair, tuple[int, int]]:
    """Aligned random crop; returns the cropped pair and its ``(dy, dx)`` offset."""
    h, w = pair.clean.shape[:2]
    if patch % 8:
        raise ValueError(f"patch size {patch} must be divisible by 8")
    if patch > min(h, w):
        raise ValueError(f"patch {patch} larger than image {h}x{w} ({pair.source})")
    rng = seed if isinstance(seed, np.random.Generator) else _rng(seed)
    dy, dx = crop_offset(h, w, patch, rng)
    sl = (slice(dy, dy + patch), slice(dx, dx + patch))
    return (ImagePair(pair.degraded[sl], pair.clean[sl], pair.task, pair.source, pair.spec,
                      pair.aug_seed), (dy, dx))


def augment_flip(pair: ImagePair, seed) -> ImagePair:
    """Independent horizontal and vertical flips, each with probability 1/2."""
    rng = seed if isinstance(seed, np.random.Generator) else _rng(seed)
    hflip, vflip = rng.uniform(size=2) < 0.5
    d, c = pair.degraded, pair.clean
    if hflip:
        d, c = d[:, ::-1], c[:, ::-1]
    if vflip:
        d, c = d[::-1], c[::-1]
    return ImagePair(np.ascontiguousarray(d), np.ascontiguousarray(c), pair.task, pair.source,
                     pair.spec, pair.aug_seed)


def balance_duplicate(datasets: Sequence[Dataset], seed: int = 0) -> Dataset:
    """Concatenate sources after repeating the smaller ones up to the largest size.

    Whole copies first, the remainder by seeded sampling without replacement.
    Each duplicate gets its own ``aug_seed`` so augmentation decorrelates copies.
    """
    if not datasets:
        raise ValueError("balance_duplicate needs at least one dataset")
    target = max(len(d) for d in datasets)
    pairs: list[ImagePair] = []
    factors = {}
    for k, ds in enumerate(datasets):
        n = len(ds)
        if n == 0:
            raise ValueError(f"dataset {ds.name or k!r} is empty")
        reps, rem = divmod(target, n)
        chosen = [p for _ in range(reps) for p in ds.pairs]
        if rem:
            extra = _rng(seed, k, 13).choice(n, size=rem, replace=False)
            chosen += [ds.pairs[i] for i in sorted(extra)]
        for j, p in enumerate(chosen):
            copy_no = j // n if j < reps * n else reps
            aug = p.aug_seed if copy_no == 0 else int(_rng(seed, k, j, copy_no, 17).integers(1 << 62))
            pairs.append(ImagePair(p.degraded, p.clean, p.task, p.source, p.spec, aug))
        factors[ds.name or str(k)] = target / n
    return Dataset(pairs, datasets[0].split, "+".join(d.name for d in datasets), factors)


def split_validation(pairs: Sequence[ImagePair], fraction: float, seed: int
                     ) -> tuple[list[ImagePair], list[ImagePair]]:
    """Seeded disjoint ``(train, val)`` split; ``val`` holds ``round(fraction * n)`` pairs."""
    n = len(pairs)
    n_val = int(round(fraction * n))
    perm = _rng(seed, 19).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [p for i, p in enumerate(pairs) if i not in val_idx]
    val = [p for i, p in enumerate(pairs) if i in val_idx]
    return train, val


# PNG I/O -----------------------------------------------------------------------

def save_png(path: str | os.PathLike, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise ValueError(f"{path}: expected an 8-bit RGB PNG, got mode {im.mode}")
        return np.asarray(im, dtype=np.float32) / 255.0


def load_png_dir(path: str | os.PathLike, clean_suffix: str = "_clean",
                 degraded_suffix: str = "_degraded", task: str | None = None,
                 split: str = "train") -> Dataset:
    """Pair ``<id>{clean_suffix}.png`` with ``<id>{degraded_suffix}.png``.

    Unpaired files are skipped with a warning; differing sizes within a pair are
    an error.  ``task`` defaults to the directory's parent name when it is one
    of the known tasks.
    """
    root = Path(path)
    if task is None:
        task = next((p for p in (root.parent.name, root.name) if p in TASKS), "unknown")
    files = sorted(root.glob("*.png")) if root.is_dir() else []
    clean, degraded = {}, {}
    for f in files:
        stem = f.stem
        if stem.endswith(clean_suffix):
            clean[stem[: -len(clean_suffix)]] = f
        elif stem.endswith(degraded_suffix):
            degraded[stem[: -len(degraded_suffix)]] = f
        else:
            log.warning("skipping %s: name matches neither suffix", f.name)
    pairs = []
    for key in sorted(set(clean) | set(degraded)):
        if key not in clean or key not in degraded:
            log.warning("skipping unpaired image %s in %s", key, root)
            continue
        c, d = read_png(clean[key]), read_png(degraded[key])
        if c.shape != d.shape:
            raise ValueError(
                f"size mismatch: {clean[key].name} is {c.shape}, {degraded[key].name} is {d.shape}")
        pairs.append(ImagePair(d, c, task, key))
    return Dataset(pairs, split, root.name)


def stack(pairs: Iterable[ImagePair]) -> tuple[np.ndarray, np.ndarray]:
    pairs = list(pairs)
    return (np.stack([p.degraded for p in pairs]).astype(np.float32),
            np.stack([p.clean for p in pairs]).astype(np.float32))
