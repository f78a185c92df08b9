"""Datasets: CIFAR binary parsing, synthetic generation, stratified sampling, augmentation."""

from __future__ import annotations

import functools
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "ParseError",
    "SubsetError",
    "AugmentationPolicy",
    "parse_cifar_binary",
    "serialise_cifar_binary",
    "sample_subset",
    "split_indices",
    "split_subset",
    "augment",
    "normalise",
    "generate_synthetic",
    "save_dataset",
    "load_dataset",
    "resolve_dataset",
    "convert_svhn_mat",
]

PIXELS = 3 * 32 * 32
_NOISE_SCALE = 0.4  # pixel noise std at difficulty 1


class ParseError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SubsetError(ValueError):
    def __init__(self, message, label=None):
        super().__init__(message)
        self.label = label


def _to_real(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255)


def _to_bytes(images: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(images, dtype=np.float64) * 255).astype(np.uint8)


@dataclass(eq=False)
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int
    name: str = "dataset"
    _stats: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be (N, C, H, W) with one label each")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(int(v) for v in self.images.shape[1:])

    def take(self, indices, name=None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.class_count,
                       name or self.name)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean and standard deviation, computed once and cached."""
        if self._stats is None:
            x = self.images.astype(np.float64)
            mean = x.mean(axis=(0, 2, 3))
            std = x.std(axis=(0, 2, 3))
            self._stats = (mean, np.where(std > 0, std, 1.0))
        return self._stats

    def equals(self, other: "Dataset") -> bool:
        return (self.class_count == other.class_count
                and np.array_equal(self.labels, other.labels)
                and self.images.dtype == other.images.dtype
                and np.array_equal(self.images, other.images))


# --- CIFAR binary layout -------------------------------------------------------

def parse_cifar_binary(raw: bytes, class_count: int = 10, name: str = "cifar") -> Dataset:
    """Parse CIFAR-10 (label, 3072 px) or CIFAR-100 (coarse, fine, 3072 px) records.

    Pixels are planar R, G, B, row-major.  Only the fine label of CIFAR-100 is kept.
    """
    if class_count not in (10, 100):
        raise ValueError("class_count must be 10 or 100")
    nlab = 1 if class_count == 10 else 2
    rec = nlab + PIXELS
    whole = len(raw) // rec
    if len(raw) % rec:
        raise ParseError(f"truncated record: {len(raw) % rec} of {rec} bytes", whole * rec)
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(whole, rec)
    if nlab == 2:
        bad = np.flatnonzero(arr[:, 0] >= 20)
        if bad.size:
            raise ParseError(f"coarse label {arr[bad[0], 0]} out of range", int(bad[0]) * rec)
    labels = arr[:, nlab - 1]
    bad = np.flatnonzero(labels >= class_count)
    if bad.size:
        raise ParseError(f"label {labels[bad[0]]} out of range",
                         int(bad[0]) * rec + nlab - 1)
    images = _to_real(arr[:, nlab:].reshape(whole, 3, 32, 32))
    return Dataset(images, labels.astype(np.int64), class_count, name)


def serialise_cifar_binary(d: Dataset) -> bytes:
    if d.image_shape != (3, 32, 32):
        raise ValueError("CIFAR layout requires 3x32x32 images")
    if d.class_count > 100:
        raise ValueError("CIFAR layout holds at most 100 classes")
    pixels = _to_bytes(d.images).reshape(len(d), PIXELS)
    labels = d.labels.astype(np.uint8)[:, None]
    if d.class_count <= 10:
        return np.hstack([labels, pixels]).tobytes()
    coarse = np.zeros_like(labels)
    return np.hstack([coarse, labels, pixels]).tobytes()


# --- storage -------------------------------------------------------------------

def save_dataset(d: Dataset, path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, images=_to_bytes(d.images), labels=d.labels,
                 class_count=np.int64(d.class_count), name=np.str_(d.name))


def load_dataset(path, class_count: int | None = None) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file {path} not found")
    if path.suffix == ".npz":
        with np.load(path) as z:
            return Dataset(_to_real(z["images"]), z["labels"], int(z["class_count"]),
                           str(z["name"]))
    count = class_count or (100 if path.name.endswith(".cifar100.bin") else 10)
    return parse_cifar_binary(path.read_bytes(), count, path.stem)


def resolve_dataset(root, name: str) -> Dataset:
    """Find dataset ``name`` under ``root`` as ``.npz``, ``.bin`` or ``.cifar100.bin``."""
    for suffix in (".npz", ".bin", ".cifar100.bin"):
        candidate = Path(root) / f"{name}{suffix}"
        if candidate.exists():
            d = load_dataset(candidate)
            d.name = name
            return d
    raise FileNotFoundError(f"no dataset named {name!r} under {root}")


def convert_svhn_mat(src, dst) -> int:
    """Convert an SVHN ``.mat`` file into the CIFAR-10 binary layout; returns record count."""
    from scipy.io import loadmat

    mat = loadmat(src)
    x = mat["X"].transpose(3, 2, 0, 1)  # (32, 32, 3, N) -> (N, 3, 32, 32)
    y = mat["y"].reshape(-1).astype(np.int64) % 10  # digit 0 is stored as 10
    records = np.hstack([y.astype(np.uint8)[:, None], x.reshape(len(y), PIXELS)])
    with open(dst, "wb") as fh:
        fh.write(records.tobytes())
    return len(y)


# --- sampling ------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def sample_subset(d: Dataset, fraction: float, rng_seed: int) -> Dataset:
    """Stratified random subset: ``round(fraction * n_c)`` (at least 2) per class."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    rng = np.random.default_rng(rng_seed)
    chosen = []
    for label in range(d.class_count):
        members = np.flatnonzero(d.labels == label)
        if members.size == 0:
            continue
        want = max(2, _round_half_up(fraction * members.size))
        if want > members.size:
            raise SubsetError(f"class {label} has {members.size} examples, needs {want}", label)
        chosen.append(rng.permutation(members)[:want])
    indices = rng.permutation(np.concatenate(chosen)) if chosen else np.zeros(0, np.int64)
    return d.take(indices, name=d.name)


def split_indices(labels, fraction: float, rng_seed: int, class_count: int | None = None):
    """Stratified ``(train, test)`` index split; every class lands in both parts."""
    if not 0 < fraction < 1:
        raise ValueError("split fraction must be in (0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(rng_seed)
    train, test = [], []
    for label in range(class_count or (int(labels.max()) + 1 if labels.size else 0)):
        members = np.flatnonzero(labels == label)
        if members.size == 0:
            continue
        if members.size < 2:
            raise SubsetError(f"class {label} has fewer than 2 examples", label)
        members = rng.permutation(members)
        k = min(max(_round_half_up(fraction * members.size), 1), members.size - 1)
        train.append(members[:k])
        test.append(members[k:])
    train = np.sort(np.concatenate(train)) if train else np.zeros(0, np.int64)
    test = np.sort(np.concatenate(test)) if test else np.zeros(0, np.int64)
    return rng.permutation(train), rng.permutation(test)


def split_subset(subset: Dataset, fraction: float = 0.8, rng_seed: int = 0):
    tr, te = split_indices(subset.labels, fraction, rng_seed, subset.class_count)
    return subset.take(tr), subset.take(te)


# --- augmentation --------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationPolicy:
    pad_pixels: int = 4
    crop_size: int | None = None  # None keeps the input size
    horizontal_flip_probability: float = 0.5
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.pad_pixels < 0:
            raise ValueError("pad_pixels must be >= 0")
        if not 0 <= self.horizontal_flip_probability <= 1:
            raise ValueError("flip probability must be in [0, 1]")

    @classmethod
    def for_dataset(cls, d: Dataset, **kw) -> "AugmentationPolicy":
        mean, std = d.channel_stats()
        return cls(mean=tuple(float(v) for v in mean), std=tuple(float(v) for v in std), **kw)


def normalise(batch, policy: AugmentationPolicy):
    if policy.mean is None:
        return batch
    mean = np.asarray(policy.mean, dtype=batch.dtype)[None, :, None, None]
    std = np.asarray(policy.std, dtype=batch.dtype)[None, :, None, None]
    return (batch - mean) / std


def augment(batch, policy: AugmentationPolicy, rng: np.random.Generator | None = None,
            train: bool = True):
    """Zero-pad, random crop and random horizontal flip, then normalise.

    Outside training only the normalisation is applied.
    """
    if not train:
        return normalise(batch, policy)
    n, c, h, w = batch.shape
    size = policy.crop_size or h
    p = policy.pad_pixels
    offsets = rng.integers(0, h + 2 * p - size + 1, size=(n, 2))
    flips = rng.random(n) < policy.horizontal_flip_probability
    padded = np.pad(batch, ((0, 0), (0, 0), (p, p), (p, p))) if p else batch
    out = np.empty((n, c, size, size), dtype=batch.dtype)
    for i, (oy, ox) in enumerate(offsets):
        crop = padded[i, :, oy:oy + size, ox:ox + size]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return normalise(out, policy)


def hflip(batch):
    return batch[..., ::-1].copy()


# --- synthetic data ------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def _class_pattern(label: int, class_count: int, size: int, variant: int):
    theta = np.pi * ((label % 4) / 4 + (label // 12) / 16 + variant / 8)
    freq = 1 + (label // 4) % 3
    tint = np.roll(np.array([1.0, 0.7, 0.4]), label % 3)
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    u = (x * np.cos(theta) + y * np.sin(theta)) / size
    return 2 * np.pi * freq * u, tint


def generate_synthetic(class_count: int, per_class: int, image_size: int = 8,
                       difficulty: float = 1.0, rng_seed: int = 0, variant: int = 0,
                       name: str | None = None) -> Dataset:
    """Class-conditional oriented gratings with noise.

    Each class owns an orientation, spatial frequency and colour tint.
    ``difficulty`` scales phase jitter, brightness jitter and pixel noise and
    fades out a class-dependent mean level; at difficulty 0 every class is a
    fixed image up to +-0.01 noise, so the classes are linearly separable.
    ``variant`` rotates all patterns, giving a related but different domain.
    """
    rng = np.random.default_rng(rng_seed)
    d = float(difficulty)
    dc = min(d, 1.0)
    n = class_count * per_class
    images = np.empty((n, 3, image_size, image_size), dtype=np.float64)
    labels = np.repeat(np.arange(class_count), per_class)
    for i, label in enumerate(labels):
        phase_grid, tint = _class_pattern(int(label), class_count, image_size, variant)
        level = 0.5
        if class_count > 1:
            level += 0.3 * (label / (class_count - 1) - 0.5) * (1 - dc)
        phase = rng.uniform(-np.pi, np.pi) * dc
        bright = rng.uniform(-0.15, 0.15) * dc
        amp = 0.3 * (1 + rng.uniform(-0.3, 0.3) * dc)
        pattern = np.sin(phase_grid + phase)
        noise = rng.normal(0.0, _NOISE_SCALE * d, size=images.shape[1:]) if d > 0 else 0.0
        noise = noise + rng.uniform(-0.01, 0.01, size=images.shape[1:])
        images[i] = level + bright + amp * tint[:, None, None] * pattern[None] + noise
    order = rng.permutation(n)
    pixels = _to_bytes(np.clip(images[order], 0.0, 1.0))
    return Dataset(_to_real(pixels), labels[order], class_count,
                   name or f"synthetic-{class_count}x{per_class}")


def synth_pair(root, name: str, class_count: int = 10, per_class: int = 200,
               test_per_class: int = 50, image_size: int = 8, difficulty: float = 1.0,
               rng_seed: int = 0, variant: int = 0) -> tuple[Path, Path]:
    """Write ``<name>-train.npz`` and ``<name>-test.npz`` under ``root``."""
    os.makedirs(root, exist_ok=True)
    train = generate_synthetic(class_count, per_class, image_size, difficulty, rng_seed,
                               variant, f"{name}-train")
    test = generate_synthetic(class_count, test_per_class, image_size, difficulty,
                              rng_seed + 7919, variant, f"{name}-test")
    paths = Path(root) / f"{name}-train.npz", Path(root) / f"{name}-test.npz"
    save_dataset(train, paths[0])
    save_dataset(test, paths[1])
    return paths
