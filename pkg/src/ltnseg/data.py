"""Synthetic two-lobe phantoms, dataset files and cross-validation splits.

Each phantom holds two elongated lobes lying side by side along a shared
straight boundary: class 1 (anterior) and class 2 (posterior), background 0.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

DATA_MAGIC = b"SLSGDATA"
DATA_VERSION = 1


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


@dataclass
class LabeledVolume:
    image: np.ndarray
    labels: np.ndarray
    sample_id: int = 0

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.image.shape != self.labels.shape:
            raise ValueError(f"image {self.image.shape} and labels {self.labels.shape} differ in shape")
        if self.labels.size and self.labels.max() > 2:
            raise ValueError("labels must lie in {0, 1, 2}")


@dataclass
class PhantomConfig:
    size: tuple = (32, 32)
    long_axis: tuple = (6.0, 9.0)
    short_axis: tuple = (1.6, 2.2)
    centroid_jitter: float = 3.0
    ratio_band: tuple = (0.8, 1.25)
    # lobes must differ by at most this fraction of the grid in voxel count
    volume_tolerance_fraction: float = 0.019
    adjacent: bool = True
    noise_std: float = 0.1
    borderline_nesting: bool = True
    borderline_rate: float = 0.05
    intensities: tuple = (0.1, 0.85, 0.55)
    max_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        lo, hi = self.ratio_band
        if not lo <= 1.0 <= hi:
            raise ValueError("ratio band must contain 1")
        reach = self.centroid_jitter + max(self.long_axis[1], 2 * self.short_axis[1])
        if reach + 1 >= min(self.size) / 2:
            raise ValueError(f"lobes of this size do not fit in a {self.size} grid")


def _lobes(cfg, rng):
    h, w = cfg.size
    cy = (h - 1) / 2 + rng.uniform(-cfg.centroid_jitter, cfg.centroid_jitter)
    cx = (w - 1) / 2 + rng.uniform(-cfg.centroid_jitter, cfg.centroid_jitter)
    theta = rng.uniform(0.0, math.pi)
    u = np.array([math.sin(theta), math.cos(theta)])  # long axis, (row, col)
    nrm = np.array([u[1], -u[0]])
    a1, a2 = rng.uniform(*cfg.long_axis, size=2)
    b1, b2 = rng.uniform(*cfg.short_axis, size=2)
    yy, xx = np.mgrid[0:h, 0:w]
    rel = np.stack([yy - cy, xx - cx], axis=-1)
    along = rel @ u
    across = rel @ nrm
    # each ellipse pokes slightly past the boundary line, then is cut by it
    e1 = (along / a1) ** 2 + ((across + 0.9 * b1) / b1) ** 2 <= 1.0
    e2 = (along / a2) ** 2 + ((across - 0.9 * b2) / b2) ** 2 <= 1.0
    labels = np.zeros((h, w), dtype=np.uint8)
    labels[e1 & (across < 0)] = 1
    labels[e2 & (across >= 0)] = 2
    return labels


def _touching(labels):
    a, b = labels == 1, labels == 2
    return bool((a[1:] & b[:-1]).any() or (a[:-1] & b[1:]).any()
                or (a[:, 1:] & b[:, :-1]).any() or (a[:, :-1] & b[:, 1:]).any())


def _exhaustively_nested(labels):
    from ltnseg.constraints import nested_hard

    q = int(math.ceil(math.hypot(*labels.shape))) + 1
    a, b = labels == 1, labels == 2
    return nested_hard(a, b, None, q) or nested_hard(b, a, None, q)


def _acceptable(labels, cfg, check_nesting):
    n1 = int(np.count_nonzero(labels == 1))
    n2 = int(np.count_nonzero(labels == 2))
    if n1 < 2 or n2 < 2:
        return False
    # keep a one-voxel margin from the grid border
    if labels[0].any() or labels[-1].any() or labels[:, 0].any() or labels[:, -1].any():
        return False
    lo, hi = cfg.ratio_band
    if not lo <= n1 / n2 <= hi:
        return False
    if abs(n1 - n2) > cfg.volume_tolerance_fraction * labels.size:
        return False
    if cfg.adjacent and not _touching(labels):
        return False
    if check_nesting and _exhaustively_nested(labels):
        return False
    return True


def render_image(labels, cfg, rng):
    levels = np.asarray(cfg.intensities, dtype=np.float64)
    clean = uniform_filter(levels[labels], size=3, mode="nearest")
    noisy = clean + rng.normal(0.0, cfg.noise_std, size=labels.shape)
    return np.clip(noisy, 0.0, 1.0)


def generate_sample(config=None, seed=0, sample_id=0):
    cfg = config or PhantomConfig()
    rng = np.random.default_rng([int(seed), int(sample_id)])
    keep_borderline = cfg.borderline_nesting and rng.uniform() < cfg.borderline_rate
    for _ in range(cfg.max_retries):
        labels = _lobes(cfg, rng)
        if _acceptable(labels, cfg, check_nesting=not keep_borderline):
            return LabeledVolume(render_image(labels, cfg, rng), labels, sample_id)
    raise GenerationError(f"could not place two lobes after {cfg.max_retries} attempts (seed={seed})")


def generate_dataset(n, config=None, seed=0):
    return [generate_sample(config, seed, i) for i in range(n)]


# -- persistence ------------------------------------------------------------

def write_dataset(samples, path):
    buf = bytearray(DATA_MAGIC)
    buf += struct.pack("<IQ", DATA_VERSION, len(samples))
    for s in samples:
        shape = s.image.shape
        buf += struct.pack("<QB", s.sample_id, len(shape))
        buf += struct.pack(f"<{len(shape)}I", *shape)
        buf += s.image.astype("<f8").tobytes()
        buf += s.labels.astype(np.uint8).tobytes()
    Path(path).write_bytes(bytes(buf))


def read_dataset(path):
    raw = Path(path).read_bytes()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise DatasetFormatError(f"truncated {what}: expected {n} bytes, found {len(raw) - off}", off)
        chunk = raw[off:off + n]
        off += n
        return chunk

    if raw[:8] != DATA_MAGIC:
        raise DatasetFormatError("bad magic", 0)
    off = 8
    version, count = struct.unpack("<IQ", take(12, "header"))
    if version != DATA_VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 8)
    samples = []
    for _ in range(count):
        sid, rank = struct.unpack("<QB", take(9, "sample header"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims))
        image = np.frombuffer(take(8 * n, "image payload"), dtype="<f8").reshape(dims)
        labels = np.frombuffer(take(n, "label payload"), dtype=np.uint8).reshape(dims)
        samples.append(LabeledVolume(image.astype(np.float64), labels.copy(), sid))
    if off != len(raw):
        raise DatasetFormatError(f"{len(raw) - off} trailing bytes", off)
    return samples


def stack_samples(samples, ids=None):
    chosen = samples if ids is None else [samples[i] for i in ids]
    return (np.stack([s.image for s in chosen]), np.stack([s.labels for s in chosen]).astype(np.int64),
            np.array([s.sample_id for s in chosen]))


# -- splits -----------------------------------------------------------------

@dataclass
class SplitPlan:
    k: int
    folds: list = field(default_factory=list)
    seed: int = 0

    def val_ids(self, fold):
        return np.sort(self.folds[fold])

    def train_ids(self, fold):
        return np.sort(np.concatenate([f for i, f in enumerate(self.folds) if i != fold]))


def kfold_split(n, k=5, seed=0):
    if k < 2 or n < k:
        raise ValueError(f"need n >= k >= 2, got n={n}, k={k}")
    perm = np.random.default_rng(seed).permutation(n)
    return SplitPlan(k, [np.sort(f) for f in np.array_split(perm, k)], seed)


def subsample_fraction(train_ids, fraction, seed=0):
    """Shuffled-prefix subset, so smaller fractions nest inside larger ones."""
    ids = np.sort(np.asarray(train_ids))
    if ids.size == 0:
        raise ValueError("empty training set")
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return ids
    keep = max(1, int(math.floor(fraction * ids.size + 0.5)))
    return np.sort(np.random.default_rng(seed).permutation(ids)[:keep])
