"""Few-shot datasets: synthetic generation, the FSB1 file format, episode sampling.

Random streams use numpy's PCG64 bit generator seeded through ``SeedSequence``;
its state is a plain dict, so it can be stored in checkpoints.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, SamplingError

SPLITS = {"train": 0, "val": 1, "test": 2}
SPLIT_NAMES = {v: k for k, v in SPLITS.items()}
MAGIC = b"FSB1"
_HEADER = struct.Struct("<4s5I")


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """A PCG64 generator for ``(seed, *stream)``; distinct streams never overlap."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *stream])))


@dataclass(eq=False)
class DatasetStore:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] global class index
    splits: np.ndarray  # [num_classes] split code per class

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        self.splits = np.ascontiguousarray(self.splits, dtype=np.uint32)
        self._by_class: dict[int, np.ndarray] = {}
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],):
            raise DataFormatError(
                f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and self.labels.max() >= self.num_classes:
            raise DataFormatError("label out of range", code="E_LABEL")
        if self.splits.size and self.splits.max() > 2:
            raise DataFormatError("unknown split code", code="E_SPLIT")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataFormatError("pixel values outside [0, 1]", code="E_PIXEL")

    @property
    def num_classes(self) -> int:
        return int(self.splits.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.images.shape[1:])

    def classes(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == SPLITS[split])

    def indices_of(self, cls: int) -> np.ndarray:
        if cls not in self._by_class:
            self._by_class[cls] = np.flatnonzero(self.labels == cls)
        return self._by_class[cls]

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetStore):
            return NotImplemented
        return (self.images.shape == other.images.shape
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.splits, other.splits))

    def summary(self) -> str:
        n, c, h, w = self.images.shape
        counts = ", ".join(f"{name}={len(self.classes(name))}" for name in SPLITS)
        return f"{n} images of {c}x{h}x{w}, {self.num_classes} classes ({counts})"


@dataclass(frozen=True)
class SamplerConfig:
    way: int = 5
    shot: int = 1
    query: int = 15
    split: str = "train"

    def __post_init__(self):
        if self.way < 2 or self.shot < 1 or self.query < 1:
            raise ConfigError(f"need way>=2, shot>=1, query>=1; got {self.way}/{self.shot}/{self.query}")
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")


@dataclass
class Episode:
    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    way: int
    shot: int
    query: int
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def replace(self, support_images=None, query_images=None) -> Episode:
        return Episode(
            self.support_images if support_images is None else support_images,
            self.support_labels,
            self.query_images if query_images is None else query_images,
            self.query_labels, self.way, self.shot, self.query, self.classes)


def _class_template(rng: np.random.Generator, h: int, w: int, channels: int,
                    components: int = 4) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    out = np.empty((channels, h, w))
    for c in range(channels):
        acc = np.zeros((h, w))
        for _ in range(components):
            fy, fx = rng.integers(0, 4, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.5, 1.0)
            acc += amp * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
        acc -= acc.min()
        peak = acc.max()
        out[c] = 0.15 + 0.7 * (acc / peak if peak > 0 else acc)
    return out


def generate_synthetic(num_classes: int = 20, images_per_class: int = 40, height: int = 16,
                       width: int = 16, channels: int = 1, noise_std: float = 0.15,
                       seed: int = 0, test_fraction: float = 0.25,
                       val_fraction: float = 0.0) -> DatasetStore:
    """Build a dataset of noisy copies of per-class low-frequency cosine patterns.

    Class ``k``'s template is a sum of a few random 2-D cosines rescaled into
    ``[0.15, 0.85]``; each image adds Gaussian noise and clips to ``[0, 1]``.
    The trailing ``test_fraction`` of class indices form the test split, the
    ``val_fraction`` before them the validation split.
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if images_per_class < 2 or min(height, width, channels) < 1 or noise_std < 0:
        raise ConfigError("degenerate dataset geometry")
    n_test = int(round(num_classes * test_fraction))
    n_val = int(round(num_classes * val_fraction))
    if n_test < 1 or n_test + n_val >= num_classes:
        raise ConfigError(f"split fractions leave no train or test classes ({n_test} test, {n_val} val)")
    rng = make_rng(seed, 0)
    images = np.empty((num_classes * images_per_class, channels, height, width), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), images_per_class)
    for k in range(num_classes):
        template = _class_template(rng, height, width, channels)
        noise = rng.normal(0.0, noise_std, size=(images_per_class, channels, height, width)) \
            if noise_std > 0 else np.zeros((images_per_class, channels, height, width))
        block = np.clip(template[None] + noise, 0.0, 1.0)
        images[k * images_per_class:(k + 1) * images_per_class] = block
    splits = np.zeros(num_classes, dtype=np.uint32)
    splits[num_classes - n_test:] = SPLITS["test"]
    splits[num_classes - n_test - n_val:num_classes - n_test] = SPLITS["val"]
    return DatasetStore(images, labels, splits)


def save_fsb(store: DatasetStore, path) -> None:
    n, c, h, w = store.images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, c, h, w, store.num_classes))
        fh.write(store.images.astype("<f4", copy=False).tobytes())
        fh.write(store.labels.astype("<u4", copy=False).tobytes())
        fh.write(store.splits.astype("<u4", copy=False).tobytes())


def load_fsb(path) -> DatasetStore:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise DataFormatError(f"{path}: bad magic", code="E_MAGIC")
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header", code="E_TRUNCATED")
    _, n, c, h, w, k = _HEADER.unpack_from(raw)
    npix = n * c * h * w
    expected = _HEADER.size + 4 * (npix + n + k)
    if len(raw) < expected:
        raise DataFormatError(f"{path}: truncated payload ({len(raw)} < {expected} bytes)",
                              code="E_TRUNCATED")
    if len(raw) > expected:
        raise DataFormatError(f"{path}: {len(raw) - expected} trailing bytes", code="E_TRAILING")
    off = _HEADER.size
    images = np.frombuffer(raw, "<f4", npix, off).reshape(n, c, h, w)
    off += 4 * npix
    labels = np.frombuffer(raw, "<u4", n, off)
    off += 4 * n
    splits = np.frombuffer(raw, "<u4", k, off)
    return DatasetStore(images.astype(np.float32), labels.astype(np.uint32),
                        splits.astype(np.uint32))


def sample_episode(store: DatasetStore, cfg: SamplerConfig, rng: np.random.Generator) -> Episode:
    """Draw one ``way``-way ``shot``-shot episode from ``cfg.split``.

    Classes are chosen uniformly without replacement; within each class the
    ``shot + query`` images are a uniform draw without replacement, the first
    ``shot`` becoming support. Episode-local label ``j`` names the ``j``-th
    drawn class.
    """
    pool = store.classes(cfg.split)
    if len(pool) < cfg.way:
        raise SamplingError(f"split {cfg.split!r} has {len(pool)} classes, need way={cfg.way}")
    need = cfg.shot + cfg.query
    chosen = rng.choice(pool, size=cfg.way, replace=False)
    support, query = [], []
    for cls in chosen:
        idx = store.indices_of(int(cls))
        if len(idx) < need:
            raise SamplingError(f"class {cls} has {len(idx)} images, need shot+query={need}")
        picks = rng.choice(idx, size=need, replace=False)
        support.append(picks[:cfg.shot])
        query.append(picks[cfg.shot:])
    support_idx = np.concatenate(support)
    query_idx = np.concatenate(query)
    local = np.arange(cfg.way, dtype=np.int64)
    return Episode(
        support_images=store.images[support_idx],
        support_labels=np.repeat(local, cfg.shot),
        query_images=store.images[query_idx],
        query_labels=np.repeat(local, cfg.query),
        way=cfg.way, shot=cfg.shot, query=cfg.query,
        classes=chosen.astype(np.int64),
    )


def sample_batch(store: DatasetStore, cfg: SamplerConfig, n: int,
                 rng: np.random.Generator) -> list[Episode]:
    return [sample_episode(store, cfg, rng) for _ in range(n)]
