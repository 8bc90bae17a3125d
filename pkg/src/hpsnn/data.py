"""Dataset ingestion, spike encodings, corruption generators and task
samplers for the classification, robustness, few-shot and continual
protocols.

Everything here is a pure function of (inputs, seed); identical seeds
reproduce byte-identical outputs.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError

__all__ = [
    "ImageSet",
    "FeatureSet",
    "TaskEpisode",
    "PermutationTask",
    "load_idx",
    "load_mnist",
    "load_omniglot",
    "bernoulli_encode",
    "sequential_rows",
    "crop_center",
    "salt_pepper",
    "make_permutation_tasks",
    "apply_permutation",
    "sample_episode",
    "sparse_gp_mask",
    "synthetic_fewshot",
]

_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


@dataclass
class ImageSet:
    """Grayscale images in [0, 1] with integer class labels."""

    images: np.ndarray  # [N, H, W]
    labels: np.ndarray  # [N]
    name: str = ""
    split: str = ""

    def __post_init__(self):
        if self.images.ndim != 3:
            raise DimensionError("images must be [N, H, W]")
        if self.labels.shape[0] != self.images.shape[0]:
            raise DimensionError("labels and images differ in count")

    def __len__(self):
        return self.images.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, idx) -> "ImageSet":
        return ImageSet(self.images[idx], self.labels[idx], self.name, self.split)


@dataclass
class FeatureSet:
    """Plain feature vectors with labels (the few-shot stand-in)."""

    features: np.ndarray  # [N, D]
    labels: np.ndarray    # [N]
    name: str = ""

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1


@dataclass
class TaskEpisode:
    """An N-way S-shot episode with disjoint support and query items.

    Labels are episode-local one-hot rows; items are raw images or feature
    vectors (encoding is the harness's job).
    """

    support: list
    query: list
    way: int
    shot: int
    coding: str = "rate"


@dataclass
class PermutationTask:
    """A fixed pixel shuffle shared by every image of one task."""

    perm: np.ndarray
    task_id: int
    seed: int

    def __post_init__(self):
        p = np.sort(self.perm)
        if not np.array_equal(p, np.arange(self.perm.size)):
            raise DataError("perm is not a bijection")


def _read_exact(f, n, path):
    buf = f.read(n)
    if len(buf) != n:
        raise DataError(f"truncated IDX payload in {path}")
    return buf


def load_idx(path):
    """Parse one IDX container (raw or gzipped) bit-exactly.

    Image files (magic 0x00000803) return float64 [N, H, W] scaled to [0, 1]
    by /255; label files (magic 0x00000801) return int64 [N].
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, "rb") as probe:
        gzipped = probe.read(2) == b"\x1f\x8b"
    opener = gzip.open if gzipped else open
    with opener(path, "rb") as f:
        head = _read_exact(f, 4, path)
        magic = struct.unpack(">I", head)[0]
        if magic == _IDX_IMAGES:
            n, h, w = struct.unpack(">III", _read_exact(f, 12, path))
            raw = _read_exact(f, n * h * w, path)
            if f.read(1):
                raise DataError(f"trailing bytes after IDX payload in {path}")
            pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w)
            return pixels.astype(np.float64) / 255.0
        if magic == _IDX_LABELS:
            (n,) = struct.unpack(">I", _read_exact(f, 4, path))
            raw = _read_exact(f, n, path)
            if f.read(1):
                raise DataError(f"trailing bytes after IDX payload in {path}")
            return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
        raise DataError(f"bad IDX magic 0x{magic:08x} in {path}")


def load_mnist(directory, split: str = "train") -> ImageSet:
    """Load one MNIST split from the canonical IDX file pair."""
    directory = Path(directory)
    stem = "train" if split == "train" else "t10k"
    img_path = lbl_path = None
    for suffix in ("", ".gz"):
        p = directory / f"{stem}-images-idx3-ubyte{suffix}"
        q = directory / f"{stem}-labels-idx1-ubyte{suffix}"
        if p.exists() and q.exists():
            img_path, lbl_path = p, q
            break
    if img_path is None:
        raise DataError(f"MNIST {split} files not found under {directory}")
    images = load_idx(img_path)
    labels = load_idx(lbl_path)
    if images.ndim != 3:
        raise DataError(f"{img_path} is not an image container")
    if labels.ndim != 1:
        raise DataError(f"{lbl_path} is not a label container")
    return ImageSet(images=images, labels=labels, name="mnist", split=split)


def load_omniglot(root) -> ImageSet:
    """Ingest an Omniglot-style directory tree: one folder per class of PNGs.

    Images are inverted to ink-on-black in [0, 1] and resized to 28x28.
    """
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise DataError(f"no such directory: {root}")
    class_dirs = sorted(p for p in root.rglob("*") if p.is_dir()
                        and any(q.suffix == ".png" for q in p.iterdir()))
    if not class_dirs:
        raise DataError(f"no class folders with PNGs under {root}")
    images, labels = [], []
    for ci, cdir in enumerate(class_dirs):
        for png in sorted(cdir.glob("*.png")):
            img = Image.open(png).convert("L").resize((28, 28), Image.BILINEAR)
            arr = 1.0 - np.asarray(img, dtype=np.float64) / 255.0
            images.append(arr)
            labels.append(ci)
    return ImageSet(images=np.stack(images), labels=np.asarray(labels, dtype=np.int64),
                    name="omniglot", split="all")


def bernoulli_encode(image, T: int, seed) -> np.ndarray:
    """Per-step independent Bernoulli spikes with pixel-value probability.

    Shape preserving: pixels of any shape come back as [T, *shape] float64
    spikes, independent across steps and deterministic per seed. Callers
    flatten spatial dims themselves when feeding a dense layer.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise DataError("pixels must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    draws = rng.random((T,) + image.shape)
    return (draws < image).astype(np.float64)


def sequential_rows(image) -> np.ndarray:
    """Row-by-row analog presentation: step m delivers row m; T = 28."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-2:] != (28, 28):
        raise DimensionError(f"expected 28x28 image(s), got {image.shape}")
    if image.ndim == 2:
        return image.copy()
    # [..., 28, 28] -> [28, ..., 28] with rows as the leading step axis
    return np.moveaxis(image, -2, 0).copy()


def crop_center(image, ci: int) -> np.ndarray:
    """Zero a centered square of side 2*ci (cropping intensity 0..14)."""
    if not 0 <= ci <= 14:
        raise DataError(f"cropping intensity must be in 0..14, got {ci}")
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-2:] != (28, 28):
        raise DimensionError(f"expected 28x28 image(s), got {image.shape}")
    out = image.copy()
    if ci == 0:
        return out
    lo, hi = 14 - ci, 14 + ci
    out[..., lo:hi, lo:hi] = 0.0
    return out


def salt_pepper(image, nl: int, seed) -> np.ndarray:
    """Scatter salt-and-pepper noise over a fraction 0.02*nl of the pixels.

    The selected pixels (a uniform subset of round(0.02*nl*P) positions) are
    set to 0 or 1 with equal probability; deterministic per seed.
    """
    if not 0 <= nl <= 14:
        raise DataError(f"noise level must be in 0..14, got {nl}")
    image = np.asarray(image, dtype=np.float64)
    out = image.copy()
    if nl == 0:
        return out
    rng = np.random.default_rng(seed)
    h, w = image.shape[-2:]
    count = int(round(0.02 * nl * h * w))
    lead = image.shape[:-2]
    flat = out.reshape(lead + (h * w,))
    for idx in np.ndindex(lead) if lead else [()]:
        chosen = rng.choice(h * w, size=count, replace=False)
        values = (rng.random(count) < 0.5).astype(np.float64)
        flat[idx + (chosen,)] = values
    return flat.reshape(image.shape)


def make_permutation_tasks(n_tasks: int, seed) -> list[PermutationTask]:
    """Task 0 is the identity (clean baseline); the rest are uniform shuffles."""
    rng = np.random.default_rng(seed)
    tasks = [PermutationTask(perm=np.arange(784), task_id=0, seed=seed)]
    for t in range(1, n_tasks):
        tasks.append(PermutationTask(perm=rng.permutation(784), task_id=t,
                                     seed=seed))
    return tasks


def apply_permutation(images, task: PermutationTask) -> np.ndarray:
    """Shuffle the flattened pixels of [..., 28, 28] images by task.perm."""
    images = np.asarray(images, dtype=np.float64)
    lead = images.shape[:-2]
    flat = images.reshape(lead + (784,))
    return flat[..., task.perm].reshape(images.shape)


def _items_of(data):
    if isinstance(data, ImageSet):
        return data.images
    if isinstance(data, FeatureSet):
        return data.features
    raise TypeError(f"cannot sample episodes from {type(data).__name__}")


def sample_episode(data, way: int, shot: int, query: int, seed,
                   coding: str = "rate") -> TaskEpisode:
    """Draw an N-way S-shot episode with disjoint support/query items.

    Episode-local one-hot labels follow the order in which classes were
    sampled, so class-to-output assignments are random across episodes.
    """
    items = _items_of(data)
    labels = data.labels
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    if way > classes.size:
        raise DataError(f"asked for {way} ways, dataset has {classes.size} classes")
    chosen = rng.choice(classes, size=way, replace=False)
    support, query_items = [], []
    for slot, cls in enumerate(chosen):
        pool = np.flatnonzero(labels == cls)
        if pool.size < shot + query:
            raise DataError(
                f"class {cls} has {pool.size} items, need {shot + query}")
        picks = rng.choice(pool, size=shot + query, replace=False)
        onehot = np.zeros(way)
        onehot[slot] = 1.0
        for i in picks[:shot]:
            support.append((items[i], onehot.copy()))
        for i in picks[shot:]:
            query_items.append((items[i], onehot.copy()))
    order = rng.permutation(len(query_items))
    query_items = [query_items[i] for i in order]
    return TaskEpisode(support=support, query=query_items, way=way, shot=shot,
                       coding=coding)


def sparse_gp_mask(shape, density: float, seed) -> np.ndarray:
    """Independent Bernoulli(density) boolean mask; tasks may overlap."""
    if not 0.0 <= density <= 1.0:
        raise DataError(f"density must be in [0, 1], got {density}")
    rng = np.random.default_rng(seed)
    return rng.random(shape) < density


def synthetic_fewshot(n_classes: int, dim: int, spread: float, seed,
                      samples_per_class: int = 20) -> FeatureSet:
    """Well-separated synthetic classes: unit-sphere means plus isotropic noise.

    Means are rejection-sampled until every pairwise distance exceeds
    4*spread, so a nearest-class-mean reading is reliable by construction.
    """
    rng = np.random.default_rng(seed)
    means = []
    attempts = 0
    while len(means) < n_classes:
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if all(np.linalg.norm(v - m) > 4.0 * spread for m in means):
            means.append(v)
        attempts += 1
        if attempts > 1000 * n_classes:
            raise DataError("cannot separate that many classes at this spread")
    feats, labels = [], []
    for k, mean in enumerate(means):
        pts = mean + spread * rng.normal(size=(samples_per_class, dim))
        feats.append(pts)
        labels += [k] * samples_per_class
    return FeatureSet(features=np.concatenate(feats),
                      labels=np.asarray(labels, dtype=np.int64),
                      name="synthetic")
