"""Datasets: synthetic class-clustered fixtures and IDX file ingestion."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import EmptyDataset, FormatError
from .nn import F32

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # [n, c, h, w] float32
    labels: np.ndarray  # [n] int64
    class_count: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=F32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels) or len(self.images) < 1:
            raise FormatError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise FormatError(
                f"labels outside [0, {self.class_count})"
            )

    def __len__(self) -> int:
        return len(self.images)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.class_count)

    def take(self, n: int, seed: int = 0, per_class_cap: int | None = None) -> "Dataset":
        """Deterministic class-stratified sample of at most n images."""
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self))
        picked, per_class = [], np.zeros(self.class_count, dtype=int)
        for i in order:
            c = self.labels[i]
            if per_class_cap is not None and per_class[c] >= per_class_cap:
                continue
            picked.append(i)
            per_class[c] += 1
            if len(picked) >= n:
                break
        return self.subset(np.sort(np.asarray(picked)))


@dataclass
class Split:
    train: Dataset
    test: Dataset


def split(ds: Dataset, test_fraction: float = 0.25, seed: int = 0) -> Split:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    n_test = max(1, int(round(test_fraction * len(ds))))
    return Split(train=ds.subset(np.sort(order[n_test:])),
                 test=ds.subset(np.sort(order[:n_test])))


@dataclass
class FixtureSpec:
    """Generator settings for the synthetic class-clustered image set."""

    class_count: int = 4
    images_per_class: int = 80
    image_size: tuple[int, int, int] = (1, 10, 10)
    separation: float = 1.6
    noise: float = 1.0
    seed: int = 0


def make_fixture_dataset(spec: FixtureSpec) -> Dataset:
    """Images = class prototype * separation + Gaussian noise.

    Prototypes are smoothed random fields so nearby pixels co-vary and a
    small CNN has spatial structure to exploit; generation is a pure
    function of the spec.
    """
    rng = np.random.default_rng(spec.seed)
    c, h, w = spec.image_size
    protos = rng.normal(size=(spec.class_count, c, h, w))
    # cheap 3x3 box smoothing to give prototypes spatial extent
    padded = np.pad(protos, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    protos = sum(
        padded[:, :, di:di + h, dj:dj + w] for di in range(3) for dj in range(3)
    ) / 9.0
    protos /= protos.std(axis=(1, 2, 3), keepdims=True)

    n = spec.class_count * spec.images_per_class
    labels = np.repeat(np.arange(spec.class_count), spec.images_per_class)
    noise = rng.normal(scale=spec.noise, size=(n, c, h, w))
    images = spec.separation * protos[labels] + noise
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], spec.class_count)


# ---------------------------------------------------------------------------
# IDX format (big-endian magic + dims + raw bytes)
# ---------------------------------------------------------------------------

def _read_idx(path, expected_magic: int, ndim: int) -> tuple[np.ndarray, tuple]:
    with open(path, "rb") as f:
        head = f.read(4 * (1 + ndim))
        if len(head) < 4 * (1 + ndim):
            raise FormatError(f"{path}: truncated IDX header")
        magic = struct.unpack(">i", head[:4])[0]
        if magic != expected_magic:
            raise FormatError(
                f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
            )
        dims = struct.unpack(f">{ndim}i", head[4:])
        count = int(np.prod(dims))
        body = f.read()
    if len(body) != count:
        raise FormatError(f"{path}: payload is {len(body)} bytes, header describes {count}")
    return np.frombuffer(body, dtype=np.uint8), dims


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair into a Dataset scaled to [0, 1]."""
    pixels, (n, h, w) = _read_idx(images_path, IDX_IMAGES_MAGIC, ndim=3)
    labels, (n_labels,) = _read_idx(labels_path, IDX_LABELS_MAGIC, ndim=1)
    if n == 0:
        raise EmptyDataset(f"{images_path}: zero images")
    if n != n_labels:
        raise FormatError(f"{n} images but {n_labels} labels")
    images = (pixels.reshape(n, 1, h, w).astype(F32) / 255.0)
    class_count = int(labels.max()) + 1
    return Dataset(images, labels.astype(np.int64), class_count)
