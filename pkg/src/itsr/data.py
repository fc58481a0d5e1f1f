"""Dataset ingestion, contaminated training sets, and test splits.

Images are flat float64 pixel vectors in [0, 1]. Class labels ride along
as a side channel for evaluation and reporting; nothing in the training
path consumes them.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised when an IDX file does not match the documented layout."""


@dataclass(frozen=True)
class ImageDataset:
    """Pixel matrix plus side-channel class labels."""

    images: np.ndarray        # (count, pixels) float64 in [0, 1]
    labels: np.ndarray        # (count,) integer class ids
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.images.ndim != 2:
            raise ValueError("images must be a 2-D matrix")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("need exactly one label per image row")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "ImageDataset":
        idx = np.asarray(indices)
        return ImageDataset(self.images[idx], self.labels[idx], self.class_names)


@dataclass(frozen=True)
class ContaminationSpec:
    """How to assemble a training set that is mostly one class."""

    normal_class: int
    anomaly_class: int
    alpha: float            # anomalous fraction of the final training set
    n_normal: int

    def __post_init__(self):
        if self.normal_class == self.anomaly_class:
            raise ValueError("normal and anomaly class must differ")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.n_normal < 1:
            raise ValueError("n_normal must be positive")

    @property
    def n_anomaly(self) -> int:
        # alpha is the fraction of the *final* set: a / (n + a) = alpha.
        return int(round(self.alpha * self.n_normal / (1.0 - self.alpha)))


@dataclass(frozen=True)
class TestSplit:
    """Observed-anomaly and unobserved-anomaly evaluation sets."""

    observed: ImageDataset
    unobserved: ImageDataset | None
    normal_class: int
    anomaly_class: int


def is_anomaly(dataset: ImageDataset, normal_class: int) -> np.ndarray:
    """Binary evaluation labels: everything not of the normal class is positive."""
    return dataset.labels != normal_class


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exactly(fh, n: int, path, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"{path}: truncated while reading {what} "
                             f"(wanted {n} bytes, got {len(buf)})")
    return buf


def read_idx(images_path, labels_path) -> ImageDataset:
    """Parse a big-endian IDX image/label file pair (gzipped or raw).

    Pixels are scaled by 1/255 into [0, 1] and flattened row-major into
    rows*cols vectors.
    """
    with _open_maybe_gzip(images_path) as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exactly(fh, 16, images_path, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(f"{images_path}: bad image magic 0x{magic:08x}, "
                                 f"expected 0x{IDX_IMAGE_MAGIC:08x}")
        payload = _read_exactly(fh, count * rows * cols, images_path, "pixel payload")
        if fh.read(1):
            raise IdxFormatError(f"{images_path}: trailing bytes after pixel payload")
    with _open_maybe_gzip(labels_path) as fh:
        magic, label_count = struct.unpack(">II", _read_exactly(fh, 8, labels_path, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(f"{labels_path}: bad label magic 0x{magic:08x}, "
                                 f"expected 0x{IDX_LABEL_MAGIC:08x}")
        label_payload = _read_exactly(fh, label_count, labels_path, "label payload")
        if fh.read(1):
            raise IdxFormatError(f"{labels_path}: trailing bytes after label payload")
    if label_count != count:
        raise IdxFormatError(f"image count {count} and label count {label_count} disagree "
                             f"({images_path} vs {labels_path})")
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    images = pixels.reshape(count, rows * cols)
    labels = np.frombuffer(label_payload, dtype=np.uint8).astype(np.int64)
    return ImageDataset(images, labels)


def write_idx(dataset: ImageDataset, images_path, labels_path, rows: int, cols: int) -> None:
    """Write a dataset back to the IDX pair layout (testing and fixtures)."""
    count = len(dataset)
    if rows * cols != dataset.images.shape[1]:
        raise ValueError("rows*cols must equal the pixel count per image")
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, count, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, count))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def build_contaminated_train(dataset: ImageDataset, spec: ContaminationSpec,
                             rng: np.random.Generator):
    """Draw a shuffled training set of n_normal normals plus the anomalous rest.

    Returns the training dataset (labels keep their original class ids)
    and the hidden boolean anomaly mask, which must only ever be used for
    evaluation and reporting.
    """
    normal_pool = np.flatnonzero(dataset.labels == spec.normal_class)
    anomaly_pool = np.flatnonzero(dataset.labels == spec.anomaly_class)
    n_anomaly = spec.n_anomaly
    if normal_pool.size < spec.n_normal:
        raise ValueError(f"class {spec.normal_class} has only {normal_pool.size} samples, "
                         f"need {spec.n_normal}")
    if anomaly_pool.size < n_anomaly:
        raise ValueError(f"class {spec.anomaly_class} has only {anomaly_pool.size} samples, "
                         f"need {n_anomaly}")
    chosen_normal = rng.choice(normal_pool, size=spec.n_normal, replace=False)
    chosen_anomaly = rng.choice(anomaly_pool, size=n_anomaly, replace=False)
    order = rng.permutation(spec.n_normal + n_anomaly)
    indices = np.concatenate([chosen_normal, chosen_anomaly])[order]
    train = dataset.subset(indices)
    return train, train.labels == spec.anomaly_class


def build_test_splits(test_dataset: ImageDataset, normal_class: int,
                      anomaly_class: int) -> TestSplit:
    """Split test data into observed-anomaly and unobserved-anomaly sets.

    observed = all normals + the anomaly class seen in training;
    unobserved = all normals + every other class. When only the two
    training classes exist, the unobserved set is None.
    """
    labels = test_dataset.labels
    present = set(np.unique(labels).tolist())
    for cls in (normal_class, anomaly_class):
        if cls not in present:
            raise ValueError(f"test data is missing class {cls}")
    normal_idx = np.flatnonzero(labels == normal_class)
    observed_idx = np.flatnonzero((labels == normal_class) | (labels == anomaly_class))
    observed = test_dataset.subset(observed_idx)
    other = present - {normal_class, anomaly_class}
    if other:
        unobserved_idx = np.flatnonzero(labels != anomaly_class)
        unobserved = test_dataset.subset(unobserved_idx)
    else:
        unobserved = None
    assert normal_idx.size > 0
    return TestSplit(observed, unobserved, normal_class, anomaly_class)


def _blob_image(side: int, center_r: float, center_c: float, radius: float,
                amplitude: float) -> np.ndarray:
    r = np.arange(side)[:, None]
    c = np.arange(side)[None, :]
    return amplitude * np.exp(-((r - center_r) ** 2 + (c - center_c) ** 2) / (2.0 * radius ** 2))


def synth_blobs(n_normal: int, n_anomaly: int, separation: float, image_side: int,
                rng: np.random.Generator, noise: float = 0.05,
                anomaly_radius_scale: float = 1.0, jitter: float = 0.08) -> ImageDataset:
    """Two procedural image classes: a centered blob and an offset corner blob.

    separation in [0, 1] moves the anomalous blob from the center toward
    the image corner; anomaly_radius_scale widens or narrows it, so
    anomalies can differ in position, in shape, or both. Per-sample
    center jitter (a fraction of the image side) and pixel noise keep
    the classes from being point masses; pixels are clipped to [0, 1].
    """
    if image_side < 2:
        raise ValueError("image_side must be at least 2")
    mid = (image_side - 1) / 2.0
    corner = image_side / 4.0
    radius = max(image_side / 6.0, 1.0)
    images = np.empty((n_normal + n_anomaly, image_side * image_side))
    labels = np.concatenate([np.zeros(n_normal, dtype=np.int64),
                             np.ones(n_anomaly, dtype=np.int64)])
    anom_r = mid + separation * (corner - mid)
    anom_c = mid + separation * (corner - mid)
    for i in range(n_normal + n_anomaly):
        if labels[i] == 0:
            cr, cc, rad = mid, mid, radius
        else:
            cr, cc, rad = anom_r, anom_c, radius * anomaly_radius_scale
        offset = rng.uniform(-jitter * image_side, jitter * image_side, size=2)
        img = _blob_image(image_side, cr + offset[0], cc + offset[1], rad, 0.9)
        img += rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0).ravel()
    return ImageDataset(images, labels, class_names=("blob_center", "blob_corner"))
