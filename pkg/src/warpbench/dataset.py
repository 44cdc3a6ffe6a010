"""Image dataset loading, balanced subsets and the on-disk cache format.

Raw data lives in the published IDX binary layout (big-endian headers, one
unsigned byte per pixel/label).  Pixels are held internally as reals in
[0, 1]; the cache format stores the original bytes so a write/read roundtrip
is bit-stable once values have been quantized to the byte grid.
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConsistencyError,
    FormatError,
    InsufficientDataError,
    IoError,
    TruncationError,
)
from .seeding import rng_from

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CACHE_MAGIC = b"WBIMGSET"
CACHE_VERSION = 1


@dataclass
class LabeledImageSet:
    """Grayscale images with class labels.

    images: (N, H, W) float array, values in [0, 1].
    labels: (N,) integer class ids in [0, class_count).
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise ConsistencyError(f"images must be (N, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConsistencyError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConsistencyError("labels outside [0, class_count)")
        if len(self.images) and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ConsistencyError("pixel values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def class_indices(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cls)


@dataclass
class ClassBalanceSpec:
    """How many samples to draw per class, and with which seed."""

    per_class_count: int
    seed: int = 0

    def __post_init__(self):
        if self.per_class_count < 0:
            raise ValueError("per_class_count must be >= 0")


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncationError(f"{what}: expected {n} bytes, file ended after {len(data)}")
    return data


def load_idx(images_path, labels_path, class_count: int | None = None) -> LabeledImageSet:
    """Parse an IDX image/label file pair into a LabeledImageSet.

    Pixels are scaled from [0, 255] bytes to [0, 1] reals by division by 255.
    When ``class_count`` is omitted it is inferred as max(label) + 1.
    """
    try:
        f_img = open(images_path, "rb")
    except OSError as e:
        raise IoError(f"cannot open image file {images_path}: {e}") from e
    with f_img:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f_img, 16, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"{images_path}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        pixels = _read_exact(f_img, count * rows * cols, "image payload")

    try:
        f_lab = open(labels_path, "rb")
    except OSError as e:
        raise IoError(f"cannot open label file {labels_path}: {e}") from e
    with f_lab:
        magic, lab_count = struct.unpack(">II", _read_exact(f_lab, 8, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"{labels_path}: bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        labels = _read_exact(f_lab, lab_count, "label payload")

    if count != lab_count:
        raise ConsistencyError(f"{count} images but {lab_count} labels")

    images = np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows, cols)
    label_arr = np.frombuffer(labels, dtype=np.uint8)
    if class_count is None:
        class_count = int(label_arr.max()) + 1 if count else 0
    return LabeledImageSet(
        images=images.astype(np.float64) / 255.0,
        labels=label_arr,
        class_count=class_count,
    )


def balanced_subset(dataset: LabeledImageSet, spec: ClassBalanceSpec) -> LabeledImageSet:
    """Draw exactly ``per_class_count`` samples of every class without replacement.

    Selection is seeded and deterministic; output order is sorted by class,
    then by source index.
    """
    chosen = []
    for cls in range(dataset.class_count):
        pool = dataset.class_indices(cls)
        if len(pool) < spec.per_class_count:
            raise InsufficientDataError(
                f"class {cls} has {len(pool)} samples, need {spec.per_class_count}"
            )
        rng = rng_from(spec.seed, "subset", cls)
        picked = pool[rng.permutation(len(pool))[: spec.per_class_count]]
        chosen.append(np.sort(picked))
    idx = np.concatenate(chosen) if chosen else np.empty(0, dtype=np.int64)
    return LabeledImageSet(
        images=dataset.images[idx],
        labels=dataset.labels[idx],
        class_count=dataset.class_count,
    )


def concat_sets(a: LabeledImageSet, b: LabeledImageSet) -> LabeledImageSet:
    """Concatenate two sets with identical geometry and class count."""
    if a.class_count != b.class_count or (len(a) and len(b) and a.images.shape[1:] != b.images.shape[1:]):
        raise ConsistencyError("sets differ in geometry or class count")
    return LabeledImageSet(
        images=np.concatenate([a.images, b.images]),
        labels=np.concatenate([a.labels, b.labels]),
        class_count=a.class_count,
    )


def quantize_pixels(images: np.ndarray) -> np.ndarray:
    """Round [0, 1] reals onto the byte grid used by the cache format."""
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def save_dataset_cache(dataset: LabeledImageSet, path) -> None:
    """Write a set in the cache format (pixels quantized to bytes)."""
    n, h, w = len(dataset), dataset.height if len(dataset) else 0, dataset.width if len(dataset) else 0
    header = struct.pack(">IIII", n, h, w, dataset.class_count)
    label_bytes = dataset.labels.astype(np.uint8).tobytes()
    image_bytes = quantize_pixels(dataset.images).tobytes()
    payload = header + label_bytes + image_bytes
    try:
        with open(path, "wb") as f:
            f.write(CACHE_MAGIC)
            f.write(struct.pack(">I", CACHE_VERSION))
            f.write(payload)
            f.write(struct.pack(">I", zlib.crc32(payload)))
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def load_dataset_cache(path) -> LabeledImageSet:
    """Read a set written by :func:`save_dataset_cache`."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if len(data) < 16 or data[:8] != CACHE_MAGIC:
        raise FormatError(f"{path}: not a dataset cache file")
    (version,) = struct.unpack(">I", data[8:12])
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: cache version {version}, expected {CACHE_VERSION}")
    if len(data) < 32:
        raise TruncationError(f"{path}: header truncated")
    payload, checksum = data[12:-4], struct.unpack(">I", data[-4:])[0]
    if zlib.crc32(payload) != checksum:
        raise FormatError(f"{path}: checksum mismatch")
    n, h, w, class_count = struct.unpack(">IIII", payload[:16])
    need = 16 + n + n * h * w
    if len(payload) != need:
        raise TruncationError(f"{path}: payload is {len(payload)} bytes, expected {need}")
    labels = np.frombuffer(payload[16 : 16 + n], dtype=np.uint8)
    images = np.frombuffer(payload[16 + n :], dtype=np.uint8).reshape(n, h, w)
    return LabeledImageSet(
        images=images.astype(np.float64) / 255.0,
        labels=labels,
        class_count=class_count,
    )


def cache_roundtrip(dataset: LabeledImageSet, path) -> LabeledImageSet:
    """Write then read back a set; identity on the quantized representation."""
    save_dataset_cache(dataset, path)
    return load_dataset_cache(path)
