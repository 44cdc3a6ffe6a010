"""Fixed convolutional feature stage: filter bank, LP-pooling, standardizer.

The feature transform is frozen by construction: a bank of L kernels (W x W)
is applied with valid-mode stride-1 cross-correlation, each map is LP-pooled,
and the pooled maps are flattened filter-major into one feature vector.
Pooling output is window-size normalized, (sum |x|^p / q^2)^(1/p), so the
scale of features does not depend on the pool size; p = inf selects exact
max-pooling.

Default bank kernels are seeded standard-normal draws made zero-mean and
unit-norm; a pre-trained bank can be supplied through the bank file format
instead.
"""

import hashlib
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .dataset import LabeledImageSet
from .errors import DimensionError, FormatError, IoError, ParameterError, TruncationError
from .seeding import rng_from

BANK_MAGIC = b"WBFILTBK"
BANK_VERSION = 1
FEATURESET_MAGIC = b"WBFEATST"
FEATURESET_VERSION = 1


@dataclass
class FilterBank:
    """L convolution kernels of size W x W."""

    filters: np.ndarray  # (L, W, W) float64
    source_tag: str = ""

    def __post_init__(self):
        self.filters = np.asarray(self.filters, dtype=np.float64)
        if self.filters.ndim != 3 or self.filters.shape[1] != self.filters.shape[2]:
            raise ParameterError(f"filters must be (L, W, W), got {self.filters.shape}")

    @property
    def kernel_size(self) -> int:
        return self.filters.shape[1]

    @property
    def filter_count(self) -> int:
        return self.filters.shape[0]


@dataclass
class PoolingConfig:
    """LP-pooling window, stride and exponent (p >= 1; p = inf is max)."""

    q: int = 8
    stride: int = 2
    p: float = 2.0

    def __post_init__(self):
        if self.q < 1:
            raise ParameterError("pool size q must be >= 1")
        if not (1 <= self.stride <= self.q):
            raise ParameterError("stride must satisfy 1 <= stride <= q")
        if self.p < 1:
            raise ParameterError("pooling exponent p must be >= 1")


@dataclass
class FeatureSet:
    """N x D feature matrix with labels."""

    vectors: np.ndarray  # (N, D) float32
    labels: np.ndarray  # (N,) int
    class_count: int
    standardized: bool = False

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2:
            raise ParameterError(f"vectors must be (N, D), got {self.vectors.shape}")
        if len(self.vectors) != len(self.labels):
            raise ParameterError("vector/label count mismatch")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def class_indices(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cls)


# Row-block size for streaming float64 math over float32 matrices; keeps
# peak temporaries small at the 50k x 6144 scale.
_CHUNK_ROWS = 4096


@dataclass
class Standardizer:
    """Per-feature shift/scale fit on training data only."""

    means: np.ndarray
    scales: np.ndarray

    def apply(self, features: FeatureSet) -> FeatureSet:
        if features.dim != len(self.means):
            raise DimensionError(f"standardizer is {len(self.means)}-dim, features are {features.dim}-dim")
        out = np.empty_like(features.vectors, dtype=np.float32)
        for lo in range(0, len(features), _CHUNK_ROWS):
            block = features.vectors[lo : lo + _CHUNK_ROWS].astype(np.float64)
            out[lo : lo + _CHUNK_ROWS] = (block - self.means) / self.scales
        return FeatureSet(
            vectors=out,
            labels=features.labels,
            class_count=features.class_count,
            standardized=True,
        )


def default_filter_bank(kernel_size: int, filter_count: int, seed: int) -> FilterBank:
    """Seeded random bank; each kernel is zero-mean with unit Frobenius norm."""
    if kernel_size < 2:
        raise ParameterError("kernel_size must be >= 2 (zero-mean unit-norm kernels need > 1 tap)")
    if filter_count < 1:
        raise ParameterError("filter_count must be >= 1")
    rng = rng_from(seed, "filter-bank")
    kernels = rng.standard_normal((filter_count, kernel_size, kernel_size))
    kernels -= kernels.mean(axis=(1, 2), keepdims=True)
    norms = np.sqrt((kernels**2).sum(axis=(1, 2), keepdims=True))
    if np.any(norms == 0):
        raise ParameterError("degenerate zero kernel drawn; choose a different seed")
    kernels /= norms
    return FilterBank(filters=kernels, source_tag=f"seeded:{seed}")


def save_filter_bank(bank: FilterBank, path) -> None:
    """Write a bank in the documented file format (float32 little-endian)."""
    payload = struct.pack(">II", bank.kernel_size, bank.filter_count)
    payload += bank.filters.astype("<f4").tobytes()
    try:
        with open(path, "wb") as f:
            f.write(BANK_MAGIC)
            f.write(struct.pack(">I", BANK_VERSION))
            f.write(payload)
            f.write(struct.pack(">I", zlib.crc32(payload)))
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def load_filter_bank(path) -> FilterBank:
    """Read a bank file; source_tag is the sha256 of the file contents."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if len(data) < 12 or data[:8] != BANK_MAGIC:
        raise FormatError(f"{path}: not a filter bank file")
    (version,) = struct.unpack(">I", data[8:12])
    if version != BANK_VERSION:
        raise FormatError(f"{path}: bank version {version}, expected {BANK_VERSION}")
    if len(data) < 24:
        raise TruncationError(f"{path}: header truncated")
    payload, checksum = data[12:-4], struct.unpack(">I", data[-4:])[0]
    if zlib.crc32(payload) != checksum:
        raise FormatError(f"{path}: checksum mismatch")
    w, l = struct.unpack(">II", payload[:8])
    body = payload[8:]
    if len(body) != l * w * w * 4:
        raise TruncationError(
            f"{path}: declares {l} kernels of {w}x{w} but holds {len(body) // (w * w * 4) if w else 0}"
        )
    kernels = np.frombuffer(body, dtype="<f4").reshape(l, w, w).astype(np.float64)
    return FilterBank(filters=kernels, source_tag=f"sha256:{hashlib.sha256(data).hexdigest()}")


def convolve_valid(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode 2-D cross-correlation, stride 1."""
    image = np.asarray(image, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    h, w = image.shape
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kernel.shape} larger than image {image.shape}")
    windows = np.lib.stride_tricks.sliding_window_view(image, (kh, kw))
    return np.einsum("xyuv,uv->xy", windows, kernel)


def lp_pool(feature_map: np.ndarray, config: PoolingConfig) -> np.ndarray:
    """Window-normalized LP-pooling of one 2-D map."""
    feature_map = np.asarray(feature_map, dtype=np.float64)
    h, w = feature_map.shape
    if config.q > h or config.q > w:
        raise DimensionError(f"pool size {config.q} exceeds map dims {feature_map.shape}")
    windows = np.lib.stride_tricks.sliding_window_view(feature_map, (config.q, config.q))
    windows = windows[:: config.stride, :: config.stride]
    return _pool_windows(windows, config)


def _pool_windows(windows: np.ndarray, config: PoolingConfig) -> np.ndarray:
    """Reduce trailing (q, q) window axes by the normalized p-norm."""
    mag = np.abs(windows)
    if np.isinf(config.p):
        return mag.max(axis=(-1, -2))
    if config.p == 1.0:
        return mag.mean(axis=(-1, -2))
    if config.p == 2.0:
        return np.sqrt((mag * mag).mean(axis=(-1, -2)))
    return np.power(np.power(mag, config.p).mean(axis=(-1, -2)), 1.0 / config.p)


def _pool_maps_fast(maps: np.ndarray, config: PoolingConfig) -> np.ndarray:
    """LP-pool a stack of maps (L, mh, mw) using integral images.

    Same result as :func:`lp_pool` per map (up to ~1e-15 relative rounding);
    window sums cost O(map) instead of O(map * q^2).  p = inf falls back to
    windowed max.
    """
    if np.isinf(config.p):
        windows = np.lib.stride_tricks.sliding_window_view(maps, (config.q, config.q), axis=(1, 2))
        return _pool_windows(windows[:, :: config.stride, :: config.stride], config)
    mag = np.abs(maps)
    if config.p == 1.0:
        powered = mag
    elif config.p == 2.0:
        powered = mag * mag
    else:
        powered = np.power(mag, config.p)
    l, mh, mw = maps.shape
    s = np.zeros((l, mh + 1, mw + 1), dtype=np.float64)
    np.cumsum(np.cumsum(powered, axis=1), axis=2, out=s[:, 1:, 1:])
    q, st = config.q, config.stride
    rows = np.arange(pooled_grid_size(mh, config)) * st
    cols = np.arange(pooled_grid_size(mw, config)) * st
    win = (
        s[:, rows + q][:, :, cols + q]
        - s[:, rows][:, :, cols + q]
        - s[:, rows + q][:, :, cols]
        + s[:, rows][:, :, cols]
    )
    mean = win / (q * q)
    if config.p == 1.0:
        return mean
    if config.p == 2.0:
        return np.sqrt(mean)
    return np.power(mean, 1.0 / config.p)


def pooled_grid_size(map_size: int, config: PoolingConfig) -> int:
    return (map_size - config.q) // config.stride + 1


def feature_dim(image_h: int, image_w: int, bank: FilterBank, pool: PoolingConfig) -> int:
    """Output dimension D for the given geometry."""
    mh = image_h - bank.kernel_size + 1
    mw = image_w - bank.kernel_size + 1
    return bank.filter_count * pooled_grid_size(mh, pool) * pooled_grid_size(mw, pool)


def _image_features(image: np.ndarray, flat_kernels: np.ndarray, kh: int, pool: PoolingConfig) -> np.ndarray:
    """Stage-1 vector for one image: conv all filters, pool, flatten filter-major."""
    h, w = image.shape
    windows = np.lib.stride_tricks.sliding_window_view(image, (kh, kh))
    mh, mw = windows.shape[:2]
    # One GEMM per image keeps results independent of batch composition.
    maps = windows.reshape(mh * mw, kh * kh) @ flat_kernels
    maps = np.ascontiguousarray(maps.T.reshape(-1, mh, mw))
    return _pool_maps_fast(maps, pool).reshape(-1)


def extract_features(dataset: LabeledImageSet, bank: FilterBank, pool: PoolingConfig) -> FeatureSet:
    """Apply the fixed Stage-1 transform to every image in the set."""
    kh = bank.kernel_size
    if len(dataset) and (kh > dataset.height or kh > dataset.width):
        raise DimensionError(f"kernel {kh}x{kh} larger than images {dataset.height}x{dataset.width}")
    d = feature_dim(dataset.height, dataset.width, bank, pool) if len(dataset) else 0
    flat_kernels = bank.filters.reshape(bank.filter_count, kh * kh).T.copy()
    vectors = np.empty((len(dataset), d), dtype=np.float32)
    for i in range(len(dataset)):
        vectors[i] = _image_features(dataset.images[i], flat_kernels, kh, pool)
    return FeatureSet(
        vectors=vectors, labels=dataset.labels.copy(), class_count=dataset.class_count
    )


def standardize(train: FeatureSet, *others: FeatureSet, eps: float = 1e-8):
    """Fit per-feature mean/scale on ``train`` and apply to all given sets.

    scale = max(std-dev, eps), so constant features pass through as zeros
    rather than dividing by 0.  Returns (Standardizer, [train', others'...]).
    """
    if len(train) == 0:
        raise ParameterError("cannot standardize with an empty training set")
    n = len(train)
    total = np.zeros(train.dim, dtype=np.float64)
    for lo in range(0, n, _CHUNK_ROWS):
        total += train.vectors[lo : lo + _CHUNK_ROWS].sum(axis=0, dtype=np.float64)
    means = total / n
    sq = np.zeros(train.dim, dtype=np.float64)
    for lo in range(0, n, _CHUNK_ROWS):
        diff = train.vectors[lo : lo + _CHUNK_ROWS].astype(np.float64) - means
        sq += (diff * diff).sum(axis=0)
    scales = np.maximum(np.sqrt(sq / n), eps)
    standardizer = Standardizer(means=means, scales=scales)
    return standardizer, [standardizer.apply(s) for s in (train, *others)]


def save_featureset_cache(features: FeatureSet, path) -> None:
    """Write a FeatureSet in the cache format (float32 little-endian)."""
    if features.class_count > 255:
        raise ParameterError("featureset cache stores labels as bytes (<= 255 classes)")
    n, d = features.vectors.shape
    payload = struct.pack(">IIII", n, d, features.class_count, 1 if features.standardized else 0)
    payload += features.labels.astype(np.uint8).tobytes()
    payload += features.vectors.astype("<f4").tobytes()
    try:
        with open(path, "wb") as f:
            f.write(FEATURESET_MAGIC)
            f.write(struct.pack(">I", FEATURESET_VERSION))
            f.write(payload)
            f.write(struct.pack(">I", zlib.crc32(payload)))
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def load_featureset_cache(path) -> FeatureSet:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if len(data) < 12 or data[:8] != FEATURESET_MAGIC:
        raise FormatError(f"{path}: not a feature cache file")
    (version,) = struct.unpack(">I", data[8:12])
    if version != FEATURESET_VERSION:
        raise FormatError(f"{path}: cache version {version}, expected {FEATURESET_VERSION}")
    if len(data) < 32:
        raise TruncationError(f"{path}: header truncated")
    payload, checksum = data[12:-4], struct.unpack(">I", data[-4:])[0]
    if zlib.crc32(payload) != checksum:
        raise FormatError(f"{path}: checksum mismatch")
    n, d, class_count, standardized = struct.unpack(">IIII", payload[:16])
    need = 16 + n + n * d * 4
    if len(payload) != need:
        raise TruncationError(f"{path}: payload is {len(payload)} bytes, expected {need}")
    labels = np.frombuffer(payload[16 : 16 + n], dtype=np.uint8)
    vectors = np.frombuffer(payload[16 + n :], dtype="<f4").reshape(n, d)
    return FeatureSet(
        vectors=vectors, labels=labels, class_count=class_count, standardized=bool(standardized)
    )
