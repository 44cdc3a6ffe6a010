"""Data-space augmentation: elastic and affine label-preserving warps.

Elastic warping follows the smoothed-random-field recipe: each displacement
component starts as i.i.d. uniform noise in [-1, 1], is blurred with a
Gaussian of std-dev sigma, and the two components are jointly rescaled so the
RMS displacement magnitude is exactly 1.  The strength parameter alpha then
has units of pixels (it is the RMS displacement applied to the image).

All warps use backward sampling: the output pixel at position R is bilinearly
interpolated from the input at the mapped position, with out-of-bounds reads
returning background 0.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataset import LabeledImageSet
from .errors import DimensionError, InsufficientDataError, ParameterError
from .seeding import derive_seed, rng_from


@dataclass
class ElasticParams:
    """Displacement strength (pixels, RMS) and field smoothness."""

    alpha: float = 1.2
    sigma: float = 20.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ParameterError("alpha must be >= 0")
        if self.sigma <= 0:
            raise ParameterError("sigma must be > 0")


@dataclass
class AffineParams:
    """Affine warp about the image center; identity by default."""

    rotation: float = 0.0
    shear_x: float = 0.0
    shear_y: float = 0.0
    translate_x: float = 0.0
    translate_y: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ParameterError("scale must be > 0")


# Uniform sampling ranges for each AffineParams field, used when affine
# augmentation is enabled; conservative label-preserving defaults.
DEFAULT_AFFINE_RANGES = {
    "rotation": (-0.26, 0.26),
    "shear_x": (-0.15, 0.15),
    "shear_y": (-0.15, 0.15),
    "translate_x": (-2.0, 2.0),
    "translate_y": (-2.0, 2.0),
    "scale": (0.9, 1.1),
}


@dataclass
class DisplacementField:
    """Per-pixel displacement components, RMS magnitude normalized to 1."""

    ux: np.ndarray
    uy: np.ndarray
    sigma: float
    seed: int

    def rms_magnitude(self) -> float:
        return float(np.sqrt(np.mean(self.ux**2 + self.uy**2)))


def smooth_with_gaussian(grid: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at radius ceil(3*sigma),
    zero-padded edges."""
    radius = math.ceil(3.0 * sigma)
    return ndimage.gaussian_filter(grid, sigma=sigma, mode="constant", cval=0.0, radius=radius)


def generate_displacement_field(height: int, width: int, sigma: float, seed: int) -> DisplacementField:
    """Smoothed, unit-RMS random displacement field for an HxW image."""
    if height < 1 or width < 1:
        raise ParameterError("field dimensions must be >= 1")
    if sigma <= 0:
        raise ParameterError("sigma must be > 0")
    rng = rng_from(seed, "field")
    raw = rng.uniform(-1.0, 1.0, size=(2, height, width))
    ux = smooth_with_gaussian(raw[0], sigma)
    uy = smooth_with_gaussian(raw[1], sigma)
    rms = np.sqrt(np.mean(ux**2 + uy**2))
    if rms == 0.0:
        raise ParameterError("degenerate zero field; cannot normalize")
    return DisplacementField(ux=ux / rms, uy=uy / rms, sigma=sigma, seed=seed)


def _bilinear_sample(image: np.ndarray, sample_y: np.ndarray, sample_x: np.ndarray) -> np.ndarray:
    """Bilinear lookup at real-valued coordinates; out-of-bounds reads 0."""
    h, w = image.shape
    y0 = np.floor(sample_y)
    x0 = np.floor(sample_x)
    fy = sample_y - y0
    fx = sample_x - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)

    out = np.zeros(sample_y.shape, dtype=image.dtype)
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = image[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        out += wgt * np.where(inside, vals, 0.0)
    return out


def elastic_warp(image: np.ndarray, field: DisplacementField, alpha: float) -> np.ndarray:
    """Backward-warp ``image`` by ``alpha`` times the displacement field.

    Output pixel (y, x) samples the input at (y + alpha*uy, x + alpha*ux).
    """
    image = np.asarray(image, dtype=np.float64)
    if field.ux.shape != image.shape or field.uy.shape != image.shape:
        raise DimensionError(
            f"field shape {field.ux.shape} does not match image shape {image.shape}"
        )
    if alpha < 0:
        raise ParameterError("alpha must be >= 0")
    if alpha == 0.0:
        return image.copy()
    h, w = image.shape
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    warped = _bilinear_sample(image, gy + alpha * field.uy, gx + alpha * field.ux)
    return np.clip(warped, 0.0, 1.0)


def affine_warp(image: np.ndarray, params: AffineParams) -> np.ndarray:
    """Backward-warp by the inverse affine map about the image center.

    The forward map takes a point p (relative to center) to
    scale * R(rotation) @ Shear @ p + t, where Shear = [[1, shear_x],
    [shear_y, 1]] acts on (x, y).
    """
    image = np.asarray(image, dtype=np.float64)
    if params.scale <= 0:
        raise ParameterError("scale must be > 0")
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    cos_t, sin_t = math.cos(params.rotation), math.sin(params.rotation)
    rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])
    shear = np.array([[1.0, params.shear_x], [params.shear_y, 1.0]])
    fwd = params.scale * rot @ shear  # acts on (x, y) column vectors
    try:
        inv = np.linalg.inv(fwd)
    except np.linalg.LinAlgError as e:
        raise ParameterError(f"degenerate affine map (shear {params.shear_x}, {params.shear_y})") from e

    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    qx = gx - cx - params.translate_x
    qy = gy - cy - params.translate_y
    sx = inv[0, 0] * qx + inv[0, 1] * qy + cx
    sy = inv[1, 0] * qx + inv[1, 1] * qy + cy
    warped = _bilinear_sample(image, sy, sx)
    return np.clip(warped, 0.0, 1.0)


def sample_affine_params(ranges: dict, rng: np.random.Generator) -> AffineParams:
    """Draw AffineParams with each field uniform over its (lo, hi) range."""
    bad = set(ranges) - set(DEFAULT_AFFINE_RANGES)
    if bad:
        raise ParameterError(f"unknown affine range fields: {sorted(bad)}")
    kwargs = {}
    for name in ("rotation", "shear_x", "shear_y", "translate_x", "translate_y", "scale"):
        if name in ranges:
            lo, hi = ranges[name]
            kwargs[name] = float(rng.uniform(lo, hi))
    return AffineParams(**kwargs)


def warp_augment_dataset(
    dataset: LabeledImageSet,
    per_class_synthetic: int,
    elastic: ElasticParams,
    affine_ranges: dict | None = None,
    seed: int = 0,
) -> LabeledImageSet:
    """Generate warped synthetic samples, ``per_class_synthetic`` per class.

    Each class cycles over its real samples in order; every synthetic sample
    gets a fresh displacement field (and, if ``affine_ranges`` is given,
    fresh affine jitter) from a stream derived from (seed, class, index).
    Returns only the synthetic samples.
    """
    if per_class_synthetic < 0:
        raise ParameterError("per_class_synthetic must be >= 0")
    if len(dataset) == 0:
        raise InsufficientDataError("source set is empty")

    h, w = dataset.height, dataset.width
    images = []
    labels = []
    for cls in range(dataset.class_count):
        pool = dataset.class_indices(cls)
        if len(pool) == 0:
            if per_class_synthetic > 0:
                raise InsufficientDataError(f"class {cls} has no real samples to warp")
            continue
        for i in range(per_class_synthetic):
            src = dataset.images[pool[i % len(pool)]]
            field = generate_displacement_field(h, w, elastic.sigma, derive_seed(seed, cls, i))
            if affine_ranges is not None:
                params = sample_affine_params(affine_ranges, rng_from(seed, cls, i, "affine"))
                src = affine_warp(src, params)
            images.append(elastic_warp(src, field, elastic.alpha))
            labels.append(cls)

    if not images:
        return LabeledImageSet(
            images=np.empty((0, h, w)), labels=np.empty(0, dtype=np.int64),
            class_count=dataset.class_count,
        )
    return LabeledImageSet(
        images=np.stack(images), labels=np.array(labels), class_count=dataset.class_count
    )
