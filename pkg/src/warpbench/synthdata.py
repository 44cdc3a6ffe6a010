"""Deterministic synthetic handwritten-digit-style dataset.

For environments without the official digit files, this module renders a
learnable stand-in at the same scale and in the same IDX layout: 10 digit
classes drawn from every available system font, each sample perturbed by a
seeded affine jitter, a small elastic wiggle, stroke-intensity variation and
pixel noise.  Generation is a pure function of the seed (per-sample Philox
streams), so the files can be rebuilt bit-identically at any time.
"""

import glob
import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .errors import ParameterError
from .seeding import derive_seed, rng_from
from .warp import AffineParams, affine_warp, elastic_warp, generate_displacement_field

_FONT_DIRS = (
    "/usr/share/fonts",
    "/usr/local/share/fonts",
)

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


def _find_fonts() -> list:
    paths = []
    for root in _FONT_DIRS:
        paths.extend(glob.glob(os.path.join(root, "**", "*.ttf"), recursive=True))
    try:
        import matplotlib

        mpl_fonts = os.path.join(os.path.dirname(matplotlib.__file__), "mpl-data", "fonts", "ttf")
        paths.extend(glob.glob(os.path.join(mpl_fonts, "*.ttf")))
    except ImportError:
        pass
    usable = [p for p in sorted(set(paths)) if _renders_digits(p)]
    if not usable:
        raise ParameterError("no usable TrueType fonts found for synthetic digit rendering")
    return usable


def _renders_digits(font_path: str) -> bool:
    try:
        font = ImageFont.truetype(font_path, 24)
        left, top, right, bottom = font.getbbox("8")
        return right > left and bottom > top
    except OSError:
        return False


def _render_template(font_path: str, digit: int, size: int = 28) -> np.ndarray:
    """Digit glyph centered by center-of-mass in a size x size box."""
    font = ImageFont.truetype(font_path, 40)
    canvas = Image.new("L", (64, 64), 0)
    draw = ImageDraw.Draw(canvas)
    draw.text((32, 32), str(digit), fill=255, font=font, anchor="mm")
    arr = np.asarray(canvas, dtype=np.float64) / 255.0
    ys, xs = np.nonzero(arr > 0.05)
    if len(ys) == 0:
        raise ParameterError(f"font {font_path} rendered an empty glyph for {digit}")
    glyph = arr[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]
    # scale the longer side to 20 px, like classic digit preprocessing
    scale = 20.0 / max(glyph.shape)
    new_h = max(1, int(round(glyph.shape[0] * scale)))
    new_w = max(1, int(round(glyph.shape[1] * scale)))
    resized = np.asarray(
        Image.fromarray((glyph * 255).astype(np.uint8)).resize((new_w, new_h), Image.BILINEAR),
        dtype=np.float64,
    ) / 255.0
    out = np.zeros((size, size))
    total = resized.sum()
    gy, gx = np.mgrid[0 : new_h, 0 : new_w]
    cy = (gy * resized).sum() / total
    cx = (gx * resized).sum() / total
    top = int(round(size / 2 - cy))
    left = int(round(size / 2 - cx))
    top = min(max(top, 0), size - new_h)
    left = min(max(left, 0), size - new_w)
    out[top : top + new_h, left : left + new_w] = resized
    return out


def _sample_image(templates: np.ndarray, digit: int, sample_seed: int) -> np.ndarray:
    """One synthetic sample: random font template + seeded perturbations."""
    rng = rng_from(sample_seed, "sample")
    template = templates[digit][rng.integers(len(templates[digit]))]
    params = AffineParams(
        rotation=rng.uniform(-0.22, 0.22),
        shear_x=rng.uniform(-0.18, 0.18),
        shear_y=rng.uniform(-0.12, 0.12),
        translate_x=rng.uniform(-1.5, 1.5),
        translate_y=rng.uniform(-1.5, 1.5),
        scale=rng.uniform(0.82, 1.12),
    )
    img = affine_warp(template, params)
    field = generate_displacement_field(
        img.shape[0], img.shape[1], sigma=float(rng.uniform(3.0, 6.0)), seed=derive_seed(sample_seed, "wiggle")
    )
    img = elastic_warp(img, field, alpha=float(rng.uniform(0.5, 2.2)))
    img *= rng.uniform(0.75, 1.0)
    img += rng.normal(0.0, 0.035, img.shape)
    return np.clip(img, 0.0, 1.0)


def _write_idx_pair(images_u8: np.ndarray, labels_u8: np.ndarray, images_path, labels_path) -> None:
    n, h, w = images_u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels_u8.tobytes())


def generate_split(count: int, seed: int, templates: np.ndarray, class_count: int = 10):
    """Balanced labels (count must divide evenly), one perturbed sample each."""
    if count % class_count:
        raise ParameterError(f"count {count} not divisible by {class_count} classes")
    labels = np.tile(np.arange(class_count, dtype=np.uint8), count // class_count)
    images = np.empty((count, 28, 28), dtype=np.uint8)
    for i in range(count):
        img = _sample_image(templates, int(labels[i]), derive_seed(seed, i))
        images[i] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return images, labels


def write_synthetic_dataset(out_dir, train_count: int = 60000, test_count: int = 10000, seed: int = 2016) -> dict:
    """Write the four IDX files; returns their paths.  Skips work if present."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "train_images": out / TRAIN_IMAGES,
        "train_labels": out / TRAIN_LABELS,
        "test_images": out / TEST_IMAGES,
        "test_labels": out / TEST_LABELS,
    }
    if all(p.exists() for p in paths.values()):
        return {k: str(v) for k, v in paths.items()}

    fonts = _find_fonts()
    templates = [
        np.stack([_render_template(f, digit) for f in fonts]) for digit in range(10)
    ]
    train_images, train_labels = generate_split(train_count, derive_seed(seed, "train"), templates)
    _write_idx_pair(train_images, train_labels, paths["train_images"], paths["train_labels"])
    test_images, test_labels = generate_split(test_count, derive_seed(seed, "test"), templates)
    _write_idx_pair(test_images, test_labels, paths["test_images"], paths["test_labels"])
    return {k: str(v) for k, v in paths.items()}
