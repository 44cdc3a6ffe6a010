"""Learning-curve sweeps: build data per recipe, train, evaluate, report.

A sweep runs one classifier over a grid of (samples-per-class, repeat) cells.
Baseline cells draw seeded balanced subsets of real data; augmented cells
start from one fixed real pool (500/class by default, selected by the master
seed so it is shared across sweeps) and top up with synthetic samples.
Warped image sets are materialized through the dataset cache so reruns hit
identical quantized pixels ("offline" generation); SMOTE/DBSMOTE vectors are
produced in memory at training time ("online" generation).

Every cell derives its seed as hash(master_seed, point, repeat); results come
back in grid order regardless of the thread count, so a sweep's CSV is a pure
function of (config, master_seed).
"""

import dataclasses
import hashlib
import logging
import os
import struct
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (
    ClassBalanceSpec,
    LabeledImageSet,
    balanced_subset,
    concat_sets,
    load_dataset_cache,
    load_idx,
    quantize_pixels,
    save_dataset_cache,
)
from .errors import InsufficientDataError, IoError, ParameterError
from .features import (
    FeatureSet,
    FilterBank,
    PoolingConfig,
    default_filter_bank,
    extract_features,
    load_featureset_cache,
    load_filter_bank,
    save_featureset_cache,
    standardize,
)
from .models import (
    ElmConfig,
    MlpConfig,
    SvmConfig,
    error_percent,
    predict,
    train_elm,
    train_mlp,
    train_svm,
)
from .oversample import DbsmoteParams, SmoteParams, oversample_to_count
from .seeding import derive_seed
from .warp import ElasticParams, warp_augment_dataset

log = logging.getLogger("warpbench")

RECIPE_KINDS = ("baseline", "elastic", "smote", "dbsmote")
CLASSIFIER_KINDS = ("mlp", "svm", "elm")

CSV_HEADER = "classifier,recipe,n_per_class,repeat,seed,train_error_pct,test_error_pct,wall_time_s"


@dataclass
class FeatureStageConfig:
    """Stage-1 settings; the bank is fixed across all experiments."""

    bank_path: str | None = None
    bank_seed: int = 0
    kernel_size: int = 7
    filter_count: int = 96
    pool: PoolingConfig = field(default_factory=PoolingConfig)

    def load_bank(self) -> FilterBank:
        if self.bank_path:
            return load_filter_bank(self.bank_path)
        return default_filter_bank(self.kernel_size, self.filter_count, self.bank_seed)


@dataclass
class DataRecipe:
    """How each cell's training data is assembled."""

    kind: str = "baseline"
    pool_per_class: int = 500  # real pool size for augmented recipes
    elastic: ElasticParams = field(default_factory=ElasticParams)
    smote: SmoteParams = field(default_factory=SmoteParams)
    dbsmote: DbsmoteParams = field(default_factory=DbsmoteParams)
    affine_ranges: dict | None = None  # optional extra jitter for elastic

    def __post_init__(self):
        if self.kind not in RECIPE_KINDS:
            raise ParameterError(f"unknown recipe kind {self.kind!r}")

    def describe(self) -> str:
        if self.kind == "baseline":
            return "baseline"
        if self.kind == "elastic":
            return f"elastic(alpha={self.elastic.alpha:g};sigma={self.elastic.sigma:g};pool={self.pool_per_class})"
        if self.kind == "smote":
            return f"smote(k={self.smote.k};pool={self.pool_per_class})"
        return f"dbsmote(k={self.dbsmote.k};eps={self.dbsmote.eps:g};pool={self.pool_per_class})"


@dataclass
class ExperimentConfig:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    classifier: str = "elm"
    recipe: DataRecipe = field(default_factory=DataRecipe)
    sweep_points: tuple = (500, 1000, 2500, 5000)
    repeats: int = 3
    master_seed: int = 0
    features: FeatureStageConfig = field(default_factory=FeatureStageConfig)
    mlp: MlpConfig = field(default_factory=lambda: MlpConfig(epochs=200))
    svm: SvmConfig = field(default_factory=SvmConfig)
    elm: ElmConfig = field(default_factory=ElmConfig)
    out_dir: str = "results"
    threads: int = 1

    def __post_init__(self):
        if self.classifier not in CLASSIFIER_KINDS:
            raise ParameterError(f"unknown classifier {self.classifier!r}")
        if self.repeats < 1:
            raise ParameterError("repeats must be >= 1")
        points = tuple(int(p) for p in self.sweep_points)
        if not points or any(b <= a for a, b in zip(points, points[1:])):
            raise ParameterError("sweep_points must be nonempty and strictly increasing")
        self.sweep_points = points
        if self.threads < 1:
            raise ParameterError("threads must be >= 1")


@dataclass
class ExperimentResult:
    classifier: str
    recipe: str
    n_per_class: int
    repeat: int
    seed: int
    train_error_percent: float
    test_error_percent: float
    wall_time_seconds: float

    def __post_init__(self):
        for e in (self.train_error_percent, self.test_error_percent):
            if not (0.0 <= e <= 100.0):
                raise ParameterError(f"error % out of range: {e}")


class FeatureCache:
    """Content-addressed feature extraction with optional disk persistence."""

    def __init__(self, bank: FilterBank, pool: PoolingConfig, cache_dir: str | None):
        self.bank = bank
        self.pool = pool
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def key(self, dataset: LabeledImageSet) -> str:
        h = hashlib.sha256()
        h.update(self.bank.source_tag.encode())
        h.update(repr((self.bank.kernel_size, self.bank.filter_count)).encode())
        h.update(self.bank.filters.astype("<f8").tobytes())
        h.update(repr((self.pool.q, self.pool.stride, self.pool.p)).encode())
        h.update(struct.pack(">III", len(dataset), dataset.height if len(dataset) else 0, dataset.class_count))
        h.update(dataset.labels.astype("<i8").tobytes())
        h.update(quantize_pixels(dataset.images).tobytes())
        return h.hexdigest()[:32]

    def features_for(self, dataset: LabeledImageSet) -> FeatureSet:
        if self.cache_dir is None:
            return extract_features(dataset, self.bank, self.pool)
        path = self.cache_dir / f"features_{self.key(dataset)}.bin"
        if path.exists():
            return load_featureset_cache(path)
        features = extract_features(dataset, self.bank, self.pool)
        _atomic_write(path, lambda tmp: save_featureset_cache(features, tmp))
        return features


def _atomic_write(path: Path, writer) -> None:
    """Write via temp file + rename so concurrent identical writes are benign."""
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _roundtrip_quantized(dataset: LabeledImageSet) -> LabeledImageSet:
    """Snap pixel values onto the cache byte grid without touching disk."""
    return LabeledImageSet(
        images=quantize_pixels(dataset.images).astype(np.float64) / 255.0,
        labels=dataset.labels.copy(),
        class_count=dataset.class_count,
    )


def _warped_set(
    pool_set: LabeledImageSet,
    per_class_synthetic: int,
    recipe: DataRecipe,
    seed: int,
    cache_dir: Path | None,
) -> LabeledImageSet:
    """Offline-generated warped samples, persisted in the dataset cache format."""
    if cache_dir is not None:
        name = (
            f"warp_a{recipe.elastic.alpha:g}_s{recipe.elastic.sigma:g}"
            f"_seed{seed}_n{per_class_synthetic}.bin"
        )
        path = cache_dir / name
        if path.exists():
            return load_dataset_cache(path)
    synth = warp_augment_dataset(
        pool_set, per_class_synthetic, recipe.elastic, recipe.affine_ranges, seed
    )
    if cache_dir is not None:
        _atomic_write(path, lambda tmp: save_dataset_cache(synth, tmp))
        return load_dataset_cache(path)
    return _roundtrip_quantized(synth)


def _train_cell_features(
    config: ExperimentConfig,
    point: int,
    cell_seed: int,
    train_full: LabeledImageSet,
    pool_set: LabeledImageSet | None,
    pool_features: FeatureSet | None,
    cache: FeatureCache,
) -> FeatureSet:
    recipe = config.recipe
    if recipe.kind == "baseline":
        subset = balanced_subset(
            train_full, ClassBalanceSpec(per_class_count=point, seed=derive_seed(cell_seed, "subset"))
        )
        return cache.features_for(subset)
    if point < recipe.pool_per_class:
        raise ParameterError(
            f"sweep point {point}/class is below the real pool of {recipe.pool_per_class}/class"
        )
    if recipe.kind == "elastic":
        synth = _warped_set(
            pool_set, point - recipe.pool_per_class, recipe, derive_seed(cell_seed, "warp"), cache.cache_dir
        )
        return cache.features_for(concat_sets(pool_set, synth))
    # feature-space recipes: oversample the fixed pool's raw feature vectors
    if recipe.kind == "smote":
        params = dataclasses.replace(recipe.smote, seed=derive_seed(cell_seed, "smote"))
    else:
        params = dataclasses.replace(recipe.dbsmote, seed=derive_seed(cell_seed, "dbsmote"))
    return oversample_to_count(pool_features, point, recipe.kind, params)


_TRAINERS = {"mlp": train_mlp, "svm": train_svm, "elm": train_elm}


def _classifier_config(config: ExperimentConfig, cell_seed: int):
    base = {"mlp": config.mlp, "svm": config.svm, "elm": config.elm}[config.classifier]
    if config.classifier == "svm":  # deterministic: no seed field
        return base
    return dataclasses.replace(base, seed=derive_seed(cell_seed, "classifier"))


def run_sweep(config: ExperimentConfig) -> list:
    """Run every (sweep point x repeat) cell; results in grid order."""
    for path in (config.train_images, config.train_labels, config.test_images, config.test_labels):
        if not os.path.exists(path):
            raise IoError(f"dataset file not found: {path}")
    train_full = load_idx(config.train_images, config.train_labels)
    test_set = load_idx(config.test_images, config.test_labels)

    bank = config.features.load_bank()
    cache_dir = Path(config.out_dir) / "cache" if config.out_dir else None
    cache = FeatureCache(bank, config.features.pool, cache_dir)

    pool_set = None
    pool_features = None
    if config.recipe.kind != "baseline":
        pool_set = balanced_subset(
            train_full,
            ClassBalanceSpec(
                per_class_count=config.recipe.pool_per_class,
                seed=derive_seed(config.master_seed, "real-pool"),
            ),
        )
        if config.recipe.kind in ("smote", "dbsmote"):
            pool_features = cache.features_for(pool_set)

    test_features = cache.features_for(test_set)

    cells = [(point, repeat) for point in config.sweep_points for repeat in range(config.repeats)]

    def run_cell(cell):
        point, repeat = cell
        cell_seed = derive_seed(config.master_seed, point, repeat)
        started = time.perf_counter()
        train_features = _train_cell_features(
            config, point, cell_seed, train_full, pool_set, pool_features, cache
        )
        expected = point * train_full.class_count
        if len(train_features) != expected:
            raise ConsistencyCheckFailure(
                f"cell ({point}, {repeat}): built {len(train_features)} vectors, expected {expected}"
            )
        _, (train_std, test_std) = standardize(train_features, test_features)
        model = _TRAINERS[config.classifier](train_std, _classifier_config(config, cell_seed))
        train_err = error_percent(predict(model, train_std), train_std.labels)
        test_err = error_percent(predict(model, test_std), test_std.labels)
        elapsed = time.perf_counter() - started
        log.info(
            "cell %s point=%d repeat=%d seed=%d train=%.4f%% test=%.4f%% (%.1fs)",
            config.classifier, point, repeat, cell_seed, train_err, test_err, elapsed,
        )
        return ExperimentResult(
            classifier=config.classifier,
            recipe=config.recipe.describe(),
            n_per_class=point,
            repeat=repeat,
            seed=cell_seed,
            train_error_percent=train_err,
            test_error_percent=test_err,
            wall_time_seconds=elapsed,
        )

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            return list(pool.map(run_cell, cells))
    return [run_cell(cell) for cell in cells]


class ConsistencyCheckFailure(ParameterError):
    """A built training set did not match the recipe's accounting."""


def write_results_csv(results, path, include_timing: bool = False) -> None:
    """One header plus one row per result, numbers at 4 decimal places.

    Wall time is written as 0.0000 unless ``include_timing`` is set, keeping
    default CSV output a pure function of (config, master_seed); measured
    per-cell timings always go to the stderr log.
    """
    if not results:
        raise ParameterError("no results to write")
    lines = [CSV_HEADER]
    for r in results:
        wall = r.wall_time_seconds if include_timing else 0.0
        lines.append(
            f"{r.classifier},{r.recipe},{r.n_per_class},{r.repeat},{r.seed},"
            f"{r.train_error_percent:.4f},{r.test_error_percent:.4f},{wall:.4f}"
        )
    try:
        with open(path, "w", newline="") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_results_csv(path) -> list:
    """Parse a results CSV written by :func:`write_results_csv`."""
    try:
        with open(path) as f:
            lines = [line.rstrip("\n") for line in f if line.strip()]
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if not lines or lines[0] != CSV_HEADER:
        raise ParameterError(f"{path}: unrecognized results CSV header")
    results = []
    for line in lines[1:]:
        cls, recipe, n, rep, seed, tr, te, wall = line.split(",")
        results.append(
            ExperimentResult(
                classifier=cls,
                recipe=recipe,
                n_per_class=int(n),
                repeat=int(rep),
                seed=int(seed),
                train_error_percent=float(tr),
                test_error_percent=float(te),
                wall_time_seconds=float(wall),
            )
        )
    return results


def mean_errors_at(results, classifier: str, recipe_prefix: str, point: int):
    """(mean train %, mean test %, test std-dev over repeats) at one sweep point."""
    rows = [
        r
        for r in results
        if r.classifier == classifier and r.recipe.startswith(recipe_prefix) and r.n_per_class == point
    ]
    if not rows:
        raise ParameterError(f"no results for {classifier}/{recipe_prefix} at {point}")
    train = np.array([r.train_error_percent for r in rows])
    test = np.array([r.test_error_percent for r in rows])
    return float(train.mean()), float(test.mean()), float(test.std(ddof=0))


def trend_summary(results) -> dict:
    """Per (classifier, recipe): mean errors and overfitting gap at the
    smallest and largest sweep points; the baseline-trend check reads this."""
    out = {}
    pairs = sorted({(r.classifier, r.recipe) for r in results})
    for classifier, recipe in pairs:
        points = sorted({r.n_per_class for r in results if (r.classifier, r.recipe) == (classifier, recipe)})
        lo, hi = points[0], points[-1]
        tr_lo, te_lo, sd_lo = mean_errors_at(results, classifier, recipe, lo)
        tr_hi, te_hi, sd_hi = mean_errors_at(results, classifier, recipe, hi)
        out[(classifier, recipe)] = {
            "smallest_point": lo,
            "largest_point": hi,
            "test_error_at_smallest": te_lo,
            "test_error_at_largest": te_hi,
            "gap_at_smallest": te_lo - tr_lo,
            "gap_at_largest": te_hi - tr_hi,
            "test_std_at_smallest": sd_lo,
            "test_std_at_largest": sd_hi,
        }
    return out
