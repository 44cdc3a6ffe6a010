"""Feature-space augmentation: SMOTE and simplified DBSMOTE.

SMOTE draws each synthetic vector as a random convex combination of k
same-class parents (uniform on the segment for k = 2, symmetric-Dirichlet
weights in general).  The simplified DBSMOTE variant implemented here places
synthetic vectors on the ray from the class centroid towards a random class
member, at a uniform fraction of the distance, clipped so no sample lands
further than eps from the centroid.  Distances are Euclidean.

Generation is deterministic: every synthetic sample derives its own RNG
stream from (seed, class, sample index), so parallel generation order cannot
change the output.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, ParameterError
from .features import FeatureSet
from .seeding import rng_from


@dataclass
class SmoteParams:
    k: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ParameterError("k must be >= 1")


@dataclass
class DbsmoteParams:
    k: int = 2
    eps: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.eps <= 0:
            raise ParameterError("eps must be > 0")


def smote_generate(
    class_vectors: np.ndarray, count: int, params: SmoteParams, stream_tag: int = 0
) -> np.ndarray:
    """Synthesize ``count`` vectors as convex combinations of k parents.

    Parents are chosen uniformly without replacement when the class has at
    least k members.  ``stream_tag`` keys the per-class RNG stream so callers
    generating several classes from one seed stay schedule-independent.
    """
    class_vectors = np.asarray(class_vectors, dtype=np.float64)
    if class_vectors.ndim != 2 or len(class_vectors) == 0:
        raise InsufficientDataError("class has no vectors to oversample")
    if count < 0:
        raise ParameterError("count must be >= 0")
    n, d = class_vectors.shape
    k = params.k
    out = np.empty((count, d), dtype=np.float64)
    for i in range(count):
        rng = rng_from(params.seed, "smote", stream_tag, i)
        parents = rng.choice(n, size=k, replace=n < k)
        weights = rng.dirichlet(np.ones(k))
        out[i] = weights @ class_vectors[parents]
    return out


def dbsmote_generate(
    class_vectors: np.ndarray, count: int, params: DbsmoteParams, stream_tag: int = 0
) -> np.ndarray:
    """Synthesize ``count`` vectors within ``eps`` of the class centroid.

    Each sample is c + t * d * (x - c)/||x - c|| with x a random class member,
    t ~ uniform[0, 1] and d = min(eps, ||x - c||); x = c yields c itself.
    """
    class_vectors = np.asarray(class_vectors, dtype=np.float64)
    if class_vectors.ndim != 2 or len(class_vectors) == 0:
        raise InsufficientDataError("class has no vectors to oversample")
    if count < 0:
        raise ParameterError("count must be >= 0")
    centroid = class_vectors.mean(axis=0)
    n, d = class_vectors.shape
    out = np.empty((count, d), dtype=np.float64)
    for i in range(count):
        rng = rng_from(params.seed, "dbsmote", stream_tag, i)
        x = class_vectors[rng.integers(n)]
        t = rng.uniform(0.0, 1.0)
        offset = x - centroid
        dist = float(np.linalg.norm(offset))
        if dist == 0.0:
            out[i] = centroid
        else:
            out[i] = centroid + (t * min(params.eps, dist) / dist) * offset
    return out


def oversample_to_count(features: FeatureSet, per_class_target: int, method: str, params) -> FeatureSet:
    """Top every class up to exactly ``per_class_target`` vectors.

    Real vectors come first in their original order, followed by synthetic
    vectors grouped by class.  Synthetic labels inherit their class.
    """
    if method not in ("smote", "dbsmote"):
        raise ParameterError(f"unknown oversampling method {method!r}")
    generate = smote_generate if method == "smote" else dbsmote_generate

    synth_blocks = []
    synth_labels = []
    for cls in range(features.class_count):
        idx = features.class_indices(cls)
        have = len(idx)
        if have > per_class_target:
            raise ParameterError(
                f"class {cls} already has {have} vectors, above target {per_class_target}"
            )
        need = per_class_target - have
        if need == 0:
            continue
        block = generate(features.vectors[idx], need, params, stream_tag=cls)
        synth_blocks.append(block.astype(np.float32))
        synth_labels.append(np.full(need, cls, dtype=np.int64))

    if not synth_blocks:
        return features
    return FeatureSet(
        vectors=np.concatenate([features.vectors, *synth_blocks]),
        labels=np.concatenate([features.labels, *synth_labels]),
        class_count=features.class_count,
        standardized=features.standardized,
    )
