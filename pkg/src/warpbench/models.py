"""The three classifier heads: backprop MLP, 1-vs-all L2 SVM, and ELM.

All heads consume standardized feature vectors and share the same prediction
surface (per-class scores, argmax with ties broken toward the lowest class
id).  Training is deterministic: the MLP and ELM draw weights from seeded
Philox streams, the SVM uses no randomness at all.

The SVM solves the primal squared-hinge objective

    f(w, b) = 0.5 ||w||^2 + C * sum_i max(0, 1 - y_i (w . x_i + b))^2

for each class with a trust-region Newton-CG method (full batch, zero start,
only descent steps accepted), so repeated runs give bit-identical weights.
The ELM readout solves the ridge system (H^T H + lambda I) beta = H^T T with
a Cholesky factorization.
"""

import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy.special import expit

from .errors import (
    DimensionError,
    DivergenceError,
    FormatError,
    IoError,
    ParameterError,
    SolverError,
    TruncationError,
)
from .features import FeatureSet
from .seeding import rng_from

MODEL_MAGIC = b"WBMODELF"
MODEL_VERSION = 1

_CHUNK_ROWS = 4096


@dataclass
class MlpConfig:
    hidden_units: int = 1600
    epochs: int = 2000
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int | str = 128  # int or "full"
    seed: int = 0

    def __post_init__(self):
        if self.hidden_units < 1:
            raise ParameterError("hidden_units must be >= 1")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be > 0")
        if not (0 <= self.momentum < 1):
            raise ParameterError("momentum must be in [0, 1)")
        if self.batch_size != "full" and (not isinstance(self.batch_size, int) or self.batch_size < 1):
            raise ParameterError("batch_size must be a positive integer or 'full'")


@dataclass
class SvmConfig:
    c: float = 1.0
    max_iterations: int = 200
    tolerance: float = 1e-3  # relative to the initial gradient norm

    def __post_init__(self):
        if self.c <= 0:
            raise ParameterError("C must be > 0")
        if self.tolerance <= 0:
            raise ParameterError("tolerance must be > 0")
        if self.max_iterations < 0:
            raise ParameterError("max_iterations must be >= 0")


@dataclass
class ElmConfig:
    hidden_units: int = 1600
    ridge: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.hidden_units < 1:
            raise ParameterError("hidden_units must be >= 1")
        if self.ridge < 0:
            raise ParameterError("ridge must be >= 0")


@dataclass
class TrainedModel:
    """Immutable trained head; weights are float32 so file roundtrips are exact."""

    kind: str  # "mlp" | "svm" | "elm"
    weights: dict
    input_dim: int
    class_count: int
    metadata: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)  # in-memory only


def _onehot(labels: np.ndarray, class_count: int, dtype=np.float64) -> np.ndarray:
    t = np.zeros((len(labels), class_count), dtype=dtype)
    t[np.arange(len(labels)), labels] = 1
    return t


def _require_trainable(features: FeatureSet):
    if len(features) == 0:
        raise ParameterError("cannot train on an empty feature set")
    if not np.isfinite(features.vectors).all():
        raise ParameterError("feature matrix contains non-finite values")


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


def mlp_init_params(input_dim: int, hidden_units: int, class_count: int, seed: int, dtype=np.float64) -> dict:
    """Seeded uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    rng = rng_from(seed, "mlp-init")
    lim1 = np.sqrt(6.0 / (input_dim + hidden_units))
    lim2 = np.sqrt(6.0 / (hidden_units + class_count))
    return {
        "w1": rng.uniform(-lim1, lim1, (input_dim, hidden_units)).astype(dtype),
        "b1": np.zeros(hidden_units, dtype=dtype),
        "w2": rng.uniform(-lim2, lim2, (hidden_units, class_count)).astype(dtype),
        "b2": np.zeros(class_count, dtype=dtype),
    }


def mlp_logits(params: dict, x: np.ndarray) -> np.ndarray:
    hidden = expit(x @ params["w1"] + params["b1"])
    return hidden @ params["w2"] + params["b2"]


def mlp_loss_and_grads(params: dict, x: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of sigmoid-hidden/softmax-output net, plus gradients."""
    n = len(x)
    hidden = expit(x @ params["w1"] + params["b1"])
    logits = hidden @ params["w2"] + params["b2"]

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), labels]))

    probs = np.exp(shifted - log_z[:, None])
    delta_out = probs
    delta_out[np.arange(n), labels] -= 1
    delta_out /= n
    delta_hidden = (delta_out @ params["w2"].T) * hidden * (1 - hidden)
    grads = {
        "w1": x.T @ delta_hidden,
        "b1": delta_hidden.sum(axis=0),
        "w2": hidden.T @ delta_out,
        "b2": delta_out.sum(axis=0),
    }
    return loss, grads


def train_mlp(features: FeatureSet, config: MlpConfig) -> TrainedModel:
    """Mini-batch SGD with momentum on the cross-entropy objective."""
    _require_trainable(features)
    x = features.vectors
    labels = features.labels
    n, d = x.shape
    dtype = x.dtype

    params = mlp_init_params(d, config.hidden_units, features.class_count, config.seed, dtype)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    order_rng = rng_from(config.seed, "mlp-order")
    batch = n if config.batch_size == "full" else min(config.batch_size, n)

    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        perm = order_rng.permutation(n)
        for lo in range(0, n, batch):
            idx = perm[lo : lo + batch]
            loss, grads = mlp_loss_and_grads(params, x[idx], labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            for k in params:
                velocity[k] = config.momentum * velocity[k] - config.learning_rate * grads[k]
                params[k] += velocity[k]

    return TrainedModel(
        kind="mlp",
        weights={k: v.astype(np.float32) for k, v in params.items()},
        input_dim=d,
        class_count=features.class_count,
        metadata={
            "hidden_units": str(config.hidden_units),
            "epochs": str(config.epochs),
            "learning_rate": repr(config.learning_rate),
            "momentum": repr(config.momentum),
            "batch_size": str(config.batch_size),
            "seed": str(config.seed),
            "train_seconds": f"{time.perf_counter() - t0:.3f}",
        },
    )


# ---------------------------------------------------------------------------
# SVM (1-vs-all squared hinge, trust-region Newton-CG)
# ---------------------------------------------------------------------------


def _cg_steihaug(hess_vec, grad: np.ndarray, radius: float, cg_tol: float, max_cg: int = 250):
    """Approximately solve H d = -grad inside the trust region ||d|| <= radius."""
    d = np.zeros_like(grad)
    r = -grad
    p = r.copy()
    rr = float(r @ r)
    for _ in range(max_cg):
        if np.sqrt(rr) <= cg_tol:
            break
        hp = hess_vec(p)
        php = float(p @ hp)
        if php <= 0:  # H is positive definite here; guard only
            return _to_boundary(d, p, radius)
        alpha = rr / php
        d_next = d + alpha * p
        if np.linalg.norm(d_next) >= radius:
            return _to_boundary(d, p, radius)
        d = d_next
        r = r - alpha * hp
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return d


def _to_boundary(d: np.ndarray, p: np.ndarray, radius: float) -> np.ndarray:
    """Walk from d along p until hitting the trust-region boundary."""
    dd = float(d @ d)
    dp = float(d @ p)
    pp = float(p @ p)
    tau = (-dp + np.sqrt(dp * dp + pp * (radius * radius - dd))) / pp
    return d + tau * p


def _tron_minimize(fun_grad, hess_vec_at, z0: np.ndarray, tol_rel: float, max_iter: int):
    """Trust-region Newton; accepts only strictly decreasing steps.

    Returns (z, objective_path, converged, final_gnorm, threshold).
    """
    z = z0.copy()
    f, g = fun_grad(z)
    path = [f]
    gnorm = float(np.linalg.norm(g))
    threshold = tol_rel * max(gnorm, 1e-30)
    radius = gnorm if gnorm > 0 else 1.0

    it = 0
    while it < max_iter and gnorm > threshold:
        hess_vec = hess_vec_at(z)
        step = _cg_steihaug(hess_vec, g, radius, cg_tol=0.1 * gnorm)
        step_norm = float(np.linalg.norm(step))
        if step_norm == 0.0:
            break
        predicted = -(float(g @ step) + 0.5 * float(step @ hess_vec(step)))
        f_new, g_new = fun_grad(z + step)
        actual = f - f_new
        rho = actual / predicted if predicted > 0 else -1.0

        if rho > 1e-4 and actual > 0:
            z = z + step
            f, g = f_new, g_new
            gnorm = float(np.linalg.norm(g))
            path.append(f)
        if rho < 0.25:
            radius *= 0.25
        elif rho > 0.75 and step_norm >= 0.99 * radius:
            radius *= 2.0
        it += 1

    return z, path, gnorm <= threshold, gnorm, threshold


def _binary_l2svm_problem(x: np.ndarray, y_signed: np.ndarray, c: float):
    """fun/grad and Hessian-vector closures over the packed (w, b) vector.

    Matrix products run in the dtype of ``x`` (vectors are down-cast, never
    the feature matrix up-cast); scalars accumulate in float64.
    """
    dt = x.dtype

    def margins_at(z):
        scores = (x @ z[:-1].astype(dt, copy=False)).astype(np.float64) + z[-1]
        return 1.0 - y_signed * scores

    def fun_grad(z):
        margins = margins_at(z)
        am = np.where(margins > 0, margins, 0.0)
        f = 0.5 * float(z[:-1] @ z[:-1]) + c * float(am @ am)
        coef = (-2.0 * c) * (y_signed * am)
        g = np.empty_like(z)
        g[:-1] = z[:-1] + (x.T @ coef.astype(dt)).astype(np.float64)
        g[-1] = coef.sum()
        return f, g

    def hess_vec_at(z):
        active = margins_at(z) > 0

        def hess_vec(v):
            t = (x @ v[:-1].astype(dt, copy=False)).astype(np.float64) + v[-1]
            u = np.where(active, t, 0.0)
            hv = np.empty_like(v)
            hv[:-1] = v[:-1] + 2.0 * c * (x.T @ u.astype(dt)).astype(np.float64)
            hv[-1] = 2.0 * c * u.sum()
            return hv

        return hess_vec

    return fun_grad, hess_vec_at


def train_svm(features: FeatureSet, config: SvmConfig) -> TrainedModel:
    """One deterministic squared-hinge subproblem per class, zero start."""
    _require_trainable(features)
    x = features.vectors
    n, d = x.shape
    classes = features.class_count

    w = np.zeros((classes, d), dtype=np.float64)
    b = np.zeros(classes, dtype=np.float64)
    paths = []
    converged = []
    gnorms = []
    t0 = time.perf_counter()
    for cls in range(classes):
        y_signed = np.where(features.labels == cls, 1.0, -1.0).astype(x.dtype)
        fun_grad, hess_vec_at = _binary_l2svm_problem(x, y_signed, config.c)
        z, path, ok, gnorm, threshold = _tron_minimize(
            fun_grad, hess_vec_at, np.zeros(d + 1), config.tolerance, config.max_iterations
        )
        w[cls] = z[:-1]
        b[cls] = z[-1]
        paths.append(path)
        converged.append(ok)
        gnorms.append((gnorm, threshold))

    return TrainedModel(
        kind="svm",
        weights={"w": w.astype(np.float32), "b": b.astype(np.float32)},
        input_dim=d,
        class_count=classes,
        metadata={
            "c": repr(config.c),
            "max_iterations": str(config.max_iterations),
            "tolerance": repr(config.tolerance),
            "converged": str(all(converged)),
            "train_seconds": f"{time.perf_counter() - t0:.3f}",
        },
        diagnostics={"objective_paths": paths, "converged": converged, "gradient_norms": gnorms},
    )


# ---------------------------------------------------------------------------
# ELM
# ---------------------------------------------------------------------------


def _solve_ridge_system(gram: np.ndarray, rhs: np.ndarray, ridge: float) -> np.ndarray:
    a = gram.copy()
    a[np.diag_indices_from(a)] += ridge
    try:
        return sla.cho_solve(sla.cho_factor(a), rhs)
    except np.linalg.LinAlgError as e:
        raise SolverError(f"ridge system not positive definite (ridge={ridge}); set ridge > 0") from e


def ridge_readout(hidden: np.ndarray, targets: np.ndarray, ridge: float) -> np.ndarray:
    """Solve (H^T H + ridge I) beta = H^T T with a dense Cholesky factorization."""
    hidden = np.asarray(hidden, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if ridge < 0:
        raise ParameterError("ridge must be >= 0")
    return _solve_ridge_system(hidden.T @ hidden, hidden.T @ targets, ridge)


def _elm_hidden(x: np.ndarray, w: np.ndarray, b: np.ndarray, out_dtype=np.float64) -> np.ndarray:
    """sigmoid(x W + b) computed in row blocks to bound temporaries."""
    n = len(x)
    h = np.empty((n, w.shape[1]), dtype=out_dtype)
    w_c = w.astype(x.dtype, copy=False)
    b_c = b.astype(x.dtype, copy=False)
    for lo in range(0, n, _CHUNK_ROWS):
        h[lo : lo + _CHUNK_ROWS] = expit(x[lo : lo + _CHUNK_ROWS] @ w_c + b_c)
    return h


def train_elm(features: FeatureSet, config: ElmConfig) -> TrainedModel:
    """Fixed random projection, ridge-regressed readout on one-hot targets."""
    _require_trainable(features)
    x = features.vectors
    n, d = x.shape
    rng = rng_from(config.seed, "elm")
    w = rng.standard_normal((d, config.hidden_units))
    b = rng.standard_normal(config.hidden_units)

    t0 = time.perf_counter()
    targets = _onehot(features.labels, features.class_count)
    gram = np.zeros((config.hidden_units, config.hidden_units), dtype=np.float64)
    rhs = np.zeros((config.hidden_units, features.class_count), dtype=np.float64)
    w_c = w.astype(x.dtype, copy=False)
    b_c = b.astype(x.dtype, copy=False)
    for lo in range(0, n, _CHUNK_ROWS):
        h_block = expit(x[lo : lo + _CHUNK_ROWS] @ w_c + b_c).astype(np.float64)
        gram += h_block.T @ h_block
        rhs += h_block.T @ targets[lo : lo + _CHUNK_ROWS]
    beta = _solve_ridge_system(gram, rhs, config.ridge)

    return TrainedModel(
        kind="elm",
        weights={
            "w": w.astype(np.float32),
            "b": b.astype(np.float32),
            "beta": beta.astype(np.float32),
        },
        input_dim=d,
        class_count=features.class_count,
        metadata={
            "hidden_units": str(config.hidden_units),
            "ridge": repr(config.ridge),
            "seed": str(config.seed),
            "train_seconds": f"{time.perf_counter() - t0:.3f}",
        },
    )


# ---------------------------------------------------------------------------
# Prediction, metrics, serialization
# ---------------------------------------------------------------------------


def class_scores(model: TrainedModel, features: FeatureSet) -> np.ndarray:
    """Per-class score matrix (N, class_count)."""
    if features.dim != model.input_dim:
        raise DimensionError(
            f"model expects {model.input_dim}-dim features, got {features.dim}-dim"
        )
    x = features.vectors
    w = model.weights
    if model.kind == "mlp":
        params = {k: v.astype(x.dtype) for k, v in w.items()}
        return mlp_logits(params, x)
    if model.kind == "svm":
        return x @ w["w"].T.astype(x.dtype) + w["b"].astype(x.dtype)
    if model.kind == "elm":
        hidden = _elm_hidden(x, w["w"], w["b"], out_dtype=x.dtype)
        return hidden @ w["beta"].astype(x.dtype)
    raise ParameterError(f"unknown model kind {model.kind!r}")


def predict(model: TrainedModel, features: FeatureSet) -> np.ndarray:
    """Argmax over class scores; ties break toward the lowest class id."""
    if len(features) == 0:
        return np.empty(0, dtype=np.int64)
    return np.argmax(class_scores(model, features), axis=1).astype(np.int64)


def error_percent(predicted, truth) -> float:
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ParameterError(f"length mismatch: {predicted.shape} vs {truth.shape}")
    if predicted.size == 0:
        raise ParameterError("error_percent of empty sequences is undefined")
    return 100.0 * float(np.count_nonzero(predicted != truth)) / predicted.size


_KIND_CODES = {"mlp": 0, "svm": 1, "elm": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_KIND_WEIGHT_ORDER = {"mlp": ("w1", "b1", "w2", "b2"), "svm": ("w", "b"), "elm": ("w", "b", "beta")}


def save_model(model: TrainedModel, path) -> None:
    """Write the model envelope: dims, float32 weights, config echo, checksum."""
    parts = [struct.pack(">III", _KIND_CODES[model.kind], model.input_dim, model.class_count)]
    names = _KIND_WEIGHT_ORDER[model.kind]
    parts.append(struct.pack(">I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(model.weights[name], dtype="<f4")
        parts.append(struct.pack(">I", arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    echo = "".join(f"{k}={v}\n" for k, v in sorted(model.metadata.items())).encode("utf-8")
    parts.append(struct.pack(">I", len(echo)) + echo)
    payload = b"".join(parts)
    try:
        with open(path, "wb") as f:
            f.write(MODEL_MAGIC)
            f.write(struct.pack(">I", MODEL_VERSION))
            f.write(payload)
            f.write(struct.pack(">I", zlib.crc32(payload)))
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def load_model(path) -> TrainedModel:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if len(data) < 12 or data[:8] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model file")
    (version,) = struct.unpack(">I", data[8:12])
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: model version {version}, expected {MODEL_VERSION}")
    payload, checksum = data[12:-4], struct.unpack(">I", data[-4:])[0]
    if zlib.crc32(payload) != checksum:
        raise FormatError(f"{path}: checksum mismatch")

    off = 0

    def take(n):
        nonlocal off
        if off + n > len(payload):
            raise TruncationError(f"{path}: payload truncated")
        chunk = payload[off : off + n]
        off += n
        return chunk

    kind_code, input_dim, class_count = struct.unpack(">III", take(12))
    if kind_code not in _KIND_NAMES:
        raise FormatError(f"{path}: unknown model kind code {kind_code}")
    kind = _KIND_NAMES[kind_code]
    (n_arrays,) = struct.unpack(">I", take(4))
    names = _KIND_WEIGHT_ORDER[kind]
    if n_arrays != len(names):
        raise FormatError(f"{path}: expected {len(names)} weight arrays, file has {n_arrays}")
    weights = {}
    for name in names:
        (ndim,) = struct.unpack(">I", take(4))
        shape = struct.unpack(f">{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        weights[name] = np.frombuffer(take(count * 4), dtype="<f4").reshape(shape)
    (echo_len,) = struct.unpack(">I", take(4))
    echo = take(echo_len).decode("utf-8")
    metadata = dict(line.split("=", 1) for line in echo.splitlines() if "=" in line)
    return TrainedModel(
        kind=kind, weights=weights, input_dim=input_dim, class_count=class_count, metadata=metadata
    )
