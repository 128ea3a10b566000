"""Gaussian process regression forward model.

One independent GP per displacement dimension, squared-exponential kernel
with per-input-dimension length scales, fitted on standardised data. The
kernel matrix is factorised once with a Cholesky decomposition (escalating
diagonal jitter up to 1e-6 if needed) and reused for predictions. Kernel
hyperparameters can be fitted by maximising the log marginal likelihood with
analytic gradients in log space, restarted from random initialisations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize

from .features import (
    OUTPUT_DIM,
    Normalization,
    Prediction,
    dataset_arrays,
    model_input,
    model_input_batch,
)
from .sim import BoxState, PushAction, PushDataset

MAX_TRAIN_POINTS = 5000
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class GpFitError(RuntimeError):
    pass


@dataclass
class GpHyperparams:
    """Kernel settings of one output dimension (all strictly positive)."""

    signal_variance: float
    length_scales: np.ndarray
    noise_variance: float

    def __post_init__(self):
        self.length_scales = np.asarray(self.length_scales, dtype=float)
        if self.signal_variance <= 0 or self.noise_variance <= 0 or np.any(self.length_scales <= 0):
            raise ValueError("GP hyperparameters must be strictly positive")

    def to_log_vector(self) -> np.ndarray:
        return np.log(np.concatenate(([self.signal_variance], self.length_scales, [self.noise_variance])))

    @classmethod
    def from_log_vector(cls, v: np.ndarray) -> "GpHyperparams":
        v = np.exp(np.asarray(v, dtype=float))
        return cls(float(v[0]), v[1:-1], float(v[-1]))


def se_ard_kernel(X1: np.ndarray, X2: np.ndarray, hyp: GpHyperparams) -> np.ndarray:
    S1 = X1 / hyp.length_scales
    S2 = X2 / hyp.length_scales
    sq = ((S1**2).sum(1)[:, None] + (S2**2).sum(1)[None, :]) - 2.0 * (S1 @ S2.T)
    return hyp.signal_variance * np.exp(-0.5 * np.maximum(sq, 0.0))


def _factorize(X: np.ndarray, hyp: GpHyperparams):
    """Cholesky of K + noise*I with escalating jitter. Returns (L, jitter)."""
    K = se_ard_kernel(X, X, hyp)
    K[np.diag_indices_from(K)] += hyp.noise_variance
    for jitter in JITTERS:
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(len(K)))
            return L, jitter
        except np.linalg.LinAlgError:
            continue
    raise GpFitError("kernel matrix not positive definite even with 1e-6 jitter")


def log_marginal_likelihood(X: np.ndarray, y: np.ndarray, hyp: GpHyperparams) -> float:
    L, _ = _factorize(X, hyp)
    alpha = cho_solve((L, True), y)
    n = len(y)
    return float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2 * np.pi))


def lml_and_gradient(X: np.ndarray, y: np.ndarray, log_params: np.ndarray):
    """Log marginal likelihood and its gradient with respect to the
    log-hyperparameters [log sf2, log l_1..l_d, log sn2]."""
    hyp = GpHyperparams.from_log_vector(log_params)
    n, d = X.shape
    L, jitter = _factorize(X, hyp)
    alpha = cho_solve((L, True), y)
    lml = float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2 * np.pi))

    Kf = se_ard_kernel(X, X, hyp)
    K_inv = cho_solve((L, True), np.eye(n))
    # dL/dtheta = 0.5 tr((alpha alpha^T - K^-1) dK/dtheta)
    A = np.outer(alpha, alpha) - K_inv
    grad = np.empty(d + 2)
    grad[0] = 0.5 * float((A * Kf).sum())  # d/dlog sf2
    for j in range(d):
        diff = (X[:, j][:, None] - X[:, j][None, :]) ** 2 / hyp.length_scales[j] ** 2
        grad[1 + j] = 0.5 * float((A * (Kf * diff)).sum())
    grad[-1] = 0.5 * hyp.noise_variance * float(np.trace(A))  # d/dlog sn2
    return lml, grad


def _optimize_hypers(
    X: np.ndarray, y: np.ndarray, restarts: int, rng: np.random.Generator
) -> GpHyperparams:
    d = X.shape[1]
    starts = [np.zeros(d + 2)]
    for _ in range(max(0, restarts)):
        starts.append(rng.normal(0.0, 1.0, d + 2))

    def objective(v):
        try:
            lml, grad = lml_and_gradient(X, y, v)
        except GpFitError:
            return 1e25, np.zeros_like(v)
        return -lml, -grad

    best_v, best_val = None, np.inf
    for v0 in starts:
        res = minimize(
            objective,
            v0,
            jac=True,
            method="L-BFGS-B",
            bounds=[(-10.0, 10.0)] * (d + 2),
        )
        if res.fun < best_val:
            best_val, best_v = res.fun, res.x
    return GpHyperparams.from_log_vector(best_v)


@dataclass
class GpModel:
    """Independent per-dimension GPs over standardised push data."""

    X: np.ndarray  # (n, d) standardised inputs
    Y: np.ndarray  # (n, 3) standardised targets
    hypers: list[GpHyperparams]
    normalization: Normalization
    frame_mode: str = "object"

    def __post_init__(self):
        self._chols = []
        self._alphas = []
        for dim, hyp in enumerate(self.hypers):
            L, _ = _factorize(self.X, hyp)
            self._chols.append(L)
            self._alphas.append(cho_solve((L, True), self.Y[:, dim]))

    @property
    def n_train(self) -> int:
        return self.X.shape[0]

    def log_marginal_likelihood(self) -> float:
        return sum(log_marginal_likelihood(self.X, self.Y[:, dim], hyp) for dim, hyp in enumerate(self.hypers))


def gp_from_arrays(
    H: np.ndarray,
    Y: np.ndarray,
    frame_mode: str,
    optimize: bool = True,
    restarts: int = 2,
    rng: np.random.Generator | None = None,
    hypers: list[GpHyperparams] | None = None,
    normalization: Normalization | None = None,
) -> GpModel:
    """Fit GPs on raw input/target arrays (standardised internally). Explicit
    hyperparameters skip optimisation; otherwise unit defaults are used and
    optionally refined by maximising the marginal likelihood."""
    if len(H) > MAX_TRAIN_POINTS:
        raise ValueError(f"{len(H)} training points exceed the dense-GP guard of {MAX_TRAIN_POINTS}")
    if normalization is None:
        normalization = Normalization.from_data(H, Y)
    Xn = normalization.normalize_in(H)
    Yn = normalization.normalize_out(Y)
    d = Xn.shape[1]
    if hypers is None:
        if optimize:
            if rng is None:
                rng = np.random.default_rng(0)
            hypers = [_optimize_hypers(Xn, Yn[:, dim], restarts, rng) for dim in range(OUTPUT_DIM)]
        else:
            hypers = [GpHyperparams(1.0, np.ones(d), 1.0) for _ in range(OUTPUT_DIM)]
    return GpModel(Xn, Yn, hypers, normalization, frame_mode)


def gp_fit(
    dataset: PushDataset,
    optimize: bool = True,
    restarts: int = 2,
    rng: np.random.Generator | None = None,
) -> GpModel:
    H, Y = dataset_arrays(dataset)
    return gp_from_arrays(H, Y, dataset.frame_mode, optimize=optimize, restarts=restarts, rng=rng)


def gp_predict_batch(model: GpModel, H: np.ndarray):
    """Posterior mean/variance (physical units) and sigma scalars for raw
    model inputs H of shape (n, d). The variance includes the noise term."""
    Xq = model.normalization.normalize_in(np.asarray(H, dtype=float))
    n = Xq.shape[0]
    mean_n = np.empty((n, OUTPUT_DIM))
    var_n = np.empty((n, OUTPUT_DIM))
    for dim, hyp in enumerate(model.hypers):
        Ks = se_ard_kernel(model.X, Xq, hyp)  # (n_train, n)
        mean_n[:, dim] = Ks.T @ model._alphas[dim]
        V = solve_triangular(model._chols[dim], Ks, lower=True)
        var_n[:, dim] = hyp.signal_variance + hyp.noise_variance - (V**2).sum(axis=0)
    var_n = np.maximum(var_n, 0.0)
    sigma = np.sqrt(var_n.sum(axis=1))
    return (
        model.normalization.denormalize_mean(mean_n),
        model.normalization.denormalize_variance(var_n),
        sigma,
    )


def gp_predict(model: GpModel, state: BoxState, action: PushAction) -> Prediction:
    H = model_input(state, action, model.frame_mode)[None, :]
    mean, var, sigma = gp_predict_batch(model, H)
    return Prediction(mean[0], var[0], float(sigma[0]))


def save_gp(model: GpModel, path) -> None:
    doc = {
        "format": "pushcraft-gp",
        "version": 1,
        "frame_mode": model.frame_mode,
        "normalization": model.normalization.to_dict(),
        "X": model.X.tolist(),
        "Y": model.Y.tolist(),
        "hypers": [
            {
                "signal_variance": h.signal_variance,
                "length_scales": h.length_scales.tolist(),
                "noise_variance": h.noise_variance,
            }
            for h in model.hypers
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_gp(path) -> GpModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "pushcraft-gp":
        raise ValueError(f"{path} is not a serialized GP model")
    hypers = [
        GpHyperparams(h["signal_variance"], np.array(h["length_scales"]), h["noise_variance"])
        for h in doc["hypers"]
    ]
    return GpModel(
        np.array(doc["X"], dtype=float),
        np.array(doc["Y"], dtype=float),
        hypers,
        Normalization.from_dict(doc["normalization"]),
        doc["frame_mode"],
    )
