"""Exact Gaussian-process regression with RBF, Matern-5/2 and rho-RBF kernels."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist

from .envs import Box

KERNELS = ("rbf", "matern", "rho-rbf")
DEFAULT_LENGTHSCALES = np.logspace(-2, 1, 16)


class GPFitError(np.linalg.LinAlgError):
    """Kernel matrix could not be factorized even with the largest jitter."""


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """Covariance function over reward parameters.

    ``rbf`` and ``matern`` act on theta (whitened to the unit box when
    ``bounds`` is given, frozen coordinates dropped); ``rho-rbf`` is an RBF on
    the rho-vectors produced by ``projector``.

    ``rho_space`` picks the coordinates of that RBF: ``"log-odds"`` (default)
    uses ``logit(rho)`` divided by the projector's fixed scale, ``"rho"`` uses
    rho itself. Both are functions of the rho-vector alone, so rewards with
    equal rho-vectors share every kernel row either way; rho saturates at 0
    or 1 over most of a box while its log-odds stay graded.
    """

    kind: str = "rbf"
    lengthscale: float = 1.0
    signal_variance: float = 1.0
    projector: object = None
    bounds: Box | None = None
    rho_space: str = "log-odds"

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValueError(f"unknown kernel {self.kind!r}; expected one of {KERNELS}")
        if self.lengthscale <= 0 or self.signal_variance <= 0:
            raise ValueError("kernel hyperparameters must be positive")
        if self.kind == "rho-rbf" and self.projector is None:
            raise ValueError("the rho-rbf kernel needs a projector (basis + environment)")
        if self.rho_space not in ("log-odds", "rho"):
            raise ValueError(f"unknown rho space {self.rho_space!r}")

    def features(self, thetas) -> np.ndarray:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if self.kind == "rho-rbf":
            if self.rho_space == "rho":
                return self.projector(thetas)
            return self.projector.log_odds(thetas) / self.projector.log_odds_scale
        if self.bounds is not None:
            return self.bounds.to_unit(thetas)
        return thetas

    def with_lengthscale(self, lengthscale: float) -> KernelSpec:
        return replace(self, lengthscale=float(lengthscale))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "lengthscale": self.lengthscale, "signal_variance": self.signal_variance}
        if self.kind == "rho-rbf":
            d["rho_space"] = self.rho_space
        if self.bounds is not None:
            d["bounds"] = self.bounds.to_dict()
        return d


def kernel_matrix(spec: KernelSpec, fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """Covariances between two sets of already-projected feature rows."""
    fa, fb = np.atleast_2d(fa), np.atleast_2d(fb)
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(f"dimension mismatch: {fa.shape[1]} vs {fb.shape[1]}")
    if fa.shape[0] == 0 or fb.shape[0] == 0:
        return np.zeros((fa.shape[0], fb.shape[0]))
    if spec.kind == "matern":
        r = cdist(fa, fb) * (np.sqrt(5.0) / spec.lengthscale)
        return spec.signal_variance * (1.0 + r + r * r / 3.0) * np.exp(-r)
    d2 = cdist(fa, fb, "sqeuclidean")
    return spec.signal_variance * np.exp(-0.5 * d2 / spec.lengthscale**2)


def kernel_eval(spec: KernelSpec, a, b) -> float:
    fa, fb = spec.features(a), spec.features(b)
    return float(kernel_matrix(spec, fa, fb)[0, 0])


@dataclass(frozen=True, eq=False)
class GPState:
    """A fitted GP: training data plus the Cholesky factor of ``K + noise * I``."""

    inputs: np.ndarray
    outputs: np.ndarray
    kernel: KernelSpec
    noise_variance: float
    normalize_y: bool
    features: np.ndarray
    y_mean: float
    y_std: float
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.outputs.size

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.outputs))

    def to_dict(self) -> dict:
        return {
            "inputs": self.inputs.tolist(),
            "outputs": self.outputs.tolist(),
            "kernel": self.kernel.to_dict(),
            "noise_variance": self.noise_variance,
            "normalize_y": self.normalize_y,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path, projector=None) -> GPState:
        """Rebuild a snapshot; the factorization is recomputed. ``rho-rbf`` needs its projector."""
        d = json.loads(Path(path).read_text())
        kd = d["kernel"]
        bounds = Box(**kd["bounds"]) if "bounds" in kd else None
        kernel = KernelSpec(kd["kind"], kd["lengthscale"], kd["signal_variance"], projector, bounds, kd.get("rho_space", "log-odds"))
        return gp_fit(np.array(d["inputs"]), np.array(d["outputs"]), kernel, d["noise_variance"], d["normalize_y"])


def gp_fit(
    inputs,
    outputs,
    kernel: KernelSpec,
    noise_variance: float = 1e-4,
    normalize_y: bool = False,
    features: np.ndarray | None = None,
) -> GPState:
    """Condition a zero-mean GP on ``(inputs, outputs)``.

    With ``normalize_y`` the outputs are standardized before fitting and
    predictions are mapped back. Jitter is added to the diagonal when the
    Cholesky factorization fails or its smallest pivot drops below 1e-10.
    ``features`` may carry precomputed kernel features for ``inputs``.
    """
    y = np.asarray(outputs, dtype=float).reshape(-1)
    X = np.asarray(inputs, dtype=float)
    if X.ndim == 1:
        X = X.reshape(y.size, -1) if y.size else X.reshape(0, -1)
    if X.shape[0] != y.size:
        raise ValueError("inputs and outputs differ in length")
    if not np.all(np.isfinite(y)):
        raise ValueError("outputs must be finite")
    if noise_variance < 0:
        raise ValueError("noise variance must be non-negative")
    F = kernel.features(X) if features is None else np.asarray(features, dtype=float)
    if y.size == 0:
        empty = np.zeros((0, 0))
        return GPState(X, y, kernel, noise_variance, normalize_y, F, 0.0, 1.0, empty, np.zeros(0))
    if normalize_y:
        mean = float(np.mean(y))
        std = float(np.std(y))
        std = std if std > 0 else 1.0
    else:
        mean, std = 0.0, 1.0
    z = (y - mean) / std
    K = kernel_matrix(kernel, F, F)
    K[np.diag_indices_from(K)] += noise_variance
    L, jitter = _cholesky_with_jitter(K, kernel.signal_variance)
    alpha = cho_solve((L, True), z)
    return GPState(X, y, kernel, noise_variance, normalize_y, F, mean, std, L, alpha, jitter)


def _cholesky_with_jitter(K: np.ndarray, scale: float) -> tuple[np.ndarray, float]:
    jitter = 0.0
    for attempt in range(12):
        try:
            L = cholesky(K + jitter * np.eye(K.shape[0]), lower=True, check_finite=True)
            if np.min(np.diag(L)) ** 2 >= 1e-10 * scale:
                return L, jitter
        except (np.linalg.LinAlgError, ValueError):
            pass
        jitter = 1e-10 * scale if jitter == 0.0 else jitter * 10.0
    raise GPFitError("kernel matrix is not positive definite even with jitter (duplicate inputs with zero noise?)")


def gp_posterior(state: GPState, query) -> tuple[np.ndarray | float, np.ndarray | float]:
    """Posterior mean and variance at theta ``query`` (one point or a batch)."""
    q = np.asarray(query, dtype=float)
    single = q.ndim == 1
    mu, var = posterior_from_features(state, state.kernel.features(np.atleast_2d(q)))
    return (float(mu[0]), float(var[0])) if single else (mu, var)


def posterior_from_features(state: GPState, fq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``mu = k(x)^T (K + s^2 I)^-1 y`` and ``var = k(x, x) - k(x)^T (K + s^2 I)^-1 k(x)``."""
    kern = state.kernel
    prior = np.full(fq.shape[0], kern.signal_variance)
    if state.n == 0:
        return np.zeros(fq.shape[0]) + state.y_mean, prior * state.y_std**2
    Ks = kernel_matrix(kern, state.features, fq)
    mu = Ks.T @ state.alpha
    v = solve_triangular(state.chol, Ks, lower=True)
    var = prior - np.sum(v * v, axis=0)
    var = np.maximum(var, 0.0)
    return mu * state.y_std + state.y_mean, var * state.y_std**2


def log_marginal_likelihood(state: GPState) -> float:
    """``-1/2 y^T (K + s^2 I)^-1 y - 1/2 log det(K + s^2 I) - T/2 log 2 pi`` on the fitted (standardized) targets."""
    if state.n == 0:
        return 0.0
    z = (state.outputs - state.y_mean) / state.y_std
    return float(-0.5 * z @ state.alpha - np.sum(np.log(np.diag(state.chol))) - 0.5 * state.n * np.log(2 * np.pi))


def select_lengthscale(
    inputs, outputs, kernel: KernelSpec, noise_variance: float, normalize_y: bool, grid=DEFAULT_LENGTHSCALES, features=None
) -> GPState:
    """Refit at every lengthscale in ``grid`` and keep the highest log marginal likelihood."""
    F = kernel.features(inputs) if features is None else features
    best, best_lml = None, -np.inf
    for l in grid:
        try:
            st = gp_fit(inputs, outputs, kernel.with_lengthscale(l), noise_variance, normalize_y, features=F)
        except GPFitError:
            continue
        lml = log_marginal_likelihood(st)
        if lml > best_lml:
            best, best_lml = st, lml
    if best is None:
        raise GPFitError("no lengthscale in the grid gave a usable fit")
    return best
