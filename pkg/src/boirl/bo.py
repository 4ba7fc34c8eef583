"""Bayesian optimization of the demonstration NLL over a bounded reward-parameter box."""
from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import qmc

from .envs import Box, EnvironmentSpec, eval_reward
from .gp import DEFAULT_LENGTHSCALES, GPState, KernelSpec, gp_fit, posterior_from_features, select_lengthscale
from .mdp import SoftPolicy, Trajectory, nll, soft_value_iteration
from .projection import ProjectionBasis, Projector, generate_basis

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NLLObjective:
    """``theta -> NLL(demos | soft-optimal policy of R_theta)`` with memoization.

    Every distinct theta costs one soft value iteration; repeated queries
    (e.g. a shared pre-scan grid) are served from the cache.
    """

    def __init__(self, env: EnvironmentSpec, demos: Sequence[Trajectory], include_transition_terms: bool = True, tol: float = 1e-8):
        self.env = env
        self.demos = list(demos)
        self.include_transition_terms = include_transition_terms
        self.tol = tol
        self._policies: dict[bytes, SoftPolicy] = {}
        self._values: dict[bytes, float] = {}
        self.n_solves = 0

    def policy(self, theta) -> SoftPolicy:
        theta = np.asarray(theta, dtype=float)
        key = theta.tobytes()
        if key not in self._policies:
            self.n_solves += 1
            self._policies[key] = soft_value_iteration(self.env.mdp, eval_reward(theta, self.env), tol=self.tol)
        return self._policies[key]

    def __call__(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        key = theta.tobytes()
        if key not in self._values:
            self._values[key] = nll(self.demos, self.policy(theta), self.env.mdp, self.include_transition_terms)
        return self._values[key]


@dataclass
class BOConfig:
    budget: int = 100
    n_init: int = 5
    kernel: str = "rho-rbf"
    rho_space: str = "log-odds"
    lengthscale: float = 1.0
    signal_variance: float = 1.0
    noise_variance: float = 1e-4
    normalize_y: bool = True
    refit_every: int = 5
    lengthscale_grid: Sequence[float] = tuple(DEFAULT_LENGTHSCALES)
    acquisition: str = "ei"
    candidate_count: int = 2048
    refine_evals: int = 100
    init_strategy: str = "adversarial"
    prescan_resolution: int = 5
    K: int = 10
    M: int = 5
    seed: int = 0
    bounds: Box | None = None

    def __post_init__(self):
        if self.budget < 0 or self.n_init < 1 or self.candidate_count < 1:
            raise ValueError("need budget >= 0, n_init >= 1 and candidate_count >= 1")
        if self.acquisition != "ei":
            raise ValueError("only expected improvement is supported")
        if self.init_strategy not in ("random", "adversarial"):
            raise ValueError(f"unknown init strategy {self.init_strategy!r}")


@dataclass
class TraceRecord:
    iteration: int
    theta: np.ndarray
    nll: float
    wall_ms: float
    best_nll: float
    best_theta: np.ndarray
    phase: str = "bo"


@dataclass
class BOTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def add(self, theta, value: float, wall_ms: float, phase: str) -> TraceRecord:
        theta = np.array(theta, dtype=float)
        if self.records and self.records[-1].best_nll <= value:
            best_nll, best_theta = self.records[-1].best_nll, self.records[-1].best_theta
        else:
            best_nll, best_theta = value, theta
        rec = TraceRecord(len(self.records) + 1, theta, float(value), wall_ms, best_nll, best_theta, phase)
        self.records.append(rec)
        return rec

    @property
    def thetas(self) -> np.ndarray:
        return np.array([r.theta for r in self.records])

    @property
    def values(self) -> np.ndarray:
        return np.array([r.nll for r in self.records])

    @property
    def best(self) -> TraceRecord:
        return self.records[-1]

    def to_csv(self, path, record_timing: bool = True) -> None:
        d = self.records[0].theta.size if self.records else 0
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["iter"] + [f"theta_{i}" for i in range(d)] + ["nll", "best_nll", "wall_ms"])
            for r in self.records:
                wall = f"{r.wall_ms:.3f}" if record_timing else "0"
                wr.writerow([r.iteration] + [repr(float(x)) for x in r.theta] + [repr(r.nll), repr(r.best_nll), wall])


@dataclass
class BOResult:
    trace: BOTrace
    gp: GPState
    basis: ProjectionBasis | None
    kernel: KernelSpec

    @property
    def best_theta(self) -> np.ndarray:
        return self.trace.best.best_theta

    @property
    def best_nll(self) -> float:
        return self.trace.best.best_nll

    def summary(self) -> dict:
        return {"best_theta": self.best_theta.tolist(), "best_nll": self.best_nll, "evaluations": len(self.trace)}


class RunAborted(RuntimeError):
    """An objective evaluation failed; ``trace`` holds everything evaluated before it."""

    def __init__(self, message: str, trace):
        super().__init__(message)
        self.trace = trace


def ei_from_moments(mu, var, f_best: float) -> np.ndarray:
    """Expected improvement below ``f_best`` of ``Y ~ N(mu, var)``; zero where ``var == 0``."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.sqrt(np.maximum(np.asarray(var, dtype=float), 0.0))
    out = np.zeros(np.broadcast(mu, sigma).shape)
    pos = sigma > 0
    z = (f_best - mu[pos]) / sigma[pos]
    out[pos] = sigma[pos] * (z * ndtr(z) + _INV_SQRT_2PI * np.exp(-0.5 * z * z))
    return np.maximum(out, 0.0)


def expected_improvement(state: GPState, query, f_best: float | None = None):
    """EI at theta ``query`` (one point or a batch). ``f_best`` defaults to the smallest observed NLL."""
    q = np.asarray(query, dtype=float)
    f_best = float(np.min(state.outputs)) if f_best is None else f_best
    mu, var = posterior_from_features(state, state.kernel.features(np.atleast_2d(q)))
    ei = ei_from_moments(mu, var, f_best)
    return float(ei[0]) if q.ndim == 1 else ei


def _sobol(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    sampler = qmc.Sobol(d, scramble=True, seed=rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return sampler.random(n)


def _pattern_search(f: Callable[[np.ndarray], float], x0: np.ndarray, f0: float, step: float, max_evals: int):
    """Compass search maximizing ``f`` on the unit cube; at most ``max_evals`` calls."""
    x, fx, evals = x0.copy(), f0, 0
    d = x.size
    while evals < max_evals and step > 1e-9:
        improved = False
        for i in range(d):
            for sign in (1.0, -1.0):
                if evals >= max_evals:
                    break
                y = x.copy()
                y[i] = min(max(y[i] + sign * step, 0.0), 1.0)
                if y[i] == x[i]:
                    continue
                fy = f(y)
                evals += 1
                if fy > fx:
                    x, fx, improved = y, fy, True
                    break
            if improved:
                break
        if not improved:
            step *= 0.5
    return x, fx


def propose_next(state: GPState, bounds: Box, rng, candidate_count: int = 2048, refine_evals: int = 100) -> np.ndarray:
    """Maximize EI over scrambled Sobol candidates in the box, then polish by compass search.

    When EI vanishes at every candidate the candidate with the largest
    posterior variance is returned (lowest index on ties).
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if bounds.n_free == 0:
        return bounds.lower.copy()
    f_best = float(np.min(state.outputs)) if state.n else 0.0
    U = _sobol(candidate_count, bounds.n_free, rng)
    cand = bounds.from_unit(U)
    mu, var = posterior_from_features(state, state.kernel.features(cand))
    ei = ei_from_moments(mu, var, f_best)
    i = int(np.argmax(ei))
    if ei[i] <= 0.0:
        return cand[int(np.argmax(var))]

    def score(u):
        th = bounds.from_unit(u)[None, :]
        m, v = posterior_from_features(state, state.kernel.features(th))
        return float(ei_from_moments(m, v, f_best)[0])

    step = 0.5 * candidate_count ** (-1.0 / bounds.n_free)
    u, _ = _pattern_search(score, U[i], float(ei[i]), step, refine_evals)
    return bounds.from_unit(u)


def prescan_grid(bounds: Box, resolution: int) -> np.ndarray:
    axes = [np.linspace(0.0, 1.0, resolution)] * bounds.n_free
    mesh = np.meshgrid(*axes, indexing="ij")
    U = np.stack([m.reshape(-1) for m in mesh], axis=1)
    return bounds.from_unit(U)


def init_points(objective: Callable, bounds: Box, config: BOConfig, rng) -> list[np.ndarray]:
    """Initial design: uniform in the box, or uniform draws kept only if their
    NLL reaches the top tercile of a coarse pre-scan grid."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if bounds.n_free == 0:
        return [bounds.lower.copy() for _ in range(config.n_init)]
    if config.init_strategy == "random":
        return list(bounds.sample(rng, config.n_init))
    grid = prescan_grid(bounds, config.prescan_resolution)
    values = np.array([objective(th) for th in grid])
    threshold = np.percentile(values, 200.0 / 3.0)
    kept: list[np.ndarray] = []
    for _ in range(200 * config.n_init):
        th = bounds.sample(rng, 1)[0]
        if objective(th) >= threshold:
            kept.append(th)
            if len(kept) == config.n_init:
                return kept
    top = grid[np.argsort(-values, kind="stable")]
    return kept + list(top[: config.n_init - len(kept)])


def make_kernel(config: BOConfig, bounds: Box, projector=None) -> KernelSpec:
    return KernelSpec(config.kernel, config.lengthscale, config.signal_variance, projector, bounds, config.rho_space)


def run_boirl(
    env: EnvironmentSpec | None,
    demos: Sequence[Trajectory],
    config: BOConfig,
    objective: Callable | None = None,
    basis: ProjectionBasis | None = None,
    init: Sequence[np.ndarray] | None = None,
) -> BOResult:
    """Run ``n_init`` initial evaluations followed by ``budget`` EI-guided ones.

    ``objective`` replaces the NLL (any callable of theta); ``basis`` reuses a
    frozen projection basis; ``init`` overrides the initial design.
    """
    bounds = config.bounds if config.bounds is not None else env.bounds
    if objective is None:
        objective = NLLObjective(env, demos)
    basis_seq, init_seq, acq_seq = np.random.SeedSequence(config.seed).spawn(3)
    projector = None
    if config.kernel == "rho-rbf":
        if basis is None:
            basis = generate_basis(demos, env.mdp, config.K, config.M, np.random.default_rng(basis_seq))
        projector = Projector(basis, env)
    kernel = make_kernel(config, bounds, projector)
    acq_rng = np.random.default_rng(acq_seq)
    trace = BOTrace()

    def evaluate(theta, phase):
        t0 = time.perf_counter()
        try:
            value = float(objective(theta))
        except Exception as exc:
            raise RunAborted(f"objective failed at theta={np.asarray(theta).tolist()}: {exc}", trace) from exc
        trace.add(theta, value, 1e3 * (time.perf_counter() - t0), phase)

    if init is None:
        init = init_points(objective, bounds, config, np.random.default_rng(init_seq))
    for theta in list(init)[: config.n_init]:
        evaluate(theta, "init")

    feats = kernel.features(trace.thetas)
    state = _fit(trace, kernel, config, feats, refit=True)
    for it in range(config.budget):
        theta = propose_next(state, bounds, acq_rng, config.candidate_count, config.refine_evals)
        theta = _avoid_duplicate(theta, trace.thetas, bounds, acq_rng)
        evaluate(theta, "bo")
        feats = np.vstack([feats, kernel.features(theta)])
        refit = config.refit_every > 0 and (it + 1) % config.refit_every == 0
        state = _fit(trace, state.kernel, config, feats, refit)
    return BOResult(trace, state, basis, state.kernel)


def _fit(trace: BOTrace, kernel: KernelSpec, config: BOConfig, feats: np.ndarray, refit: bool) -> GPState:
    X, y = trace.thetas, trace.values
    if refit and config.refit_every > 0:
        return select_lengthscale(X, y, kernel, config.noise_variance, config.normalize_y, config.lengthscale_grid, feats)
    return gp_fit(X, y, kernel, config.noise_variance, config.normalize_y, features=feats)


def _avoid_duplicate(theta: np.ndarray, seen: np.ndarray, bounds: Box, rng) -> np.ndarray:
    if seen.size == 0 or bounds.n_free == 0:
        return theta
    if np.min(np.max(np.abs(seen - theta), axis=1)) > 1e-9:
        return theta
    jitter = rng.uniform(-1e-3, 1e-3, size=theta.size) * bounds.width
    return bounds.reflect(theta + jitter)
