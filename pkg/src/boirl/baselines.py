"""Bayesian IRL baseline: random-walk Metropolis-Hastings over the theta box."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .bo import BOTrace, NLLObjective, RunAborted
from .envs import Box, EnvironmentSpec
from .mdp import Trajectory


@dataclass
class BIRLConfig:
    """``step_size`` and ``burn_in`` default to 5% of each bound width and 10% of ``n_samples``."""

    n_samples: int = 1000
    step_size: float | Sequence[float] | None = None
    inverse_temperature: float = 1.0
    burn_in: int | None = None
    seed: int = 0
    bounds: Box | None = None

    def __post_init__(self):
        if self.burn_in is None:
            self.burn_in = self.n_samples // 10
        if not self.n_samples > self.burn_in >= 0:
            raise ValueError("need n_samples > burn_in >= 0")
        if self.inverse_temperature <= 0:
            raise ValueError("inverse temperature must be positive")

    def steps(self, bounds: Box) -> np.ndarray:
        if self.step_size is None:
            return 0.05 * bounds.width
        step = np.broadcast_to(np.asarray(self.step_size, dtype=float), bounds.lower.shape).copy()
        if np.any(step[bounds.free] <= 0):
            raise ValueError("step sizes must be positive")
        step[~bounds.free] = 0.0
        return step


@dataclass
class BIRLResult:
    """``chain`` holds the state after every step; ``trace`` holds every objective evaluation."""

    chain: np.ndarray
    chain_nll: np.ndarray
    accepted: np.ndarray
    burn_in: int
    trace: BOTrace = field(repr=False)

    @property
    def samples(self) -> np.ndarray:
        return self.chain[self.burn_in :]

    @property
    def sample_nll(self) -> np.ndarray:
        return self.chain_nll[self.burn_in :]

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted[1:])) if self.accepted.size > 1 else 1.0

    @property
    def best_theta(self) -> np.ndarray:
        return self.trace.best.best_theta

    def to_csv(self, path) -> None:
        d = self.chain.shape[1]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["idx"] + [f"theta_{i}" for i in range(d)] + ["nll", "accepted"])
            for i in range(self.burn_in, len(self.chain)):
                wr.writerow([i] + [repr(float(x)) for x in self.chain[i]] + [repr(float(self.chain_nll[i])), int(self.accepted[i])])


def run_birl(
    env: EnvironmentSpec | None,
    demos: Sequence[Trajectory],
    config: BIRLConfig,
    objective: Callable | None = None,
    init=None,
) -> BIRLResult:
    """Metropolis-Hastings with a uniform prior on the box and likelihood ``exp(-alpha * NLL)``.

    Gaussian steps are folded back into the box by reflection, which keeps
    the proposal symmetric. The chain has ``n_samples`` states including the
    uniformly drawn start; each state after the first costs one evaluation.
    """
    bounds = config.bounds if config.bounds is not None else env.bounds
    if objective is None:
        objective = NLLObjective(env, demos)
    rng = np.random.default_rng(config.seed)
    step = config.steps(bounds)
    alpha = config.inverse_temperature
    n, d = config.n_samples, bounds.dim
    chain = np.empty((n, d))
    chain_nll = np.empty(n)
    accepted = np.zeros(n, dtype=bool)
    trace = BOTrace()

    def evaluate(theta, phase):
        t0 = time.perf_counter()
        try:
            value = float(objective(theta))
        except Exception as exc:
            raise RunAborted(f"objective failed at theta={np.asarray(theta).tolist()}: {exc}", trace) from exc
        trace.add(theta, value, 1e3 * (time.perf_counter() - t0), phase)
        return value

    cur = bounds.sample(rng, 1)[0] if init is None else bounds.clip(np.asarray(init, dtype=float))
    f_cur = evaluate(cur, "init")
    chain[0], chain_nll[0], accepted[0] = cur, f_cur, True
    for i in range(1, n):
        prop = bounds.reflect(cur + step * rng.standard_normal(d))
        f_prop = evaluate(prop, "mcmc")
        if np.log(rng.random()) < -alpha * (f_prop - f_cur):
            cur, f_cur = prop, f_prop
            accepted[i] = True
        chain[i], chain_nll[i] = cur, f_cur
    return BIRLResult(chain, chain_nll, accepted, config.burn_in, trace)
