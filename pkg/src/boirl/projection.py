"""The rho-projection of reward parameters.

Each expert trajectory ``tau`` is paired with ``M`` uniform-policy rollouts
``F(tau)`` sharing its start state and length. For a reward ``R_theta``,

    rho_tau(theta) = exp(R(tau)) / (exp(R(tau)) + sum_{tau' in F(tau)} exp(R(tau')))

with ``R(.)`` the discounted trajectory return. Stacking ``rho`` over ``K``
experts gives a point in ``(0, 1)^K`` in which policy-invariant rewards
coincide.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .envs import EnvironmentSpec, eval_reward
from .mdp import TabularMDP, Trajectory, as_rng, sample_trajectories, traj_reward

_RHO_MAX = np.nextafter(1.0, 0.0)
_RHO_MIN = np.finfo(float).tiny


@dataclass(frozen=True, eq=False)
class ProjectionBasis:
    experts: tuple[Trajectory, ...]
    rollouts: tuple[tuple[Trajectory, ...], ...]
    gamma: float

    def __post_init__(self):
        experts = tuple(self.experts)
        rollouts = tuple(tuple(r) for r in self.rollouts)
        if len(experts) < 1 or len(experts) != len(rollouts):
            raise ValueError("a basis needs K >= 1 experts, each with its rollout set")
        for tau, fam in zip(experts, rollouts):
            if len(fam) < 1:
                raise ValueError("each expert needs M >= 1 rollouts")
            for other in fam:
                if other.start != tau.start or len(other) != len(tau):
                    raise ValueError("rollouts must share the expert's start state and length")
        object.__setattr__(self, "experts", experts)
        object.__setattr__(self, "rollouts", rollouts)

    @property
    def K(self) -> int:
        return len(self.experts)

    @property
    def M(self) -> int:
        return len(self.rollouts[0])

    def entries(self):
        return list(zip(self.experts, self.rollouts))

    def save(self, path) -> None:
        """JSON-lines: a header line, then one trajectory record per line grouped by entry."""
        lines = [json.dumps({"gamma": self.gamma, "K": self.K})]
        for k, (tau, fam) in enumerate(self.entries()):
            lines.append(json.dumps({"entry": k, "role": "expert", **tau.to_dict()}, separators=(",", ":")))
            for t in fam:
                lines.append(json.dumps({"entry": k, "role": "rollout", **t.to_dict()}, separators=(",", ":")))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> ProjectionBasis:
        lines = [json.loads(x) for x in Path(path).read_text().splitlines() if x.strip()]
        head, records = lines[0], lines[1:]
        experts: dict[int, Trajectory] = {}
        rollouts: dict[int, list[Trajectory]] = {}
        for rec in records:
            k = rec["entry"]
            if rec["role"] == "expert":
                experts[k] = Trajectory.from_dict(rec)
            else:
                rollouts.setdefault(k, []).append(Trajectory.from_dict(rec))
        keys = sorted(experts)
        if keys != list(range(head["K"])):
            raise ValueError("basis file is missing expert entries")
        return cls(tuple(experts[k] for k in keys), tuple(tuple(rollouts.get(k, [])) for k in keys), head["gamma"])


def generate_basis(demos: Sequence[Trajectory], mdp: TabularMDP, K: int, M: int, seed=0) -> ProjectionBasis:
    """Pick ``K`` demos without replacement and roll out ``M`` uniform-policy trajectories for each."""
    if K < 1 or M < 1:
        raise ValueError("K and M must be positive")
    if K > len(demos):
        raise ValueError(f"K={K} exceeds the {len(demos)} available demonstrations")
    rng = as_rng(seed)
    picks = rng.choice(len(demos), size=K, replace=False)
    experts, rollouts = [], []
    for k in picks:
        tau = demos[int(k)]
        experts.append(tau)
        rollouts.append(tuple(sample_trajectories(mdp, None, np.full(M, tau.start), len(tau), rng)))
    return ProjectionBasis(tuple(experts), tuple(rollouts), mdp.discount)


def log_odds_from_returns(expert_return, rollout_returns) -> np.ndarray:
    """``log(rho / (1 - rho)) = -logsumexp_j(R(tau'_j) - R(tau))``, finite even where rho rounds to 0 or 1."""
    expert_return = np.asarray(expert_return, dtype=float)
    diff = np.asarray(rollout_returns, dtype=float) - expert_return[..., None]
    top = np.max(diff, axis=-1)
    return -(top + np.log(np.sum(np.exp(diff - top[..., None]), axis=-1)))


def rho_from_returns(expert_return, rollout_returns) -> np.ndarray:
    """Softmax weight of the expert return against its rollouts, in log space.

    ``expert_return`` has shape ``(...)`` and ``rollout_returns`` shape ``(..., M)``.
    """
    expert_return = np.asarray(expert_return, dtype=float)
    diff = np.asarray(rollout_returns, dtype=float) - expert_return[..., None]
    top = np.maximum(np.max(diff, axis=-1), 0.0)
    log_rho = -(top + np.log(np.exp(-top) + np.sum(np.exp(diff - top[..., None]), axis=-1)))
    return np.clip(np.exp(log_rho), _RHO_MIN, _RHO_MAX)


def rho_table(reward: np.ndarray, entry: tuple[Trajectory, Sequence[Trajectory]], gamma: float) -> float:
    """rho of one basis entry for an explicit reward table ``R[s, a, s']``."""
    tau, fam = entry
    ret = traj_reward(tau, reward, gamma)
    others = np.array([traj_reward(t, reward, gamma) for t in fam])
    return float(rho_from_returns(ret, others))


def rho_vector_table(reward: np.ndarray, basis: ProjectionBasis) -> np.ndarray:
    return np.array([rho_table(reward, e, basis.gamma) for e in basis.entries()])


class Projector:
    """Maps batches of theta to rho-vectors for a fixed basis and environment.

    Trajectory statistics of the reward family are computed once, so a batch
    projection costs one matrix product.
    """

    SCALE_SAMPLES = 512

    def __init__(self, basis: ProjectionBasis, env: EnvironmentSpec):
        self.basis = basis
        self.env = env
        family, S = env.family, env.mdp.n_states
        expert = family.trajectory_stats(basis.experts, basis.gamma, S)
        rollouts = [t for fam in basis.rollouts for t in fam]
        self._sizes = [len(fam) for fam in basis.rollouts]
        # returns are linear in these statistics, so R(tau') - R(tau) is formed
        # directly instead of by cancelling two large returns
        self._diff_stats = family.trajectory_stats(rollouts, basis.gamma, S) - np.repeat(expert, self._sizes, axis=0)
        self._scale: float | None = None

    @property
    def K(self) -> int:
        return self.basis.K

    def _apply(self, fn, thetas) -> np.ndarray:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        diffs = self.env.family.returns(thetas, self._diff_stats)
        zero = np.zeros((thetas.shape[0], self.K))
        if len(set(self._sizes)) == 1:
            return fn(zero, diffs.reshape(thetas.shape[0], self.K, self._sizes[0]))
        out = np.empty((thetas.shape[0], self.K))
        for k, part in enumerate(np.split(diffs, np.cumsum(self._sizes)[:-1], axis=1)):
            out[:, k] = fn(zero[:, k], part)
        return out

    def __call__(self, thetas) -> np.ndarray:
        """rho-vectors, shape ``(n, K)``."""
        return self._apply(rho_from_returns, thetas)

    def log_odds(self, thetas) -> np.ndarray:
        """``logit(rho)`` per basis entry, shape ``(n, K)``."""
        return self._apply(log_odds_from_returns, thetas)

    @property
    def log_odds_scale(self) -> float:
        """Standard deviation of the log-odds over a fixed uniform sample of the theta box (1 if degenerate)."""
        if self._scale is None:
            sample = self.env.bounds.sample(np.random.default_rng(0), self.SCALE_SAMPLES)
            sd = float(np.std(self.log_odds(sample)))
            self._scale = sd if np.isfinite(sd) and sd > 0 else 1.0
        return self._scale


def rho(theta, entry: tuple[Trajectory, Sequence[Trajectory]], env: EnvironmentSpec) -> float:
    return rho_table(eval_reward(theta, env), entry, env.mdp.discount)


def rho_vector(theta, basis: ProjectionBasis, env: EnvironmentSpec) -> np.ndarray:
    return Projector(basis, env)(np.asarray(getattr(theta, "theta", theta), dtype=float))[0]
