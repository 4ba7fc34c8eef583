"""Tabular MDPs, Boltzmann (soft) value iteration, rollouts and the demonstration NLL."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import log_softmax, softmax


class ConvergenceError(RuntimeError):
    """Soft value iteration did not reach the requested tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class ImpossibleDemonstrationError(ValueError):
    """A demonstration step has zero probability under the model."""


def as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite MDP without a reward: ``transition[s, a, s'] = P(s'|s, a)``.

    ``start_weights`` is a distribution over ``start_states``; when omitted the
    start states are weighted uniformly.
    """

    transition: np.ndarray
    discount: float
    start_states: np.ndarray
    start_weights: np.ndarray | None = None
    _sparse: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] < 1 or P.shape[1] < 1:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        if np.any(P < 0) or not np.all(np.isfinite(P)):
            raise ValueError("transition probabilities must be finite and non-negative")
        if np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("transition rows must sum to 1")
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")
        starts = np.atleast_1d(np.asarray(self.start_states, dtype=np.int64))
        if starts.size == 0 or np.any(starts < 0) or np.any(starts >= P.shape[0]):
            raise ValueError("start_states must be a non-empty set of valid state indices")
        if self.start_weights is None:
            weights = np.full(starts.size, 1.0 / starts.size)
        else:
            weights = np.asarray(self.start_weights, dtype=float)
            if weights.shape != starts.shape or np.any(weights < 0):
                raise ValueError("start_weights must be non-negative and match start_states")
            if abs(weights.sum() - 1.0) > 1e-12:
                raise ValueError("start_weights must sum to 1")
        P.setflags(write=False)
        starts.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "discount", float(self.discount))
        object.__setattr__(self, "start_states", starts)
        object.__setattr__(self, "start_weights", weights)
        S, A, _ = P.shape
        object.__setattr__(self, "_sparse", sp.csr_matrix(P.reshape(S * A, S)))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def start_distribution(self) -> np.ndarray:
        d = np.zeros(self.n_states)
        np.add.at(d, self.start_states, self.start_weights)
        return d

    def expected_reward(self, reward: np.ndarray) -> np.ndarray:
        """``r(s, a) = sum_s' P(s'|s, a) R(s, a, s')`` as an (S, A) array."""
        S, A = self.n_states, self.n_actions
        P = self._sparse
        rows = np.repeat(np.arange(S * A), np.diff(P.indptr))
        flat = np.asarray(reward, dtype=float).reshape(S * A, S)
        r = np.bincount(rows, weights=P.data * flat[rows, P.indices], minlength=S * A)
        return r.reshape(S, A)

    def propagate(self, values: np.ndarray) -> np.ndarray:
        """``E[values(s') | s, a]`` as an (S, A) array."""
        return (self._sparse @ values).reshape(self.n_states, self.n_actions)


@dataclass(frozen=True, eq=False)
class RewardParams:
    """A reward parameter vector tagged with the family that interprets it."""

    theta: np.ndarray
    family: str
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "theta", theta)
        if (self.lower is None) != (self.upper is None):
            raise ValueError("lower and upper bounds must be given together")
        if self.lower is not None:
            lo = np.asarray(self.lower, dtype=float)
            hi = np.asarray(self.upper, dtype=float)
            if lo.shape != theta.shape or hi.shape != theta.shape:
                raise ValueError("bounds must match theta's dimension")
            if np.any(theta < lo) or np.any(theta > hi):
                raise ValueError(f"theta {theta} lies outside its bounds")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.theta.size


@dataclass(frozen=True, eq=False)
class Trajectory:
    """``L`` (state, action) steps plus the state reached after the last action."""

    states: np.ndarray
    actions: np.ndarray
    terminal: int

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int64).reshape(-1)
        actions = np.asarray(self.actions, dtype=np.int64).reshape(-1)
        if states.size < 1 or states.size != actions.size:
            raise ValueError("a trajectory needs L >= 1 states and exactly L actions")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "terminal", int(self.terminal))

    def __len__(self) -> int:
        return self.states.size

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.terminal == other.terminal
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
        )

    @property
    def start(self) -> int:
        return int(self.states[0])

    @property
    def steps(self) -> list[tuple[int, int]]:
        return [(int(s), int(a)) for s, a in zip(self.states, self.actions)]

    @property
    def next_states(self) -> np.ndarray:
        """``s_1 .. s_L``."""
        return np.append(self.states[1:], self.terminal)

    def check(self, mdp: TabularMDP) -> None:
        if np.any(self.states >= mdp.n_states) or self.terminal >= mdp.n_states:
            raise ValueError("trajectory visits a state outside the MDP")
        if np.any(self.actions >= mdp.n_actions):
            raise ValueError("trajectory uses an action outside the MDP")
        p = mdp.transition[self.states, self.actions, self.next_states]
        if np.any(p <= 0):
            t = int(np.argmax(p <= 0))
            raise ImpossibleDemonstrationError(f"transition at step {t} has zero probability")

    def to_dict(self) -> dict:
        return {"start": self.start, "steps": [list(s) for s in self.steps], "terminal": self.terminal}

    @classmethod
    def from_dict(cls, record: dict) -> Trajectory:
        steps = np.asarray(record["steps"], dtype=np.int64).reshape(-1, 2)
        if "start" in record and len(steps) and int(record["start"]) != steps[0, 0]:
            raise ValueError("trajectory record start does not match its first step")
        return cls(steps[:, 0], steps[:, 1], record["terminal"])


def write_trajectories(path, trajectories: Iterable[Trajectory]) -> None:
    lines = [json.dumps(t.to_dict(), separators=(",", ":")) for t in trajectories]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_trajectories(path) -> list[Trajectory]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(Trajectory.from_dict(json.loads(line)))
    return out


@dataclass(frozen=True, eq=False)
class SoftPolicy:
    """Boltzmann policy ``probs = softmax(q_values / temperature)`` row-wise."""

    q_values: np.ndarray
    temperature: float = 1.0
    probs: np.ndarray = field(init=False)
    log_probs: np.ndarray = field(init=False)
    residual: float = field(default=0.0, compare=False)
    iterations: int = field(default=0, compare=False)

    def __post_init__(self):
        q = np.asarray(self.q_values, dtype=float)
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        logp = log_softmax(q / self.temperature, axis=1)
        object.__setattr__(self, "q_values", q)
        object.__setattr__(self, "log_probs", logp)
        object.__setattr__(self, "probs", np.exp(logp))

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> SoftPolicy:
        return cls(np.zeros((n_states, n_actions)))


def boltzmann_backup(mdp: TabularMDP, r_sa: np.ndarray, q: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """One application of the Bellman update with the max replaced by a Boltzmann average."""
    w = np.exp((q - q.max(axis=1, keepdims=True)) / temperature)
    v = (w * q).sum(axis=1) / w.sum(axis=1)
    return r_sa + mdp.discount * mdp.propagate(v)


_STALL_SWEEPS = 50
_NEWTON_BELOW = 1e-5
_NEWTON_EVERY = 50


def _backup_increment(mdp: TabularMDP, r_sa: np.ndarray, q: np.ndarray, temperature: float):
    inc = boltzmann_backup(mdp, r_sa, q, temperature) - q
    hi, lo = float(inc.max()), float(inc.min())
    return inc, 0.5 * (hi + lo), 0.5 * (hi - lo)


def _newton_step(mdp: TabularMDP, q: np.ndarray, inc: np.ndarray, temperature: float) -> np.ndarray:
    """One Newton step on ``F(Q) = backup(Q) - Q``.

    With ``D[s, a] = dV(s)/dQ(s, a) = pi(a|s) (1 + (Q(s, a) - V(s)) / T)`` the
    step ``(I - gamma P D)^-1 F`` reduces to an S x S solve for ``u = D dQ``.
    """
    pi = softmax(q / temperature, axis=1)
    v = np.sum(pi * q, axis=1)
    d = pi * (1.0 + (q - v[:, None]) / temperature)
    DP = np.einsum("sa,sat->st", d, mdp.transition)
    u = np.linalg.solve(np.eye(mdp.n_states) - mdp.discount * DP, np.sum(d * inc, axis=1))
    return q + inc + mdp.discount * mdp.propagate(u)


def soft_value_iteration(
    mdp: TabularMDP,
    reward: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    temperature: float = 1.0,
) -> SoftPolicy:
    """Fixed point of ``Q(s,a) = E_s'[R(s,a,s') + gamma * sum_a' pi(s',a') Q(s',a')]``.

    The returned ``Q`` satisfies ``max|backup(Q) - Q| <= tol``.

    The backup commutes with adding a constant to every entry of ``Q``
    (``backup(Q + c) = backup(Q) + gamma * c``), so iteration runs on ``Q``
    modulo constants: each sweep removes the midrange ``g`` of the increment
    and the fixed point is recovered as ``Q = q + g / (1 - gamma)``. The mean
    expected reward is taken out before iterating and added back the same
    way, so a constant reward offset never reaches the iterates.

    Sweeps contract slowly when ``gamma`` is close to 1 and the chain mixes
    poorly. Once the residual is below 1e-5 a backtracking Newton step is
    tried every 50 sweeps and repeated while it lowers the residual.

    The Boltzmann backup is not a contraction in general; once the residual
    has gone 50 sweeps without reaching a new minimum the update is damped by 0.5.
    ``max_iter`` counts sweeps and Newton steps together.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    reward = np.asarray(reward, dtype=float)
    S, A = mdp.n_states, mdp.n_actions
    if reward.shape != (S, A, S):
        raise ValueError(f"reward table must have shape {(S, A, S)}, got {reward.shape}")
    if not np.all(np.isfinite(reward)):
        raise FloatingPointError("reward table contains non-finite entries")
    r_sa = mdp.expected_reward(reward)
    offset = float(np.mean(r_sa))
    r_sa = r_sa - offset
    q = r_sa.copy()
    inc, g, residual = _backup_increment(mdp, r_sa, q, temperature)
    damped = newton = False
    best, stalled = np.inf, 0
    for it in range(max_iter):
        if not np.isfinite(residual):
            raise FloatingPointError(f"soft value iteration diverged at sweep {it}")
        if residual <= tol:
            return SoftPolicy(q + (g + offset) / (1.0 - mdp.discount), temperature, residual=residual, iterations=it)
        if residual < best:
            best, stalled = residual, 0
        else:
            stalled += 1
            damped = damped or stalled >= _STALL_SWEEPS
        if residual < _NEWTON_BELOW and (newton or it % _NEWTON_EVERY == 0):
            newton = False
            try:
                direction = _newton_step(mdp, q, inc, temperature) - q
            except np.linalg.LinAlgError:
                direction = None
            for step in (1.0, 0.5, 0.25, 0.125) if direction is not None else ():
                cand = q + step * direction
                cand -= np.mean(cand)
                c_inc, c_g, c_res = _backup_increment(mdp, r_sa, cand, temperature)
                if c_res < residual:
                    q, inc, g, residual, newton = cand, c_inc, c_g, c_res, True
                    break
            if newton:
                continue
        q = q + (0.5 if damped else 1.0) * (inc - g)
        inc, g, residual = _backup_increment(mdp, r_sa, q, temperature)
    raise ConvergenceError(
        f"soft value iteration did not converge in {max_iter} sweeps (residual {residual:.3e})", residual
    )


def _stack_steps(demos: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(s_t, a_t, s_{t+1}) for t = 0 .. L-2 of every demo, concatenated."""
    s, a, s2 = [], [], []
    for tau in demos:
        s.append(tau.states[:-1])
        a.append(tau.actions[:-1])
        s2.append(tau.states[1:])
    if not s:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    return np.concatenate(s), np.concatenate(a), np.concatenate(s2)


def nll(
    demos: Sequence[Trajectory],
    policy: SoftPolicy,
    mdp: TabularMDP,
    include_transition_terms: bool = True,
) -> float:
    """Negative log-likelihood of the demonstrations under ``policy``.

    Sums ``log pi(s_t, a_t) + log P(s_{t+1} | s_t, a_t)`` over ``t = 0 .. L-2``
    of every trajectory, so the final action of each demo is not scored.
    """
    s, a, s2 = _stack_steps(demos)
    if s.size == 0:
        return 0.0
    logp = policy.log_probs[s, a]
    if np.any(~np.isfinite(logp)):
        raise ImpossibleDemonstrationError("a demonstrated action has zero probability under the policy")
    total = float(np.sum(logp))
    if include_transition_terms:
        p = mdp.transition[s, a, s2]
        if np.any(p <= 0):
            raise ImpossibleDemonstrationError("a demonstrated transition has zero probability")
        total += float(np.sum(np.log(p)))
    return -total


def sample_trajectories(
    mdp: TabularMDP,
    policy: SoftPolicy | None,
    starts: Sequence[int] | np.ndarray,
    length: int,
    rng=None,
) -> list[Trajectory]:
    """Roll out ``policy`` (uniform when ``None``) from each start for ``length`` steps."""
    if length < 1:
        raise ValueError("trajectory length must be >= 1")
    rng = as_rng(rng)
    starts = np.atleast_1d(np.asarray(starts, dtype=np.int64))
    if np.any(starts < 0) or np.any(starts >= mdp.n_states):
        raise ValueError("invalid start state")
    n = starts.size
    states = np.empty((n, length + 1), dtype=np.int64)
    actions = np.empty((n, length), dtype=np.int64)
    states[:, 0] = starts
    P_cdf = np.cumsum(mdp.transition, axis=2)
    pi_cdf = None if policy is None else np.cumsum(policy.probs, axis=1)
    for t in range(length):
        cur = states[:, t]
        if pi_cdf is None:
            act = rng.integers(0, mdp.n_actions, size=n)
        else:
            u = rng.random(n)
            act = _inverse_cdf(pi_cdf[cur], u)
        u = rng.random(n)
        actions[:, t] = act
        states[:, t + 1] = _inverse_cdf(P_cdf[cur, act], u)
    return [Trajectory(states[i, :-1], actions[i], states[i, -1]) for i in range(n)]


def _inverse_cdf(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = np.sum(cdf_rows < (u * cdf_rows[:, -1])[:, None], axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def sample_trajectory(mdp: TabularMDP, policy: SoftPolicy | None, start: int, length: int, rng=None) -> Trajectory:
    return sample_trajectories(mdp, policy, [start], length, rng)[0]


def traj_reward(traj: Trajectory, reward: np.ndarray, gamma: float) -> float:
    """Discounted return ``sum_t gamma^t R(s_t, a_t, s_{t+1})`` over all L steps."""
    r = np.asarray(reward)[traj.states, traj.actions, traj.next_states]
    return float(np.sum(gamma ** np.arange(len(traj)) * r))
