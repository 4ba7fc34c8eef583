"""Policy-quality metrics: expected sum of ground-truth rewards and iterations to reach the expert."""
from __future__ import annotations

import numpy as np

from .envs import EnvironmentSpec, eval_reward
from .mdp import SoftPolicy, as_rng, sample_trajectories, soft_value_iteration


class MissingGroundTruthError(ValueError):
    pass


def _truth(env: EnvironmentSpec, ground_truth):
    gt = env.ground_truth if ground_truth is None else ground_truth
    if gt is None:
        raise MissingGroundTruthError(f"{env.kind} environment has no ground-truth reward")
    return gt


def _policy(theta, env: EnvironmentSpec) -> SoftPolicy:
    if isinstance(theta, SoftPolicy):
        return theta
    return soft_value_iteration(env.mdp, eval_reward(theta, env))


def esor(theta, env: EnvironmentSpec, ground_truth=None, n_rollouts: int = 500, horizon: int | None = None, rng=0) -> float:
    """Monte-Carlo mean of the discounted ground-truth return under the soft policy of ``theta``.

    Rollouts start from the environment's start distribution and run for
    ``horizon`` steps (``env.horizon`` by default).
    """
    reward = eval_reward(_truth(env, ground_truth), env)
    horizon = env.horizon if horizon is None else horizon
    rng = as_rng(rng)
    mdp = env.mdp
    starts = rng.choice(mdp.start_states, size=n_rollouts, p=mdp.start_weights)
    trajs = sample_trajectories(mdp, _policy(theta, env), starts, horizon, rng)
    S = np.stack([t.states for t in trajs])
    A = np.stack([t.actions for t in trajs])
    S2 = np.stack([t.next_states for t in trajs])
    disc = mdp.discount ** np.arange(horizon)
    return float(np.mean(reward[S, A, S2] @ disc))


def esor_exact(theta, env: EnvironmentSpec, ground_truth=None, horizon: int | None = None) -> float:
    """The same expectation as :func:`esor`, computed by propagating the state distribution."""
    mdp = env.mdp
    r_sa = mdp.expected_reward(eval_reward(_truth(env, ground_truth), env))
    pi = _policy(theta, env).probs
    horizon = env.horizon if horizon is None else horizon
    r_pi = np.sum(pi * r_sa, axis=1)
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    d = mdp.start_distribution
    total = 0.0
    for t in range(horizon):
        total += mdp.discount**t * float(d @ r_pi)
        d = d @ P_pi
    return total


def reaches_expert(value: float, expert_value: float, tolerance_fraction: float = 0.02) -> bool:
    """``value >= expert - tol * |expert|``; equal to ``(1 - tol) * expert`` for positive expert returns."""
    return value >= expert_value - tolerance_fraction * abs(expert_value)


def iterations_to_expert(trace, env: EnvironmentSpec, expert_esor: float, tolerance_fraction: float = 0.02, esor_fn=None):
    """First 1-based evaluation index whose best-so-far theta reaches the expert ESOR, else ``None``.

    ``esor_fn(theta, env)`` defaults to :func:`esor_exact`; it is called once
    per distinct best-so-far theta.
    """
    esor_fn = esor_exact if esor_fn is None else esor_fn
    if len(trace) == 0:
        raise ValueError("empty trace")
    last_key, last_ok = None, False
    for rec in trace.records:
        key = np.asarray(rec.best_theta, dtype=float).tobytes()
        if key != last_key:
            last_key = key
            last_ok = reaches_expert(esor_fn(rec.best_theta, env), expert_esor, tolerance_fraction)
        if last_ok:
            return rec.iteration
    return None
