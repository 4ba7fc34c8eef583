import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boirl.envs import shape_reward
from boirl.mdp import (
    ConvergenceError,
    ImpossibleDemonstrationError,
    SoftPolicy,
    TabularMDP,
    Trajectory,
    boltzmann_backup,
    nll,
    read_trajectories,
    sample_trajectories,
    sample_trajectory,
    soft_value_iteration,
    traj_reward,
    write_trajectories,
)

from oracles import nll_loops, random_mdp, soft_vi_loops


def chain_mdp(n=5, gamma=0.9):
    """Deterministic single-action chain 0 -> 1 -> ... -> n-1 -> n-1."""
    P = np.zeros((n, 1, n))
    for s in range(n):
        P[s, 0, min(s + 1, n - 1)] = 1.0
    return TabularMDP(P, gamma, [0])


def two_state_mdp(gamma=0.9):
    # action 0 stays, action 1 switches
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = P[1, 0, 1] = 1.0
    P[0, 1, 1] = P[1, 1, 0] = 1.0
    return TabularMDP(P, gamma, [0, 1])


class TestTabularMDP:
    def test_rows_must_sum_to_one(self):
        P = np.full((2, 1, 2), 0.5)
        P[0, 0, 0] = 0.6
        with pytest.raises(ValueError, match="sum to 1"):
            TabularMDP(P, 0.9, [0])

    def test_negative_entries_rejected(self):
        P = np.array([[[1.5, -0.5]], [[0.0, 1.0]]])
        with pytest.raises(ValueError):
            TabularMDP(P, 0.9, [0])

    @pytest.mark.parametrize("gamma", [0.0, 1.0, -0.1, 1.5])
    def test_discount_open_interval(self, gamma):
        with pytest.raises(ValueError, match="discount"):
            TabularMDP(np.ones((1, 1, 1)), gamma, [0])

    def test_start_weights(self):
        with pytest.raises(ValueError):
            TabularMDP(np.ones((1, 1, 1)), 0.5, [], None)
        with pytest.raises(ValueError, match="sum to 1"):
            two = two_state_mdp()
            TabularMDP(two.transition, 0.9, [0, 1], [0.5, 0.6])
        m = TabularMDP(two_state_mdp().transition, 0.9, [0, 1, 1], [0.2, 0.3, 0.5])
        np.testing.assert_allclose(m.start_distribution, [0.2, 0.8])

    def test_immutable_transition(self):
        m = two_state_mdp()
        with pytest.raises(ValueError):
            m.transition[0, 0, 0] = 0.5

    def test_expected_reward_and_propagate(self):
        rng = np.random.default_rng(3)
        m = random_mdp(rng, 5, 3)
        R = rng.normal(size=(5, 3, 5))
        np.testing.assert_allclose(m.expected_reward(R), np.einsum("sat,sat->sa", m.transition, R), atol=1e-14)
        v = rng.normal(size=5)
        np.testing.assert_allclose(m.propagate(v), m.transition @ v, atol=1e-14)


class TestSoftPolicy:
    def test_rows_are_softmax(self):
        q = np.random.default_rng(0).normal(scale=30, size=(6, 4))
        pi = SoftPolicy(q, temperature=2.0)
        np.testing.assert_allclose(pi.probs.sum(1), 1.0, atol=1e-10)
        ref = np.exp(q / 2.0) / np.exp(q / 2.0).sum(1, keepdims=True)
        np.testing.assert_allclose(pi.probs, ref, atol=1e-10)
        np.testing.assert_allclose(np.exp(pi.log_probs), pi.probs, atol=1e-14)

    def test_log_probs_stable_for_large_gaps(self):
        pi = SoftPolicy(np.array([[0.0, 2000.0]]))
        assert np.isfinite(pi.log_probs).all()
        np.testing.assert_allclose(pi.log_probs[0, 0], -2000.0)

    def test_temperature_positive(self):
        with pytest.raises(ValueError):
            SoftPolicy(np.zeros((1, 2)), temperature=0.0)


class TestSoftValueIteration:
    def test_single_state_geometric_series(self):
        m = TabularMDP(np.ones((1, 1, 1)), 0.9, [0])
        pi = soft_value_iteration(m, np.full((1, 1, 1), 3.0), tol=1e-12)
        np.testing.assert_allclose(pi.q_values, [[30.0]], rtol=1e-12)
        np.testing.assert_allclose(pi.probs, [[1.0]])

    def test_two_state_matches_loop_oracle_from_several_starts(self):
        m = two_state_mdp()
        R = np.zeros((2, 2, 2))
        R[:, :, 1] = 1.0
        R[0, 1, 1] = 0.3
        pi = soft_value_iteration(m, R, tol=1e-13)
        for q0 in (np.zeros((2, 2)), np.full((2, 2), 50.0), np.array([[-20.0, 5.0], [7.0, -3.0]])):
            ref = soft_vi_loops(m.transition, R, m.discount, tol=1e-13, q0=q0)
            np.testing.assert_allclose(pi.q_values, ref, atol=1e-10)

    def test_random_mdps_match_loop_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            m = random_mdp(rng, 4, 3, gamma=0.8)
            R = rng.normal(scale=2.0, size=(4, 3, 4))
            ref = soft_vi_loops(m.transition, R, m.discount, tol=1e-13)
            np.testing.assert_allclose(soft_value_iteration(m, R, tol=1e-12).q_values, ref, atol=1e-9)

    def test_residual_by_recomputed_backup(self):
        rng = np.random.default_rng(5)
        m = random_mdp(rng, 12, 4, gamma=0.95)
        R = rng.normal(scale=5, size=(12, 4, 12))
        pi = soft_value_iteration(m, R, tol=1e-9)
        backup = boltzmann_backup(m, m.expected_reward(R), pi.q_values)
        assert np.max(np.abs(backup - pi.q_values)) <= 1e-9
        assert pi.residual <= 1e-9

    def test_shaping_shifts_q_by_minus_phi(self):
        rng = np.random.default_rng(7)
        m = random_mdp(rng, 8, 3, gamma=0.9)
        R = rng.normal(size=(8, 3, 8))
        phi = rng.normal(scale=4, size=8)
        a = soft_value_iteration(m, R, tol=1e-11)
        b = soft_value_iteration(m, shape_reward(R, phi, m.discount), tol=1e-11)
        np.testing.assert_allclose(b.probs, a.probs, atol=1e-8)
        np.testing.assert_allclose(b.q_values, a.q_values - phi[:, None], atol=1e-8)

    def test_constant_offset_leaves_policy_unchanged(self):
        rng = np.random.default_rng(8)
        m = random_mdp(rng, 6, 2)
        R = rng.normal(size=(6, 2, 6))
        a = soft_value_iteration(m, R)
        b = soft_value_iteration(m, R + 3.7)
        np.testing.assert_allclose(b.probs, a.probs, atol=1e-12)
        np.testing.assert_allclose(b.q_values - a.q_values, 3.7 / (1 - m.discount), atol=1e-7)

    def test_reports_non_convergence_with_residual(self):
        rng = np.random.default_rng(1)
        m = random_mdp(rng, 10, 3, gamma=0.99)
        with pytest.raises(ConvergenceError) as err:
            soft_value_iteration(m, rng.normal(size=(10, 3, 10)), tol=1e-14, max_iter=3)
        assert err.value.residual > 1e-14

    def test_rejects_bad_inputs(self):
        m = two_state_mdp()
        with pytest.raises(ValueError):
            soft_value_iteration(m, np.zeros((2, 2, 2)), tol=0.0)
        with pytest.raises(ValueError):
            soft_value_iteration(m, np.zeros((2, 2, 3)))
        bad = np.zeros((2, 2, 2))
        bad[0, 0, 0] = np.nan
        with pytest.raises(FloatingPointError):
            soft_value_iteration(m, bad)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), gamma=st.floats(0.5, 0.97))
    def test_fixed_point_property(self, seed, gamma):
        rng = np.random.default_rng(seed)
        m = random_mdp(rng, 5, 3, gamma=gamma, sparse=True)
        R = rng.normal(scale=3, size=(5, 3, 5))
        pi = soft_value_iteration(m, R, tol=1e-9)
        v = np.sum(pi.probs * pi.q_values, axis=1)
        rhs = np.einsum("sat,sat->sa", m.transition, R + gamma * v[None, None, :])
        assert np.max(np.abs(rhs - pi.q_values)) <= 1e-9 * (1 + 1e-6)


class TestNLL:
    def test_single_action_deterministic_is_zero(self):
        m = chain_mdp()
        pi = soft_value_iteration(m, np.zeros((5, 1, 5)))
        demo = sample_trajectory(m, pi, 0, 4, rng=0)
        assert nll([demo, demo], pi, m) == 0.0

    def test_matches_per_step_oracle(self):
        rng = np.random.default_rng(2)
        m = random_mdp(rng, 2, 2)
        pi = soft_value_iteration(m, rng.normal(size=(2, 2, 2)))
        demos = sample_trajectories(m, pi, [0, 1, 0], 3, rng)
        for flag in (True, False):
            ref = nll_loops(demos, pi.q_values, m.transition, flag)
            np.testing.assert_allclose(nll(demos, pi, m, flag), ref, rtol=0, atol=1e-12)

    def test_final_step_not_scored(self):
        m = two_state_mdp()
        pi = SoftPolicy(np.array([[0.0, 1.0], [2.0, 0.0]]))
        one = Trajectory([0], [1], 1)
        assert nll([one], pi, m) == 0.0
        two = Trajectory([0, 1], [1, 0], 1)
        np.testing.assert_allclose(nll([two], pi, m), -pi.log_probs[0, 1])

    def test_decomposes_over_demos(self):
        rng = np.random.default_rng(4)
        m = random_mdp(rng, 6, 3)
        pi = soft_value_iteration(m, rng.normal(size=(6, 3, 6)))
        demos = sample_trajectories(m, pi, rng.integers(0, 6, 7), 9, rng)
        np.testing.assert_allclose(nll(demos, pi, m), sum(nll([d], pi, m) for d in demos), rtol=1e-13)

    def test_transition_term_is_constant_offset(self):
        rng = np.random.default_rng(9)
        m = random_mdp(rng, 5, 2)
        demos = sample_trajectories(m, None, [0, 1, 2], 6, rng)
        gaps = []
        for _ in range(3):
            pi = soft_value_iteration(m, rng.normal(size=(5, 2, 5)))
            gaps.append(nll(demos, pi, m) - nll(demos, pi, m, include_transition_terms=False))
        np.testing.assert_allclose(gaps, gaps[0], rtol=1e-12)

    def test_constant_reward_shift_invariance(self):
        rng = np.random.default_rng(10)
        m = random_mdp(rng, 7, 3, gamma=0.9)
        R = rng.normal(size=(7, 3, 7))
        demos = sample_trajectories(m, None, [0, 3, 5], 8, rng)
        base = nll(demos, soft_value_iteration(m, R), m)
        for c in (-4.0, 0.5, 4.0):
            np.testing.assert_allclose(nll(demos, soft_value_iteration(m, R + c), m), base, atol=1e-10, rtol=0)

    def test_impossible_transition(self):
        m = two_state_mdp()
        with pytest.raises(ImpossibleDemonstrationError):
            nll([Trajectory([0, 0], [1, 0], 0)], SoftPolicy.uniform(2, 2), m)

    def test_empty_demo_set(self):
        m = two_state_mdp()
        assert nll([], SoftPolicy.uniform(2, 2), m) == 0.0


class TestSampling:
    def test_deterministic_chain(self):
        tau = sample_trajectory(chain_mdp(), None, 0, 4, rng=123)
        np.testing.assert_array_equal(tau.states, [0, 1, 2, 3])
        np.testing.assert_array_equal(tau.actions, [0, 0, 0, 0])
        assert tau.terminal == 4

    def test_uniform_action_frequency(self):
        trajs = sample_trajectories(two_state_mdp(), None, np.zeros(100_000, dtype=int), 1, rng=0)
        freq = np.mean([t.actions[0] for t in trajs])
        assert abs(freq - 0.5) < 0.01

    def test_policy_action_frequency(self):
        pi = SoftPolicy(np.array([[0.0, np.log(3.0)], [0.0, 0.0]]))
        trajs = sample_trajectories(two_state_mdp(), pi, np.zeros(100_000, dtype=int), 1, rng=1)
        assert abs(np.mean([t.actions[0] for t in trajs]) - 0.75) < 0.01

    def test_same_seed_same_trajectory(self):
        rng = np.random.default_rng(0)
        m = random_mdp(rng, 6, 3)
        assert sample_trajectory(m, None, 2, 20, rng=42) == sample_trajectory(m, None, 2, 20, rng=42)

    def test_trajectories_are_valid(self):
        rng = np.random.default_rng(6)
        m = random_mdp(rng, 6, 3, sparse=True)
        for tau in sample_trajectories(m, None, rng.integers(0, 6, 50), 10, rng):
            assert len(tau) == 10
            tau.check(m)

    def test_invalid_arguments(self):
        m = two_state_mdp()
        with pytest.raises(ValueError):
            sample_trajectory(m, None, 0, 0)
        with pytest.raises(ValueError):
            sample_trajectory(m, None, 5, 3)


class TestTrajReward:
    def test_zero_reward(self):
        tau = sample_trajectory(chain_mdp(), None, 0, 4)
        assert traj_reward(tau, np.zeros((5, 1, 5)), 0.9) == 0.0

    def test_constant_reward(self):
        tau = sample_trajectory(chain_mdp(8), None, 0, 6)
        np.testing.assert_allclose(traj_reward(tau, np.full((8, 1, 8), 2.5), 0.9), 2.5 * (1 - 0.9**6) / 0.1, rtol=1e-13)

    def test_shaping_telescopes(self):
        rng = np.random.default_rng(12)
        m = random_mdp(rng, 6, 2, gamma=0.95)
        R = rng.normal(size=(6, 2, 6))
        phi = rng.normal(scale=3, size=6)
        Rs = shape_reward(R, phi, m.discount)
        for tau in sample_trajectories(m, None, [0, 2, 4], 11, rng):
            gap = traj_reward(tau, Rs, m.discount) - traj_reward(tau, R, m.discount)
            np.testing.assert_allclose(gap, m.discount**11 * phi[tau.terminal] - phi[tau.start], atol=1e-12)


class TestTrajectoryIO:
    def test_jsonl_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        m = random_mdp(rng, 5, 2)
        trajs = sample_trajectories(m, None, [0, 1, 4], 5, rng)
        path = tmp_path / "demos.jsonl"
        write_trajectories(path, trajs)
        assert read_trajectories(path) == trajs
        first = json.loads(path.read_text().splitlines()[0])
        assert set(first) == {"start", "steps", "terminal"}
        write_trajectories(tmp_path / "again.jsonl", read_trajectories(path))
        assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()

    def test_start_mismatch_rejected(self):
        with pytest.raises(ValueError):
            Trajectory.from_dict({"start": 1, "steps": [[0, 0]], "terminal": 0})

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            Trajectory([0, 1], [0], 1)
