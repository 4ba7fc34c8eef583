import numpy as np
import pytest
from scipy import stats

from boirl.baselines import BIRLConfig, run_birl
from boirl.bo import RunAborted
from boirl.envs import Box, build_gridworld, sample_demos


def flat(theta):
    return 7.0


class TestConfig:
    def test_defaults(self):
        cfg = BIRLConfig(n_samples=200)
        assert cfg.burn_in == 20
        box = Box.from_pairs([(-2, 2), (-20, -20)])
        np.testing.assert_allclose(cfg.steps(box), [0.2, 0.0])

    def test_frozen_dims_never_move(self):
        box = Box.from_pairs([(-2.5, 2.5), (-20, -20)])
        res = run_birl(None, [], BIRLConfig(n_samples=300, step_size=1.0, bounds=box), objective=lambda t: t[0] ** 2)
        assert np.all(res.chain[:, 1] == -20.0)

    @pytest.mark.parametrize("kw", [dict(n_samples=10, burn_in=10), dict(burn_in=-1), dict(inverse_temperature=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            BIRLConfig(**kw)

    def test_non_positive_step(self):
        with pytest.raises(ValueError):
            BIRLConfig(step_size=[0.1, 0.0]).steps(Box.from_pairs([(0, 1), (0, 1)]))


class TestChain:
    def test_flat_objective_uniform(self):
        box = Box.from_pairs([(-2, 2), (0, 10)])
        cfg = BIRLConfig(n_samples=10_000, burn_in=0, step_size=box.width, bounds=box, seed=3)
        res = run_birl(None, [], cfg, objective=flat)
        assert res.acceptance_rate == 1.0
        for i in range(2):
            u = (res.samples[:, i] - box.lower[i]) / box.width[i]
            assert stats.kstest(u, "uniform").statistic < 0.05

    def test_quadratic_mean(self):
        box = Box.from_pairs([(-4, 4)])
        cfg = BIRLConfig(n_samples=4000, inverse_temperature=200.0, step_size=0.1, bounds=box, seed=0)
        res = run_birl(None, [], cfg, objective=lambda t: float((t[0] - 1.3) ** 2))
        assert abs(res.samples[:, 0].mean() - 1.3) < 0.1

    def test_reproducible_and_rate_in_range(self):
        box = Box.from_pairs([(-1, 1), (-1, 1)])
        cfg = BIRLConfig(n_samples=500, bounds=box, seed=5, step_size=0.3)
        obj = lambda t: 3.0 * float(np.sum(np.asarray(t) ** 2))
        a, b = run_birl(None, [], cfg, objective=obj), run_birl(None, [], cfg, objective=obj)
        np.testing.assert_array_equal(a.chain, b.chain)
        assert 0.0 < a.acceptance_rate <= 1.0
        assert a.acceptance_rate == b.acceptance_rate

    def test_one_evaluation_per_proposal(self):
        box = Box.from_pairs([(-1, 1)])
        calls = []
        run_birl(None, [], BIRLConfig(n_samples=50, bounds=box), objective=lambda t: calls.append(1) or 0.0)
        assert len(calls) == 50

    def test_chain_stays_in_box(self):
        box = Box.from_pairs([(0, 1), (5, 6)])
        res = run_birl(None, [], BIRLConfig(n_samples=400, step_size=2.0, bounds=box), objective=flat)
        assert all(box.contains(th) for th in res.chain)

    def test_failure_keeps_partial_chain(self):
        box = Box.from_pairs([(-1, 1)])
        n = []

        def obj(t):
            n.append(1)
            if len(n) == 12:
                raise FloatingPointError("diverged")
            return 0.0

        with pytest.raises(RunAborted) as err:
            run_birl(None, [], BIRLConfig(n_samples=50, bounds=box), objective=obj)
        assert len(err.value.trace) == 11

    def test_csv_dump(self, tmp_path):
        box = Box.from_pairs([(-1, 1), (0, 2)])
        res = run_birl(None, [], BIRLConfig(n_samples=30, burn_in=5, bounds=box), objective=flat)
        path = tmp_path / "birl.csv"
        res.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "idx,theta_0,theta_1,nll,accepted"
        assert len(lines) == 26 and lines[1].startswith("5,")

    def test_gridworld_chain(self):
        env = build_gridworld()
        demos = sample_demos(env, 50, seed=1)
        res = run_birl(env, demos, BIRLConfig(n_samples=60, seed=0))
        assert len(res.trace) == 60
        assert np.all(np.isfinite(res.chain_nll))
        assert res.trace.best.best_nll <= res.chain_nll.min()
