"""Config-driven experiments: environments, per-seed runs, success metrics and NLL landscape scans."""
from __future__ import annotations

import contextlib
import csv
import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .baselines import BIRLConfig, run_birl
from .bo import BOConfig, NLLObjective, run_boirl
from .envs import EnvironmentSpec, GridworldLayout, build_gridworld, build_roadnet, import_roadnet, sample_demos
from .gp import GPState, gp_posterior
from .metrics import esor_exact, iterations_to_expert
from .mdp import Trajectory, read_trajectories
from .projection import Projector, generate_basis

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ALGORITHMS = {"boirl-rhorbf": "rho-rbf", "boirl-rbf": "rbf", "boirl-matern": "matern", "birl": None}


def load_table(path) -> dict:
    """Read a TOML or JSON file (chosen by extension) into a dict."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        return json.loads(path.read_text())
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _from_dict(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class EnvConfig:
    """How to build an environment and its demonstrations.

    ``kind`` is ``gridworld`` or ``roadnet``. Gridworld uses ``layout_file``
    or a random layout from ``layout_seed``; roadnet uses ``edge_list`` or
    the generator with ``n_links`` and ``network_seed``. Demonstrations come
    from ``demo_file`` or are sampled from the ground truth with ``data_seed``.
    """

    kind: str = "gridworld"
    layout_seed: int = 0
    layout_file: str | None = None
    n_links: int = 60
    network_seed: int = 0
    edge_list: str | None = None
    gamma: float | None = None
    demo_length: int | None = None
    n_demos: int | None = None
    data_seed: int = 1
    demo_file: str | None = None

    def __post_init__(self):
        if self.kind not in ("gridworld", "roadnet"):
            raise ValueError(f"unknown environment kind {self.kind!r}")

    @classmethod
    def from_dict(cls, data: dict) -> EnvConfig:
        return _from_dict(cls, data)

    def build(self) -> EnvironmentSpec:
        kw = {}
        if self.gamma is not None:
            kw["gamma"] = self.gamma
        if self.demo_length is not None:
            kw["demo_length"] = self.demo_length
        if self.kind == "gridworld":
            layout = GridworldLayout.load(self.layout_file) if self.layout_file else GridworldLayout.random(self.layout_seed)
            return build_gridworld(layout, **kw)
        if self.edge_list:
            return import_roadnet(self.edge_list, **kw)
        return build_roadnet(self.n_links, self.network_seed, **kw)

    def demos(self, env: EnvironmentSpec) -> list[Trajectory]:
        if self.demo_file:
            demos = read_trajectories(self.demo_file)
            for tau in demos:
                tau.check(env.mdp)
            return demos
        n = self.n_demos if self.n_demos is not None else (50 if self.kind == "gridworld" else 100)
        return sample_demos(env, n, seed=self.data_seed)


@dataclass
class ExperimentConfig:
    """One algorithm on one environment over a list of seeds.

    ``budget`` is the number of BO evaluations after the ``n_init`` initial
    ones; for ``birl`` it is the total number of NLL evaluations (chain length).
    """

    env: EnvConfig = field(default_factory=EnvConfig)
    algorithm: str = "boirl-rhorbf"
    seeds: list[int] = field(default_factory=lambda: [0])
    budget: int = 100
    n_init: int = 5
    init_strategy: str = "adversarial"
    K: int = 10
    M: int = 5
    candidate_count: int = 2048
    birl_step_fraction: float = 0.05
    tolerance_fraction: float = 0.02
    compute_esor: bool = True
    record_timing: bool = True
    out_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = EnvConfig.from_dict(self.env)
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {sorted(ALGORITHMS)}")
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.algorithm == "birl" and self.budget < 1:
            raise ValueError("birl needs a budget of at least one evaluation")

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        return _from_dict(cls, dict(data))

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.from_dict(load_table(path))

    def bo_config(self, seed: int) -> BOConfig:
        return BOConfig(
            budget=self.budget,
            n_init=self.n_init,
            kernel=ALGORITHMS[self.algorithm],
            init_strategy=self.init_strategy,
            K=self.K,
            M=self.M,
            candidate_count=self.candidate_count,
            seed=seed,
        )

    def birl_config(self, seed: int, env: EnvironmentSpec) -> BIRLConfig:
        return BIRLConfig(n_samples=self.budget, step_size=self.birl_step_fraction * env.bounds.width, seed=seed)


@dataclass
class SeedResult:
    """``iterations`` counts every evaluation including initialization; ``bo_iterations`` excludes it."""

    seed: int
    success: bool
    iterations: int | None
    bo_iterations: int | None
    best_nll: float | None
    best_theta: list[float] | None
    best_esor: float | None
    evaluations: int
    error: str | None = None


def _stats(values: Sequence[int]) -> dict:
    if not values:
        return {"mean": None, "std": None, "median": None}
    v = np.asarray(values, dtype=float)
    return {"mean": float(np.mean(v)), "std": float(np.std(v)), "median": float(np.median(v))}


@dataclass
class MetricsReport:
    algorithm: str
    env_kind: str
    expert_esor: float | None
    rows: list[SeedResult]

    @property
    def completed(self) -> list[SeedResult]:
        return [r for r in self.rows if r.error is None]

    @property
    def success_rate(self) -> float | None:
        done = self.completed
        return sum(r.success for r in done) / len(done) if done else None

    def aggregate(self) -> dict:
        hits = [r for r in self.completed if r.iterations is not None]
        return {
            "success_rate": self.success_rate,
            "completed": len(self.completed),
            "failed": len(self.rows) - len(self.completed),
            "iterations": _stats([r.iterations for r in hits]),
            "bo_iterations": _stats([r.bo_iterations for r in hits]),
        }

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "env": self.env_kind,
            "expert_esor": self.expert_esor,
            "aggregate": self.aggregate(),
            "seeds": [asdict(r) for r in self.rows],
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(out / "report.json", json.dumps(self.to_dict(), indent=2) + "\n")
        names = [f.name for f in fields(SeedResult)]
        lines = [",".join(names)]
        for r in self.rows:
            d = asdict(r)
            d["best_theta"] = " ".join(repr(x) for x in r.best_theta) if r.best_theta is not None else ""
            lines.append(",".join("" if d[n] is None else str(d[n]) for n in names))
        _atomic_write(out / "seeds.csv", "\n".join(lines) + "\n")


@contextlib.contextmanager
def _sink(target):
    """Yield a text stream for a path or pass an open stream through."""
    if hasattr(target, "write"):
        yield target
    else:
        with open(target, "w", newline="") as fh:
            yield fh


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def run_experiment(config: ExperimentConfig, out_dir=None) -> MetricsReport:
    """Run ``config.algorithm`` once per seed on one shared environment and demo set.

    A seed that raises is recorded with its error and left out of the
    aggregate. With an output directory every seed's trace is written to
    ``seed_<s>/trace.csv`` next to ``report.json`` and ``seeds.csv``.
    """
    out_dir = out_dir if out_dir is not None else config.out_dir
    env = config.env.build()
    demos = config.env.demos(env)
    objective = NLLObjective(env, demos)
    expert = esor_exact(env.ground_truth, env) if config.compute_esor and env.ground_truth is not None else None
    n_init = 0 if config.algorithm == "birl" else config.n_init
    rows = []
    for seed in config.seeds:
        try:
            if config.algorithm == "birl":
                result = run_birl(env, demos, config.birl_config(seed, env), objective=objective)
            else:
                result = run_boirl(env, demos, config.bo_config(seed), objective=objective)
        except Exception as exc:  # recorded per seed; the aggregate skips it
            rows.append(SeedResult(seed, False, None, None, None, None, None, len(getattr(exc, "trace", [])), f"{type(exc).__name__}: {exc}"))
            continue
        trace = result.trace
        its = iterations_to_expert(trace, env, expert, config.tolerance_fraction) if expert is not None else None
        best = trace.best
        rows.append(
            SeedResult(
                seed=seed,
                success=its is not None,
                iterations=its,
                bo_iterations=None if its is None else max(its - n_init, 0),
                best_nll=best.best_nll,
                best_theta=[float(x) for x in best.best_theta],
                best_esor=esor_exact(best.best_theta, env) if expert is not None else None,
                evaluations=len(trace),
            )
        )
        if out_dir is not None:
            seed_dir = Path(out_dir) / f"seed_{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            tmp = seed_dir / "trace.csv.tmp"
            trace.to_csv(tmp, record_timing=config.record_timing)
            os.replace(tmp, seed_dir / "trace.csv")
    report = MetricsReport(config.algorithm, env.kind, expert, rows)
    if out_dir is not None:
        report.write(out_dir)
    return report


@dataclass
class GridScan:
    axes: tuple[int, int]
    a_values: np.ndarray
    b_values: np.ndarray
    base: np.ndarray
    nll: np.ndarray
    gp_mean: np.ndarray | None = None

    def thetas(self) -> np.ndarray:
        return _grid_thetas(self.base, self.axes, self.a_values, self.b_values)

    def to_csv(self, path, values: np.ndarray | None = None) -> None:
        """Matrix CSV: rows follow the first axis, columns the second; the header holds the second axis values."""
        values = self.nll if values is None else values
        i, j = self.axes
        with _sink(path) as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow([f"theta_{i}\\theta_{j}"] + [repr(float(b)) for b in self.b_values])
            for a, row in zip(self.a_values, values):
                wr.writerow([repr(float(a))] + [repr(float(x)) for x in row])


def _grid_thetas(base, axes, a_values, b_values) -> np.ndarray:
    i, j = axes
    A, B = np.meshgrid(a_values, b_values, indexing="ij")
    th = np.tile(np.asarray(base, dtype=float), (A.size, 1))
    th[:, i] = A.ravel()
    th[:, j] = B.ravel()
    return th


def grid_scan(
    env: EnvironmentSpec,
    demos: Sequence[Trajectory],
    axes: tuple[int, int] = (0, 1),
    fixed=None,
    resolution: int = 30,
    gp: GPState | None = None,
    objective=None,
) -> GridScan:
    """NLL over a ``resolution x resolution`` slice spanning the bounds of two theta coordinates.

    Coordinates off the slice take ``fixed`` (a full theta vector; the
    ground truth, else the box centre, by default). With ``gp`` the posterior
    mean over the same grid is returned as well.
    """
    i, j = axes
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    if i == j or not (0 <= i < env.dim and 0 <= j < env.dim):
        raise ValueError(f"invalid axes {axes} for a {env.dim}-dimensional theta")
    if fixed is None:
        fixed = env.ground_truth if env.ground_truth is not None else 0.5 * (env.bounds.lower + env.bounds.upper)
    base = np.asarray(fixed, dtype=float)
    lo, hi = env.bounds.lower, env.bounds.upper
    a = np.linspace(lo[i], hi[i], resolution)
    b = np.linspace(lo[j], hi[j], resolution)
    objective = NLLObjective(env, demos) if objective is None else objective
    thetas = _grid_thetas(base, (i, j), a, b)
    nll_grid = np.array([objective(th) for th in thetas]).reshape(resolution, resolution)
    mean = None
    if gp is not None:
        mean = np.asarray(gp_posterior(gp, thetas)[0]).reshape(resolution, resolution)
    return GridScan((i, j), a, b, base, nll_grid, mean)


def rho_dump(env: EnvironmentSpec, demos: Sequence[Trajectory], thetas, K: int = 10, M: int = 5, seed: int = 0, path=None) -> np.ndarray:
    """rho-vectors of ``thetas`` for a basis drawn with ``seed``; optionally written as CSV (path or stream)."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    basis = generate_basis(demos, env.mdp, K, M, seed)
    R = Projector(basis, env)(thetas)
    if path is not None:
        with _sink(path) as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow([f"theta_{d}" for d in range(thetas.shape[1])] + [f"rho_{k}" for k in range(R.shape[1])])
            for th, r in zip(thetas, R):
                wr.writerow([repr(float(x)) for x in th] + [repr(float(x)) for x in r])
    return R
