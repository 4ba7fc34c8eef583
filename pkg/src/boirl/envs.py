"""Environments: the coin Gridworld and a synthetic road network, with their reward families."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .mdp import RewardParams, TabularMDP, Trajectory, as_rng, sample_trajectories, soft_value_iteration

GRIDWORLD_TRUTH = (1.25, 5.0, 0.0)
GRIDWORLD_BOUNDS = ((-2.0, 2.0), (-10.0, 10.0), (-4.0, 4.0))
ROADNET_TRUTH = (-2.0, -1.0, -1.0, -20.0)
ROADNET_BOUNDS = ((-2.5, 2.5), (-2.5, 2.5), (-2.5, 2.5), (-20.0, -20.0))
ROADNET_MOVES = 6
PARK = 6
# Trips end by parking; a demo-length horizon would score endless u-turn loops above finished trips.
ROADNET_ESOR_HORIZON = 500


@dataclass(frozen=True, eq=False)
class Box:
    """Closed axis-aligned box. Coordinates with ``lower == upper`` are frozen."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be 1-D and of equal length")
        if np.any(hi < lo) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("bounds must be finite with lower <= upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def from_pairs(cls, pairs: Sequence[Sequence[float]]) -> Box:
        arr = np.asarray(pairs, dtype=float)
        return cls(arr[:, 0], arr[:, 1])

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def free(self) -> np.ndarray:
        return self.upper > self.lower

    @property
    def n_free(self) -> int:
        return int(np.sum(self.free))

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    def clip(self, theta) -> np.ndarray:
        return np.clip(theta, self.lower, self.upper)

    def reflect(self, theta) -> np.ndarray:
        """Fold points back into the box by mirror reflection at the faces."""
        theta = np.array(theta, dtype=float)
        w = self.width
        out = self.lower.copy() + np.zeros_like(theta)
        free = w > 0
        y = np.mod(theta[..., free] - self.lower[free], 2 * w[free])
        y = np.where(y > w[free], 2 * w[free] - y, y)
        out[..., free] = self.lower[free] + y
        inside = (theta >= self.lower) & (theta <= self.upper)
        return np.where(inside, theta, out)

    def to_unit(self, theta) -> np.ndarray:
        """Free coordinates mapped affinely onto [0, 1]."""
        theta = np.asarray(theta, dtype=float)
        f = self.free
        return (theta[..., f] - self.lower[f]) / self.width[f]

    def from_unit(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        f = self.free
        out = np.broadcast_to(self.lower, u.shape[:-1] + (self.dim,)).copy()
        out[..., f] = self.lower[f] + u * self.width[f]
        return out

    def sample(self, rng, n: int) -> np.ndarray:
        rng = as_rng(rng)
        return self.from_unit(rng.random((n, self.n_free)))

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}


class LogisticStateReward:
    """``r(s) = amplitude / (1 + exp(-steepness * (psi(s) - midpoint))) + translation``.

    ``theta = (steepness, midpoint, translation)``. The reward of a transition
    ``(s, a, s')`` is the reward of the state entered, ``r(s')``.
    """

    name = "logistic-state"
    dim = 3

    def __init__(self, psi: np.ndarray, amplitude: float = 10.0):
        self.psi = np.asarray(psi, dtype=float)
        self.amplitude = float(amplitude)

    def state_rewards(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        z = -thetas[:, :1] * (self.psi[None, :] - thetas[:, 1:2])
        # 1/(1+e^z) written through tanh so huge |z| stays finite
        return self.amplitude * 0.5 * (1.0 - np.tanh(0.5 * z)) + thetas[:, 2:3]

    def table(self, theta, mdp: TabularMDP) -> np.ndarray:
        r = self.state_rewards(np.asarray(theta, dtype=float))[0]
        return np.broadcast_to(r, (mdp.n_states, mdp.n_actions, mdp.n_states)).copy()

    def trajectory_stats(self, trajs: Sequence[Trajectory], gamma: float, n_states: int) -> np.ndarray:
        """Discounted arrival-state counts, shape (n_traj, n_states)."""
        W = np.zeros((len(trajs), n_states))
        for i, tau in enumerate(trajs):
            np.add.at(W[i], tau.next_states, gamma ** np.arange(len(tau)))
        return W

    def returns(self, thetas: np.ndarray, stats: np.ndarray) -> np.ndarray:
        """Discounted trajectory returns, shape (n_theta, n_traj)."""
        return self.state_rewards(thetas) @ stats.T


class LinearFeatureReward:
    """``R(s, a, s') = theta . f(s')`` over per-state feature vectors."""

    name = "linear-features"

    def __init__(self, features: np.ndarray):
        self.features = np.asarray(features, dtype=float)
        self.dim = self.features.shape[1]

    def state_rewards(self, thetas: np.ndarray) -> np.ndarray:
        return np.atleast_2d(thetas) @ self.features.T

    def table(self, theta, mdp: TabularMDP) -> np.ndarray:
        r = self.state_rewards(np.asarray(theta, dtype=float))[0]
        return np.broadcast_to(r, (mdp.n_states, mdp.n_actions, mdp.n_states)).copy()

    def trajectory_stats(self, trajs: Sequence[Trajectory], gamma: float, n_states: int) -> np.ndarray:
        """Discounted feature sums, shape (n_traj, d)."""
        out = np.zeros((len(trajs), self.dim))
        for i, tau in enumerate(trajs):
            out[i] = (gamma ** np.arange(len(tau))) @ self.features[tau.next_states]
        return out

    def returns(self, thetas: np.ndarray, stats: np.ndarray) -> np.ndarray:
        return np.atleast_2d(thetas) @ stats.T


@dataclass(eq=False)
class EnvironmentSpec:
    kind: str
    mdp: TabularMDP
    family: LogisticStateReward | LinearFeatureReward
    bounds: Box
    ground_truth: np.ndarray | None = None
    layout: object = None
    demo_length: int = 15
    esor_horizon: int | None = None

    def __post_init__(self):
        if self.bounds.dim != self.family.dim:
            raise ValueError("theta bounds do not match the reward family's dimension")
        if self.ground_truth is not None:
            self.ground_truth = np.asarray(self.ground_truth, dtype=float)

    @property
    def dim(self) -> int:
        return self.family.dim

    @property
    def horizon(self) -> int:
        """Rollout length used to score policies (the demo length unless overridden)."""
        return self.demo_length if self.esor_horizon is None else self.esor_horizon

    def params(self, theta) -> RewardParams:
        return RewardParams(theta, self.family.name, self.bounds.lower, self.bounds.upper)


class FamilyMismatchError(ValueError):
    pass


def eval_reward(params, env: EnvironmentSpec) -> np.ndarray:
    """Reward table ``R[s, a, s']`` for ``params`` (a RewardParams or a raw theta vector)."""
    if isinstance(params, RewardParams):
        if params.family != env.family.name:
            raise FamilyMismatchError(f"{params.family!r} parameters given to a {env.family.name!r} environment")
        theta = params.theta
    else:
        theta = np.atleast_1d(np.asarray(params, dtype=float))
    if theta.size != env.dim:
        raise ValueError(f"expected a {env.dim}-dimensional theta, got {theta.size}")
    table = env.family.table(theta, env.mdp)
    if not np.all(np.isfinite(table)):
        raise FloatingPointError(f"reward is not finite at theta={theta}")
    return table


def shape_reward(reward: np.ndarray, potential, gamma: float) -> np.ndarray:
    """``R'(s, a, s') = R(s, a, s') + gamma * phi(s') - phi(s)``."""
    phi = np.asarray(potential, dtype=float)
    if not np.all(np.isfinite(phi)):
        raise ValueError("potential must be finite")
    return np.asarray(reward, dtype=float) + gamma * phi[None, None, :] - phi[:, None, None]


def expert_policy(env: EnvironmentSpec, theta=None):
    theta = env.ground_truth if theta is None else theta
    return soft_value_iteration(env.mdp, eval_reward(theta, env))


def sample_demos(env: EnvironmentSpec, n: int, length: int | None = None, seed=0, theta=None) -> list[Trajectory]:
    """Trajectories from the soft-optimal policy of ``theta`` (ground truth by default)."""
    rng = as_rng(seed)
    length = env.demo_length if length is None else length
    policy = expert_policy(env, theta)
    mdp = env.mdp
    starts = rng.choice(mdp.start_states, size=n, p=mdp.start_weights)
    return sample_trajectories(mdp, policy, starts, length, rng)


# --- Gridworld -------------------------------------------------------------

GRID_MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))  # N, E, S, W as (dx, dy)


@dataclass(frozen=True, eq=False)
class GridworldLayout:
    width: int = 6
    height: int = 6
    coins: np.ndarray = field(default_factory=lambda: np.zeros(36, dtype=np.int64))

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("grid dimensions must be positive")
        coins = np.asarray(self.coins, dtype=np.int64).reshape(-1)
        if coins.size != self.width * self.height:
            raise ValueError(f"expected {self.width * self.height} coin counts, got {coins.size}")
        if np.any(coins < 0):
            raise ValueError("coin counts must be non-negative")
        object.__setattr__(self, "coins", coins)

    @classmethod
    def random(cls, seed=0, width: int = 6, height: int = 6, max_coins: int = 8) -> GridworldLayout:
        rng = as_rng(seed)
        return cls(width, height, rng.integers(0, max_coins + 1, size=width * height))

    @classmethod
    def load(cls, path) -> GridworldLayout:
        d = json.loads(Path(path).read_text())
        return cls(d.get("width", 6), d.get("height", 6), d["coins"])

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "coins": self.coins.tolist()}


def build_gridworld(layout: GridworldLayout | None = None, gamma: float = 0.9, demo_length: int = 15) -> EnvironmentSpec:
    """Deterministic 4-action grid; moving into a wall leaves the agent in place.

    Every cell is a start state, uniformly weighted.
    """
    layout = GridworldLayout.random(0) if layout is None else layout
    w, h = layout.width, layout.height
    S = w * h
    P = np.zeros((S, 4, S))
    for s in range(S):
        x, y = s % w, s // w
        for a, (dx, dy) in enumerate(GRID_MOVES):
            nx = min(max(x + dx, 0), w - 1)
            ny = min(max(y + dy, 0), h - 1)
            P[s, a, ny * w + nx] = 1.0
    mdp = TabularMDP(P, gamma, np.arange(S))
    return EnvironmentSpec(
        kind="gridworld",
        mdp=mdp,
        family=LogisticStateReward(layout.coins),
        bounds=Box.from_pairs(GRIDWORLD_BOUNDS),
        ground_truth=np.array(GRIDWORLD_TRUTH),
        layout=layout,
        demo_length=demo_length,
    )


# --- Road network ------------------------------------------------------------

SINK = "sink"


@dataclass(eq=False)
class RoadNetwork:
    """Directed links with ordered successor lists and one destination.

    ``successors[b]`` lists the links reachable from ``b`` ordered rightmost
    turn first; the dummy sink link, when ``b`` is the destination, comes last.
    """

    links: list[str]
    successors: dict[str, list[str]]
    traverse_time: dict[tuple[str, str], float]
    right_turn: dict[tuple[str, str], bool]
    u_turn: dict[tuple[str, str], bool]
    destination: str

    def __post_init__(self):
        for b, succ in self.successors.items():
            if len(succ) > ROADNET_MOVES:
                raise ValueError(f"link {b!r} has {len(succ)} successors; at most {ROADNET_MOVES} actions exist")
            real = [c for c in succ if c != SINK]
            if len(real) > 5:
                raise ValueError(f"link {b!r} shares a vertex with {len(real)} other links (max 5)")
        sinks = [b for b, succ in self.successors.items() if SINK in succ]
        if sinks != [self.destination]:
            raise ValueError("exactly one link, the destination, must lead to the dummy sink")

    def features(self, a: str, b: str) -> np.ndarray:
        """(traverse time, 0 if right turn else 1, 0 if sink else 1, 0 if u-turn else 1)."""
        return np.array(
            [
                self.traverse_time[(a, b)],
                0.0 if self.right_turn[(a, b)] else 1.0,
                0.0 if b == SINK else 1.0,
                0.0 if self.u_turn[(a, b)] else 1.0,
            ]
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["src_link", "dst_link", "traverse_time", "right_turn", "u_turn"])
            for b in self.links:
                for c in self.successors.get(b, []):
                    wr.writerow([b, c, repr(self.traverse_time[(b, c)]), int(self.right_turn[(b, c)]), int(self.u_turn[(b, c)])])


def _roadnet_env(net: RoadNetwork, gamma: float, demo_length: int) -> EnvironmentSpec:
    """States are link pairs ``s(a, b)`` plus one absorbing 'parked' state.

    Actions 0-5 follow the successor list of ``b`` (self-loop when the list is
    shorter); action 6 parks, which is only effective at the sink state.
    """
    pairs = [(a, b) for a in net.links for b in net.successors.get(a, [])]
    index = {p: i for i, p in enumerate(pairs)}
    parked = len(pairs)
    S = parked + 1
    A = ROADNET_MOVES + 1
    P = np.zeros((S, A, S))
    feats = np.zeros((S, 4))
    for (a, b), s in index.items():
        feats[s] = net.features(a, b)
        succ = net.successors.get(b, []) if b != SINK else []
        for act in range(ROADNET_MOVES):
            nxt = index[(b, succ[act])] if act < len(succ) else s
            P[s, act, nxt] = 1.0
        P[s, PARK, parked if b == SINK else s] = 1.0
    P[parked, :, parked] = 1.0
    starts = np.array([s for (a, b), s in index.items() if b != SINK])
    mdp = TabularMDP(P, gamma, starts)
    net.state_index = index
    return EnvironmentSpec(
        kind="roadnet",
        mdp=mdp,
        family=LinearFeatureReward(feats),
        bounds=Box.from_pairs(ROADNET_BOUNDS),
        ground_truth=np.array(ROADNET_TRUTH),
        layout=net,
        demo_length=demo_length,
        esor_horizon=ROADNET_ESOR_HORIZON,
    )


def generate_road_network(n_links: int = 60, seed=0) -> RoadNetwork:
    """Random planar street grid with ``n_links`` directed links (two per road)."""
    if n_links < 6:
        raise ValueError("the generator needs at least 6 links")
    rng = as_rng(seed)
    n_roads = (n_links + 1) // 2
    side = 2
    while 2 * side * (side - 1) < n_roads + max(2, n_roads // 4):
        side += 1
    nodes = [(i, j) for j in range(side) for i in range(side)]
    coords = {v: np.array(v, dtype=float) + rng.uniform(-0.2, 0.2, size=2) for v in nodes}
    edges = [((i, j), (i + 1, j)) for j in range(side) for i in range(side - 1)]
    edges += [((i, j), (i, j + 1)) for j in range(side - 1) for i in range(side)]
    # drop random edges while the network stays connected
    for e in [edges[k] for k in rng.permutation(len(edges))]:
        if len(edges) <= n_roads:
            break
        cand = [x for x in edges if x != e]
        if _connected(cand):
            edges = cand
    if len(edges) != n_roads:
        raise RuntimeError("could not thin the street grid to the requested size")
    one_way = n_links % 2 == 1
    directed = []
    for idx, (u, v) in enumerate(edges):
        directed.append((u, v))
        if not (one_way and idx == len(edges) - 1):
            directed.append((v, u))
    names = {d: f"L{i}" for i, d in enumerate(directed)}
    speed = {d: rng.uniform(0.7, 1.3) for d in directed}
    successors: dict[str, list[str]] = {}
    ttime, right, uturn = {}, {}, {}
    for b in directed:
        heading = coords[b[1]] - coords[b[0]]
        outs = []
        for c in directed:
            if c[0] != b[1]:
                continue
            h2 = coords[c[1]] - coords[c[0]]
            is_u = c[1] == b[0]
            ang = np.pi if is_u else np.arctan2(heading[0] * h2[1] - heading[1] * h2[0], heading @ h2)
            outs.append((ang, c, is_u))
        outs.sort(key=lambda t: t[0])
        successors[names[b]] = [names[c] for _, c, _ in outs]
        for ang, c, is_u in outs:
            key = (names[b], names[c])
            ttime[key] = float(np.linalg.norm(coords[c[1]] - coords[c[0]]) / speed[c])
            right[key] = bool(not is_u and ang < -np.pi / 4)
            uturn[key] = bool(is_u)
    links = [names[d] for d in directed]
    dest = links[int(rng.integers(len(links)))]
    successors[dest] = successors[dest] + [SINK]
    ttime[(dest, SINK)] = 0.0
    right[(dest, SINK)] = False
    uturn[(dest, SINK)] = False
    return RoadNetwork(links, successors, ttime, right, uturn, dest)


def _connected(edges) -> bool:
    adj = {v: [] for e in edges for v in e}
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    touched = {v for e in edges for v in e}
    if not touched:
        return False
    start = next(iter(touched))
    seen, stack = {start}, [start]
    while stack:
        for w in adj[stack.pop()]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return touched <= seen


def build_roadnet(n_links: int = 60, seed=0, gamma: float = 0.99, demo_length: int = 20) -> EnvironmentSpec:
    return _roadnet_env(generate_road_network(n_links, seed), gamma, demo_length)


def import_roadnet(path, gamma: float = 0.99, demo_length: int = 20) -> EnvironmentSpec:
    """Read an edge-list CSV ``src_link,dst_link,traverse_time,right_turn,u_turn``.

    Flags are 1 for yes, 0 for no. Rows of one ``src_link`` are taken in
    action order (rightmost turn first). Exactly one row has ``dst_link`` equal
    to ``sink``; its ``src_link`` is the destination.
    """
    successors: dict[str, list[str]] = {}
    ttime, right, uturn = {}, {}, {}
    links: list[str] = []
    dest = None
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["src_link", "dst_link", "traverse_time", "right_turn", "u_turn"]:
        raise ValueError("edge list must start with the header src_link,dst_link,traverse_time,right_turn,u_turn")
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields, got {len(row)}")
        a, b = row[0].strip(), row[1].strip()
        if not a or not b or a == SINK:
            raise ValueError(f"line {lineno}: malformed link identifiers")
        try:
            t = float(row[2]) if row[2].strip() else 0.0
            rt = _flag(row[3])
            ut = _flag(row[4])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        if (a, b) in ttime:
            raise ValueError(f"line {lineno}: duplicate transition {a}->{b}")
        if b == SINK:
            if dest is not None:
                raise ValueError(f"line {lineno}: a second sink line")
            dest = a
        if a not in links:
            links.append(a)
        successors.setdefault(a, []).append(b)
        ttime[(a, b)], right[(a, b)], uturn[(a, b)] = t, rt, ut
    if dest is None:
        raise ValueError("edge list has no sink line")
    links += sorted({c for succ in successors.values() for c in succ} - set(links) - {SINK})
    successors = {b: sorted(s, key=lambda c: c == SINK) for b, s in successors.items()}
    return _roadnet_env(RoadNetwork(links, successors, ttime, right, uturn, dest), gamma, demo_length)


def _flag(text: str) -> bool:
    text = text.strip()
    if text in ("", "0"):
        return False
    if text == "1":
        return True
    raise ValueError(f"flag must be 0 or 1, got {text!r}")
