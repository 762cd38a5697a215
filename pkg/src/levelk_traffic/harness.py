"""Episode initialization, the simultaneous-move simulation loop and Monte Carlo batches."""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np
from scipy.stats import binomtest

from .actions import Action
from .autonomy import Planner, controller_step
from .config import SimConfig
from .driver_policy import TabularPolicy, feasible_masks, level0_actions, restrict_level0, sample_from_rows
from .perception import FRONT, encode_digits, observe_all
from .reward import reward_totals
from .world import World, step_world, zone_overlaps

MIN_SPACING = 30.0
DEFAULT_MIX = (0.10, 0.60, 0.30)
CONTROLLERS = ("level0", "level1", "level2", "uniform", "stackelberg", "decision-tree", "trainee")


class CapacityError(ValueError):
    """The requested number of cars does not fit the initial road segment."""


@dataclass(frozen=True)
class EpisodeConfig:
    n_c: int = 10
    x0_max: float = 200.0
    t_f: float = 200.0
    seed: int = 0
    ego_controller: str = "decision-tree"
    traffic_mix: tuple = DEFAULT_MIX
    max_attempts: int = 100

    def __post_init__(self):
        if self.n_c < 0:
            raise ValueError("n_c must be >= 0")
        if self.x0_max <= 0 or self.t_f <= 0:
            raise ValueError("x0_max and t_f must be > 0")
        if self.ego_controller not in CONTROLLERS:
            raise ValueError(f"unknown controller {self.ego_controller!r}; choose from {CONTROLLERS}")
        mix = np.asarray(self.traffic_mix, dtype=float)
        if mix.shape != (3,) or (mix < 0).any() or abs(mix.sum() - 1.0) > 1e-9:
            raise ValueError("traffic_mix must be three nonnegative fractions summing to 1")

    def n_steps(self, dt: float) -> int:
        return int(round(self.t_f / dt))


@dataclass
class EpisodeResult:
    violated: bool
    steps_run: int
    mean_speed: float
    wall_time: float
    trace: list | None = None


class Trainee(Protocol):
    def act(self, code: int, mask: np.ndarray, u: float) -> int: ...

    def learn(self, code: int, action: int, reward: float) -> None: ...


def episode_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent initialization and dynamics streams for one episode."""
    init_ss, dyn_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(dyn_ss)


def lane_capacity(x0_max: float) -> int:
    return int(np.floor(2 * x0_max / MIN_SPACING)) + 1


def _free_intervals(xs: list[float], lo: float, hi: float) -> list[tuple[float, float]]:
    """Parts of ``[lo, hi]`` at distance >= MIN_SPACING from every x in ``xs``."""
    out = [(lo, hi)]
    for x in sorted(xs):
        a, b = x - MIN_SPACING, x + MIN_SPACING
        nxt = []
        for s, e in out:
            if b <= s or a >= e:
                nxt.append((s, e))
                continue
            if s < a:
                nxt.append((s, a))
            if b < e:
                nxt.append((b, e))
        out = nxt
    return [(s, e) for s, e in out if e > s]


def _place(cfg: EpisodeConfig, rng: np.random.Generator, n_lanes: int, ego_lane: int):
    """Sequential placement; each car is uniform over the admissible (lane, x) set."""
    lanes_x = {lane: [] for lane in range(1, n_lanes + 1)}
    lanes_x[ego_lane].append(0.0)
    placed = []
    for _ in range(cfg.n_c):
        free = {lane: _free_intervals(xs, -cfg.x0_max, cfg.x0_max) for lane, xs in lanes_x.items()}
        lengths = np.array([sum(e - s for s, e in free[lane]) for lane in lanes_x])
        if lengths.sum() <= 0:
            return None
        lane = 1 + int(rng.choice(n_lanes, p=lengths / lengths.sum()))
        segs = free[lane]
        seg_len = np.array([e - s for s, e in segs])
        j = int(rng.choice(len(segs), p=seg_len / seg_len.sum()))
        x = segs[j][0] + rng.random() * seg_len[j]
        lanes_x[lane].append(x)
        placed.append((lane, x))
    return placed


def initialize_episode(cfg: EpisodeConfig, rng: np.random.Generator,
                       sim: SimConfig = SimConfig()) -> World:
    """Ego at the origin (index 0), traffic spread with >= 30 m same-lane spacing."""
    road, kin = sim.road, sim.kinematics
    if cfg.n_c + 1 > road.n_lanes * lane_capacity(cfg.x0_max):
        raise CapacityError(f"{cfg.n_c} cars exceed road capacity "
                            f"{road.n_lanes * lane_capacity(cfg.x0_max) - 1}")
    ego_lane = 1 + int(rng.integers(road.n_lanes))
    ego_v = kin.v_min + rng.random() * (kin.v_max - kin.v_min)
    for _ in range(cfg.max_attempts):
        placed = _place(cfg, rng, road.n_lanes, ego_lane)
        if placed is not None:
            break
    else:
        raise CapacityError(f"could not place {cfg.n_c} cars in {cfg.max_attempts} attempts")
    n = cfg.n_c + 1
    lane = np.array([ego_lane] + [p[0] for p in placed], dtype=np.int64)
    x = np.array([0.0] + [p[1] for p in placed])
    vx = np.concatenate([[ego_v], kin.v_min + rng.random(cfg.n_c) * (kin.v_max - kin.v_min)])
    tags = np.concatenate([[-1], rng.choice(3, size=cfg.n_c, p=np.asarray(cfg.traffic_mix))])
    zeros = np.zeros(n, dtype=np.int64)
    return World(x, road.lane_center(lane), vx, lane, zeros, zeros.copy(), tags)


def _trace_record(step: int, world: World, actions, violated: bool) -> dict:
    return {
        "step": step,
        "violation": bool(violated),
        "cars": [
            {"id": int(world.ids[i]), "x": float(world.x[i]), "y": float(world.y[i]),
             "vx": float(world.vx[i]), "lane": int(world.lane[i]),
             "lc_dir": int(world.lc_dir[i]), "lc_steps": int(world.lc_steps[i]),
             "action": int(actions[i]), "tag": int(world.tag[i])}
            for i in range(len(world))
        ],
    }


def _ego_level(controller: str) -> int | None:
    return {"level0": 0, "level1": 1, "level2": 2}.get(controller)


def select_actions(world: World, digits: np.ndarray, masks: np.ndarray, u: np.ndarray,
                   policies: dict, cfg: EpisodeConfig, sim: SimConfig, trainee=None) -> np.ndarray:
    """One action per car, all read from the same pre-step snapshot."""
    tags = world.tag.copy()
    level = _ego_level(cfg.ego_controller)
    if level is not None:
        tags[0] = level
    actions = np.zeros(len(world), dtype=np.int64)
    lvl0 = tags == 0
    if lvl0.any():
        actions[lvl0] = restrict_level0(level0_actions(digits[lvl0]), masks[lvl0])
    codes = None
    for k in (1, 2):
        rows = np.flatnonzero(tags == k)
        if len(rows) == 0:
            continue
        if k not in policies or policies[k] is None:
            raise KeyError(f"level-{k} policy required but not loaded")
        if codes is None:
            codes = encode_digits(digits)
        actions[rows] = sample_from_rows(policies[k].probabilities[codes[rows]], masks[rows], u[rows])
    ctrl = cfg.ego_controller
    if ctrl == "uniform":
        actions[0] = sample_from_rows(np.ones((1, masks.shape[1])), masks[:1], u[:1])[0]
    elif ctrl == "trainee":
        actions[0] = trainee.act(int(encode_digits(digits[0])), masks[0], float(u[0]))
    elif ctrl in ("stackelberg", "decision-tree"):
        actions[0] = controller_step(world, 0, Planner(ctrl), sim, digits[0], masks[0])
    return actions


def run_episode(cfg: EpisodeConfig, world: World, policies: dict, rng: np.random.Generator,
                sim: SimConfig = SimConfig(), trainee=None, record_trace: bool = False,
                stop_on_violation: bool = True) -> EpisodeResult:
    """Simulate until ``t_f`` or the first ego violation.

    The ego is car 0. Each step every car observes the start-of-step world,
    chooses an action and all cars move together. A trainee (controller
    ``"trainee"``) is rewarded on the post-step world.
    """
    if cfg.ego_controller == "trainee" and trainee is None:
        raise ValueError("controller 'trainee' needs a trainee hook")
    t0 = time.perf_counter()
    road, kin, obs = sim.road, sim.kinematics, sim.observation
    n = len(world)
    all_rows = np.arange(n)
    trace = [] if record_trace else None
    violated = bool(zone_overlaps(world, 0, road).any())
    if record_trace:
        trace.append(_trace_record(0, world, np.zeros(n, dtype=np.int64), violated))
    speeds = []
    steps = 0
    digits = observe_all(world, road, obs)
    if not (violated and stop_on_violation):
        for step in range(1, cfg.n_steps(kin.dt) + 1):
            masks = feasible_masks(world, all_rows, digits, road, kin)
            u = rng.random(n)
            actions = select_actions(world, digits, masks, u, policies, cfg, sim, trainee)
            code = int(encode_digits(digits[0])) if trainee is not None else 0
            world = step_world(world, actions, kin, road)
            steps = step
            speeds.append(world.vx[0])
            hit = bool(zone_overlaps(world, 0, road).any())
            violated |= hit
            digits = observe_all(world, road, obs)
            if trainee is not None:
                r = reward_totals(hit, world.vx[0], digits[0, FRONT], actions[0], sim.reward, kin)
                trainee.learn(code, int(actions[0]), float(r))
            if record_trace:
                trace.append(_trace_record(step, world, actions, hit))
            if hit and stop_on_violation:
                break
    mean_speed = float(np.mean(speeds)) if speeds else float(world.vx[0])
    return EpisodeResult(violated, steps, mean_speed, time.perf_counter() - t0, trace)


# -- batches -----------------------------------------------------------------

@dataclass
class MetricsAggregate:
    """Per-episode outcomes of a batch plus the usual summaries."""

    violated: np.ndarray
    mean_speeds: np.ndarray
    steps: np.ndarray
    wall_times: np.ndarray
    seeds: np.ndarray = field(default=None)

    @property
    def episodes(self) -> int:
        return len(self.violated)

    @property
    def violations(self) -> int:
        return int(np.sum(self.violated))

    @property
    def violation_rate(self) -> float:
        return self.violations / self.episodes

    @property
    def mean_of_mean_speeds(self) -> float:
        return float(np.mean(self.mean_speeds))

    @property
    def mean_wall_time(self) -> float:
        return float(np.mean(self.wall_times))

    def confidence_interval(self, level: float = 0.95) -> tuple[float, float]:
        ci = binomtest(self.violations, self.episodes).proportion_ci(level, method="wilson")
        return float(ci.low), float(ci.high)

    @classmethod
    def from_results(cls, results: list[EpisodeResult], seeds=None) -> "MetricsAggregate":
        return cls(np.array([r.violated for r in results], dtype=bool),
                   np.array([r.mean_speed for r in results]),
                   np.array([r.steps_run for r in results], dtype=np.int64),
                   np.array([r.wall_time for r in results]),
                   None if seeds is None else np.asarray(seeds, dtype=np.int64))


def run_seeded_episode(cfg: EpisodeConfig, seed: int, policies: dict,
                       sim: SimConfig = SimConfig(), record_trace: bool = False) -> EpisodeResult:
    init_rng, dyn_rng = episode_rngs(seed)
    world = initialize_episode(replace(cfg, seed=seed), init_rng, sim)
    return run_episode(cfg, world, policies, dyn_rng, sim, record_trace=record_trace)


def _run_chunk(args):
    cfg, seeds, policies, sim = args
    return [run_seeded_episode(cfg, s, policies, sim) for s in seeds]


def run_batch(cfg: EpisodeConfig, n_episodes: int, base_seed: int, policies: dict | None = None,
              sim: SimConfig = SimConfig(), workers: int = 1) -> MetricsAggregate:
    """Episodes ``base_seed + i`` for ``i < n_episodes``; order-independent results."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    policies = policies or {}
    seeds = [base_seed + i for i in range(n_episodes)]
    if workers <= 1:
        results = _run_chunk((cfg, seeds, policies, sim))
    else:
        chunks = [seeds[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_run_chunk, [(cfg, c, policies, sim) for c in chunks]))
        by_seed = {}
        for chunk, part in zip(chunks, parts):
            by_seed.update(zip(chunk, part))
        results = [by_seed[s] for s in seeds]
    return MetricsAggregate.from_results(results, seeds)


def compute_objective(violation_rate: float, mean_speed: float, p1: float, p2: float,
                      sim: SimConfig = SimConfig()) -> float:
    """Calibration objective: penalize violations, reward normalized mean speed."""
    kin = sim.kinematics
    return p1 * (-violation_rate) + p2 * (mean_speed - kin.v_min) / (kin.v_max - kin.v_min)


@dataclass
class SweepRow:
    w_ratio: float
    x_B: float
    violation_rate: float
    mean_speed: float
    R_obj: float
    metrics: MetricsAggregate = field(repr=False, default=None)


def sim_with_dt_params(sim: SimConfig, w_ratio: float, x_B: float) -> SimConfig:
    dt_cfg = replace(sim.decision_tree, w_l1=float(w_ratio), w_l2=1.0)
    return replace(sim, decision_tree=dt_cfg, trigger=replace(sim.trigger, x_B=float(x_B)))


def calibration_sweep(w_ratios, x_Bs, cfg: EpisodeConfig, n_episodes: int, base_seed: int,
                      policies: dict, p1: float, p2: float, sim: SimConfig = SimConfig(),
                      workers: int = 1) -> tuple[list[SweepRow], int]:
    """Decision-tree batches over the grid with common seeds; returns rows and argmax index."""
    grid = [(float(w), float(xb)) for w in w_ratios for xb in x_Bs]
    if not grid:
        raise ValueError("calibration grid is empty")
    cfg = replace(cfg, ego_controller="decision-tree")
    rows = []
    for w, xb in grid:
        m = run_batch(cfg, n_episodes, base_seed, policies, sim_with_dt_params(sim, w, xb), workers)
        rows.append(SweepRow(w, xb, m.violation_rate, m.mean_of_mean_speeds,
                             compute_objective(m.violation_rate, m.mean_of_mean_speeds, p1, p2, sim), m))
    best = int(np.argmax([r.R_obj for r in rows]))
    return rows, best


def paired_difference(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Mean and standard error of the per-episode difference ``a - b``."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    se = float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else float("inf")
    return float(d.mean()), se
