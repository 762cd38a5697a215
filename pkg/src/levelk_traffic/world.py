"""Vehicle kinematics, lane geometry and safe-zone checks.

Two views of the same state are provided. ``VehicleState`` is a frozen record
for one car and backs the scalar operations (``step_vehicle``,
``safe_zones_intersect``). ``World`` stores every car as parallel numpy arrays
and is what the simulation loop advances; ``step_world`` applies exactly the
same arithmetic as ``step_vehicle`` element-wise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .actions import Action

KMH = 1.0 / 3.6
SPEED_EPS = 1e-9


class InfeasibleActionError(ValueError):
    """Raised when an action violates the speed bounds or the road edge."""


@dataclass(frozen=True)
class RoadConfig:
    n_lanes: int = 3
    lane_width: float = 3.6
    safe_zone_length: float = 6.0
    safe_zone_width: float = 2.0

    def __post_init__(self):
        if self.n_lanes < 1:
            raise ValueError("n_lanes must be >= 1")
        for name in ("lane_width", "safe_zone_length", "safe_zone_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")

    def lane_center(self, lane):
        """Lateral position of the center of ``lane`` (1 = rightmost)."""
        return (lane - 0.5) * self.lane_width


@dataclass(frozen=True)
class KinematicsConfig:
    a1: float = 2.5
    a2: float = 5.0
    t_cl: float = 2.0
    dt: float = 1.0
    v_min: float = 62 * KMH
    v_max: float = 98 * KMH

    def __post_init__(self):
        if not 0 < self.a1 < self.a2:
            raise ValueError("require 0 < a1 < a2")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        ratio = self.t_cl / self.dt
        if ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("t_cl must be a positive integer multiple of dt")
        if not self.v_min < self.v_max:
            raise ValueError("require v_min < v_max")

    @property
    def lane_change_steps(self) -> int:
        return int(round(self.t_cl / self.dt))

    @property
    def v_nominal(self) -> float:
        return 0.5 * (self.v_min + self.v_max)

    def acceleration(self, action: int) -> float:
        return _ACCEL_UNITS[int(action)] * (self.a1, self.a2)[_ACCEL_HARD[int(action)]]

    def accel_table(self) -> np.ndarray:
        """Longitudinal acceleration for every action ordinal."""
        table = self.__dict__.get("_accel_table")
        if table is None:
            table = np.array([self.acceleration(a) for a in range(len(_ACCEL_UNITS))], dtype=float)
            table.flags.writeable = False
            object.__setattr__(self, "_accel_table", table)
        return table

    def speed_allows(self, vx, accel):
        """Speeding up needs room below v_max, slowing down room above v_min."""
        vx = np.asarray(vx, dtype=float)
        accel = np.asarray(accel, dtype=float)
        return (((accel <= 0) | (vx < self.v_max - SPEED_EPS))
                & ((accel >= 0) | (vx > self.v_min + SPEED_EPS)))

    def next_speed(self, vx, accel):
        """Euler speed update saturated at the speed bounds."""
        return np.clip(np.asarray(vx, dtype=float) + np.asarray(accel, dtype=float) * self.dt,
                       self.v_min, self.v_max)


# sign of the longitudinal acceleration and whether it is the hard level
_ACCEL_UNITS = (0, 1, -1, 1, -1, 0, 0)
_ACCEL_HARD = (0, 0, 0, 1, 1, 0, 0)
_LANE_DIR = (0, 0, 0, 0, 0, 1, -1)
LANE_DIR = np.array(_LANE_DIR, dtype=np.int64)


@dataclass(frozen=True)
class VehicleState:
    """One car.

    ``lane`` is the occupied lane, or the lane being left while a change is in
    progress. ``lc_dir`` is +1 (toward the left, higher lane index), -1
    (toward the right) or 0 when centered; ``lc_steps`` counts the steps left
    in the change.
    """

    id: int
    x: float
    y: float
    vx: float
    lane: int
    lc_dir: int = 0
    lc_steps: int = 0
    policy_tag: int = 0

    @property
    def changing(self) -> bool:
        return self.lc_dir != 0

    @property
    def target_lane(self) -> int:
        return self.lane + self.lc_dir

    @classmethod
    def centered(cls, id, x, vx, lane, road: RoadConfig = RoadConfig(), policy_tag=0):
        return cls(id=id, x=float(x), y=float(road.lane_center(lane)), vx=float(vx),
                   lane=int(lane), policy_tag=policy_tag)


def check_action(state: VehicleState, action: int, cfg: KinematicsConfig, road: RoadConfig):
    if state.changing:
        return
    if not cfg.speed_allows(state.vx, cfg.acceleration(action)):
        raise InfeasibleActionError(
            f"{Action(action).name} at speed {state.vx:.3f} pushes past a speed bound")
    target = state.lane + _LANE_DIR[int(action)]
    if not 1 <= target <= road.n_lanes:
        raise InfeasibleActionError(f"{Action(action).name} from lane {state.lane}: no such lane")


def step_vehicle(state: VehicleState, action: int, cfg: KinematicsConfig = KinematicsConfig(),
                 road: RoadConfig = RoadConfig()) -> VehicleState:
    """Advance one car by one update period.

    A lane change in progress always continues and the requested action is
    ignored until it completes.
    """
    check_action(state, action, cfg, road)
    x = state.x + state.vx * cfg.dt
    dy = road.lane_width * cfg.dt / cfg.t_cl
    if state.changing:
        lc_dir, steps = state.lc_dir, state.lc_steps
        vx = state.vx
    else:
        lc_dir = _LANE_DIR[int(action)]
        steps = cfg.lane_change_steps if lc_dir else 0
        vx = float(cfg.next_speed(state.vx, cfg.acceleration(action)))
    if not lc_dir:
        return replace(state, x=x, vx=vx)
    y = state.y + lc_dir * dy
    steps -= 1
    lane = state.lane
    if steps == 0:
        lane += lc_dir
        y = road.lane_center(lane)
        lc_dir = 0
    return replace(state, x=x, y=y, vx=vx, lane=lane, lc_dir=lc_dir, lc_steps=steps)


def safe_zones_intersect(a, b, road: RoadConfig = RoadConfig()) -> bool:
    """True iff the safe-zone rectangles of two cars overlap with positive area."""
    return (abs(a.x - b.x) < road.safe_zone_length
            and abs(a.y - b.y) < road.safe_zone_width)


def is_parallel(a, b, road: RoadConfig = RoadConfig()) -> bool:
    """True iff the safe zones overlap longitudinally, whatever the lateral gap."""
    return abs(a.x - b.x) < road.safe_zone_length


@dataclass
class World:
    """All cars of one simulation as parallel arrays (index = car slot)."""

    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    lane: np.ndarray
    lc_dir: np.ndarray
    lc_steps: np.ndarray
    tag: np.ndarray
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.vx = np.asarray(self.vx, dtype=float)
        self.lane = np.asarray(self.lane, dtype=np.int64)
        self.lc_dir = np.asarray(self.lc_dir, dtype=np.int64)
        self.lc_steps = np.asarray(self.lc_steps, dtype=np.int64)
        self.tag = np.asarray(self.tag, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.x))
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self):
        return len(self.x)

    @property
    def changing(self) -> np.ndarray:
        return self.lc_dir != 0

    @property
    def target_lane(self) -> np.ndarray:
        return self.lane + self.lc_dir

    def vehicle(self, i: int) -> VehicleState:
        return VehicleState(id=int(self.ids[i]), x=float(self.x[i]), y=float(self.y[i]),
                            vx=float(self.vx[i]), lane=int(self.lane[i]),
                            lc_dir=int(self.lc_dir[i]), lc_steps=int(self.lc_steps[i]),
                            policy_tag=int(self.tag[i]))

    def vehicles(self) -> list[VehicleState]:
        return [self.vehicle(i) for i in range(len(self))]

    @classmethod
    def from_vehicles(cls, vehicles: Sequence[VehicleState]) -> "World":
        cols = zip(*[(v.x, v.y, v.vx, v.lane, v.lc_dir, v.lc_steps, v.policy_tag, v.id)
                     for v in vehicles]) if vehicles else [()] * 8
        x, y, vx, lane, lc_dir, lc_steps, tag, ids = (list(c) for c in cols)
        return cls(x, y, vx, lane, lc_dir, lc_steps, tag, ids)

    def copy(self) -> "World":
        return World(self.x.copy(), self.y.copy(), self.vx.copy(), self.lane.copy(),
                     self.lc_dir.copy(), self.lc_steps.copy(), self.tag.copy(),
                     self.ids.copy())

    def take(self, idx) -> "World":
        return World(self.x[idx], self.y[idx], self.vx[idx], self.lane[idx],
                     self.lc_dir[idx], self.lc_steps[idx], self.tag[idx], self.ids[idx])

    def index_of(self, vehicle_id: int) -> int:
        hits = np.flatnonzero(self.ids == vehicle_id)
        if len(hits) == 0:
            raise KeyError(f"no vehicle with id {vehicle_id}")
        return int(hits[0])


def infeasible(world: World, actions: np.ndarray, cfg: KinematicsConfig, road: RoadConfig):
    """Boolean per car: the action would break a speed bound or leave the road."""
    actions = np.asarray(actions, dtype=np.int64)
    target = world.lane + LANE_DIR[actions]
    bad = (~cfg.speed_allows(world.vx, cfg.accel_table()[actions])
           | (target < 1) | (target > road.n_lanes))
    return bad & ~world.changing


def step_world(world: World, actions: Iterable[int], cfg: KinematicsConfig = KinematicsConfig(),
               road: RoadConfig = RoadConfig(), check: bool = True) -> World:
    """Advance every car simultaneously; same arithmetic as ``step_vehicle``."""
    actions = np.asarray(actions, dtype=np.int64)
    if check:
        bad = infeasible(world, actions, cfg, road)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise InfeasibleActionError(
                f"car {int(world.ids[i])}: {Action(int(actions[i])).name} is infeasible")
    changing = world.changing
    x = world.x + world.vx * cfg.dt
    accel = np.where(changing, 0.0, cfg.accel_table()[actions])
    vx = np.where(changing, world.vx, cfg.next_speed(world.vx, accel))
    lc_dir = np.where(changing, world.lc_dir, LANE_DIR[actions])
    steps = np.where(changing, world.lc_steps,
                     np.where(lc_dir != 0, cfg.lane_change_steps, 0))
    moving = lc_dir != 0
    dy = road.lane_width * cfg.dt / cfg.t_cl
    y = np.where(moving, world.y + lc_dir * dy, world.y)
    steps = np.where(moving, steps - 1, steps)
    done = moving & (steps == 0)
    lane = np.where(done, world.lane + lc_dir, world.lane)
    y = np.where(done, (lane - 0.5) * road.lane_width, y)
    lc_dir = np.where(done, 0, lc_dir)
    return World(x, y, vx, lane, lc_dir, steps, world.tag, world.ids)


def zone_overlaps(world: World, i: int, road: RoadConfig = RoadConfig()) -> np.ndarray:
    """Boolean per car: its safe zone intersects the zone of car ``i`` (self excluded)."""
    hit = ((np.abs(world.x - world.x[i]) < road.safe_zone_length)
           & (np.abs(world.y - world.y[i]) < road.safe_zone_width))
    hit[i] = False
    return hit


def detect_violation(world: World, ego: int = 0, road: RoadConfig = RoadConfig()) -> bool:
    """True iff the ego's safe zone intersects any other car's safe zone."""
    return bool(zone_overlaps(world, ego, road).any())


def any_pair_violation(world: World, road: RoadConfig = RoadConfig()) -> bool:
    dx = np.abs(world.x[:, None] - world.x[None, :]) < road.safe_zone_length
    dy = np.abs(world.y[:, None] - world.y[None, :]) < road.safe_zone_width
    hit = dx & dy
    np.fill_diagonal(hit, False)
    return bool(hit.any())
