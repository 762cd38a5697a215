"""Driver observations: quantized ranges and range rates to five neighbours.

A message has eleven ternary features in this fixed order::

    0-4   range to front, front-left, front-right, rear-left, rear-right car
    5-9   range rate to the same five cars
    10    lane index

Each feature is encoded as a digit 0..2 and the whole message as the
little-endian base-3 number of its digits, giving codes in ``[0, 3**11)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

import numpy as np

from .world import RoadConfig, World

N_FEATURES = 11
N_MESSAGES = 3 ** N_FEATURES
POWERS = 3 ** np.arange(N_FEATURES, dtype=np.int64)

# slot order and (lane offset, faces forward)
SLOTS = ("front", "front_left", "front_right", "rear_left", "rear_right")
_SLOT_GEOMETRY = ((0, True), (1, True), (-1, True), (1, False), (-1, False))
FRONT, FRONT_LEFT, FRONT_RIGHT, REAR_LEFT, REAR_RIGHT = range(5)
LANE_FEATURE = 10


# plain-int digit values for the vectorized paths
CLOSE, NOMINAL, FAR = 0, 1, 2
APPROACHING, STABLE, MOVING_AWAY = 0, 1, 2


class Range(IntEnum):
    CLOSE = 0
    NOMINAL = 1
    FAR = 2


class RangeRate(IntEnum):
    APPROACHING = 0
    STABLE = 1
    MOVING_AWAY = 2


@dataclass(frozen=True)
class ObservationConfig:
    d_c: float = 21.0
    d_f: float = 42.0
    d_v: float = 63.0
    rr_eps: float = 0.25

    def __post_init__(self):
        if not 0 < self.d_c < self.d_f < self.d_v:
            raise ValueError("require 0 < d_c < d_f < d_v")
        if self.rr_eps < 0:
            raise ValueError("rr_eps must be >= 0")


class Message(NamedTuple):
    front_range: Range = Range.FAR
    front_left_range: Range = Range.FAR
    front_right_range: Range = Range.FAR
    rear_left_range: Range = Range.FAR
    rear_right_range: Range = Range.FAR
    front_rate: RangeRate = RangeRate.MOVING_AWAY
    front_left_rate: RangeRate = RangeRate.MOVING_AWAY
    front_right_rate: RangeRate = RangeRate.MOVING_AWAY
    rear_left_rate: RangeRate = RangeRate.MOVING_AWAY
    rear_right_rate: RangeRate = RangeRate.MOVING_AWAY
    lane: int = 0

    @classmethod
    def from_digits(cls, digits) -> "Message":
        d = [int(v) for v in digits]
        return cls(*(Range(v) for v in d[:5]), *(RangeRate(v) for v in d[5:10]), d[10])

    def slot(self, k: int) -> tuple[Range, RangeRate]:
        return self[k], self[5 + k]


def quantize_range(distance: float, cfg: ObservationConfig = ObservationConfig()) -> Range:
    if distance <= cfg.d_c:
        return Range.CLOSE
    if distance <= cfg.d_f:
        return Range.NOMINAL
    return Range.FAR


def quantize_range_rate(rate: float, cfg: ObservationConfig = ObservationConfig()) -> RangeRate:
    if rate < -cfg.rr_eps:
        return RangeRate.APPROACHING
    if rate > cfg.rr_eps:
        return RangeRate.MOVING_AWAY
    return RangeRate.STABLE


def encode(message) -> int:
    code = 0
    for k, digit in enumerate(message):
        code += int(digit) * 3 ** k
    return code


def decode(code: int) -> Message:
    if not 0 <= code < N_MESSAGES:
        raise ValueError(f"message code {code} outside [0, {N_MESSAGES})")
    return Message.from_digits((code // 3 ** k) % 3 for k in range(N_FEATURES))


def encode_digits(digits: np.ndarray) -> np.ndarray:
    """Vectorized ``encode`` over the last axis of a digit array."""
    return np.asarray(digits, dtype=np.int64) @ POWERS


def decode_codes(codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    return (codes[..., None] // POWERS) % 3


def lane_feature(lane, n_lanes: int):
    """Map a lane index onto the three-valued lane feature.

    For three lanes this is ``lane - 1``; wider roads collapse to
    rightmost / interior / leftmost.
    """
    lane = np.asarray(lane)
    if n_lanes <= 3:
        return lane - 1
    return np.where(lane == 1, 0, np.where(lane == n_lanes, 2, 1))


def observed_lane(world: World, road: RoadConfig) -> np.ndarray:
    """Lane each car appears in to others: nearest lane center, ties to the destination."""
    target = world.target_lane
    d_origin = np.abs(world.y - (world.lane - 0.5) * road.lane_width)
    d_target = np.abs(world.y - (target - 0.5) * road.lane_width)
    # the midpoint tie must survive float rounding of y
    return np.where(world.changing & (d_target <= d_origin + 1e-9), target, world.lane)


def observe_states(ox, ovx, own_lane, world: World, road: RoadConfig = RoadConfig(),
                   cfg: ObservationConfig = ObservationConfig(), exclude=None) -> np.ndarray:
    """Message digits seen by observers at ``ox`` with speeds ``ovx`` in lanes
    ``own_lane`` looking at the cars of ``world``.

    ``exclude`` optionally gives, per observer, the index in ``world`` of the
    observer itself (or -1). Shape of the result is ``(len(ox), 11)``.
    """
    ox = np.asarray(ox, dtype=float)
    ovx = np.asarray(ovx, dtype=float)
    own_lane = np.asarray(own_lane, dtype=np.int64)
    k = len(ox)
    out = np.empty((k, N_FEATURES), dtype=np.int64)
    out[:, LANE_FEATURE] = lane_feature(own_lane, road.n_lanes)
    out[:, :5] = FAR
    out[:, 5:10] = MOVING_AWAY
    if len(world) == 0 or k == 0:
        return out
    dx = world.x[None, :] - ox[:, None]
    dist = np.abs(dx)
    rel_lane = observed_lane(world, road)[None, :] - own_lane[:, None]
    candidate = dist <= cfg.d_v
    ar = np.arange(k)
    if exclude is not None:
        exclude = np.asarray(exclude, dtype=np.int64)
        own = exclude >= 0
        candidate[ar[own], exclude[own]] = False
    ahead = dx >= 0
    for s, (offset, front) in enumerate(_SLOT_GEOMETRY):
        in_slot = candidate & (rel_lane == offset) & (ahead if front else ~ahead)
        d = np.where(in_slot, dist, np.inf)
        j = np.argmin(d, axis=1)
        dj = d[ar, j]
        seen = np.isfinite(dj)
        if not seen.any():
            continue
        rate = world.vx[j] - ovx if front else ovx - world.vx[j]
        rng = np.where(dj <= cfg.d_c, CLOSE, np.where(dj <= cfg.d_f, NOMINAL, FAR))
        rr = np.where(rate < -cfg.rr_eps, APPROACHING,
                      np.where(rate > cfg.rr_eps, MOVING_AWAY, STABLE))
        out[:, s] = np.where(seen, rng, FAR)
        out[:, 5 + s] = np.where(seen, rr, MOVING_AWAY)
    return out


def observe_rows(world: World, rows, road: RoadConfig = RoadConfig(),
                 cfg: ObservationConfig = ObservationConfig()) -> np.ndarray:
    """Message digits for the cars ``rows``; shape ``(len(rows), 11)``."""
    rows = np.asarray(rows, dtype=np.int64)
    return observe_states(world.x[rows], world.vx[rows], world.target_lane[rows],
                          world, road, cfg, exclude=rows)


def observe_all(world: World, road: RoadConfig = RoadConfig(),
                cfg: ObservationConfig = ObservationConfig()) -> np.ndarray:
    return observe_rows(world, np.arange(len(world)), road, cfg)


def observe(world: World, ego: int, road: RoadConfig = RoadConfig(),
            cfg: ObservationConfig = ObservationConfig()) -> Message:
    """The message car ``ego`` perceives in ``world``."""
    return Message.from_digits(observe_rows(world, [ego], road, cfg)[0])


def headway_range(world: World, ego: int, road: RoadConfig = RoadConfig(),
                  cfg: ObservationConfig = ObservationConfig()) -> Range:
    """Quantized range to the car directly in front (FAR when none is visible)."""
    return Range(int(observe_rows(world, [ego], road, cfg)[0, FRONT]))
