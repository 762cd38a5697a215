"""Action feasibility, the rule-based level-0 driver and tabular level-k policies."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .actions import N_ACTIONS, Action
from .perception import (
    APPROACHING, CLOSE, FRONT, FRONT_LEFT, FRONT_RIGHT, N_MESSAGES, NOMINAL, REAR_LEFT,
    REAR_RIGHT, STABLE, decode_codes, encode, encode_digits, observe_rows,
)
from .world import KinematicsConfig, RoadConfig, World

ROW_TOL = 1e-9
_MAINTAIN, _DECEL, _HARD_DECEL = int(Action.MAINTAIN), int(Action.DECELERATE), int(Action.HARD_DECELERATE)
_LEFT, _RIGHT = int(Action.CHANGE_LEFT), int(Action.CHANGE_RIGHT)


def _close_approaching(digits, slot):
    return (digits[:, slot] == CLOSE) & (digits[:, 5 + slot] == APPROACHING)


def masks_for_states(ox, ovx, lane, changing, digits: np.ndarray, world: World,
                     road: RoadConfig = RoadConfig(), kin: KinematicsConfig = KinematicsConfig(),
                     exclude=None) -> np.ndarray:
    """Feasibility masks, shape ``(k, 7)``, for k hypothetical cars among ``world``.

    ``digits`` are the observers' message digits and ``exclude`` the index of
    each observer inside ``world`` (-1 if it is not part of it). A car
    part-way through a lane change can only continue it, which is expressed
    as MAINTAIN being its single feasible action.
    """
    ox = np.asarray(ox, dtype=float)
    v = np.asarray(ovx, dtype=float)
    lane = np.asarray(lane, dtype=np.int64)
    changing = np.asarray(changing, dtype=bool)
    k = len(ox)
    mask = np.ones((k, N_ACTIONS), dtype=bool)
    accel = kin.accel_table()
    mask[:] = kin.speed_allows(v[:, None], accel[None, :])

    parallel = np.abs(world.x[None, :] - ox[:, None]) < road.safe_zone_length
    if exclude is not None:
        exclude = np.asarray(exclude, dtype=np.int64)
        own = exclude >= 0
        parallel[np.arange(k)[own], exclude[own]] = False
    occ_a, occ_b = world.lane[None, :], world.target_lane[None, :]
    for action, side, front_slot, rear_slot in ((_LEFT, 1, FRONT_LEFT, REAR_LEFT),
                                                (_RIGHT, -1, FRONT_RIGHT, REAR_RIGHT)):
        adj = (lane + side)[:, None]
        blocked = (parallel & ((occ_a == adj) | (occ_b == adj))).any(axis=1)
        blocked |= _close_approaching(digits, front_slot) | _close_approaching(digits, rear_slot)
        exists = (lane + side >= 1) & (lane + side <= road.n_lanes)
        mask[:, action] = exists & ~blocked

    mask[changing] = False
    mask[changing, _MAINTAIN] = True
    return mask


def feasible_masks(world: World, rows, digits: np.ndarray, road: RoadConfig = RoadConfig(),
                   kin: KinematicsConfig = KinematicsConfig()) -> np.ndarray:
    """Feasibility masks for the cars ``rows`` of ``world`` given their digits."""
    rows = np.asarray(rows, dtype=np.int64)
    return masks_for_states(world.x[rows], world.vx[rows], world.lane[rows],
                            world.changing[rows], digits, world, road, kin, exclude=rows)


def feasible_actions(world: World, ego: int, road: RoadConfig = RoadConfig(),
                     kin: KinematicsConfig = KinematicsConfig(), obs_cfg=None) -> np.ndarray:
    """Boolean mask over the 7 actions for car ``ego``."""
    kwargs = {} if obs_cfg is None else {"cfg": obs_cfg}
    digits = observe_rows(world, [ego], road, **kwargs)
    return feasible_masks(world, [ego], digits, road, kin)[0]


def level0_actions(digits: np.ndarray) -> np.ndarray:
    """Level-0 action for each row of message digits (unmasked)."""
    digits = np.atleast_2d(digits)
    rng, rate = digits[:, FRONT], digits[:, 5 + FRONT]
    approaching = rate == APPROACHING
    hard = (rng == CLOSE) & approaching
    soft = ((rng == NOMINAL) & approaching) | ((rng == CLOSE) & (rate == STABLE))
    return np.where(hard, _HARD_DECEL, np.where(soft, _DECEL, _MAINTAIN)).astype(np.int64)


def level0_action(message) -> Action:
    """Decelerate when the car in front is nominal and approaching or close and
    stable, brake hard when it is close and approaching, otherwise maintain."""
    return Action(int(level0_actions(np.array([list(message)]))[0]))


def restrict_level0(actions: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Weaken level-0 braking that the speed floor forbids: hard -> soft -> maintain."""
    actions = np.array(actions, dtype=np.int64)
    rows = np.arange(len(actions))
    hard_blocked = (actions == _HARD_DECEL) & ~mask[rows, _HARD_DECEL]
    actions[hard_blocked] = _DECEL
    soft_blocked = (actions == _DECEL) & ~mask[rows, _DECEL]
    actions[soft_blocked] = _MAINTAIN
    return actions


def level0_table(n_messages: int = N_MESSAGES) -> np.ndarray:
    """Level-0 action for every message code."""
    return level0_actions(decode_codes(np.arange(n_messages)))


@dataclass
class TabularPolicy:
    """Stochastic map from message code to a distribution over actions."""

    probabilities: np.ndarray
    level: int = 1
    visit_counts: np.ndarray = field(default=None)
    seed: int = 0
    config_hash: str = ""

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        if self.visit_counts is None:
            self.visit_counts = np.zeros(len(self.probabilities), dtype=np.int64)
        self.visit_counts = np.asarray(self.visit_counts, dtype=np.int64)

    @classmethod
    def uniform(cls, level: int = 1, n_messages: int = N_MESSAGES, n_actions: int = N_ACTIONS,
                **kwargs) -> "TabularPolicy":
        return cls(np.full((n_messages, n_actions), 1.0 / n_actions), level=level, **kwargs)

    @classmethod
    def from_level0(cls, level: int = 0, **kwargs) -> "TabularPolicy":
        table = np.zeros((N_MESSAGES, N_ACTIONS))
        table[np.arange(N_MESSAGES), level0_table()] = 1.0
        return cls(table, level=level, **kwargs)

    @property
    def n_messages(self) -> int:
        return self.probabilities.shape[0]

    def validate(self):
        p = self.probabilities
        if p.ndim != 2 or not np.isfinite(p).all():
            raise ValueError("policy table must be a finite 2-D array")
        if (p < 0).any():
            raise ValueError("policy has negative probabilities")
        bad = np.abs(p.sum(axis=1) - 1.0) > ROW_TOL
        if bad.any():
            raise ValueError(f"{int(bad.sum())} policy rows do not sum to 1")
        if self.visit_counts.shape != (p.shape[0],) or (self.visit_counts < 0).any():
            raise ValueError("visit counts malformed")

    def greedy(self) -> np.ndarray:
        return np.argmax(self.probabilities, axis=1)


def sample_from_rows(rows: np.ndarray, masks: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling of each masked, renormalized row with uniforms ``u``.

    Rows whose feasible mass is zero fall back to uniform over feasible actions.
    """
    w = np.where(masks, rows, 0.0)
    total = w.sum(axis=1)
    empty = total <= 0
    if empty.any():
        w[empty] = masks[empty]
        total[empty] = w[empty].sum(axis=1)
    cdf = np.cumsum(w, axis=1)
    pick = (cdf <= (u * total)[:, None]).sum(axis=1)
    # guard the u*total == total edge and trailing infeasible columns
    pick = np.minimum(pick, N_ACTIONS - 1)
    stuck = ~masks[np.arange(len(pick)), pick]
    if stuck.any():
        last = N_ACTIONS - 1 - np.argmax(masks[:, ::-1], axis=1)
        pick = np.where(stuck, last, pick)
    return pick


def masked_distribution(row: np.ndarray, mask: np.ndarray) -> np.ndarray:
    w = np.where(mask, row, 0.0)
    if w.sum() <= 0:
        w = mask.astype(float)
    return w / w.sum()


def sample_action(policy: TabularPolicy, message, mask, rng: np.random.Generator) -> Action:
    """Draw an action for ``message`` restricted to the feasible ``mask``."""
    code = message if isinstance(message, (int, np.integer)) else encode(message)
    row = policy.probabilities[code][None, :]
    pick = sample_from_rows(row, np.asarray(mask, dtype=bool)[None, :], np.array([rng.random()]))
    return Action(int(pick[0]))


def policy_rows(policy: TabularPolicy, digits: np.ndarray) -> np.ndarray:
    return policy.probabilities[encode_digits(digits)]
