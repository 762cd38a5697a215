"""Controllers under test: Stackelberg leader, two-layer decision tree, trigger logic."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

from .actions import N_ACTIONS, Action
from .driver_policy import feasible_masks, level0_actions, masks_for_states, restrict_level0
from .perception import FRONT, observe_rows, observe_states, observed_lane
from .reward import RewardWeights, reward_totals
from .world import World, step_world

if TYPE_CHECKING:
    from .config import SimConfig

ACTIONS = np.arange(N_ACTIONS)


@dataclass(frozen=True)
class StackelbergConfig:
    T: float = 2.0
    d_min: float = 6.0
    d_v: float = 63.0

    def __post_init__(self):
        if self.T <= 0 or self.d_min <= 0:
            raise ValueError("T and d_min must be > 0")


@dataclass(frozen=True)
class DecisionTreeConfig:
    w_l1: float = 2.0
    w_l2: float = 1.0
    weights: RewardWeights = field(default_factory=RewardWeights)

    def __post_init__(self):
        if self.w_l1 <= 0 or self.w_l2 <= 0:
            raise ValueError("layer weights must be > 0")


@dataclass(frozen=True)
class TriggerConfig:
    x_A: float = 42.0
    x_B: float = 21.0
    # region B spans the ego lane widened by this much on each side
    b_margin: float = 1.0

    def __post_init__(self):
        if not 0 < self.x_B < self.x_A:
            raise ValueError("require 0 < x_B < x_A")


class TriggerState(Enum):
    FREE_ACCELERATE = "free-accelerate"
    PLAN = "plan"
    SAFE_MODE = "safe-mode"


class Planner(Enum):
    STACKELBERG = "stackelberg"
    DECISION_TREE = "decision-tree"


def _region_hits(world: World, ego: int, length: float, half_width: float, road) -> np.ndarray:
    front = world.x[ego] + road.safe_zone_length / 2
    lon = ((world.x + road.safe_zone_length / 2 > front)
           & (world.x - road.safe_zone_length / 2 < front + length))
    lat = np.abs(world.y - world.y[ego]) < half_width + road.safe_zone_width / 2
    hit = lon & lat
    hit[ego] = False
    return hit


def trigger_state(world: World, ego: int, cfg: TriggerConfig, road) -> TriggerState:
    """Region B (close, own lane and its boundary lines) wins over region A
    (longer, reaching the centers of the adjacent lanes)."""
    if _region_hits(world, ego, cfg.x_B, road.lane_width / 2 + cfg.b_margin, road).any():
        return TriggerState.SAFE_MODE
    if _region_hits(world, ego, cfg.x_A, road.lane_width, road).any():
        return TriggerState.PLAN
    return TriggerState.FREE_ACCELERATE


def hold_rollout(states: World, actions, n_steps: int, kin, road) -> World:
    """Predict each row holding its action for ``n_steps`` updates.

    Lane changes run to completion and are not repeated; speed actions repeat
    until the speed reaches its bound, then the car maintains.
    """
    actions = np.asarray(actions, dtype=np.int64)
    w = step_world(states, actions, kin, road, check=False)
    accel = kin.accel_table()[actions]
    for _ in range(n_steps - 1):
        ok = kin.speed_allows(w.vx, accel)
        nxt = np.where((accel != 0) & ok, actions, Action.MAINTAIN)
        w = step_world(w, nxt, kin, road, check=False)
    return w


def maintain_rollout(world: World, n_steps: int, kin, road) -> list[World]:
    out = []
    for _ in range(n_steps):
        world = step_world(world, np.zeros(len(world), dtype=np.int64), kin, road, check=False)
        out.append(world)
    return out


# -- Stackelberg ------------------------------------------------------------

def stackelberg_followers(world: World, ego: int, cfg: StackelbergConfig) -> list[int]:
    """The (up to) two nearest cars behind the ego, any lane, within visibility."""
    dx = world.x - world.x[ego]
    behind = (dx < 0) & (-dx <= cfg.d_v)
    behind[ego] = False
    idx = np.flatnonzero(behind)
    order = np.argsort(-dx[idx], kind="stable")
    return [int(i) for i in idx[order][:2]]


def utility_terms(front_d, rear_d, rear_v, v_ego, cfg: StackelbergConfig):
    """Positive plus negative utility from headway/trailing gaps (inf = no car)."""
    u_pos = np.where(np.isfinite(front_d), front_d, cfg.d_v)
    closing = rear_v - v_ego
    u_neg = np.where(np.isfinite(rear_d), rear_d - closing * cfg.T - cfg.d_min, cfg.d_v - cfg.d_min)
    return u_pos + u_neg


def stackelberg_utility(world: World, player: int, cfg: StackelbergConfig, road) -> float:
    """Utility of ``player`` in a (predicted) world."""
    lanes = observed_lane(world, road)
    dx = world.x - world.x[player]
    same = lanes == lanes[player]
    same[player] = False
    ahead = same & (dx >= 0) & (dx <= cfg.d_v)
    behind = same & (dx < 0) & (-dx <= cfg.d_v)
    front_d = dx[ahead].min() if ahead.any() else np.inf
    if behind.any():
        j = np.flatnonzero(behind)[np.argmin(-dx[behind])]
        rear_d, rear_v = -dx[j], world.vx[j]
    else:
        rear_d, rear_v = np.inf, 0.0
    return float(utility_terms(front_d, rear_d, rear_v, world.vx[player], cfg))


def _gaps(ex, ev, elane, cx, cv, clane, d_v):
    """Front distance and (rear distance, rear speed) from ego rows to car columns."""
    if len(cx) == 0:
        inf = np.full(len(ex), np.inf)
        return inf, inf.copy(), np.zeros(len(ex))
    dx = cx[None, :] - ex[:, None]
    same = clane[None, :] == elane[:, None]
    front = np.where(same & (dx >= 0) & (dx <= d_v), dx, np.inf).min(axis=1)
    rear_all = np.where(same & (dx < 0) & (-dx <= d_v), -dx, np.inf)
    j = np.argmin(rear_all, axis=1)
    rear = rear_all[np.arange(len(ex)), j]
    rear_v = np.where(np.isfinite(rear), cv[j], 0.0)
    return front, rear, rear_v


def stackelberg_values(world: World, ego: int, sim: "SimConfig"):
    """Leader values ``max_l min_f1 min_f2 U`` inputs: the utility cube and masks."""
    road, kin, cfg = sim.road, sim.kinematics, sim.stackelberg
    n_steps = max(1, int(round(cfg.T / kin.dt)))
    followers = stackelberg_followers(world, ego, cfg)
    players = [ego] + followers
    digits = observe_rows(world, players, road, sim.observation)
    masks = feasible_masks(world, players, digits, road, kin)
    rest = np.setdiff1d(np.arange(len(world)), players)
    others = world.take(rest)
    if len(rest):
        others = maintain_rollout(others, n_steps, kin, road)[-1]
    lead = hold_rollout(world.take(np.full(N_ACTIONS, ego)), ACTIONS, n_steps, kin, road)
    lead_lane = observed_lane(lead, road)
    o_lane = observed_lane(others, road)
    s_front, s_rear, s_rear_v = _gaps(lead.x, lead.vx, lead_lane, others.x, others.vx, o_lane, cfg.d_v)

    # candidates per follower: (7 leader, 7 follower) front / rear gaps
    fronts, rears, rear_vs = [s_front[:, None, None]], [s_rear[:, None, None]], [s_rear_v[:, None, None]]
    shape = [N_ACTIONS, 1, 1]
    for k, f in enumerate(followers):
        fw = hold_rollout(world.take(np.full(N_ACTIONS, f)), ACTIONS, n_steps, kin, road)
        flane = observed_lane(fw, road)
        dx = fw.x[None, :] - lead.x[:, None]
        same = flane[None, :] == lead_lane[:, None]
        fr = np.where(same & (dx >= 0) & (dx <= cfg.d_v), dx, np.inf)
        rr = np.where(same & (dx < 0) & (-dx <= cfg.d_v), -dx, np.inf)
        rv = np.broadcast_to(fw.vx[None, :], rr.shape)
        new_shape = [N_ACTIONS, 1, 1]
        new_shape[k + 1] = N_ACTIONS
        fronts.append(fr.reshape(new_shape))
        rears.append(rr.reshape(new_shape))
        rear_vs.append(rv.reshape(new_shape))
        shape[k + 1] = N_ACTIONS
    front = fronts[0]
    for fr in fronts[1:]:
        front = np.minimum(front, fr)
    front = np.broadcast_to(front, shape)
    stack_r = np.stack([np.broadcast_to(r, shape) for r in rears])
    stack_v = np.stack([np.broadcast_to(v, shape) for v in rear_vs])
    pick = np.argmin(stack_r, axis=0)
    rear = np.take_along_axis(stack_r, pick[None], axis=0)[0]
    rear_v = np.take_along_axis(stack_v, pick[None], axis=0)[0]
    rear_v = np.where(np.isfinite(rear), rear_v, 0.0)
    u = utility_terms(front, rear, rear_v, lead.vx[:, None, None], cfg)

    fmask = [masks[1 + k] for k in range(len(followers))]
    return u, masks[0], fmask


def robust_leader_choice(u: np.ndarray, lead_mask, follower_masks) -> int:
    """``argmax_l min_f1 min_f2 u[l, f1, f2]`` over feasible actions; first index on ties."""
    if len(follower_masks) >= 2:
        u = np.where(follower_masks[1][None, None, :], u, np.inf)
    if len(follower_masks) >= 1:
        u = np.where(follower_masks[0][None, :, None], u, np.inf)
    worst = u.min(axis=(1, 2))
    worst = np.where(lead_mask, worst, -np.inf)
    return int(np.argmax(worst))


def stackelberg_action(world: World, ego: int, sim: "SimConfig") -> Action:
    """Leader action maximizing the worst case over both followers' actions."""
    u, lead_mask, fmask = stackelberg_values(world, ego, sim)
    return Action(robust_leader_choice(u, lead_mask, fmask))


# -- decision tree ----------------------------------------------------------

def _layer_rewards(ego_states: World, others: World, actions, sim: "SimConfig", weights) -> np.ndarray:
    road, obs = sim.road, sim.observation
    if len(others):
        viol = ((np.abs(others.x[None, :] - ego_states.x[:, None]) < road.safe_zone_length)
                & (np.abs(others.y[None, :] - ego_states.y[:, None]) < road.safe_zone_width)).any(axis=1)
        digits = observe_states(ego_states.x, ego_states.vx, ego_states.target_lane, others, road, obs)
        headway = digits[:, FRONT]
    else:
        viol = np.zeros(len(ego_states), dtype=bool)
        headway = np.full(len(ego_states), 2)
    return reward_totals(viol, ego_states.vx, headway, actions, weights, sim.kinematics)


def decision_tree_scores(world: World, ego: int, sim: "SimConfig"):
    """Totals ``w_l1 R_l1 + w_l2 R_l2`` for every (layer-1, layer-2) profile.

    Returns ``(totals, valid)``, both ``(7, 7)``; a profile is valid when its
    first action is feasible now and its second is feasible in the predicted
    world. A layer-1 lane change leaves MAINTAIN (continuation) as the only
    valid second layer.
    """
    road, kin, cfg = sim.road, sim.kinematics, sim.decision_tree
    mask1 = feasible_masks(world, [ego], observe_rows(world, [ego], road, sim.observation), road, kin)[0]
    others = world.take(np.setdiff1d(np.arange(len(world)), [ego]))
    o1, o2 = maintain_rollout(others, 2, kin, road) if len(others) else (others, others)

    e1 = step_world(world.take(np.full(N_ACTIONS, ego)), ACTIONS, kin, road, check=False)
    r1 = _layer_rewards(e1, o1, ACTIONS, sim, cfg.weights)
    d1 = observe_states(e1.x, e1.vx, e1.target_lane, o1, road, sim.observation)
    mask2 = masks_for_states(e1.x, e1.vx, e1.lane, e1.changing, d1, o1, road, kin)

    first = np.repeat(ACTIONS, N_ACTIONS)
    second = np.tile(ACTIONS, N_ACTIONS)
    e2 = step_world(e1.take(first), second, kin, road, check=False)
    r2 = _layer_rewards(e2, o2, second, sim, cfg.weights).reshape(N_ACTIONS, N_ACTIONS)
    totals = cfg.w_l1 * r1[:, None] + cfg.w_l2 * r2
    return totals, mask1[:, None] & mask2


def decision_tree_action(world: World, ego: int, sim: "SimConfig") -> Action:
    totals, valid = decision_tree_scores(world, ego, sim)
    flat = np.where(valid, totals, -np.inf).ravel()
    return Action(int(np.argmax(flat)) // N_ACTIONS)


# -- controller --------------------------------------------------------------

def controller_step(world: World, ego: int, planner, sim: "SimConfig",
                    digits=None, mask=None) -> Action:
    """Free acceleration, planning or level-0 safe mode depending on the regions."""
    planner = Planner(planner)
    if digits is None:
        digits = observe_rows(world, [ego], sim.road, sim.observation)[0]
    if mask is None:
        mask = feasible_masks(world, [ego], digits[None, :], sim.road, sim.kinematics)[0]
    state = trigger_state(world, ego, sim.trigger, sim.road)
    if state is TriggerState.FREE_ACCELERATE:
        return Action.ACCELERATE if mask[Action.ACCELERATE] else Action.MAINTAIN
    if state is TriggerState.SAFE_MODE:
        return Action(int(restrict_level0(level0_actions(digits[None, :]), mask[None, :])[0]))
    if planner is Planner.STACKELBERG:
        return stackelberg_action(world, ego, sim)
    return decision_tree_action(world, ego, sim)
