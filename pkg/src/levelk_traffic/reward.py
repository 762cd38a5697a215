"""Driver reward: weighted sum of constraint, velocity, headway and effort terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actions import Action
from .perception import Range
from .world import KinematicsConfig

_HEADWAY = np.array([-1.0, 0.0, 1.0])  # close, nominal, far


@dataclass(frozen=True)
class RewardWeights:
    w1: float = 10000.0
    w2: float = 5.0
    w3: float = 1.0
    w4: float = 1.0
    e1: float = -1.0
    e2: float = -5.0

    def effort_table(self) -> np.ndarray:
        e = np.full(len(Action), self.e1)
        e[Action.MAINTAIN] = 0.0
        e[[Action.HARD_ACCELERATE, Action.HARD_DECELERATE]] = self.e2
        return e


@dataclass(frozen=True)
class RewardBreakdown:
    c: float
    v: float
    h: float
    e: float
    total: float


def compute_reward(violation: bool, vx: float, headway: Range, action: int,
                   w: RewardWeights = RewardWeights(),
                   kin: KinematicsConfig = KinematicsConfig()) -> RewardBreakdown:
    c = -1.0 if violation else 0.0
    v = (vx - kin.v_nominal) / kin.a1
    h = float(_HEADWAY[int(headway)])
    e = float(w.effort_table()[int(action)])
    return RewardBreakdown(c, v, h, e, w.w1 * c + w.w2 * v + w.w3 * h + w.w4 * e)


def reward_totals(violation, vx, headway, action, w: RewardWeights = RewardWeights(),
                  kin: KinematicsConfig = KinematicsConfig()) -> np.ndarray:
    """Array form of ``compute_reward(...).total``."""
    c = -np.asarray(violation, dtype=float)
    v = (np.asarray(vx, dtype=float) - kin.v_nominal) / kin.a1
    h = _HEADWAY[np.asarray(headway, dtype=np.int64)]
    e = w.effort_table()[np.asarray(action, dtype=np.int64)]
    return w.w1 * c + w.w2 * v + w.w3 * h + w.w4 * e
