"""The seven driver actions, in their fixed ordinal order."""

from enum import IntEnum


class Action(IntEnum):
    MAINTAIN = 0
    ACCELERATE = 1
    DECELERATE = 2
    HARD_ACCELERATE = 3
    HARD_DECELERATE = 4
    CHANGE_LEFT = 5
    CHANGE_RIGHT = 6


N_ACTIONS = len(Action)
LANE_CHANGES = (Action.CHANGE_LEFT, Action.CHANGE_RIGHT)
