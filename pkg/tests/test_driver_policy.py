import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from levelk_traffic.actions import Action
from levelk_traffic.driver_policy import (
    TabularPolicy, feasible_actions, feasible_masks, level0_action, level0_actions,
    level0_table, masked_distribution, restrict_level0, sample_action, sample_from_rows,
)
from levelk_traffic.perception import (
    N_MESSAGES, Message, ObservationConfig, Range, RangeRate, decode_codes, observe_rows,
)
from levelk_traffic.world import KinematicsConfig, RoadConfig, VehicleState, World

from oracles import random_world, world_mask

ROAD = RoadConfig()
KIN = KinematicsConfig()
OBS = ObservationConfig()


def car(id, x, vx, lane):
    return VehicleState.centered(id, x, vx, lane, ROAD)


def message(front=(Range.FAR, RangeRate.MOVING_AWAY), lane=1):
    return Message(front[0], Range.FAR, Range.FAR, Range.FAR, Range.FAR,
                   front[1], RangeRate.MOVING_AWAY, RangeRate.MOVING_AWAY,
                   RangeRate.MOVING_AWAY, RangeRate.MOVING_AWAY, lane)


def test_lane1_cannot_change_right():
    mask = feasible_actions(World.from_vehicles([car(0, 0, 20, 1)]), 0, ROAD, KIN)
    assert not mask[Action.CHANGE_RIGHT] and mask[Action.CHANGE_LEFT]


def test_parallel_car_blocks_lane_change():
    w = World.from_vehicles([car(0, 0, 20, 2), car(1, 3, 20, 3)])
    mask = feasible_actions(w, 0, ROAD, KIN)
    assert not mask[Action.CHANGE_LEFT] and mask[Action.CHANGE_RIGHT]


def test_close_approaching_rear_blocks_lane_change():
    w = World.from_vehicles([car(0, 0, 20, 2), car(1, -15, 25, 1)])
    assert not feasible_actions(w, 0, ROAD, KIN)[Action.CHANGE_RIGHT]


def test_speed_bound_masks():
    mask = feasible_actions(World.from_vehicles([car(0, 0, KIN.v_max, 2)]), 0, ROAD, KIN)
    assert mask[Action.MAINTAIN]
    assert not mask[Action.ACCELERATE] and not mask[Action.HARD_ACCELERATE]
    mask = feasible_actions(World.from_vehicles([car(0, 0, KIN.v_min, 2)]), 0, ROAD, KIN)
    assert not mask[Action.DECELERATE] and not mask[Action.HARD_DECELERATE]
    # saturating: one meter per second above the floor still allows hard braking
    mask = feasible_actions(World.from_vehicles([car(0, 0, KIN.v_min + 1, 2)]), 0, ROAD, KIN)
    assert mask[Action.HARD_DECELERATE]


def test_changing_car_may_only_continue():
    from levelk_traffic.world import step_vehicle
    s = step_vehicle(car(0, 0, 20, 2), Action.CHANGE_LEFT, KIN, ROAD)
    mask = feasible_actions(World.from_vehicles([s]), 0, ROAD, KIN)
    assert list(mask) == [True] + [False] * 6


def test_masks_match_oracle():
    rng = np.random.default_rng(3)
    for _ in range(300):
        w = random_world(rng, n_cars=int(rng.integers(1, 8)), spread=40,
                         speed_grid=bool(rng.random() < 0.5))
        rows = np.arange(len(w))
        masks = feasible_masks(w, rows, observe_rows(w, rows, ROAD, OBS), ROAD, KIN)
        for i in rows:
            assert list(masks[i]) == world_mask(w, i, ROAD, KIN, OBS)


@pytest.mark.parametrize("front,expected", [
    ((Range.NOMINAL, RangeRate.APPROACHING), Action.DECELERATE),
    ((Range.CLOSE, RangeRate.APPROACHING), Action.HARD_DECELERATE),
    ((Range.CLOSE, RangeRate.STABLE), Action.DECELERATE),
    ((Range.FAR, RangeRate.MOVING_AWAY), Action.MAINTAIN),
    ((Range.FAR, RangeRate.APPROACHING), Action.MAINTAIN),
    ((Range.NOMINAL, RangeRate.STABLE), Action.MAINTAIN),
    ((Range.CLOSE, RangeRate.MOVING_AWAY), Action.MAINTAIN),
])
def test_level0_rule(front, expected):
    assert level0_action(message(front)) == expected


def test_level0_ignores_side_slots():
    table = level0_table()
    digits = decode_codes(np.arange(N_MESSAGES))
    key = digits[:, 0] * 3 + digits[:, 5]
    for k in range(9):
        assert len(set(table[key == k])) == 1


def test_level0_never_accelerates_or_changes_lane():
    assert set(np.unique(level0_table())) <= {0, 2, 4}


def test_restrict_level0_weakens_braking():
    acts = np.array([4, 4, 2, 0])
    mask = np.ones((4, 7), dtype=bool)
    mask[0, 4] = False
    mask[1, [2, 4]] = False
    mask[2, 2] = False
    assert list(restrict_level0(acts, mask)) == [2, 0, 0, 0]


def test_degenerate_row_always_maintains():
    p = TabularPolicy.uniform()
    p.probabilities[5] = [1, 0, 0, 0, 0, 0, 0]
    rng = np.random.default_rng(0)
    assert all(sample_action(p, 5, np.ones(7, bool), rng) == Action.MAINTAIN for _ in range(200))


def test_uniform_row_with_lane_changes_masked_chi_square():
    p = TabularPolicy.uniform()
    mask = np.array([1, 1, 1, 1, 1, 0, 0], dtype=bool)
    rng = np.random.default_rng(1)
    draws = [sample_action(p, 0, mask, rng) for _ in range(10_000)]
    counts = np.bincount(draws, minlength=7)
    assert counts[5] == counts[6] == 0
    assert chisquare(counts[:5]).pvalue > 0.001


def test_masked_mass_falls_back_to_uniform_feasible():
    p = TabularPolicy.uniform()
    p.probabilities[0] = [0, 0, 0, 0, 0, 1, 0]
    mask = np.array([1, 1, 1, 1, 1, 0, 1], dtype=bool)
    assert np.allclose(masked_distribution(p.probabilities[0], mask), mask / 6)
    rng = np.random.default_rng(2)
    counts = np.bincount([sample_action(p, 0, mask, rng) for _ in range(6000)], minlength=7)
    assert counts[5] == 0 and chisquare(counts[mask]).pvalue > 0.001


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=7, max_size=7),
       st.lists(st.booleans(), min_size=7, max_size=7).filter(any),
       st.floats(0, 1, exclude_max=True))
def test_sample_is_always_feasible(row, mask, u):
    row, mask = np.array(row), np.array(mask)
    pick = sample_from_rows(row[None], mask[None], np.array([u]))[0]
    assert mask[pick]
    dist = masked_distribution(row, mask)
    assert dist[pick] > 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 1), min_size=7, max_size=7),
       st.lists(st.booleans(), min_size=7, max_size=7).filter(any))
def test_inverse_cdf_matches_distribution(row, mask):
    row, mask = np.array(row), np.array(mask)
    u = (np.arange(20_000) + 0.5) / 20_000
    picks = sample_from_rows(np.tile(row, (len(u), 1)), np.tile(mask, (len(u), 1)), u)
    freq = np.bincount(picks, minlength=7) / len(u)
    assert np.allclose(freq, masked_distribution(row, mask), atol=1e-3)


def test_policy_validation():
    p = TabularPolicy.uniform()
    p.validate()
    p.probabilities[3, 0] += 1e-6
    with pytest.raises(ValueError):
        p.validate()
    p = TabularPolicy.uniform()
    p.probabilities[0] = [1.5, -0.5, 0, 0, 0, 0, 0]
    with pytest.raises(ValueError):
        p.validate()
    p = TabularPolicy.from_level0()
    p.validate()
    assert np.array_equal(p.greedy(), level0_table())
