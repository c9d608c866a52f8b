import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import Delaunay

from oracles import centroid_oracle

from matgrasp import regrasp as rg
from matgrasp import sim_env as se


def frame_from(binary, world):
    return se.TactileFrame(np.asarray(binary, np.int8), np.zeros((96, 3)), np.zeros(8), np.asarray(world, float))


def test_no_contact_keeps_position():
    p = np.array([0.1, -0.2, 0.3])
    assert np.array_equal(rg.tactile_centroid_target([], p), p)
    empty = frame_from(np.zeros(96), np.zeros((96, 3)))
    assert np.array_equal(rg.tactile_centroid_target([empty, empty], p), p)


def test_single_cell():
    b = np.zeros(96)
    w = np.zeros((96, 3))
    b[5] = 1
    w[5] = [0.1, 0.2, 0.05]
    out = rg.tactile_centroid_target([frame_from(b, w)], [0, 0, 0.3])
    assert out.tolist() == [0.1, 0.2, 0.3]


def test_two_level_average_not_flat():
    b = np.zeros(96)
    w = np.zeros((96, 3))
    b[[0, 1, 24]] = 1
    w[0, 0], w[1, 0], w[24, 0] = 0.0, 0.2, 0.4
    out = rg.tactile_centroid_target([frame_from(b, w)], [0, 0, 0.3])
    assert out[0] == pytest.approx(0.25, abs=1e-15)


def test_most_recent_contact_frame_used():
    b1, w1 = np.zeros(96), np.zeros((96, 3))
    b1[0], w1[0] = 1, [0.5, 0.5, 0]
    b2, w2 = np.zeros(96), np.zeros((96, 3))
    b2[30], w2[30] = 1, [-0.1, 0.2, 0]
    empty = frame_from(np.zeros(96), np.zeros((96, 3)))
    out = rg.tactile_centroid_target([frame_from(b1, w1), frame_from(b2, w2), empty], [0, 0, 1.0])
    assert out.tolist() == [-0.1, 0.2, 1.0]


def test_random_patterns_match_oracle_and_hull():
    rng = np.random.default_rng(0)
    for k in range(1000):
        p_old = rng.normal(size=3)
        binary = (rng.random(96) < rng.choice([0.0, 0.02, 0.1, 0.5])).astype(int)
        world = rng.normal(size=(96, 3)) * binary[:, None]
        got = rg.tactile_centroid_target([frame_from(binary, world)], p_old)
        ref = centroid_oracle(binary, world, p_old)
        assert got.tolist() == ref
        act = world[binary.astype(bool), :2]
        if len(act) >= 3 and np.linalg.matrix_rank(act - act[0]) == 2:
            assert Delaunay(act).find_simplex(got[:2], tol=1e-12) >= 0
        elif len(act):
            # degenerate hulls: the target lies between the extreme points
            lo, hi = act.min(axis=0) - 1e-12, act.max(axis=0) + 1e-12
            assert np.all(got[:2] >= lo) and np.all(got[:2] <= hi)


def test_idempotent():
    rng = np.random.default_rng(1)
    b = (rng.random(96) < 0.2).astype(int)
    hist = [frame_from(b, rng.normal(size=(96, 3)) * b[:, None])]
    p = np.array([0.0, 0.0, 0.2])
    assert np.array_equal(rg.tactile_centroid_target(hist, p), rg.tactile_centroid_target(hist, p))


# --- wrist rotation and guards --------------------------------------------------

def hand(roll=0.0, normal=(0, 0, -1)):
    return se.HandState(np.array([0.0, 0.0, 0.2]), roll, np.zeros(8), np.zeros(8), palm_normal=np.array(normal, float))


def test_wrist_rotation():
    h = hand(0.3)
    assert rg.apply_wrist_rotation(h, 0.0).wrist_roll == 0.3
    back = rg.apply_wrist_rotation(rg.apply_wrist_rotation(h, math.pi / 2), -math.pi / 2)
    assert back.wrist_roll == pytest.approx(0.3, abs=1e-15)
    h2 = rg.apply_wrist_rotation(rg.apply_wrist_rotation(hand(0.0), 3 * math.pi / 4), 3 * math.pi / 4)
    assert h2.wrist_roll == pytest.approx(-math.pi / 2, abs=1e-12)
    with pytest.raises(ValueError):
        rg.apply_wrist_rotation(h, 3.2)


@settings(max_examples=50, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi))
def test_wrist_rotation_rotates_fingers_rigidly(r0, a):
    model = se.HandModel()
    h = hand(r0)
    d0 = se.finger_directions(h, model)
    h2 = rg.apply_wrist_rotation(h, a)
    assert -math.pi <= h2.wrist_roll <= math.pi
    R = se.rot_z(a)[:2, :2]
    assert np.allclose(se.finger_directions(h2, model), d0 @ R.T, atol=1e-12)
    assert h.wrist_roll == r0  # input untouched


def test_side_grasp_guard():
    assert not rg.side_grasp_guard(hand())
    assert rg.side_grasp_guard(hand(normal=(1, 0, 0)))
    tilt = math.radians(10)
    assert rg.side_grasp_guard(hand(normal=(math.cos(tilt), 0, -math.sin(tilt))), 15)
    assert not rg.side_grasp_guard(hand(normal=(math.cos(math.radians(20)), 0, -math.sin(math.radians(20)))), 15)


# --- collision recovery -----------------------------------------------------------

def penetrating_state(depth):
    model = se.HandModel()
    obj = se.SceneObject("disc", (0.04,), (0.0, 0.0, 0.0), 0.1)
    z = obj.height + model.finger_drop - depth  # finger cells sit `depth` below the top face
    h = se.HandState(np.array([0.0, 0.0, z]), 0.0, np.full(8, 0.0), np.zeros(8))
    h.joint_angles[:3] = model.joint_from_tip_radius(0.02)  # tips over the disc
    return se.WorldState(hand=h, objects=[obj]), model


def test_collision_recovery_increments():
    state, model = penetrating_state(0.0035)
    x0, j0, r0 = state.hand.palm_position[:2].copy(), state.hand.joint_angles.copy(), state.hand.wrist_roll
    z0 = state.hand.palm_position[2]
    n = rg.collision_recovery(state, "reopen", model)
    assert n == 4
    assert state.hand.palm_position[2] == pytest.approx(z0 + 0.004, abs=1e-12)
    assert np.array_equal(state.hand.palm_position[:2], x0)
    assert np.array_equal(state.hand.joint_angles, j0) and state.hand.wrist_roll == r0


def test_collision_recovery_noop_cases():
    state, model = penetrating_state(0.0035)
    z0 = state.hand.palm_position[2]
    assert rg.collision_recovery(state, "closing", model) == 0
    assert state.hand.palm_position[2] == z0
    free, model = penetrating_state(-0.01)
    assert rg.collision_recovery(free, "reopen", model) == 0


def test_collision_recovery_bound():
    state, model = penetrating_state(0.05)
    with pytest.raises(RuntimeError):
        rg.collision_recovery(state, "reopen", model, max_iter=10)
