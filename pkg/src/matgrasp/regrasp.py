"""Geometry of the reopen maneuver: palm re-centring, wrist roll, safety guards."""
import math

import numpy as np

from .sim_env import HandModel, HandState, raise_until_free, wrap_angle

CELLS_PER_LINK = 24


def most_recent_contact(history):
    for frame in reversed(history):
        if np.any(frame.binary):
            return frame
    return None


def tactile_centroid_target(history, p_old, cells_per_link=CELLS_PER_LINK):
    """New palm position above the centre of the active link centres.

    Each link with at least one active cell contributes the mean x, y of its
    active cells; the target is the plain mean of those link centres. z is kept.
    Frames are searched newest first over the whole episode history; with no
    contact ever the old position is returned.
    """
    p_old = np.asarray(p_old, dtype=float)
    frame = most_recent_contact(history)
    if frame is None:
        return p_old.copy()
    binary = np.asarray(frame.binary).astype(bool)
    pos = np.asarray(frame.positions_world, dtype=float)
    n_links = len(binary) // cells_per_link
    centres = []
    for m in range(n_links):
        sl = slice(m * cells_per_link, (m + 1) * cells_per_link)
        act = binary[sl]
        if act.any():
            centres.append(pos[sl][act, :2].mean(axis=0))
    xy = np.mean(centres, axis=0)
    return np.array([xy[0], xy[1], p_old[2]])


def apply_wrist_rotation(hand: HandState, angle):
    if not -math.pi <= angle <= math.pi:
        raise ValueError(f"wrist rotation {angle} outside [-pi, pi]")
    out = hand.copy()
    out.wrist_roll = wrap_angle(hand.wrist_roll + angle)
    return out


def palm_tilt_to_table(hand: HandState):
    """Angle in degrees between the palm normal and the table plane."""
    n = np.asarray(hand.palm_normal, dtype=float)
    return math.degrees(math.asin(min(1.0, abs(n[2]) / np.linalg.norm(n))))


def side_grasp_guard(hand: HandState, tol_deg=15.0):
    """True when position adjustment must be disabled (palm normal near horizontal)."""
    return palm_tilt_to_table(hand) <= tol_deg


def collision_recovery(state, phase="reopen", model: HandModel = HandModel(), step=0.001, max_iter=1000):
    """Raise the palm 1 mm at a time until no cell is inside an object.

    Only active during the reopen/adjustment phase; a no-op otherwise.
    Returns the number of increments applied.
    """
    if phase != "reopen":
        return 0
    return raise_until_free(state.hand, state.objects, model, step=step, max_iter=max_iter)
