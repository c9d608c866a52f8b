"""Simplified, deterministic grasping world for a three-fingered tactile hand.

The hand is modelled top-down. Each finger is a radial segment hanging
``finger_drop`` below the palm; closing a finger moves its tip linearly
toward the palm axis. Objects are upright discs (cylinders) or boxes resting
on the table. Contacts are analytic: a tactile cell is active when its sample
point lies inside an object inflated by ``contact_tol``.

Cell ordering is link-major: finger 0 cells 0..23, finger 1, finger 2, palm.
Within a finger, cell 0 is the fingertip.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

JOINT_DELTA_THRESHOLD = 0.05   # rad, stall and delta-feature threshold
STALL_WINDOW = 5               # adjacent step pairs checked by the stall rule
REOPEN_PENALTY = -0.05
GRIP_ANGLE_FOR_PENALTY = 0.2   # rad
LIFT_HEIGHT = 0.25             # m
WORKSPACE_RADIUS = 0.45       # m, fits 30 cluttered objects reliably


class SceneError(RuntimeError):
    """Scene placement failed; caller should resample."""


class EpisodeDone(RuntimeError):
    pass


@dataclass(frozen=True)
class HandModel:
    n_fingers: int = 3
    cells_per_link: int = 24
    joint_min: float = 0.0
    joint_max: float = 2.44
    # radial distance of the fingertip from the palm axis when fully open
    finger_base_radius: float = 0.13
    # radial distance of the fingertip at joint_max
    min_tip_radius: float = 0.0
    finger_length: float = 0.04
    finger_drop: float = 0.10
    palm_radius: float = 0.04
    # thumb at 0, the two coupled fingers opposite it
    finger_azimuths: tuple = (math.pi - 0.4, math.pi + 0.4, 0.0)
    distal_coupling: float = 1.0 / 3.0
    n_spread_joints: int = 2
    contact_tol: float = 0.005
    grasp_angle_min: float = math.radians(100.0)

    @property
    def n_links_with_cells(self):
        return self.n_fingers + 1

    @property
    def n_cells(self):
        return self.n_links_with_cells * self.cells_per_link

    @property
    def n_joints(self):
        return 2 * self.n_fingers + self.n_spread_joints

    def tip_radius(self, q):
        r0, r1 = self.finger_base_radius, self.min_tip_radius
        return r0 - (r0 - r1) * np.asarray(q) / self.joint_max

    def joint_from_tip_radius(self, d):
        r0, r1 = self.finger_base_radius, self.min_tip_radius
        return (r0 - d) * self.joint_max / (r0 - r1)

    def link_of_cell(self):
        return np.repeat(np.arange(self.n_links_with_cells), self.cells_per_link)


def palm_cell_offsets(model: HandModel):
    """24-point grid on the palm disc: three rings of eight."""
    n_rings = 3
    per_ring = model.cells_per_link // n_rings
    pts = []
    for k in range(n_rings):
        rad = model.palm_radius * (k + 1) / n_rings
        shift = 0.5 * (k % 2) * 2 * math.pi / per_ring
        for j in range(per_ring):
            a = 2 * math.pi * j / per_ring + shift
            pts.append((rad * math.cos(a), rad * math.sin(a), 0.0))
    pts += [(0.0, 0.0, 0.0)] * (model.cells_per_link - len(pts))
    return np.array(pts)


@dataclass(frozen=True)
class SceneObject:
    shape: str            # "disc" or "box"
    dims: tuple           # disc: (radius,); box: (size_x, size_y)
    position: tuple       # (x, y, 0)
    height: float
    yaw: float = 0.0
    id: int = 0

    def __post_init__(self):
        if self.shape not in ("disc", "box"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if min(self.dims) < 0 or self.height < 0:
            raise ValueError("object dimensions must be non-negative")

    @property
    def center(self):
        return np.array(self.position[:2], dtype=float)

    @property
    def bounding_radius(self):
        if self.shape == "disc":
            return self.dims[0]
        return 0.5 * math.hypot(*self.dims)

    def _to_local(self, xy):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        d = np.asarray(xy, dtype=float) - self.center
        return np.stack([c * d[..., 0] + s * d[..., 1],
                         -s * d[..., 0] + c * d[..., 1]], axis=-1)

    def planar_sdf(self, xy):
        """Signed distance of planar points to the footprint (negative inside)."""
        xy = np.asarray(xy, dtype=float)
        if self.shape == "disc":
            return np.linalg.norm(xy - self.center, axis=-1) - self.dims[0]
        local = self._to_local(xy)
        half = 0.5 * np.array(self.dims)
        q = np.abs(local) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def ray_interval(self, origin, direction):
        """Parameter interval (a, b) where origin + t*direction is inside the footprint."""
        origin = np.asarray(origin, dtype=float)
        u = np.asarray(direction, dtype=float)
        if self.shape == "disc":
            rel = origin - self.center
            bq = float(rel @ u)
            cq = float(rel @ rel) - self.dims[0] ** 2
            disc = bq * bq - cq
            if disc <= 0.0:
                return None
            root = math.sqrt(disc)
            return -bq - root, -bq + root
        o = self._to_local(origin)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        v = np.array([c * u[0] + s * u[1], -s * u[0] + c * u[1]])
        half = 0.5 * np.array(self.dims)
        lo, hi = -math.inf, math.inf
        for k in range(2):
            if abs(v[k]) < 1e-15:
                if abs(o[k]) >= half[k]:
                    return None
                continue
            t1, t2 = (-half[k] - o[k]) / v[k], (half[k] - o[k]) / v[k]
            lo, hi = max(lo, min(t1, t2)), min(hi, max(t1, t2))
        if lo >= hi:
            return None
        return lo, hi


@dataclass
class HandState:
    palm_position: np.ndarray
    wrist_roll: float
    joint_angles: np.ndarray
    pre_grasp_joint_angles: np.ndarray
    lifted: bool = False
    palm_normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))

    def copy(self):
        return HandState(self.palm_position.copy(), self.wrist_roll, self.joint_angles.copy(),
                         self.pre_grasp_joint_angles.copy(), self.lifted, self.palm_normal.copy())


@dataclass
class TactileFrame:
    binary: np.ndarray          # (96,) int8
    positions_ee: np.ndarray    # (96, 3), zero where inactive
    joint_angles: np.ndarray    # (8,)
    positions_world: np.ndarray = None  # (96, 3), zero where inactive


@dataclass
class WorldState:
    hand: HandState
    objects: list
    grasped_object: int | None = None
    t: int = 0
    horizon: int = 250
    done: bool = False
    # full episode history of frames, used by the reopen position adjustment
    history: list = field(default_factory=list)


@dataclass
class StepOutcome:
    frame: TactileFrame
    reward: float
    done: bool
    info: dict


@dataclass(frozen=True)
class GraspPose:
    x: float
    y: float
    z: float
    roll: float = 0.0

    @property
    def xy(self):
        return np.array([self.x, self.y])


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectPool:
    """Procedural object parameter ranges (metres)."""
    disc_radius: tuple = (0.03, 0.05)
    box_size: tuple = (0.04, 0.09)
    height: tuple = (0.06, 0.12)
    box_fraction: float = 0.0


SEEN_POOL = ObjectPool(disc_radius=(0.03, 0.05), box_size=(0.04, 0.08), box_fraction=0.3)
NOVEL_POOL = ObjectPool(disc_radius=(0.025, 0.03), box_size=(0.08, 0.10), box_fraction=0.5)
TOY_DISC_POOL = ObjectPool(disc_radius=(0.03, 0.05), box_fraction=0.0)
TOY_SMALL_DISC_POOL = ObjectPool(disc_radius=(0.015, 0.035), box_fraction=0.0)


def sample_object(rng, pool: ObjectPool, xy, oid=0):
    h = float(rng.uniform(*pool.height))
    if rng.random() < pool.box_fraction:
        sx, sy = rng.uniform(*pool.box_size, size=2)
        # keep one side graspable
        sx = min(sx, 2 * pool.disc_radius[1])
        return SceneObject("box", (float(sx), float(sy)), (float(xy[0]), float(xy[1]), 0.0), h,
                           yaw=float(rng.uniform(-math.pi, math.pi)), id=oid)
    r = float(rng.uniform(*pool.disc_radius))
    return SceneObject("disc", (r,), (float(xy[0]), float(xy[1]), 0.0), h, id=oid)


def sample_scene(rng, mode="single", clutter_range=(2, 30), pool=SEEN_POOL,
                 workspace_radius=WORKSPACE_RADIUS, max_tries=200):
    """Objects placed without interpenetration inside the workspace disc."""
    lo, hi = clutter_range
    if not (1 <= lo <= hi <= 30):
        raise ValueError(f"clutter_range {clutter_range} not within [1, 30]")
    if mode == "single":
        k = 1
    elif mode == "cluttered":
        k = int(rng.integers(lo, hi + 1))
    else:
        raise ValueError(f"unknown scene mode {mode!r}")
    objects = []
    for oid in range(k):
        for _ in range(max_tries):
            if k == 1:
                xy = rng.uniform(-0.5, 0.5, size=2) * workspace_radius
            else:
                rad = workspace_radius * math.sqrt(rng.random())
                ang = rng.uniform(0, 2 * math.pi)
                xy = np.array([rad * math.cos(ang), rad * math.sin(ang)])
            obj = sample_object(rng, pool, xy, oid)
            if np.linalg.norm(obj.center) + obj.bounding_radius > workspace_radius:
                continue
            if all(np.linalg.norm(obj.center - o.center) > obj.bounding_radius + o.bounding_radius + 0.005
                   for o in objects):
                objects.append(obj)
                break
        else:
            raise SceneError(f"could not place object {oid} after {max_tries} tries")
    return objects


def plan_grasp_pose(objects, rng, model: HandModel = HandModel(), target=None):
    """Synthetic stand-in for a vision planner: top-down pose over one object."""
    if target is None:
        target = int(rng.integers(len(objects)))
    obj = objects[target]
    roll = float(rng.uniform(-math.pi, math.pi))
    if obj.shape == "box":
        # align the thumb axis with the short side
        short_axis = obj.yaw if obj.dims[0] <= obj.dims[1] else obj.yaw + math.pi / 2
        roll = wrap_angle(short_axis + (math.pi if rng.random() < 0.5 else 0.0))
    z = 0.5 * obj.height + model.finger_drop
    return GraspPose(float(obj.position[0]), float(obj.position[1]), z, roll)


def save_scene(path, objects, workspace_radius=WORKSPACE_RADIUS):
    data = {
        "objects": [{"shape": o.shape,
                     "dims_m": list(o.dims) + [o.height],
                     "pos_m": list(o.position),
                     "yaw": o.yaw} for o in objects],
        "workspace_radius_m": workspace_radius,
    }
    Path(path).write_text(json.dumps(data, indent=2))


def load_scene(path):
    data = json.loads(Path(path).read_text())
    objects = []
    for i, o in enumerate(data["objects"]):
        dims = list(o["dims_m"])
        objects.append(SceneObject(o["shape"], tuple(dims[:-1]), tuple(o["pos_m"]), dims[-1],
                                   yaw=o.get("yaw", 0.0), id=i))
    return objects, data.get("workspace_radius_m", WORKSPACE_RADIUS)


# ---------------------------------------------------------------------------
# kinematics and contacts
# ---------------------------------------------------------------------------

def wrap_angle(a):
    if -math.pi <= a <= math.pi:
        return a
    return (a + math.pi) % (2 * math.pi) - math.pi


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def finger_directions(hand: HandState, model: HandModel):
    az = np.asarray(model.finger_azimuths[:model.n_fingers]) + hand.wrist_roll
    return np.stack([np.cos(az), np.sin(az)], axis=1)


def cell_positions_ee(hand: HandState, model: HandModel):
    """All cell sample points in the end-effector frame (palm centre, rotated by roll)."""
    C = model.cells_per_link
    s = np.linspace(0.0, model.finger_length, C)
    pts = np.zeros((model.n_cells, 3))
    for i in range(model.n_fingers):
        az = model.finger_azimuths[i]
        rad = model.tip_radius(hand.joint_angles[i]) + s
        pts[i * C:(i + 1) * C, 0] = rad * math.cos(az)
        pts[i * C:(i + 1) * C, 1] = rad * math.sin(az)
        pts[i * C:(i + 1) * C, 2] = -model.finger_drop
    pts[model.n_fingers * C:] = palm_cell_offsets(model)
    return pts


def ee_to_world(hand: HandState, pts_ee):
    return pts_ee @ rot_z(hand.wrist_roll).T + hand.palm_position


def world_to_ee(hand: HandState, pts_world):
    return (pts_world - hand.palm_position) @ rot_z(hand.wrist_roll)


def inside_inflated(obj: SceneObject, pts, tol):
    z = pts[:, 2]
    return (obj.planar_sdf(pts[:, :2]) <= tol) & (z >= -tol) & (z <= obj.height + tol)


def penetration_mask(obj: SceneObject, pts):
    z = pts[:, 2]
    return (obj.planar_sdf(pts[:, :2]) < 0.0) & (z > 0.0) & (z < obj.height)


def compute_contacts(state: WorldState, model: HandModel = HandModel()) -> TactileFrame:
    hand = state.hand
    ee = cell_positions_ee(hand, model)
    world = ee_to_world(hand, ee)
    active = np.zeros(model.n_cells, dtype=bool)
    for obj in state.objects:
        if obj.id == state.grasped_object and hand.lifted:
            continue
        active |= inside_inflated(obj, world, model.contact_tol)
    mask = active[:, None]
    return TactileFrame(binary=active.astype(np.int8),
                        positions_ee=np.where(mask, ee, 0.0),
                        joint_angles=hand.joint_angles.copy(),
                        positions_world=np.where(mask, world, 0.0))


def any_penetration(hand: HandState, objects, model: HandModel):
    world = ee_to_world(hand, cell_positions_ee(hand, model))
    return any(penetration_mask(o, world).any() for o in objects)


def raise_until_free(hand: HandState, objects, model: HandModel, step=0.001, max_iter=1000):
    """Raise the palm in fixed increments until no cell is inside an object."""
    n = 0
    while any_penetration(hand, objects, model):
        if n >= max_iter:
            raise RuntimeError(f"hand still in collision after {max_iter} increments")
        hand.palm_position[2] += step
        n += 1
    return n


def close_finger(hand: HandState, i, delta, objects, model: HandModel):
    """Close finger i by delta, stopping at first contact with an object side."""
    q = hand.joint_angles[i]
    q_target = min(q + delta, model.joint_max)
    if q_target <= q:
        return
    d_now = float(model.tip_radius(q))
    d_target = float(model.tip_radius(q_target))
    u = finger_directions(hand, model)[i]
    z_cells = hand.palm_position[2] - model.finger_drop
    origin = hand.palm_position[:2]
    d_stop = d_target
    for obj in objects:
        if not (0.0 < z_cells < obj.height):
            continue
        iv = obj.ray_interval(origin, u)
        if iv is None:
            continue
        a, b = iv
        if d_now < b and d_now + model.finger_length > a:
            return  # already resting against / inside this object
        if d_target < b <= d_now:
            d_stop = max(d_stop, b)
    hand.joint_angles[i] = min(model.joint_from_tip_radius(d_stop), q_target)
    # coupled distal joint
    hand.joint_angles[model.n_fingers + i] = model.distal_coupling * hand.joint_angles[i]


# ---------------------------------------------------------------------------
# episode mechanics
# ---------------------------------------------------------------------------

def inject_calibration_noise(pose: GraspPose, noise_cm, rng):
    """Planar offset of noise_cm centimetres in a uniformly random direction."""
    if noise_cm < 0:
        raise ValueError("noise_cm must be >= 0")
    if noise_cm == 0:
        return pose, 0.0
    theta = float(rng.uniform(0.0, 2 * math.pi))
    off = noise_cm / 100.0
    return replace(pose, x=pose.x + off * math.cos(theta), y=pose.y + off * math.sin(theta)), theta


def reset(objects, initial_pose: GraspPose, noise_cm, rng, model: HandModel = HandModel(),
          horizon=250, workspace_radius=WORKSPACE_RADIUS):
    if math.hypot(initial_pose.x, initial_pose.y) > workspace_radius:
        raise ValueError("initial pose outside workspace")
    pose, _ = inject_calibration_noise(initial_pose, noise_cm, rng)
    pre = np.zeros(model.n_joints)
    hand = HandState(palm_position=np.array([pose.x, pose.y, pose.z]),
                     wrist_roll=wrap_angle(pose.roll),
                     joint_angles=pre.copy(), pre_grasp_joint_angles=pre.copy())
    # the approach descends from above and stops at first collision
    raise_until_free(hand, objects, model)
    state = WorldState(hand=hand, objects=list(objects), horizon=horizon)
    frame = compute_contacts(state, model)
    state.history.append(frame)
    return state, frame


def finger_bearings(frame: TactileFrame, obj: SceneObject, model: HandModel):
    """Mean contact bearing around the object axis for each finger touching obj.

    Returns (bearings dict finger -> angle, all_below_top flag).
    """
    C = model.cells_per_link
    world = frame.positions_world
    bearings = {}
    below = True
    for i in range(model.n_fingers):
        sl = slice(i * C, (i + 1) * C)
        act = frame.binary[sl].astype(bool)
        if not act.any():
            continue
        pts = world[sl][act]
        on_obj = inside_inflated(obj, pts, model.contact_tol)
        if not on_obj.any():
            continue
        pts = pts[on_obj]
        if np.any(pts[:, 2] >= obj.height):
            below = False
        m = pts[:, :2].mean(axis=0) - obj.center
        bearings[i] = math.atan2(m[1], m[0])
    return bearings, below


def angular_separation(a, b):
    return abs(wrap_angle(a - b))


def grasp_check(frame: TactileFrame, objects, model: HandModel = HandModel()):
    """Id of an object held by >=2 well-separated finger contacts, else None."""
    for obj in objects:
        bearings, below = finger_bearings(frame, obj, model)
        if len(bearings) < 2 or not below:
            continue
        vals = list(bearings.values())
        sep = max(angular_separation(a, b) for k, a in enumerate(vals) for b in vals[k + 1:])
        if sep >= model.grasp_angle_min - 1e-12:
            return obj.id
    return None


def evaluate_lift(state: WorldState, model: HandModel = HandModel()):
    return grasp_check(compute_contacts(state, model), state.objects, model) is not None


def grip_joint_max(joint_angles, model: HandModel = HandModel()):
    return float(np.max(joint_angles[:model.n_fingers]))


def step_reward(state_before: WorldState, resolved, lift_success, model: HandModel = HandModel()):
    if resolved.kind in ("lift", "horizon_lift"):
        return 1.0 if lift_success else 0.0
    if resolved.kind == "reopen":
        closed = grip_joint_max(state_before.hand.joint_angles, model) > GRIP_ANGLE_FOR_PENALTY
        return REOPEN_PENALTY * (1.0 - float(closed))
    return 0.0


def forced_reopen_check(joint_history, threshold=JOINT_DELTA_THRESHOLD, window=STALL_WINDOW):
    """Stall rule: no joint moved more than threshold over each of the last `window` step pairs.

    joint_history is a sequence of joint-angle vectors, oldest first. With fewer
    than window + 1 entries the rule is disabled.
    """
    if len(joint_history) < window + 1:
        return False
    recent = np.asarray(joint_history[-(window + 1):])
    return bool(np.all(np.abs(np.diff(recent, axis=0)) <= threshold))


def apply_action(state: WorldState, resolved, delta_finger, model: HandModel = HandModel(),
                 side_grasp_tol_deg=15.0):
    """Advance the world by one step in place and return the outcome."""
    from . import regrasp

    if state.done:
        raise EpisodeDone("action applied after episode end")
    if state.t >= state.horizon:
        raise EpisodeDone("horizon exceeded")
    before = WorldState(hand=state.hand.copy(), objects=state.objects, t=state.t,
                        horizon=state.horizon)
    hand = state.hand
    info = {"lift_attempted": False, "reopen_executed": False,
            "forced_by_horizon": resolved.kind == "horizon_lift",
            "forced_reopen": bool(getattr(resolved, "forced_reopen", False)),
            "lift_success": False}
    success = False
    if resolved.kind == "reopen":
        info["reopen_executed"] = True
        hand.joint_angles = hand.pre_grasp_joint_angles.copy()
        if getattr(resolved, "adjust_position", True) and not regrasp.side_grasp_guard(
                hand, side_grasp_tol_deg):
            target = regrasp.tactile_centroid_target(state.history, hand.palm_position)
            hand.palm_position = np.asarray(target, dtype=float).copy()
        state.hand = regrasp.apply_wrist_rotation(hand, float(resolved.wrist_rotation))
        regrasp.collision_recovery(state, phase="reopen", model=model)
    elif resolved.kind in ("lift", "horizon_lift"):
        info["lift_attempted"] = True
        held = grasp_check(compute_contacts(state, model), state.objects, model)
        success = held is not None
        info["lift_success"] = success
        hand.palm_position[2] += LIFT_HEIGHT
        hand.lifted = True
        if success:
            state.grasped_object = held
        state.done = True
    elif resolved.kind == "fingers":
        for i, flag in enumerate(resolved.finger_flags):
            if flag:
                close_finger(hand, i, delta_finger, state.objects, model)
    else:
        raise ValueError(f"unknown action kind {resolved.kind!r}")
    reward = step_reward(before, resolved, success, model)
    state.t += 1
    frame = compute_contacts(state, model)
    state.history.append(frame)
    return StepOutcome(frame=frame, reward=reward, done=state.done, info=info)


TRACE_HEADER = ["t"] + [f"joint_{j}" for j in range(8)] + ["binary_contact_count", "action_kind", "reward"]


def write_trace(path, rows):
    """rows: iterables of (t, joint_angles, contact_count, kind, reward)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for t, joints, count, kind, reward in rows:
            w.writerow([t] + [repr(float(j)) for j in joints] + [int(count), kind, repr(float(reward))])
