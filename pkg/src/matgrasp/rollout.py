"""Episode runner shared by training, evaluation and the baseline controllers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import sim_env as se
from .obs_buffer import ObservationWindow
from .policy import (ActionBatch, MultiBranchNet, ResolvedAction, forward_heads, log_prob,
                     resolve_action, sample_action)

ABLATION_MODES = ("finger_closing_only", "regrasping_only", "position_only", "orientation_only")


@dataclass
class EnvConfig:
    hand: se.HandModel = field(default_factory=se.HandModel)
    pool: se.ObjectPool = field(default_factory=lambda: se.TOY_DISC_POOL)
    cluttered_prob: float = 0.0
    clutter_range: tuple = (2, 30)
    train_noise_cm: tuple = (0.0,)
    horizon: int = 250
    workspace_radius: float = se.WORKSPACE_RADIUS
    side_grasp_tol_deg: float = 15.0


@dataclass
class Trajectory:
    obs: list = field(default_factory=list)          # sparse rows as (indices, values)
    actions: list = field(default_factory=list)      # ResolvedAction per step
    logp_old: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: np.ndarray | None = None
    success: bool = False
    noise_cm: float = 0.0
    trace: list = field(default_factory=list)

    def __len__(self):
        return len(self.rewards)


class MatAgent:
    """Closed-loop learned policy: observation window -> resolved action."""

    needs_obs = True

    def __init__(self, net: MultiBranchNet, params, deterministic=False, rotation_term=True,
                 ablation=None):
        if ablation is not None and ablation not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {ablation!r}")
        self.net, self.params = net, params
        self.deterministic = deterministic
        self.rotation_term = rotation_term
        self.ablation = ablation
        self.finger_delta = None

    @property
    def allow_forced_reopen(self):
        return self.ablation != "finger_closing_only"

    def reset(self):
        pass

    def act(self, obs_vec, frame, forced, at_horizon, rng):
        heads = forward_heads(self.net, self.params, obs_vec)
        sample = sample_action(heads, rng, deterministic=self.deterministic)
        if self.ablation == "finger_closing_only":
            sample.reopen = 0
        elif self.ablation == "regrasping_only":
            sample.finger_flags = (1,) * len(sample.finger_flags)
        elif self.ablation == "position_only":
            sample.wrist_rotation = 0.0
        resolved = resolve_action(sample, forced_reopen=forced, at_horizon=at_horizon)
        if self.ablation == "orientation_only":
            resolved.adjust_position = False
        lp = log_prob(heads, resolved, self.rotation_term)
        return resolved, lp


def _sparse_row(vec):
    idx = np.flatnonzero(vec)
    return idx.astype(np.int32), vec[idx]


def run_episode(env: EnvConfig, agent, rng, delta, noise_cm=0.0, scene=None, pose=None,
                record_obs=False, record_trace=False, horizon=None):
    """Play one episode. Returns a Trajectory (obs recorded only when asked)."""
    model = env.hand
    H = horizon or env.horizon
    if scene is None:
        mode = "cluttered" if rng.random() < env.cluttered_prob else "single"
        scene = se.sample_scene(rng, mode, env.clutter_range, env.pool, env.workspace_radius)
    if pose is None:
        pose = se.plan_grasp_pose(scene, rng, model)
    state, frame = se.reset(scene, pose, noise_cm, rng, model, horizon=H,
                            workspace_radius=env.workspace_radius)
    window = ObservationWindow(n_cells=model.n_cells, n_joints=model.n_joints).push(frame)
    joints = [frame.joint_angles]
    agent.reset()
    traj = Trajectory(noise_cm=noise_cm)
    step_delta = agent.finger_delta if agent.finger_delta is not None else delta
    while not state.done:
        at_h = state.t == H - 1
        forced = agent.allow_forced_reopen and se.forced_reopen_check(joints)
        obs_vec = window.encode() if agent.needs_obs else None
        resolved, lp = agent.act(obs_vec, frame, forced, at_h, rng)
        if at_h and resolved.kind != "horizon_lift":
            resolved = ResolvedAction("horizon_lift")
            lp = 0.0
        out = se.apply_action(state, resolved, step_delta, model, env.side_grasp_tol_deg)
        if record_obs:
            traj.obs.append(_sparse_row(obs_vec))
        traj.actions.append(resolved)
        traj.logp_old.append(lp)
        traj.rewards.append(out.reward)
        if record_trace:
            traj.trace.append((state.t - 1, frame.joint_angles, int(frame.binary.sum()),
                               resolved.kind, out.reward))
        frame = out.frame
        window.push(frame)
        joints.append(frame.joint_angles)
        if out.done:
            traj.success = bool(out.info["lift_success"])
    return traj
