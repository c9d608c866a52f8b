"""Reference controllers: open-loop close-and-lift, contact-latch, ablation wrappers."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .policy import ResolvedAction
from .rollout import ABLATION_MODES, MatAgent
from .sim_env import JOINT_DELTA_THRESHOLD, STALL_WINDOW


@dataclass(frozen=True)
class OpenLoopConfig:
    delta: float = 0.4
    t_close: int = 6
    n_fingers: int = 3


@dataclass(frozen=True)
class LatchConfig:
    delta: float = 0.4
    k_unison: int = 3
    stall_steps: int = STALL_WINDOW
    n_fingers: int = 3
    cells_per_link: int = 24


def open_loop_policy(t, config=OpenLoopConfig()):
    if t < config.t_close:
        return ResolvedAction("fingers", finger_flags=(1,) * config.n_fingers)
    return ResolvedAction("lift")


@dataclass
class LatchState:
    latched: list = field(default_factory=lambda: [False, False, False])
    all_latched: bool = False
    steps_since_all_latched: int = 0
    stalled_steps: list = field(default_factory=lambda: [0, 0, 0])
    last_joints: np.ndarray | None = None
    last_flags: tuple | None = None

    @classmethod
    def fresh(cls, n_fingers=3):
        return cls([False] * n_fingers, False, 0, [0] * n_fingers)


def tactile_latch_policy(frame, latch_state: LatchState, config=LatchConfig()):
    """Stop each finger on first contact; once all stopped, close together k_unison steps, then lift.

    A finger whose joint has not moved more than the stall threshold for
    stall_steps consecutive commanded steps also latches.
    """
    s = dataclasses.replace(latch_state, latched=list(latch_state.latched),
                            stalled_steps=list(latch_state.stalled_steps))
    n, C = config.n_fingers, config.cells_per_link
    q = np.asarray(frame.joint_angles[:n], dtype=float)
    if s.last_joints is not None and s.last_flags is not None:
        for i in range(n):
            if s.last_flags[i] and abs(q[i] - s.last_joints[i]) <= JOINT_DELTA_THRESHOLD:
                s.stalled_steps[i] += 1
            else:
                s.stalled_steps[i] = 0
    for i in range(n):
        if np.any(frame.binary[i * C:(i + 1) * C]) or s.stalled_steps[i] >= config.stall_steps:
            s.latched[i] = True
    s.last_joints = q.copy()
    if all(s.latched):
        s.all_latched = True
    if s.all_latched:
        if s.steps_since_all_latched >= config.k_unison:
            action = ResolvedAction("lift")
        else:
            action = ResolvedAction("fingers", finger_flags=(1,) * n)
        s.steps_since_all_latched += 1
        s.last_flags = (0,) * n  # unison closing is not tracked for stalls
        return action, s
    flags = tuple(0 if l else 1 for l in s.latched)
    s.last_flags = flags
    return ResolvedAction("fingers", finger_flags=flags), s


# ---------------------------------------------------------------------------
# agents usable by rollout.run_episode
# ---------------------------------------------------------------------------

class OpenLoopAgent:
    needs_obs = False
    allow_forced_reopen = False

    def __init__(self, config=OpenLoopConfig()):
        self.config = config
        self.finger_delta = config.delta
        self.t = 0

    def reset(self):
        self.t = 0

    def act(self, obs_vec, frame, forced, at_horizon, rng):
        a = open_loop_policy(self.t, self.config)
        self.t += 1
        return a, 0.0


class TactileLatchAgent:
    needs_obs = False
    allow_forced_reopen = False

    def __init__(self, config=LatchConfig()):
        self.config = config
        self.finger_delta = config.delta
        self.state = LatchState.fresh(config.n_fingers)

    def reset(self):
        self.state = LatchState.fresh(self.config.n_fingers)

    def act(self, obs_vec, frame, forced, at_horizon, rng):
        a, self.state = tactile_latch_policy(frame, self.state, self.config)
        return a, 0.0


class _MaskedAgent:
    """Applies an ablation mask to the resolved actions of any agent."""

    def __init__(self, inner, mode, n_fingers=3):
        self.inner, self.mode, self.n_fingers = inner, mode, n_fingers
        self.needs_obs = inner.needs_obs
        self.finger_delta = inner.finger_delta

    @property
    def allow_forced_reopen(self):
        return self.inner.allow_forced_reopen and self.mode != "finger_closing_only"

    def reset(self):
        self.inner.reset()

    def act(self, obs_vec, frame, forced, at_horizon, rng):
        a, lp = self.inner.act(obs_vec, frame, forced, at_horizon, rng)
        if self.mode == "finger_closing_only" and a.kind == "reopen":
            a = ResolvedAction("fingers", finger_flags=(0,) * self.n_fingers)
        elif self.mode == "regrasping_only" and a.kind == "fingers":
            a = dataclasses.replace(a, finger_flags=(1,) * len(a.finger_flags))
        elif self.mode == "position_only" and a.kind == "reopen":
            a = dataclasses.replace(a, wrist_rotation=0.0)
        elif self.mode == "orientation_only" and a.kind == "reopen":
            a = dataclasses.replace(a, adjust_position=False)
        return a, lp


def ablation_wrapper(policy, mode):
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    if isinstance(policy, MatAgent):
        # masks go in before resolution so log-probabilities stay consistent
        return MatAgent(policy.net, policy.params, policy.deterministic, policy.rotation_term, mode)
    return _MaskedAgent(policy, mode)
