"""A walk through the grasping world, the observation window and the two scripted controllers.

Run with ``python3 demos/01_simulator_tour.py``. Takes a few seconds.
"""
# %% A single-disc scene and a planned top-down pose
import numpy as np

from matgrasp import sim_env as se
from matgrasp.baselines import OpenLoopAgent, TactileLatchAgent
from matgrasp.obs_buffer import OBS_DIM, ObservationWindow
from matgrasp.policy import ResolvedAction
from matgrasp.rollout import EnvConfig, run_episode

rng = np.random.default_rng(3)
scene = se.sample_scene(rng, "single", pool=se.TOY_DISC_POOL)
disc = scene[0]
print(f"disc radius {100 * disc.dims[0]:.1f} cm at ({disc.position[0]:+.3f}, {disc.position[1]:+.3f}) m")

pose = se.plan_grasp_pose(scene, rng)
state, frame = se.reset(scene, pose, noise_cm=0.0, rng=rng)
print("palm after the approach:", np.round(state.hand.palm_position, 3), "active cells:", int(frame.binary.sum()))

# %% Closing all fingers step by step; the tactile cells light up on contact
model = se.HandModel()
for t in range(6):
    out = se.apply_action(state, ResolvedAction("fingers", finger_flags=(1, 1, 1)), 0.4, model)
    per_finger = [int(out.frame.binary[i * 24:(i + 1) * 24].sum()) for i in range(3)]
    print(f"t={t}  joints={np.round(out.frame.joint_angles[:3], 2)}  cells per finger={per_finger}")

# the pick-up rule looks at contact bearings around the disc axis
bearings, below = se.finger_bearings(out.frame, disc, model)
print("finger bearings (deg):", {k: round(float(np.degrees(v))) for k, v in bearings.items()}, "below top:", below)
print("would a lift succeed now?", se.evaluate_lift(state, model))

# %% The observation the policy sees: 20 frames of history plus deltas, flattened
window = ObservationWindow()
for f in state.history:
    window.push(f)
vec = window.encode()
print(f"observation width {OBS_DIM}, non-zero entries {np.count_nonzero(vec)}")

# %% Calibration noise moves the start pose; the scripted controllers suffer
env = EnvConfig()
for noise in (0.0, 2.5, 5.0, 7.5):
    rates = []
    for agent in (OpenLoopAgent(), TactileLatchAgent()):
        wins = 0
        for k in range(40):
            r = np.random.default_rng([11, k])
            wins += run_episode(env, agent, r, 0.4, noise_cm=noise).success
        rates.append(100 * wins / 40)
    print(f"noise {noise:>3} cm   open-loop {rates[0]:5.1f}%   contact-latch {rates[1]:5.1f}%")
