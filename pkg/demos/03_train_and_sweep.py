"""Train on the toy disc task, then compare against the scripted baselines under calibration noise.

    python3 demos/03_train_and_sweep.py [BATCHES] [OUT_DIR]

The default of 4 batches only shows the machinery (a few minutes on one core).
Around 20 batches of the default trainer settings reach ~90% on the toy task;
see the README for the full acceptance run.
"""
# %% Configuration: default trainer settings with a short horizon and fewer actors
import sys
from pathlib import Path

from matgrasp import harness
from matgrasp import sim_env as se
from matgrasp.rollout import EnvConfig
from matgrasp.soft_ppo import TrainerConfig, train

batches = int(sys.argv[1]) if len(sys.argv) > 1 else 4
out = Path(sys.argv[2] if len(sys.argv) > 2 else "runs/demo")
cfg = TrainerConfig(horizon=60, actors=4 if batches <= 4 else 10)
env = EnvConfig(pool=se.TOY_DISC_POOL, horizon=60)

# %% Training writes config.json, metrics.csv and a checkpoint after every batch
learner, curriculum, rows = train(cfg, env, batches, out)
print(f"\nfinal finger increment {curriculum.delta_finger:.3f} rad, "
      f"best batch success {curriculum.current_max_success_rate:.2f}")

# %% Evaluation: 10 scenes x 5 trials per noise level, same scenes for every policy
scenes = harness.make_scenes("toy", n_scenes=10)
reports, _ = harness.cmd_sweep(out / "checkpoint.bin", [0.0, 2.5, 5.0, 7.5], scenes=scenes, trials=5,
                               out_csv=out / "sweep.csv")
print(harness.format_table(reports, [0.0, 2.5, 5.0, 7.5]))

# %% The significance rule: a gap counts only if it exceeds both standard deviations
mat, ol = reports[("mat", 5.0)]["toy"], reports[("open_loop", 5.0)]["toy"]
print(f"\nat 5 cm: mat {mat.success_rate:.1f} ± {mat.std:.1f} vs open-loop {ol.success_rate:.1f} ± {ol.std:.1f}"
      f" -> significant: {harness.is_significant(mat.success_rate, mat.std, ol.success_rate, ol.std)}")
