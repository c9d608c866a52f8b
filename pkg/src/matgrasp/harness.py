"""Command-line front end: train, evaluate, noise sweeps and ablations.

Usage::

    matgrasp train --config cfg.json --out runs/a [--seed N] [--batches B] [--init-from CKPT]
    matgrasp eval --ckpt runs/a/checkpoint.bin --scenes toy --trials 20 --noise 2.5 [--deterministic]
    matgrasp sweep --ckpt runs/a/checkpoint.bin --levels 0,2.5,5,7.5 --policies mat,open_loop,tactile_latch
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import sim_env as se
from .baselines import OpenLoopAgent, TactileLatchAgent, ablation_wrapper
from .rollout import ABLATION_MODES, EnvConfig, run_episode
from .soft_ppo import Learner, config_from_dict, config_to_dict, train

POLICIES = ("mat", "open_loop", "tactile_latch")
EPISODE_HEADER = ["policy", "category", "scene", "trial", "noise_cm", "success", "steps", "reopens"]
SWEEP_HEADER = ["policy", "ablation", "noise_cm", "category", "success_rate", "std", "trials", "scenes"]

# Built-in evaluation suites: category -> (scene mode, object pool).
SUITES = {
    "toy": {"toy": ("single", se.TOY_DISC_POOL)},
    "toy_small": {"toy_small": ("single", se.TOY_SMALL_DISC_POOL)},
    "standard": {
        "single/seen": ("single", se.SEEN_POOL),
        "single/novel": ("single", se.NOVEL_POOL),
        "cluttered/seen": ("cluttered", se.SEEN_POOL),
        "cluttered/novel": ("cluttered", se.NOVEL_POOL),
    },
}


def is_significant(mean_a, std_a, mean_b, std_b):
    """Two results differ when the gap exceeds the larger of the two standard deviations."""
    if std_a < 0 or std_b < 0:
        raise ValueError("standard deviations must be non-negative")
    return abs(mean_a - mean_b) > max(std_a, std_b)


@dataclass
class CategoryResult:
    success_rate: float   # percent
    std: float            # percent, across scenes
    trials: int
    scenes: int


@dataclass
class EvalReport:
    noise_cm: float
    policy: str
    categories: dict = field(default_factory=dict)
    episodes: list = field(default_factory=list)

    def __getitem__(self, category):
        return self.categories[category]

    @property
    def overall(self):
        succ = [e["success"] for e in self.episodes]
        return 100.0 * float(np.mean(succ)) if succ else float("nan")

    def write_episodes(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EPISODE_HEADER)
            for e in self.episodes:
                w.writerow([e[k] if not isinstance(e[k], float) else repr(e[k]) for k in EPISODE_HEADER])


def aggregate(episodes):
    """Per-category mean and across-scene std (population std) in percent."""
    out = {}
    for cat in sorted({e["category"] for e in episodes}):
        rows = [e for e in episodes if e["category"] == cat]
        per_scene = {}
        for e in rows:
            per_scene.setdefault(e["scene"], []).append(e["success"])
        scene_rates = np.array([100.0 * np.mean(v) for v in per_scene.values()])
        out[cat] = CategoryResult(100.0 * float(np.mean([e["success"] for e in rows])),
                                  float(np.std(scene_rates)), len(rows), len(per_scene))
    return out


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

def make_scenes(suite="toy", n_scenes=20, seed=1234, workspace_radius=se.WORKSPACE_RADIUS):
    """[(category, objects)] for a built-in suite, a suite JSON file, or a scene JSON file."""
    if suite in SUITES:
        cats = SUITES[suite]
    else:
        data = json.loads(Path(suite).read_text(encoding="utf-8"))
        if "objects" in data:
            return [("custom", se.load_scene(suite)[0])]
        if "scenes" in data:
            return [(s.get("category", "custom"), _objects_from_json(s)) for s in data["scenes"]]
        unknown = set(data) - {"suite", "n_scenes", "seed"}
        if unknown:
            raise ValueError(f"unknown scene-suite keys: {sorted(unknown)}")
        cats = SUITES[data.get("suite", "toy")]
        n_scenes, seed = data.get("n_scenes", n_scenes), data.get("seed", seed)
    scenes = []
    for c, (cat, (mode, pool)) in enumerate(cats.items()):
        for k in range(n_scenes):
            rng = np.random.default_rng([seed, c, k])
            scenes.append((cat, se.sample_scene(rng, mode, pool=pool, workspace_radius=workspace_radius)))
    return scenes


def _objects_from_json(scene):
    return [se.SceneObject(o["shape"], tuple(o["dims_m"][:-1]), tuple(o["pos_m"]), o["dims_m"][-1],
                           yaw=o.get("yaw", 0.0), id=i) for i, o in enumerate(scene["objects"])]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def make_agent(policy, learner=None, deterministic=False, ablation=None):
    if policy == "mat":
        if learner is None:
            raise ValueError("the mat policy needs a checkpoint")
        agent = learner.agent(deterministic=deterministic)
    elif policy == "open_loop":
        agent = OpenLoopAgent()
    elif policy == "tactile_latch":
        agent = TactileLatchAgent()
    else:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    if ablation:
        agent = ablation_wrapper(agent, ablation)
    return agent


def load_learner(ckpt):
    learner, header = Learner.load(ckpt)
    env = config_from_dict({"trainer": header["meta"].get("trainer"), "env": header["meta"].get("env")})[1]
    return learner, header["meta"], env


def cmd_eval(checkpoint, scenes, trials, noise_cm, policy="mat", deterministic=False, ablation=None,
             seed=0, horizon=None, delta=None, env=None, learner=None):
    """Run trials episodes per scene; returns an EvalReport (rates in percent).

    checkpoint may be None for the scripted baselines. delta defaults to the
    finger increment the checkpoint's curriculum had reached.
    """
    if trials <= 0:
        raise ValueError("trials must be positive")
    if noise_cm < 0:
        raise ValueError("noise must be non-negative")
    meta = {}
    if learner is None and checkpoint is not None and policy == "mat":
        learner, meta, ck_env = load_learner(checkpoint)
        env = env or ck_env
    env = env or EnvConfig()
    if isinstance(scenes, (str, Path)):
        scenes = make_scenes(str(scenes), workspace_radius=env.workspace_radius)
    if delta is None:
        delta = meta.get("delta_finger", 0.1) if meta else 0.1
    H = horizon or env.horizon
    agent = make_agent(policy, learner, deterministic, ablation)
    report = EvalReport(noise_cm=float(noise_cm), policy=policy)
    for s, (cat, objects) in enumerate(scenes):
        for k in range(trials):
            rng = np.random.default_rng([seed, s, k])
            pose = se.plan_grasp_pose(objects, rng, env.hand)
            traj = run_episode(env, agent, rng, delta, noise_cm=noise_cm, scene=objects, pose=pose,
                               horizon=H)
            report.episodes.append({
                "policy": policy, "category": cat, "scene": s, "trial": k, "noise_cm": float(noise_cm),
                "success": int(traj.success), "steps": len(traj),
                "reopens": sum(a.kind == "reopen" for a in traj.actions)})
    report.categories = aggregate(report.episodes)
    return report


def cmd_sweep(checkpoint, noise_levels=(0.0, 2.5, 5.0, 7.5), policies=POLICIES, scenes="toy", trials=10,
              ablation=None, out_csv=None, **kw):
    """EvalReport per (policy, level); optional long-format CSV."""
    if any(l < 0 for l in noise_levels):
        raise ValueError("noise levels must be non-negative")
    learner = env = None
    meta = {}
    if "mat" in policies:
        learner, meta, env = load_learner(checkpoint)
    env = kw.pop("env", None) or env or EnvConfig()
    if isinstance(scenes, (str, Path)):
        scenes = make_scenes(str(scenes), workspace_radius=env.workspace_radius)
    kw.setdefault("delta", meta.get("delta_finger"))
    reports, rows = {}, []
    for pol in policies:
        abl = ablation if pol == "mat" else None
        for lvl in noise_levels:
            rep = cmd_eval(None, scenes, trials, lvl, policy=pol, ablation=abl, env=env,
                           learner=learner, **kw)
            reports[(pol, lvl)] = rep
            for cat, r in rep.categories.items():
                rows.append([pol, abl or "", repr(float(lvl)), cat, repr(r.success_rate), repr(r.std),
                             r.trials, r.scenes])
    if out_csv:
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SWEEP_HEADER)
            w.writerows(rows)
    return reports, rows


def format_table(reports, levels):
    pols = sorted({p for p, _ in reports}, key=lambda p: POLICIES.index(p) if p in POLICIES else 99)
    cats = sorted({c for r in reports.values() for c in r.categories})
    lines = ["policy/category".ljust(28) + "".join(f"{l:>16g}" for l in levels)]
    for p in pols:
        for c in cats:
            cells = []
            for l in levels:
                r = reports[(p, l)].categories[c]
                cells.append(f"{r.success_rate:7.1f} ± {r.std:5.1f}")
            lines.append(f"{p}/{c}".ljust(28) + "".join(f"{x:>16}" for x in cells))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def load_config_dict(data):
    """(TrainerConfig, EnvConfig, batches) from a parsed config; unknown keys are rejected."""
    data = dict(data)
    unknown = set(data) - {"trainer", "env", "batches"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    batches = data.pop("batches", 50)
    cfg, env = config_from_dict(data)
    return cfg, env, batches


def load_config(path):
    return load_config_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def cmd_train(config_path, out_dir, seed=None, batches=None, resume=None, workers=1, log=print,
              init_from=None, reset_curriculum=False, keep_every=0):
    cfg, env, n = load_config(config_path)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    train(cfg, env, batches if batches is not None else n, out_dir, resume=resume, log=log,
          n_workers=workers, keep_every=keep_every, init_from=init_from, reset_curriculum=reset_curriculum)
    return 0


# ---------------------------------------------------------------------------
# argparse
# ---------------------------------------------------------------------------

def _levels(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _names(text):
    out = [x.strip() for x in text.split(",") if x.strip()]
    bad = [x for x in out if x not in POLICIES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown policies {bad}")
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="matgrasp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train a policy")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--batches", type=int)
    t.add_argument("--resume")
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--init-from", help="start from another run's checkpoint (fine-tuning)")
    t.add_argument("--reset-curriculum", action="store_true",
                   help="with --init-from, restart the finger increment at its initial value")
    t.add_argument("--keep-every", type=int, default=0, help="also keep every N-th checkpoint")

    e = sub.add_parser("eval", help="evaluate one policy at one noise level")
    e.add_argument("--ckpt")
    e.add_argument("--scenes", default="toy")
    e.add_argument("--trials", type=int, default=10)
    e.add_argument("--noise", type=float, default=0.0)
    e.add_argument("--policy", default="mat", choices=POLICIES)
    e.add_argument("--deterministic", action="store_true")
    e.add_argument("--ablate", choices=ABLATION_MODES)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--episodes-csv")

    s = sub.add_parser("sweep", help="evaluate policies across noise levels")
    s.add_argument("--ckpt")
    s.add_argument("--levels", type=_levels, default=[0.0, 2.5, 5.0, 7.5])
    s.add_argument("--policies", type=_names, default=list(POLICIES))
    s.add_argument("--ablate", choices=ABLATION_MODES)
    s.add_argument("--scenes", default="toy")
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--deterministic", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="long-format CSV path")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.cmd == "train":
            if not Path(args.config).is_file():
                print(f"error: config file {args.config} not found", file=sys.stderr)
                return 2
            return cmd_train(args.config, args.out, args.seed, args.batches, args.resume, args.workers,
                             init_from=args.init_from, reset_curriculum=args.reset_curriculum,
                             keep_every=args.keep_every)
        if args.cmd == "eval":
            if args.policy == "mat" and not args.ckpt:
                print("error: --ckpt is required for the mat policy", file=sys.stderr)
                return 2
            rep = cmd_eval(args.ckpt, args.scenes, args.trials, args.noise, policy=args.policy,
                           deterministic=args.deterministic, ablation=args.ablate, seed=args.seed)
            for cat, r in rep.categories.items():
                print(f"{cat}: {r.success_rate:.1f} ± {r.std:.1f} % over {r.trials} trials "
                      f"({r.scenes} scenes, noise {rep.noise_cm:g} cm)")
            if args.episodes_csv:
                rep.write_episodes(args.episodes_csv)
            return 0
        if args.cmd == "sweep":
            if "mat" in args.policies and not args.ckpt:
                print("error: --ckpt is required for the mat policy", file=sys.stderr)
                return 2
            reports, _ = cmd_sweep(args.ckpt, args.levels, args.policies, args.scenes, args.trials,
                                   args.ablate, args.out, deterministic=args.deterministic,
                                   seed=args.seed)
            print(format_table(reports, args.levels))
            return 0
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
