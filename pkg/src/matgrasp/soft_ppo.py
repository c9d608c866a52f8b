"""Soft clipped-surrogate policy optimisation with a learned value baseline.

The policy loss per step is ``-min(r*T, clip(r, 1-eps, 1+eps)*T)`` with the
probability ratio ``r`` and the soft target ``T = A - alpha * log pi``.
The finger-closing increment follows a success-driven curriculum.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import sim_env as se
from .obs_buffer import OBS_DIM
from .policy import (ActionBatch, Heads, MultiBranchNet, NonFiniteError, flatten, init_params,
                     load_checkpoint, log_prob_batch, param_shapes, policy_spec, save_checkpoint,
                     unflatten, value_spec)
from .rollout import EnvConfig, MatAgent, run_episode

DELTA_MIN, DELTA_MAX = 0.1, 0.4

METRICS_HEADER = ["batch", "steps", "success_rate", "max_success_rate", "delta_finger",
                  "policy_loss", "value_loss", "clip_fraction", "mean_entropy"]


@dataclass
class TrainerConfig:
    gamma: float = 0.999
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    alpha: float = 5e-4
    actors: int = 10
    episodes_per_actor: int = 30
    horizon: int = 250
    epochs: int = 10
    lr: float = 1e-4
    policy_minibatch: int = 350
    value_minibatch: int = 200
    grad_clip: float = 200.0
    vf_coeff: float = 1.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    normalize_advantages: bool = True
    rotation_term: bool = True
    hidden: int = 128
    hidden_layers: int = 3
    feature_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


# ---------------------------------------------------------------------------
# curriculum
# ---------------------------------------------------------------------------

def curriculum_delta(current_max_success_rate):
    rate = current_max_success_rate
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"success rate {rate} outside [0, 1]")
    return DELTA_MIN + (DELTA_MAX - DELTA_MIN) * (1.0 - rate)


@dataclass
class CurriculumState:
    current_max_success_rate: float = 0.0
    delta_finger: float = DELTA_MAX

    def update(self, measured_rate):
        self.current_max_success_rate = max(self.current_max_success_rate, float(measured_rate))
        self.delta_finger = curriculum_delta(self.current_max_success_rate)
        return self


# ---------------------------------------------------------------------------
# advantages and losses
# ---------------------------------------------------------------------------

def compute_gae(rewards, values, terminal=True, gamma=0.999, lam=0.95, last_value=0.0):
    """Generalised advantage estimates and returns for one episode.

    The value after a terminal step is 0; otherwise last_value bootstraps.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.shape != v.shape:
        raise ValueError("rewards and values must have equal length")
    T = len(r)
    adv = np.zeros(T)
    nxt = 0.0 if terminal else float(last_value)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        delta = r[t] + gamma * nxt - v[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
        nxt = v[t]
    return adv, adv + v


def soft_clipped_terms(logp, logp_old, adv, eps, alpha):
    """Per-step loss contributions and d(loss_t)/d(logp_t)."""
    with np.errstate(over="ignore"):
        ratio = np.exp(logp - logp_old)
    bad = ~np.isfinite(ratio)
    if bad.any():
        raise NonFiniteError(f"non-finite probability ratio at step {int(np.flatnonzero(bad)[0])}")
    target = adv - alpha * logp
    clipped_ratio = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    unclipped = ratio * target
    clipped = clipped_ratio * target
    use_unclipped = unclipped <= clipped
    obj = np.where(use_unclipped, unclipped, clipped)
    d_obj = np.where(use_unclipped, ratio * (target - alpha), -alpha * clipped_ratio)
    return -obj, -d_obj, ratio


def soft_clipped_policy_loss(logp, logp_old, adv, eps=0.2, alpha=5e-4):
    loss_t, _, _ = soft_clipped_terms(np.asarray(logp, float), np.asarray(logp_old, float),
                                      np.asarray(adv, float), eps, alpha)
    return float(loss_t.mean())


def baseline_loss(values, returns, vf_coeff=1.0):
    values, returns = np.asarray(values, float), np.asarray(returns, float)
    return float(vf_coeff * np.mean((values - returns) ** 2))


@dataclass
class Batch:
    """Flattened optimisation batch."""
    blocks: list            # per-branch CSR matrices (N rows)
    actions: ActionBatch
    logp_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.logp_old)

    def rows(self, idx):
        return [b[idx] for b in self.blocks]


def policy_loss_fn(batch_actions, logp_old, adv, eps, alpha, rotation_term=True, stats=None):
    """Loss closure for MultiBranchNet.gradients on the policy network."""
    def fn(out, params):
        heads = Heads.from_outputs(out, params)
        lp, d_out, d_ls = log_prob_batch(heads, batch_actions, rotation_term, with_grad=True)
        loss_t, dl_dlp, ratio = soft_clipped_terms(lp, logp_old, adv, eps, alpha)
        B = len(lp)
        g = dl_dlp / B
        extra = {"log_sigma": np.array([np.sum(g * d_ls)])} if "log_sigma" in params else {}
        if stats is not None:
            stats["ratio"] = ratio
            stats["logp"] = lp
        return float(loss_t.mean()), g[:, None] * d_out, extra
    return fn


def value_loss_fn(returns, vf_coeff):
    def fn(out, params):
        v = out[:, 0]
        diff = v - returns
        d = np.zeros_like(out)
        d[:, 0] = 2.0 * vf_coeff * diff / len(v)
        return float(vf_coeff * np.mean(diff ** 2)), d, {}
    return fn


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return params


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads, max_norm):
    norm = global_norm(grads)
    if not math.isfinite(norm):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise NonFiniteError(f"non-finite gradient in {bad}")
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# ---------------------------------------------------------------------------
# learner state
# ---------------------------------------------------------------------------

class Learner:
    """Policy and value parameters plus their optimisers."""

    def __init__(self, cfg: TrainerConfig, n_fingers=3, branch_inputs=None, rng=None):
        kw = dict(hidden=cfg.hidden, hidden_layers=cfg.hidden_layers, feature_dim=cfg.feature_dim)
        if branch_inputs is not None:
            kw["branch_inputs"] = tuple(branch_inputs)
        self.cfg = cfg
        self.pspec = policy_spec(n_fingers, **kw)
        self.vspec = value_spec(**kw)
        self.pnet = MultiBranchNet(self.pspec)
        self.vnet = MultiBranchNet(self.vspec)
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.theta = self.pnet.init(rng)
        self.psi = self.vnet.init(rng)
        self.popt = Adam(self.theta, cfg.lr, cfg.adam_betas, cfg.adam_eps)
        self.vopt = Adam(self.psi, cfg.lr, cfg.adam_betas, cfg.adam_eps)

    def agent(self, deterministic=False, ablation=None):
        return MatAgent(self.pnet, self.theta, deterministic=deterministic,
                        rotation_term=self.cfg.rotation_term, ablation=ablation)

    def save(self, path, meta):
        nets = {"policy": (self.pspec, self.theta), "value": (self.vspec, self.psi),
                "policy.adam_m": (self.pspec, self.popt.m), "policy.adam_v": (self.pspec, self.popt.v),
                "value.adam_m": (self.vspec, self.vopt.m), "value.adam_v": (self.vspec, self.vopt.v)}
        meta = dict(meta, policy_adam_t=self.popt.t, value_adam_t=self.vopt.t)
        save_checkpoint(path, nets, meta, n_fingers=self.pspec.out_dim - 3)

    @classmethod
    def load(cls, path, cfg: TrainerConfig | None = None):
        nets, header = load_checkpoint(path)
        meta = header["meta"]
        if cfg is None:
            cfg = trainer_config_from_dict(meta.get("trainer", {}))
        self = cls.__new__(cls)
        self.cfg = cfg
        self.pspec, self.theta = nets["policy"]
        self.vspec, self.psi = nets["value"]
        self.pnet, self.vnet = MultiBranchNet(self.pspec), MultiBranchNet(self.vspec)
        self.popt = Adam(self.theta, cfg.lr, cfg.adam_betas, cfg.adam_eps)
        self.vopt = Adam(self.psi, cfg.lr, cfg.adam_betas, cfg.adam_eps)
        if "policy.adam_m" in nets:
            self.popt.m, self.popt.v = nets["policy.adam_m"][1], nets["policy.adam_v"][1]
            self.vopt.m, self.vopt.v = nets["value.adam_m"][1], nets["value.adam_v"][1]
            self.popt.t, self.vopt.t = meta.get("policy_adam_t", 0), meta.get("value_adam_t", 0)
        return self, header


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

def episode_rng(seed, batch_index, actor, episode):
    return np.random.default_rng([seed, batch_index, actor, episode])


def _actor_rollouts(args):
    env, agent, seed, batch_index, actor, n_episodes, delta, horizon = args
    out = []
    for ep in range(n_episodes):
        rng = episode_rng(seed, batch_index, actor, ep)
        noise = float(env.train_noise_cm[int(rng.integers(len(env.train_noise_cm)))])
        out.append(run_episode(env, agent, rng, delta, noise_cm=noise, record_obs=True, horizon=horizon))
    return out


def collect_rollouts(learner: Learner, cfg: TrainerConfig, curriculum: CurriculumState, env: EnvConfig,
                     batch_index=0, seed=None, n_workers=1):
    """actors x episodes_per_actor episodes with a frozen parameter snapshot and delta.

    Actors run sequentially (or in a process pool) and are merged in actor order.
    """
    seed = cfg.seed if seed is None else seed
    agent = learner.agent()
    agent.params = {k: v.copy() for k, v in learner.theta.items()}
    jobs = [(env, agent, seed, batch_index, a, cfg.episodes_per_actor, curriculum.delta_finger, cfg.horizon)
            for a in range(cfg.actors)]
    if n_workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(n_workers) as pool:
            per_actor = list(pool.map(_actor_rollouts, jobs))
    else:
        per_actor = [_actor_rollouts(j) for j in jobs]
    trajs = [t for actor in per_actor for t in actor]
    for t in trajs:
        if len(t) > cfg.horizon or not t.actions[-1].kind in ("lift", "horizon_lift"):
            raise RuntimeError("episode did not terminate with a lift")
    return trajs


def stack_obs(trajs, in_dim=OBS_DIM):
    indptr, indices, data = [0], [], []
    for t in trajs:
        for idx, val in t.obs:
            indices.append(idx)
            data.append(val)
            indptr.append(indptr[-1] + len(idx))
    if not indices:
        return sp.csr_matrix((0, in_dim))
    return sp.csr_matrix((np.concatenate(data), np.concatenate(indices), np.array(indptr)),
                         shape=(len(indptr) - 1, in_dim))


def build_batch(learner: Learner, trajs, cfg: TrainerConfig):
    from .policy import split_obs
    X = stack_obs(trajs, learner.pspec.in_dim)
    blocks = split_obs(X, learner.pspec)
    values = learner.vnet.forward(learner.psi, blocks)[0][:, 0]
    advs, rets, i = [], [], 0
    for t in trajs:
        n = len(t)
        t.values = values[i:i + n]
        a, r = compute_gae(t.rewards, t.values, True, cfg.gamma, cfg.gae_lambda)
        advs.append(a)
        rets.append(r)
        i += n
    adv = np.concatenate(advs)
    if cfg.normalize_advantages and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    actions = ActionBatch.from_resolved([a for t in trajs for a in t.actions], learner.pspec.out_dim - 3)
    logp_old = np.array([lp for t in trajs for lp in t.logp_old])
    return Batch(blocks, actions, logp_old, adv, np.concatenate(rets))


def update(learner: Learner, batch: Batch, cfg: TrainerConfig, rng):
    """Epochs of shuffled minibatch steps on policy and value; returns metrics."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    N = len(batch)
    m = {"policy_loss": 0.0, "value_loss": 0.0, "clip_fraction": 0.0, "mean_ratio": 0.0,
         "mean_entropy": 0.0, "policy_grad_norm": 0.0}
    for epoch in range(cfg.epochs):
        last = epoch == cfg.epochs - 1
        perm = rng.permutation(N)
        for s in range(0, N, cfg.policy_minibatch):
            idx = perm[s:s + cfg.policy_minibatch]
            stats = {}
            fn = policy_loss_fn(batch.actions.subset(idx), batch.logp_old[idx], batch.advantages[idx],
                                cfg.clip_eps, cfg.alpha, cfg.rotation_term, stats)
            loss, grads = learner.pnet.gradients(learner.theta, batch.rows(idx), fn)
            grads, norm = clip_gradients(grads, cfg.grad_clip)
            learner.popt.step(learner.theta, grads)
            if last:
                w = len(idx) / N
                m["policy_loss"] += w * loss
                m["clip_fraction"] += w * float(np.mean(np.abs(stats["ratio"] - 1.0) > cfg.clip_eps))
                m["mean_ratio"] += w * float(np.mean(stats["ratio"]))
                m["mean_entropy"] += w * float(-np.mean(stats["logp"]))
                m["policy_grad_norm"] = max(m["policy_grad_norm"], norm)
        perm = rng.permutation(N)
        for s in range(0, N, cfg.value_minibatch):
            idx = perm[s:s + cfg.value_minibatch]
            fn = value_loss_fn(batch.returns[idx], cfg.vf_coeff)
            loss, grads = learner.vnet.gradients(learner.psi, batch.rows(idx), fn)
            grads, _ = clip_gradients(grads, cfg.grad_clip)
            learner.vopt.step(learner.psi, grads)
            if last:
                m["value_loss"] += len(idx) / N * loss
    return m


# ---------------------------------------------------------------------------
# configs and training driver
# ---------------------------------------------------------------------------

def _from_dict(cls, data, where):
    if data is None:
        return cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {where} keys: {sorted(unknown)}")
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            v = data[f.name]
            kw[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)


def trainer_config_from_dict(data):
    return _from_dict(TrainerConfig, data, "trainer")


def env_config_from_dict(data):
    data = dict(data or {})
    hand = _from_dict(se.HandModel, data.pop("hand", None), "env.hand")
    pool = _from_dict(se.ObjectPool, data.pop("pool", None), "env.pool")
    env = _from_dict(EnvConfig, data, "env")
    env.hand, env.pool = hand, pool
    return env


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: TrainerConfig, env: EnvConfig):
    return {"trainer": _plain(cfg), "env": _plain(env)}


def config_from_dict(data):
    unknown = set(data) - {"trainer", "env"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return trainer_config_from_dict(data.get("trainer")), env_config_from_dict(data.get("env"))


def _fmt(x):
    return repr(float(x)) if isinstance(x, float) else str(x)


def _print_flush(msg):
    print(msg, flush=True)


def train(cfg: TrainerConfig, env: EnvConfig, total_batches, out_dir, resume=None, log=_print_flush,
          n_workers=1, keep_every=0, init_from=None, reset_curriculum=False):
    """Alternate collection and update; persist metrics and a checkpoint per batch.

    resume continues a run in the same out_dir. init_from starts a fresh run
    (new metrics, batch counter at 0) from another run's weights, optimiser
    moments and curriculum state, e.g. to fine-tune on a harder task;
    reset_curriculum restarts the curriculum at its initial increment instead.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = dataclasses.replace(env, horizon=cfg.horizon)
    metrics_path = out / "metrics.csv"
    ckpt_path = out / "checkpoint.bin"
    if resume:
        learner, header = Learner.load(resume, cfg)
        meta = header["meta"]
        start = meta["batches_done"]
        cur = CurriculumState(meta["current_max_success_rate"], meta["delta_finger"])
    else:
        if init_from:
            learner, header = Learner.load(init_from, cfg)
            m = header["meta"]
            cur = CurriculumState() if reset_curriculum else CurriculumState(
                m["current_max_success_rate"], m["delta_finger"])
        else:
            learner = Learner(cfg, env.hand.n_fingers)
            cur = CurriculumState()
        start = 0
        (out / "config.json").write_text(json.dumps(config_to_dict(cfg, env), indent=2))
        with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRICS_HEADER)

    def meta():
        return {"batches_done": b_done, "current_max_success_rate": cur.current_max_success_rate,
                "delta_finger": cur.delta_finger, "trainer": _plain(cfg), "env": _plain(env)}

    b_done = start
    if not resume:
        learner.save(ckpt_path, meta())
        learner.save(out / "checkpoint_0000.bin", meta())
    rows = []
    for b in range(start, start + total_batches):
        t0 = time.time()
        trajs = collect_rollouts(learner, cfg, cur, env, batch_index=b, n_workers=n_workers)
        batch = build_batch(learner, trajs, cfg)
        stats = update(learner, batch, cfg, np.random.default_rng([cfg.seed, b, 7919]))
        rate = float(np.mean([t.success for t in trajs]))
        delta_used = cur.delta_finger
        cur.update(rate)
        row = {"batch": b, "steps": len(batch), "success_rate": rate,
               "max_success_rate": cur.current_max_success_rate, "delta_finger": delta_used,
               "policy_loss": stats["policy_loss"], "value_loss": stats["value_loss"],
               "clip_fraction": stats["clip_fraction"], "mean_entropy": stats["mean_entropy"]}
        with open(metrics_path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(row[k]) for k in METRICS_HEADER])
        rows.append(row)
        b_done = b + 1
        learner.save(ckpt_path, meta())
        if keep_every and b_done % keep_every == 0:
            learner.save(out / f"checkpoint_{b_done:04d}.bin", meta())
        if log:
            log(f"batch {b}: steps={len(batch)} success={rate:.3f} max={cur.current_max_success_rate:.3f} "
                f"delta={delta_used:.3f} ploss={stats['policy_loss']:.4f} vloss={stats['value_loss']:.4f} "
                f"clip={stats['clip_fraction']:.3f} ent={stats['mean_entropy']:.3f} ({time.time() - t0:.1f}s)")
    return learner, cur, rows
