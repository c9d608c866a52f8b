import csv
import math

import numpy as np
import pytest
import scipy.sparse as sps
from hypothesis import given, settings, strategies as st

from oracles import gae_oracle, soft_clip_oracle

from matgrasp import policy as pl
from matgrasp import soft_ppo as sp
from matgrasp.rollout import EnvConfig, Trajectory

TINY_BRANCHES = (3, 3, 2, 2, 3, 3)


def tiny_cfg(**kw):
    base = dict(hidden=6, hidden_layers=1, feature_dim=3, normalize_advantages=False, seed=0)
    base.update(kw)
    return sp.TrainerConfig(**base)


# --- config and curriculum -------------------------------------------------------

def test_defaults_match_hyperparameter_table():
    c = sp.TrainerConfig()
    assert (c.gamma, c.gae_lambda, c.clip_eps, c.alpha) == (0.999, 0.95, 0.2, 5e-4)
    assert (c.actors, c.episodes_per_actor, c.horizon, c.epochs) == (10, 30, 250, 10)
    assert (c.lr, c.policy_minibatch, c.value_minibatch, c.grad_clip, c.vf_coeff) == (1e-4, 350, 200, 200.0, 1.0)


@pytest.mark.parametrize("kw", [dict(gamma=1.0), dict(gamma=-0.1), dict(clip_eps=0.0), dict(alpha=-1e-3)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        sp.TrainerConfig(**kw)


def test_curriculum_examples():
    assert sp.curriculum_delta(0.0) == 0.4
    assert sp.curriculum_delta(1.0) == 0.1
    assert sp.curriculum_delta(0.5) == pytest.approx(0.25, abs=1e-15)
    for bad in (-0.01, 1.01):
        with pytest.raises(ValueError):
            sp.curriculum_delta(bad)
    assert sp.CurriculumState().delta_finger == 0.4


@given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
def test_curriculum_monotone(rates):
    cur = sp.CurriculumState()
    prev_max, prev_delta = 0.0, cur.delta_finger
    for r in rates:
        cur.update(r)
        assert cur.current_max_success_rate >= prev_max
        assert cur.delta_finger <= prev_delta
        assert 0.1 <= cur.delta_finger <= 0.4
        prev_max, prev_delta = cur.current_max_success_rate, cur.delta_finger


def test_config_dict_roundtrip_and_unknown_keys():
    cfg, env = tiny_cfg(horizon=30), EnvConfig(train_noise_cm=(0.0, 2.5))
    cfg2, env2 = sp.config_from_dict(sp.config_to_dict(cfg, env))
    assert cfg2 == cfg and env2 == env
    with pytest.raises(ValueError, match="learning_rate"):
        sp.trainer_config_from_dict({"learning_rate": 1e-3})
    with pytest.raises(ValueError):
        sp.config_from_dict({"trainer": {}, "extra": 1})
    with pytest.raises(ValueError):
        sp.env_config_from_dict({"hand": {"fingers": 3}})


# --- GAE ---------------------------------------------------------------------------

def test_gae_examples():
    adv, ret = sp.compute_gae([0.7], [0.2])
    assert adv[0] == pytest.approx(0.5, abs=1e-15) and ret[0] == pytest.approx(0.7, abs=1e-15)
    r = [1.0, -0.05, 0.0, 1.0]
    adv, _ = sp.compute_gae(r, np.zeros(4), gamma=0.9, lam=1.0)
    expected = [sum(0.9 ** l * r[t + l] for l in range(4 - t)) for t in range(4)]
    assert np.allclose(adv, expected, atol=1e-14, rtol=0)
    # non-terminal bootstrap
    adv, _ = sp.compute_gae([0.0], [0.0], terminal=False, gamma=0.5, last_value=2.0)
    assert adv[0] == 1.0
    with pytest.raises(ValueError):
        sp.compute_gae([1.0, 2.0], [0.0])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10), st.sampled_from([0.9, 0.999]), st.sampled_from([0.0, 0.5, 0.95, 1.0]),
       st.integers(0, 2**32 - 1))
def test_gae_matches_nested_sum(T, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=T), rng.normal(size=T)
    adv, ret = sp.compute_gae(r, v, True, gamma, lam)
    ref_adv, ref_ret = gae_oracle(r.tolist(), v.tolist(), gamma, lam)
    assert np.max(np.abs(adv - ref_adv)) <= 1e-10
    assert np.max(np.abs(ret - ref_ret)) <= 1e-10


# --- losses ------------------------------------------------------------------------

def test_soft_clip_examples():
    rng = np.random.default_rng(0)
    lp = rng.normal(size=20) - 2
    adv = rng.normal(size=20)
    alpha = 0.01
    # ratio 1: loss is -mean(T)
    assert sp.soft_clipped_policy_loss(lp, lp, adv, 0.2, alpha) == pytest.approx(-np.mean(adv - alpha * lp), abs=1e-14)
    # ratio 2, T = 1: the clipped term 1.2 wins the min
    loss_t, _, _ = sp.soft_clipped_terms(np.array([math.log(2.0)]), np.array([0.0]), np.array([1.0]), 0.2, 0.0)
    assert -loss_t[0] == pytest.approx(1.2, abs=1e-15)
    # alpha 0: the plain clipped surrogate
    ratio = np.exp(lp - (lp - rng.normal(scale=0.5, size=20)))
    plain = -np.mean(np.minimum(ratio * adv, np.clip(ratio, 0.8, 1.2) * adv))
    got = sp.soft_clipped_policy_loss(lp, lp - np.log(ratio), adv, 0.2, 0.0)
    assert got == pytest.approx(plain, abs=1e-12)


def test_non_finite_ratio_reports_step():
    lp = np.array([0.0, 800.0, 0.0])
    with pytest.raises(pl.NonFiniteError, match="step 1"):
        sp.soft_clipped_policy_loss(lp, np.zeros(3), np.ones(3))


@settings(max_examples=300, deadline=None)
@given(st.floats(0.05, 5.0), st.floats(-5, 5), st.floats(0.05, 0.5), st.floats(-8, 0), st.floats(0, 0.1))
def test_soft_clip_matches_case_analysis(ratio, adv, eps, lp, alpha):
    target = adv - alpha * lp
    loss_t, _, _ = sp.soft_clipped_terms(np.array([lp]), np.array([lp - math.log(ratio)]), np.array([adv]), eps, alpha)
    r = math.exp(lp - (lp - math.log(ratio)))
    assert -loss_t[0] == pytest.approx(soft_clip_oracle(r, target, eps), rel=1e-12, abs=1e-12)
    assert -loss_t[0] <= max(r * target, (1 - eps) * target, (1 + eps) * target) + 1e-12


def test_baseline_loss_examples():
    rng = np.random.default_rng(1)
    ret = rng.normal(size=30)
    assert sp.baseline_loss(ret, ret) == 0.0
    assert sp.baseline_loss(np.zeros(5), np.ones(5), vf_coeff=1.0) == 1.0
    assert sp.baseline_loss(np.zeros(5), np.ones(5), vf_coeff=0.5) == 0.5
    v = rng.normal(size=30)
    hand = sum((a - b) ** 2 for a, b in zip(v, ret)) / 30
    assert sp.baseline_loss(v, ret) == pytest.approx(hand, abs=1e-12)


# --- optimiser pieces --------------------------------------------------------------

def test_gradient_clipping_exact():
    g = {"a": np.array([240.0]), "b": np.array([[320.0]])}
    clipped, norm = sp.clip_gradients(g, 200.0)
    assert norm == 400.0
    assert clipped["a"][0] == 120.0 and clipped["b"][0, 0] == 160.0
    assert sp.global_norm(clipped) == 200.0
    small = {"a": np.array([3.0, 4.0])}
    assert sp.clip_gradients(small, 200.0)[0]["a"] is small["a"]
    with pytest.raises(pl.NonFiniteError, match="a"):
        sp.clip_gradients({"a": np.array([np.nan])}, 1.0)


def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    opt = sp.Adam(p, lr=0.01)
    opt.step(p, {"w": np.array([3.0, -0.2, 0.0])})
    assert np.allclose(p["w"], [0.99, -1.99, 0.5], atol=1e-8)


# --- synthetic batches ---------------------------------------------------------------

def synthetic_batch(learner, actions, adv, rng):
    spec = learner.pspec
    X = rng.normal(size=(len(actions), spec.in_dim))
    blocks = pl.split_obs(sps.csr_matrix(X), spec)
    ab = pl.ActionBatch.from_resolved(actions, spec.out_dim - 3)
    heads = pl.Heads.from_outputs(learner.pnet.forward(learner.theta, blocks)[0], learner.theta)
    logp = pl.log_prob_batch(heads, ab)
    return sp.Batch(blocks, ab, logp, np.asarray(adv, float), np.zeros(len(actions))), ab


def test_zero_advantage_no_entropy_leaves_policy_unchanged():
    cfg = tiny_cfg(alpha=0.0, epochs=3, policy_minibatch=4, value_minibatch=4)
    learner = sp.Learner(cfg, 3, TINY_BRANCHES)
    rng = np.random.default_rng(2)
    acts = [pl.ResolvedAction("fingers", finger_flags=(1, 0, 1)), pl.ResolvedAction("lift"),
            pl.ResolvedAction("reopen", rot_u=0.3)] * 3
    batch, _ = synthetic_batch(learner, acts, np.zeros(9), rng)
    before = {k: v.copy() for k, v in learner.theta.items()}
    psi_before = {k: v.copy() for k, v in learner.psi.items()}
    sp.update(learner, batch, cfg, rng)
    assert all(np.array_equal(before[k], learner.theta[k]) for k in before)
    assert any(not np.array_equal(psi_before[k], learner.psi[k]) for k in psi_before)


def test_positive_advantage_raises_action_probability():
    cfg = tiny_cfg(epochs=1, lr=1e-3)
    learner = sp.Learner(cfg, 3, TINY_BRANCHES)
    rng = np.random.default_rng(3)
    batch, ab = synthetic_batch(learner, [pl.ResolvedAction("fingers", finger_flags=(1, 0, 1))], [1.0], rng)
    metrics = sp.update(learner, batch, cfg, rng)
    heads = pl.Heads.from_outputs(learner.pnet.forward(learner.theta, batch.blocks)[0], learner.theta)
    assert pl.log_prob_batch(heads, ab)[0] > batch.logp_old[0]
    assert metrics["mean_ratio"] == 1.0 and metrics["clip_fraction"] == 0.0
    assert metrics["mean_entropy"] == pytest.approx(-batch.logp_old[0])


def test_update_rejects_empty_batch():
    cfg = tiny_cfg()
    learner = sp.Learner(cfg, 3, TINY_BRANCHES)
    empty = sp.Batch([], pl.ActionBatch(np.zeros(0, int), np.zeros((0, 3)), np.zeros(0)), np.zeros(0),
                     np.zeros(0), np.zeros(0))
    with pytest.raises(ValueError):
        sp.update(learner, empty, cfg, np.random.default_rng(0))


def test_bandit_policy_improvement():
    """One-step episodes: lift pays 1, reopen and finger moves pay 0."""
    cfg = tiny_cfg(epochs=4, lr=3e-3, policy_minibatch=32, value_minibatch=32, normalize_advantages=True)
    learner = sp.Learner(cfg, 1, TINY_BRANCHES)
    obs = np.random.default_rng(4).normal(size=learner.pspec.in_dim)
    row = (np.arange(obs.size, dtype=np.int32), obs)
    rng = np.random.default_rng(5)

    def p_lift():
        h = pl.forward_heads(learner.pnet, learner.theta, obs)
        return pl.discrete_outcome_probs(h)[("lift",)]

    start = p_lift()
    for _ in range(50):
        trajs = []
        heads = pl.forward_heads(learner.pnet, learner.theta, obs)
        for _ in range(32):
            act = pl.resolve_action(pl.sample_action(heads, rng), forced_reopen=False, at_horizon=False)
            t = Trajectory(obs=[row], actions=[act], logp_old=[pl.log_prob(heads, act)],
                           rewards=[1.0 if act.kind == "lift" else 0.0])
            trajs.append(t)
        sp.update(learner, sp.build_batch(learner, trajs, cfg), cfg, rng)
    assert start < 0.5 < 0.9 < p_lift()


# --- rollouts and the training driver ----------------------------------------------

SMALL_TRAIN = dict(actors=2, episodes_per_actor=2, horizon=12, epochs=2, hidden=8, hidden_layers=1,
                   feature_dim=4, policy_minibatch=16, value_minibatch=16)


def test_collect_rollouts_single_episode_and_repeatable():
    cfg = sp.TrainerConfig(actors=1, episodes_per_actor=1, hidden=8, hidden_layers=1, feature_dim=4)
    learner = sp.Learner(cfg)
    env = EnvConfig()
    a = sp.collect_rollouts(learner, cfg, sp.CurriculumState(), env)
    b = sp.collect_rollouts(learner, cfg, sp.CurriculumState(), env)
    assert len(a) == 1 and 1 <= len(a[0]) <= 250
    assert a[0].actions[-1].kind in ("lift", "horizon_lift")
    assert a[0].rewards == b[0].rewards and a[0].logp_old == b[0].logp_old


def test_build_batch_shapes():
    cfg = sp.TrainerConfig(**SMALL_TRAIN)
    learner = sp.Learner(cfg)
    trajs = sp.collect_rollouts(learner, cfg, sp.CurriculumState(), EnvConfig(horizon=12))
    batch = sp.build_batch(learner, trajs, cfg)
    n = sum(len(t) for t in trajs)
    assert len(batch) == n == batch.blocks[0].shape[0]
    assert abs(batch.advantages.mean()) < 1e-9
    for t in trajs:
        assert len(t.values) == len(t)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def test_zero_batches_writes_initial_checkpoint_only(tmp_path):
    sp.train(sp.TrainerConfig(**SMALL_TRAIN), EnvConfig(), 0, tmp_path, log=None)
    assert (tmp_path / "checkpoint.bin").exists() and (tmp_path / "config.json").exists()
    assert read_csv(tmp_path / "metrics.csv") == [sp.METRICS_HEADER]
    learner, header = sp.Learner.load(tmp_path / "checkpoint.bin")
    assert header["meta"]["batches_done"] == 0 and header["meta"]["delta_finger"] == 0.4


def test_train_deterministic_and_resumable(tmp_path):
    cfg, env = sp.TrainerConfig(**SMALL_TRAIN), EnvConfig()
    sp.train(cfg, env, 2, tmp_path / "a", log=None)
    sp.train(cfg, env, 2, tmp_path / "b", log=None)
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    sp.train(cfg, env, 1, tmp_path / "c", log=None)
    sp.train(cfg, env, 1, tmp_path / "c", resume=tmp_path / "c" / "checkpoint.bin", log=None)
    assert (tmp_path / "c" / "metrics.csv").read_bytes() == a
    rows = read_csv(tmp_path / "a" / "metrics.csv")[1:]
    deltas = [float(r[4]) for r in rows]
    assert all(0.1 <= d <= 0.4 for d in deltas) and deltas == sorted(deltas, reverse=True)
    la, _ = sp.Learner.load(tmp_path / "a" / "checkpoint.bin")
    lc, _ = sp.Learner.load(tmp_path / "c" / "checkpoint.bin")
    assert all(np.array_equal(la.theta[k], lc.theta[k]) for k in la.theta)


def test_different_seed_changes_metrics(tmp_path):
    env = EnvConfig()
    sp.train(sp.TrainerConfig(**SMALL_TRAIN), env, 1, tmp_path / "a", log=None)
    sp.train(sp.TrainerConfig(**SMALL_TRAIN, seed=1), env, 1, tmp_path / "b", log=None)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


def test_init_from_keeps_or_resets_curriculum(tmp_path):
    cfg, env = sp.TrainerConfig(**SMALL_TRAIN), EnvConfig()
    sp.train(cfg, env, 1, tmp_path / "src", log=None)
    src, header = sp.Learner.load(tmp_path / "src" / "checkpoint.bin")
    header["meta"]["current_max_success_rate"] = 0.5
    header["meta"]["delta_finger"] = 0.25
    src.save(tmp_path / "seed.bin", header["meta"])
    _, kept, _ = sp.train(cfg, env, 0, tmp_path / "kept", log=None, init_from=tmp_path / "seed.bin")
    _, fresh, _ = sp.train(cfg, env, 0, tmp_path / "fresh", log=None, init_from=tmp_path / "seed.bin",
                           reset_curriculum=True)
    assert kept.delta_finger == 0.25 and fresh.delta_finger == 0.4
    tuned, _ = sp.Learner.load(tmp_path / "fresh" / "checkpoint.bin")
    assert all(np.array_equal(tuned.theta[k], src.theta[k]) for k in src.theta)
