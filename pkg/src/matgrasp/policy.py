"""Multi-branch stochastic grasp policy and value baseline in plain numpy.

Each of the six observation components has its own extractor
(ReLU hidden layers, then a tanh feature layer). The features are concatenated
and fed to a ReLU trunk whose linear head gives, for the policy,
``[finger_1..finger_n, reopen, lift, rotation_mean]`` pre-activations, and for
the value network a single scalar. The rotation standard deviation is a free
parameter ``log_sigma``.

All arrays are float64; first-layer inputs may be scipy CSR matrices, which is
how training keeps the 15k-wide, mostly-zero observations cheap.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .obs_buffer import COMPONENT_SIZES, component_slices

LOG_2PI = math.log(2 * math.pi)
LOG_PI = math.log(math.pi)

KIND_FINGERS, KIND_REOPEN, KIND_LIFT, KIND_HORIZON, KIND_FORCED = range(5)
KIND_CODES = {"fingers": KIND_FINGERS, "reopen": KIND_REOPEN, "lift": KIND_LIFT,
              "horizon_lift": KIND_HORIZON}


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NetSpec:
    branch_inputs: tuple = COMPONENT_SIZES
    hidden: int = 128
    hidden_layers: int = 3
    feature_dim: int = 64
    trunk_layers: int = 3
    out_dim: int = 6
    # optional learned linear projection in front of selected branches, 0 = off
    proj_dims: tuple = (0, 0, 0, 0, 0, 0)
    learn_log_sigma: bool = True

    @property
    def in_dim(self):
        return sum(self.branch_inputs)


def policy_spec(n_fingers=3, **kw):
    return NetSpec(out_dim=n_fingers + 3, learn_log_sigma=True, **kw)


def value_spec(**kw):
    return NetSpec(out_dim=1, learn_log_sigma=False, **kw)


def _layer_shapes(spec: NetSpec):
    """Ordered (name, shape, activation) for every dense layer."""
    layers = []
    for k, n_in in enumerate(spec.branch_inputs):
        width = n_in
        if spec.proj_dims[k]:
            layers.append((f"b{k}.proj", (width, spec.proj_dims[k]), "linear"))
            width = spec.proj_dims[k]
        for j in range(spec.hidden_layers):
            layers.append((f"b{k}.h{j}", (width, spec.hidden), "relu"))
            width = spec.hidden
        layers.append((f"b{k}.feat", (width, spec.feature_dim), "tanh"))
    width = spec.feature_dim * len(spec.branch_inputs)
    for j in range(spec.trunk_layers):
        layers.append((f"trunk.h{j}", (width, spec.hidden), "relu"))
        width = spec.hidden
    layers.append(("head", (width, spec.out_dim), "linear"))
    return layers


def param_shapes(spec: NetSpec):
    shapes = []
    for name, (n_in, n_out), _ in _layer_shapes(spec):
        shapes.append((name + ".W", (n_in, n_out)))
        shapes.append((name + ".b", (n_out,)))
    if spec.learn_log_sigma:
        shapes.append(("log_sigma", (1,)))
    return shapes


def init_params(spec: NetSpec, rng, log_sigma0=math.log(0.5)):
    """Glorot-uniform weights, zero biases."""
    params = {}
    for name, shape in param_shapes(spec):
        if name == "log_sigma":
            params[name] = np.array([log_sigma0])
        elif name.endswith(".W"):
            lim = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-lim, lim, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def zeros_like(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


def flatten(params, spec: NetSpec):
    return np.concatenate([params[name].ravel() for name, _ in param_shapes(spec)])


def unflatten(vec, spec: NetSpec):
    out, i = {}, 0
    for name, shape in param_shapes(spec):
        n = int(np.prod(shape))
        out[name] = np.array(vec[i:i + n]).reshape(shape)
        i += n
    if i != len(vec):
        raise ShapeError(f"parameter vector has {len(vec)} entries, spec needs {i}")
    return out


def split_obs(X, spec: NetSpec):
    """Split a (B, in_dim) batch into per-branch blocks (CSR stays CSR)."""
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != spec.in_dim:
        raise ShapeError(f"observation width {X.shape[1]} != expected {spec.in_dim}")
    slices = component_slices(spec.branch_inputs)
    if sp.issparse(X):
        X = X.tocsc()
        return [X[:, s].tocsr() for s in slices]
    return [X[:, s] for s in slices]


def _act(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_grad(kind, z, a, g):
    if kind == "relu":
        return g * (z > 0)
    if kind == "tanh":
        return g * (1.0 - a * a)
    return g


class MultiBranchNet:
    def __init__(self, spec: NetSpec):
        self.spec = spec
        layers = _layer_shapes(spec)
        n_branch = len(spec.branch_inputs)
        self.branch_layers = [[l for l in layers if l[0].startswith(f"b{k}.")] for k in range(n_branch)]
        self.trunk_layers = [l for l in layers if l[0].startswith("trunk.") or l[0] == "head"]

    def init(self, rng, **kw):
        return init_params(self.spec, rng, **kw)

    def forward(self, params, blocks):
        """Returns (outputs (B, out_dim), cache, features list)."""
        if not isinstance(blocks, (list, tuple)):
            blocks = split_obs(blocks, self.spec)
        cache = {"branch": [], "trunk": None}
        feats = []
        for layers, x in zip(self.branch_layers, blocks):
            h, steps = self._run(params, layers, x)
            cache["branch"].append(steps)
            feats.append(h)
        h = np.concatenate(feats, axis=1)
        out, steps = self._run(params, self.trunk_layers, h)
        cache["trunk"] = steps
        return out, cache, feats

    @staticmethod
    def _run(params, layers, x):
        steps = []
        for i, (name, _, kind) in enumerate(layers):
            W = params[name + ".W"]
            if i == 0 and isinstance(x, np.ndarray) and x.shape[1] > 64:
                # observations are mostly zero: only active columns contribute
                cols = np.flatnonzero(np.any(x != 0, axis=0))
                z = (x[:, cols] @ W[cols] if 2 * len(cols) < x.shape[1] else x @ W) + params[name + ".b"]
            else:
                z = x @ W + params[name + ".b"]
            if not isinstance(z, np.ndarray):
                z = np.asarray(z)
            a = _act(kind, z)
            steps.append((name, kind, x, z, a))
            x = a
        return x, steps

    def backward(self, params, cache, d_out):
        grads = {}
        g = self._back(params, cache["trunk"], d_out, grads)
        F = self.spec.feature_dim
        for k, steps in enumerate(cache["branch"]):
            self._back(params, steps, g[:, k * F:(k + 1) * F], grads, need_input_grad=False)
        return grads

    @staticmethod
    def _back(params, steps, g, grads, need_input_grad=True):
        for idx in range(len(steps) - 1, -1, -1):
            name, kind, x, z, a = steps[idx]
            g = _act_grad(kind, z, a, g)
            dW = x.T @ g
            grads[name + ".W"] = np.asarray(dW)
            grads[name + ".b"] = g.sum(axis=0)
            if idx > 0 or need_input_grad:
                g = g @ params[name + ".W"].T
        return g

    def gradients(self, params, blocks, loss_fn):
        """Analytic gradients of loss_fn(outputs, params) -> (loss, d_outputs, extra_grads)."""
        out, cache, _ = self.forward(params, blocks)
        loss, d_out, extra = loss_fn(out, params)
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite loss {loss}")
        grads = self.backward(params, cache, d_out)
        for k in params:
            if k not in grads:
                grads[k] = np.zeros_like(params[k])
        for k, v in (extra or {}).items():
            grads[k] = grads[k] + v
        return loss, grads


# ---------------------------------------------------------------------------
# heads, sampling, resolution, log-probability
# ---------------------------------------------------------------------------

def log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class Heads:
    finger_logits: np.ndarray    # (B, n)
    reopen_logit: np.ndarray     # (B,)
    lift_logit: np.ndarray       # (B,)
    rot_pre: np.ndarray          # (B,)
    log_sigma: float

    @classmethod
    def from_outputs(cls, out, params):
        n = out.shape[1] - 3
        ls = float(params["log_sigma"][0]) if "log_sigma" in params else math.log(0.5)
        return cls(out[:, :n], out[:, n], out[:, n + 1], out[:, n + 2], ls)

    @property
    def n_fingers(self):
        return self.finger_logits.shape[1]

    @property
    def rot_mean(self):
        return np.tanh(self.rot_pre)

    @property
    def sigma(self):
        return math.exp(self.log_sigma)

    def row(self, i):
        return Heads(self.finger_logits[i:i + 1], self.reopen_logit[i:i + 1], self.lift_logit[i:i + 1],
                     self.rot_pre[i:i + 1], self.log_sigma)


@dataclass
class ActionSample:
    finger_flags: tuple
    reopen: int
    lift: int
    wrist_rotation: float
    rot_u: float                       # unclamped Gaussian draw before scaling by pi
    log_probs: dict = field(default_factory=dict)


@dataclass
class ResolvedAction:
    kind: str                           # fingers | reopen | lift | horizon_lift
    finger_flags: tuple = ()
    wrist_rotation: float = 0.0
    forced_reopen: bool = False
    reopen: int = 0
    lift: int = 0
    rot_u: float = 0.0
    adjust_position: bool = True

    @property
    def code(self):
        if self.kind == "reopen" and self.forced_reopen:
            return KIND_FORCED
        return KIND_CODES[self.kind]


def forward_heads(net: MultiBranchNet, params, obs):
    out, _, _ = net.forward(params, obs)
    return Heads.from_outputs(out, params)


def sample_action(heads: Heads, rng, deterministic=False, row=0):
    """Independent Bernoulli fingers/reopen/lift and a Gaussian wrist rotation."""
    logits = np.concatenate([heads.finger_logits[row], [heads.reopen_logit[row], heads.lift_logit[row]]])
    if deterministic:
        flags = (logits > 0).astype(int)
        u = float(heads.rot_mean[row])
    else:
        flags = (rng.random(len(logits)) < sigmoid(logits)).astype(int)
        u = float(heads.rot_mean[row] + heads.sigma * rng.standard_normal())
    n = heads.n_fingers
    rotation = math.pi * min(1.0, max(-1.0, u))
    lp = {
        "fingers": float(np.sum(np.where(flags[:n] == 1, log_sigmoid(logits[:n]), log_sigmoid(-logits[:n])))),
        "reopen": float(log_sigmoid(logits[n]) if flags[n] else log_sigmoid(-logits[n])),
        "lift": float(log_sigmoid(logits[n + 1]) if flags[n + 1] else log_sigmoid(-logits[n + 1])),
        "rotation": float(gaussian_logpdf(u, heads.rot_mean[row], heads.log_sigma) - LOG_PI),
    }
    return ActionSample(tuple(int(f) for f in flags[:n]), int(flags[n]), int(flags[n + 1]),
                        rotation, u, lp)


def resolve_action(sample: ActionSample, forced_reopen=False, at_horizon=False):
    """Priority: horizon lift > reopen (chosen or forced) > lift > finger closing."""
    common = dict(reopen=sample.reopen, lift=sample.lift, rot_u=sample.rot_u)
    if at_horizon:
        return ResolvedAction("horizon_lift", **common)
    if sample.reopen or forced_reopen:
        return ResolvedAction("reopen", wrist_rotation=sample.wrist_rotation,
                              forced_reopen=bool(forced_reopen and not sample.reopen), **common)
    if sample.lift:
        return ResolvedAction("lift", **common)
    return ResolvedAction("fingers", finger_flags=tuple(sample.finger_flags), **common)


def gaussian_logpdf(x, mean, log_sigma):
    s = math.exp(log_sigma) if np.ndim(log_sigma) == 0 else np.exp(log_sigma)
    return -0.5 * ((x - mean) / s) ** 2 - log_sigma - 0.5 * LOG_2PI


@dataclass
class ActionBatch:
    """Array form of resolved actions for batched log-probabilities."""
    codes: np.ndarray          # (B,) KIND_* codes
    finger_flags: np.ndarray   # (B, n)
    rot_u: np.ndarray          # (B,)

    @classmethod
    def from_resolved(cls, actions, n_fingers):
        codes = np.array([a.code for a in actions], dtype=int)
        flags = np.zeros((len(actions), n_fingers))
        for i, a in enumerate(actions):
            if a.kind == "fingers":
                flags[i] = a.finger_flags
        rot = np.array([a.rot_u for a in actions], dtype=float)
        return cls(codes, flags, rot)

    def subset(self, idx):
        return ActionBatch(self.codes[idx], self.finger_flags[idx], self.rot_u[idx])


def log_prob_batch(heads: Heads, actions: ActionBatch, rotation_term=True, with_grad=False):
    """Composite log-probability of resolved actions.

    reopen:  log p(reopen) [+ rotation density]
    lift:    log(1 - p(reopen)) + log p(lift)
    fingers: log(1 - p(reopen)) + log(1 - p(lift)) + sum_i log p(finger_i)
    horizon lift and stall-forced reopen: 0.

    With with_grad, also returns d(lp)/d(outputs) of shape (B, n+3) and
    d(lp)/d(log_sigma) of shape (B,).
    """
    c = actions.codes
    B, n = heads.finger_logits.shape
    zr, zl, zf = heads.reopen_logit, heads.lift_logit, heads.finger_logits
    is_reopen = c == KIND_REOPEN
    is_lift = c == KIND_LIFT
    is_fing = c == KIND_FINGERS
    f = actions.finger_flags
    lp_f = np.sum(np.where(f == 1, log_sigmoid(zf), log_sigmoid(-zf)), axis=1)
    lp = (np.where(is_reopen, log_sigmoid(zr), 0.0)
          + np.where(is_lift | is_fing, log_sigmoid(-zr), 0.0)
          + np.where(is_lift, log_sigmoid(zl), 0.0)
          + np.where(is_fing, log_sigmoid(-zl) + lp_f, 0.0))
    mu = np.tanh(heads.rot_pre)
    if rotation_term:
        rot = gaussian_logpdf(actions.rot_u, mu, heads.log_sigma) - LOG_PI
        lp = lp + np.where(is_reopen, rot, 0.0)
    if not with_grad:
        return lp
    sr, sl, sf = sigmoid(zr), sigmoid(zl), sigmoid(zf)
    d_out = np.zeros((B, n + 3))
    d_out[:, :n] = np.where(is_fing[:, None], f - sf, 0.0)
    d_out[:, n] = np.where(is_reopen, 1.0 - sr, np.where(is_lift | is_fing, -sr, 0.0))
    d_out[:, n + 1] = np.where(is_lift, 1.0 - sl, np.where(is_fing, -sl, 0.0))
    d_ls = np.zeros(B)
    if rotation_term:
        sig2 = math.exp(2 * heads.log_sigma)
        resid = actions.rot_u - mu
        d_out[:, n + 2] = np.where(is_reopen, resid / sig2 * (1 - mu * mu), 0.0)
        d_ls = np.where(is_reopen, resid * resid / sig2 - 1.0, 0.0)
    return lp, d_out, d_ls


def log_prob(heads: Heads, resolved: ResolvedAction, rotation_term=True):
    n = heads.n_fingers
    ab = ActionBatch.from_resolved([resolved], n)
    return float(log_prob_batch(heads.row(0) if len(heads.reopen_logit) > 1 else heads, ab, rotation_term)[0])


def discrete_outcome_probs(heads: Heads, row=0):
    """Probability of every distinguishable resolved discrete outcome (non-horizon step)."""
    n = heads.n_fingers
    pr = float(sigmoid(heads.reopen_logit[row]))
    pl = float(sigmoid(heads.lift_logit[row]))
    pf = sigmoid(heads.finger_logits[row])
    out = {("reopen",): pr, ("lift",): (1 - pr) * pl}
    for bits in range(2 ** n):
        flags = tuple((bits >> i) & 1 for i in range(n))
        p = (1 - pr) * (1 - pl)
        for i in range(n):
            p *= pf[i] if flags[i] else 1 - pf[i]
        out[("fingers",) + flags] = p
    return out


def value(net: MultiBranchNet, params, obs):
    out, _, _ = net.forward(params, obs)
    return out[:, 0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1
_MAGIC = b"MATCKPT1"


def save_checkpoint(path, nets, meta=None, n_fingers=3):
    """nets: mapping name -> (spec, params). Header JSON + little-endian float64 payload."""
    header = {"format_version": CHECKPOINT_VERSION, "n_fingers": n_fingers, "nets": [], "meta": meta or {}}
    chunks = []
    for name, (spec, params) in nets.items():
        header["nets"].append({
            "name": name,
            "spec": {k: list(v) if isinstance(v, tuple) else v for k, v in spec.__dict__.items()},
            "shapes": [[pname, list(shape)] for pname, shape in param_shapes(spec)],
        })
        chunks.append(flatten(params, spec))
    payload = np.concatenate(chunks).astype("<f8") if chunks else np.zeros(0, "<f8")
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['format_version']}")
    nets, i = {}, 0
    for entry in header["nets"]:
        spec = NetSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in entry["spec"].items()})
        expected = [[p, list(s)] for p, s in param_shapes(spec)]
        if expected != entry["shapes"]:
            raise ShapeError(f"shape table mismatch for net {entry['name']}")
        n = sum(int(np.prod(s)) for _, s in param_shapes(spec))
        if i + n > len(payload):
            raise ShapeError("checkpoint payload truncated")
        nets[entry["name"]] = (spec, unflatten(payload[i:i + n], spec))
        i += n
    if i != len(payload):
        raise ShapeError("checkpoint payload has trailing data")
    return nets, header
