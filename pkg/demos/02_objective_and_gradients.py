"""The soft clipped objective, the composite action log-probability and a gradient check.

Run with ``python3 demos/02_objective_and_gradients.py``.
"""
# %% The per-step objective min(r*T, clip(r)*T) with the soft target T = A - alpha*log pi
import math

import numpy as np

from matgrasp import policy as pl
from matgrasp.soft_ppo import compute_gae, curriculum_delta, soft_clipped_terms

for ratio, adv in [(1.0, 1.0), (2.0, 1.0), (0.5, 1.0), (2.0, -1.0), (0.5, -1.0)]:
    loss, _, _ = soft_clipped_terms(np.array([math.log(ratio)]), np.array([0.0]), np.array([adv]), 0.2, 0.0)
    print(f"ratio {ratio:3.1f}  advantage {adv:+.0f}  objective {-loss[0]:+.2f}")
# ratio 2 with T = 1 is capped at 1.2. With T = -1 the min keeps the more pessimistic
# value, so ratio 0.5 gives the clipped -0.8 and ratio 2 the unclipped -2.0

# %% Advantages on a five-step episode: reopen penalty, then a successful lift
rewards = [0.0, -0.05, 0.0, 0.0, 1.0]
values = [0.3, 0.3, 0.4, 0.6, 0.8]
adv, ret = compute_gae(rewards, values, gamma=0.999, lam=0.95)
print("advantages", np.round(adv, 3))
print("returns   ", np.round(ret, 3))

# %% Every discrete outcome of one step, and its probability
heads = pl.Heads(np.array([[0.5, -0.5, 1.0]]), np.array([-1.0]), np.array([-0.5]), np.array([0.2]), math.log(0.5))
probs = pl.discrete_outcome_probs(heads)
for key, p in sorted(probs.items(), key=lambda kv: -kv[1])[:5]:
    print(f"{str(key):28s} {p:.4f}")
print("total probability", math.fsum(probs.values()))

# %% Analytic gradients of a small network against central differences
spec = pl.NetSpec(branch_inputs=(4, 3, 3, 2, 5, 4), hidden=6, hidden_layers=2, feature_dim=3, trunk_layers=2, out_dim=1)
net = pl.MultiBranchNet(spec)
rng = np.random.default_rng(0)
params = net.init(rng)
# with all-zero biases a sample whose first-layer units are all dead feeds exactly 0
# into the next ReLU, i.e. sits on the kink where central differences are meaningless
for k in params:
    if k.endswith(".b"):
        params[k] = rng.normal(scale=0.3, size=params[k].shape)
X = rng.normal(size=(8, spec.in_dim))
target = rng.normal(size=8)


def loss_fn(out, p):
    d = out[:, 0] - target
    return float(np.mean(d ** 2)), (2 * d / len(d))[:, None], {}


_, grads = net.gradients(params, X, loss_fn)
worst, h = 0.0, 1e-5
for k, arr in params.items():
    for i in range(arr.size):
        old = arr.flat[i]
        arr.flat[i] = old + h
        fp = loss_fn(net.forward(params, X)[0], params)[0]
        arr.flat[i] = old - h
        fm = loss_fn(net.forward(params, X)[0], params)[0]
        arr.flat[i] = old
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(num - grads[k].flat[i]) / max(abs(num), abs(grads[k].flat[i]), 1e-7))
print(f"worst relative gradient error over {sum(a.size for a in params.values())} parameters: {worst:.1e}")

# %% The finger-closing increment shrinks as the best success rate so far grows
for rate in (0.0, 0.25, 0.5, 0.75, 1.0):
    print(f"best success {rate:4.2f} -> delta {curriculum_delta(rate):.3f} rad")
