"""Independent reference implementations used as test oracles.

These are deliberately slow and loop-based so they share no code path with
the vectorized implementations they check.
"""

import math

import numpy as np

from rtgbid.numcore import Adam, Tape, Tensor, backward, ops
from rtgbid.seqmodel import quantile_loss


def fit_constant(samples, lam, steps=3000, lr0=0.1, lr1=1e-5):
    """Fit a scalar by gradient descent on the quantile loss.

    Steps are normalized (Adam with both moment decays at 0, i.e. sign
    descent) under a geometric learning-rate decay, so the flat side of the
    loss near a small-lambda quantile does not stall the fit.
    """
    samples = np.asarray(samples, dtype=np.float32).reshape(-1, 1)
    c = Tensor([float(np.mean(samples))], requires_grad=True, name="c")
    opt = Adam({"c": c}, lr=lr0, betas=(0.0, 0.0))
    decay = (lr1 / lr0) ** (1.0 / steps)
    for _ in range(steps):
        with Tape() as tape:
            pred = _broadcast(c, samples.shape[0])
            loss = quantile_loss(lam, pred, samples)
        backward(tape, loss)
        opt.step()
        opt.state.learning_rate *= decay
    return float(c.values[0])


def _broadcast(c, n):
    return ops.matmul(Tensor(np.ones((n, 1), dtype=np.float32)), ops.reshape(c, (1, 1)))


def quantile_objective(c, samples, lam):
    r = np.asarray(samples, dtype=np.float64)
    return float(np.mean((1 - lam) * np.maximum(r - c, 0) + lam * np.maximum(c - r, 0)))


def sort_quantile(samples, lam):
    """Lower empirical (1 - lam)-quantile and the larger of its two neighbouring gaps."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = len(x)
    k = max(int(math.ceil((1 - lam) * n)) - 1, 0)
    lo = x[k] - x[k - 1] if k > 0 else 0.0
    hi = x[k + 1] - x[k] if k + 1 < n else 0.0
    return x[k], max(lo, hi)


def _ln(v, g, b, eps=1e-5):
    mu = sum(v) / len(v)
    var = sum((x - mu) ** 2 for x in v) / len(v)
    return [(x - mu) / math.sqrt(var + eps) * gi + bi for x, gi, bi in zip(v, g, b)]


def _vecmat(v, w, b):
    return [sum(v[i] * w[i][j] for i in range(len(v))) + b[j] for j in range(len(b))]


def _gelu(x):
    return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def naive_forward(config, params, states, rtgs, actions, timesteps):
    """Token-by-token forward pass of one sequence in (s, R, a) order, float64 scalars.

    Returns (rtg_pred, action_pred) lists of length K (action_pred as a fraction of a_max).
    """
    P = {k: v.values.astype(np.float64).tolist() for k, v in params.items()}
    d = config.embed_dim
    H = config.n_heads
    hd = d // H
    K = len(states)
    toks = []
    for t in range(K):
        te = P["embed_timestep"][timesteps[t]]
        s = _vecmat(list(states[t]), P["embed_state.w"], P["embed_state.b"])
        r = _vecmat([rtgs[t]], P["embed_rtg.w"], P["embed_rtg.b"])
        a = _vecmat([actions[t] / config.a_max], P["embed_action.w"], P["embed_action.b"])
        for e in (s, r, a):
            toks.append([x + y for x, y in zip(e, te)])
    h = [_ln(x, P["embed_ln.g"], P["embed_ln.b"]) for x in toks]
    L = len(h)
    for li in range(config.n_layers):
        p = f"block{li}."
        x = [_ln(v, P[p + "ln1.g"], P[p + "ln1.b"]) for v in h]
        qkv = [_vecmat(v, P[p + "attn.qkv.w"], P[p + "attn.qkv.b"]) for v in x]
        y = [[0.0] * d for _ in range(L)]
        for head in range(H):
            off = head * hd
            for i in range(L):
                q = qkv[i][off:off + hd]
                sc = []
                for j in range(i + 1):
                    k = qkv[j][d + off:d + off + hd]
                    sc.append(sum(a * b for a, b in zip(q, k)) / math.sqrt(hd))
                m = max(sc)
                e = [math.exp(v - m) for v in sc]
                z = sum(e)
                for j in range(i + 1):
                    v = qkv[j][2 * d + off:2 * d + off + hd]
                    for c in range(hd):
                        y[i][off + c] += e[j] / z * v[c]
        proj = [_vecmat(v, P[p + "attn.proj.w"], P[p + "attn.proj.b"]) for v in y]
        h = [[a + b for a, b in zip(u, v)] for u, v in zip(h, proj)]
        x = [_ln(v, P[p + "ln2.g"], P[p + "ln2.b"]) for v in h]
        f = [[_gelu(z) for z in _vecmat(v, P[p + "mlp.fc.w"], P[p + "mlp.fc.b"])] for v in x]
        f = [_vecmat(v, P[p + "mlp.proj.w"], P[p + "mlp.proj.b"]) for v in f]
        h = [[a + b for a, b in zip(u, v)] for u, v in zip(h, f)]
    h = [_ln(v, P["ln_f.g"], P["ln_f.b"]) for v in h]
    rtg_pred, act_pred = [], []
    for t in range(K):
        rtg_pred.append(_vecmat(h[3 * t], P["head_rtg.w"], P["head_rtg.b"])[0])
        z = _vecmat(h[3 * t + 1], P["head_action.w"], P["head_action.b"])[0]
        act_pred.append(1.0 / (1.0 + math.exp(-z)))
    return rtg_pred, act_pred


def naive_score(events, budget, c_t):
    """Score, conversions, spend, c_a from a list of (bid, won, exposed, converted) tuples."""
    spend = 0.0
    conv = 0
    for bid, w, e, v in events:
        if w and e:
            spend += bid
            if v:
                conv += 1
    if conv == 0:
        return 0.0, 0, spend, 0.0
    c_a = spend / conv
    pen = 1.0 if c_a <= c_t else (c_t / c_a) ** 2
    return pen * conv, conv, spend, c_a
