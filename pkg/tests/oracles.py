"""Slow reference implementations written with plain loops and the math module.

They deliberately share no code with the package so that agreement is evidence
of correctness rather than of consistent bugs.
"""

import math


def matmul(a, b):
    n, k, m = len(a), len(b), len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(m)] for i in range(n)]


def linear(x, w, b):
    # w is [out][in]
    return [[sum(w[o][i] * row[i] for i in range(len(row))) + b[o] for o in range(len(w))] for row in x]


def layer_norm(x, gamma, beta, eps=1e-5):
    out = []
    for row in x:
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out.append([(v - mu) / math.sqrt(var + eps) * g + bb for v, g, bb in zip(row, gamma, beta)])
    return out


def gelu(v):
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def mlp(x, w1, b1, w2, b2):
    h = [[gelu(v) for v in row] for row in linear(x, w1, b1)]
    return linear(h, w2, b2)


def softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def mha(q, k, v, wq, bq, wk, bk, wv, bv, wo, bo, heads, mask=None):
    """Per-head, per-query loops; masked keys are skipped entirely."""
    d = len(wq)
    hd = d // heads
    qp, kp, vp = linear(q, wq, bq), linear(k, wk, bk), linear(v, wv, bv)
    valid = [True] * len(k) if mask is None else list(mask)
    if not any(valid):
        return [[0.0] * d for _ in q]
    ctx = [[0.0] * d for _ in q]
    for h in range(heads):
        lo = h * hd
        for i in range(len(q)):
            keys = [j for j in range(len(k)) if valid[j]]
            logits = [sum(qp[i][lo + t] * kp[j][lo + t] for t in range(hd)) / math.sqrt(hd) for j in keys]
            w = softmax(logits)
            for t in range(hd):
                ctx[i][lo + t] = sum(w[a] * vp[j][lo + t] for a, j in enumerate(keys))
    return linear(ctx, wo, bo)


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def info_nce(a, b, tau, symmetric=True):
    def unit(r):
        n = math.sqrt(sum(v * v for v in r))
        return [v / n for v in r]

    an, bn = [unit(r) for r in a], [unit(r) for r in b]
    n = len(a)
    s = [[sum(x * y for x, y in zip(an[i], bn[j])) / tau for j in range(n)] for i in range(n)]

    def ce_rows(m):
        total = 0.0
        for i in range(n):
            mx = max(m[i])
            lse = mx + math.log(sum(math.exp(v - mx) for v in m[i]))
            total += lse - m[i][i]
        return total / n

    rows = ce_rows(s)
    if not symmetric:
        return rows
    cols = ce_rows([[s[j][i] for j in range(n)] for i in range(n)])
    return 0.5 * (rows + cols)


def fuse(R, T, P, mask, p):
    """Gated residual fusion evaluated line by line; ``p`` maps parameter paths to nested lists."""

    def ln(x, name):
        return layer_norm(x, p[f"{name}/gamma"], p[f"{name}/beta"])

    def lin(x, name):
        return linear(x, p[f"{name}/weight"], p[f"{name}/bias"])

    def mlp_(x, name):
        return mlp(x, p[f"{name}/fc1/weight"], p[f"{name}/fc1/bias"], p[f"{name}/fc2/weight"], p[f"{name}/fc2/bias"])

    def att(qs, ks, name, m=None):
        return mha(qs, ks, ks, *(p[f"{name}/{a}/{b}"] for a in ("q", "k", "v", "out") for b in ("weight", "bias")),
                   heads=int(p[f"heads/{name}"][0]), mask=m)

    r_bar = ln(R, "ln_r")
    t_bar = ln(T, "ln_t")
    p_bar = ln(lin(P, "w_p"), "ln_p")
    t_txt = att(t_bar, p_bar, "mha_txt", mask)
    t_rgb = att(t_bar, r_bar, "mha_rgb")
    merged = mlp_([a + b + c for a, b, c in zip(t_bar, t_txt, t_rgb)], "mlp_m")
    t_hat = ln([[x + y for x, y in zip(r1, r2)] for r1, r2 in zip(T, merged)], "ln_merge")
    delta = mlp_(ln(t_hat, "ln_res"), "mlp_r")
    gate_in = ln([a + b for a, b in zip(r_bar, t_hat)], "ln_gate")
    alpha = [sigmoid(row[0]) for row in mlp_(gate_in, "mlp_g")]
    fused = [[r + a * dl for r, dl in zip(rr, dd)] for rr, dd, a in zip(R, delta, alpha)]
    return fused, alpha
