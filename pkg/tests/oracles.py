"""Independent reference implementations used as test oracles.

Written directly from the model definition in float64 with explicit masks,
without sharing code paths with the package.
"""

import numpy as np


def reference_forward(weights, token_ids, positions=None, visible=None):
    """Per-layer (q, k, v, out) of the plain attention-only stack.

    ``visible[i, j]`` says whether row ``i`` may attend to column ``j``; the
    default is the causal mask.
    """
    spec = weights.spec
    H, d = spec.num_heads, spec.head_dim
    tok = np.asarray(token_ids)
    T = tok.size
    h = weights.embedding[tok].astype(np.float64)
    if weights.positions is not None:
        pos = np.arange(T) if positions is None else np.asarray(positions)
        h = h + weights.positions[pos]
    if visible is None:
        visible = np.tril(np.ones((T, T), dtype=bool))
    layers = []
    for n in range(spec.num_layers):
        def heads(w):
            return (h @ w.astype(np.float64)).reshape(T, H, d).transpose(1, 0, 2)

        q, k, v = heads(weights.wq[n]), heads(weights.wk[n]), heads(weights.wv[n])
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(d)
        scores = np.where(visible[None], scores, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        o = (p @ v).transpose(1, 0, 2).reshape(T, H * d)
        h = h + o @ weights.wo[n].astype(np.float64)
        layers.append((q, k, v, h.copy()))
    return layers


def column_mean_argmax(attn, start, end):
    """Brute-force representative token: loop over columns and rows."""
    T = attn.shape[0]
    best, best_val = None, -np.inf
    for j in range(start, end):
        rows = [attn[i, j] for i in range(j + 1, T)]
        if not rows:
            continue
        m = sum(rows) / len(rows)
        if m > best_val:
            best, best_val = j, m
    return best


def pauta_by_hand(values):
    n = len(values)
    mu = sum(values) / n
    sigma = (sum((x - mu) ** 2 for x in values) / n) ** 0.5
    return {i for i, x in enumerate(values) if abs(x - mu) > 3 * sigma} if sigma > 0 else set()


def minmax_global_topk(per_ctx_scores):
    """Brute-force cross-context filter on ``[{block: score}, ...]``."""
    pool = []
    for i, scores in enumerate(per_ctx_scores):
        if not scores:
            continue
        lo, hi = min(scores.values()), max(scores.values())
        for b, s in scores.items():
            norm = 1.0 if hi == lo else (s - lo) / (hi - lo)
            pool.append((norm, i, b))
    k = len(pool) // len(per_ctx_scores)
    pool.sort(key=lambda t: (-t[0], t[1], t[2]))
    return {(i, b) for _, i, b in pool[:k]}


def trace_violations(flags, trace, computed_code=1):
    """Count breaches of the two recompute rules in an execution trace.

    Rule 1: a slot flagged at layer ``n`` has outputs at every layer below.
    Rule 2: nothing is recomputed unless scheduled, and no output is
    computed that no higher-layer flag needs.
    """
    flags = np.asarray(flags, dtype=bool)
    N, S = flags.shape
    bad = 0
    for s in range(S):
        for n in range(N):
            if flags[n, s] and not trace.output[:n, s].all():
                bad += 1
            if (trace.kv[n, s] == computed_code) != flags[n, s]:
                bad += 1
            if trace.output[n, s] and not flags[n + 1 :, s].any():
                bad += 1
    return bad
