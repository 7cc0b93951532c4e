"""Straight-line scalar re-implementations used as test oracles.

Everything here works on nested Python lists of floats with explicit loops,
so it shares no code path with the vectorised implementation under test.
"""

import math

MASKED = float("-inf")


def rows(a):
    return [[float(x) for x in row] for row in a]


def vec(a):
    return [float(x) for x in a]


def dot(a, b):
    total = 0.0
    for x, y in zip(a, b):
        total += x * y
    return total


def vecmat(x, w, b=None):
    """Row vector times matrix plus optional bias."""
    out = []
    for j in range(len(w[0])):
        s = 0.0
        for i in range(len(x)):
            s += x[i] * w[i][j]
        out.append(s + (b[j] if b is not None else 0.0))
    return out


def gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def layer_norm(x, gamma, beta, eps=1e-5):
    n = len(x)
    mean = sum(x) / n
    var = sum((xi - mean) ** 2 for xi in x) / n
    return [(xi - mean) / math.sqrt(var + eps) * g + b for xi, g, b in zip(x, gamma, beta)]


def mlp(x, w1, b1, w2, b2):
    hidden = [gelu(h) for h in vecmat(x, w1, b1)]
    return vecmat(hidden, w2, b2)


def softmax(logits):
    finite = [z for z in logits if z != MASKED]
    top = max(finite)
    e = [0.0 if z == MASKED else math.exp(z - top) for z in logits]
    s = sum(e)
    return [x / s for x in e]


def attention(queries, keys, values, heads, scale, pos_queries=None, pos_keys=None, key_valid=None):
    """Multi-head attention of row lists; heads take consecutive column blocks."""
    d = len(queries[0])
    dh = d // heads
    out = [[0.0] * d for _ in queries]
    weights = []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        head_w = []
        for i, q in enumerate(queries):
            logits = []
            for j, k in enumerate(keys):
                if key_valid is not None and not key_valid[j]:
                    logits.append(MASKED)
                    continue
                z = dot(q[cols], k[cols])
                if pos_queries is not None:
                    z += dot(pos_queries[i][cols], pos_keys[j][cols])
                logits.append(z * scale)
            w = softmax(logits)
            head_w.append(w)
            for c in range(h * dh, (h + 1) * dh):
                out[i][c] = sum(w[j] * values[j][c] for j in range(len(keys)))
        weights.append(head_w)
    return out, weights


def _project(rows_, w):
    return [vecmat(r, w) for r in rows_]


def collect(cv, cp, v, p, mask, prm, heads, use_position=True):
    d = len(v[0])
    scale = 1.0 / math.sqrt(2 * d)
    q, k, vals = _project(cv, prm["collect_wq"]), _project(v, prm["collect_wk"]), _project(v, prm["collect_wv"])
    pq = _project(cp, prm["collect_uq"]) if use_position else None
    pk = _project(p, prm["collect_uk"]) if use_position else None
    ctx, _ = attention(q, k, vals, heads, scale, pq, pk, key_valid=mask)
    return [[a + b for a, b in zip(r, c)] for r, c in zip(cv, ctx)]


def update(cv, prm):
    n, d = len(cv), len(cv[0])
    y = [layer_norm(r, prm["token_norm_gamma"], prm["token_norm_beta"]) for r in cv]
    mixed = [[0.0] * d for _ in range(n)]
    for c in range(d):
        column = [y[i][c] for i in range(n)]
        out = mlp(column, prm["token_w1"], prm["token_b1"], prm["token_w2"], prm["token_b2"])
        for i in range(n):
            mixed[i][c] = out[i]
    cv = [[a + b for a, b in zip(r, m)] for r, m in zip(cv, mixed)]
    result = []
    for r in cv:
        y = layer_norm(r, prm["channel_norm_gamma"], prm["channel_norm_beta"])
        out = mlp(y, prm["channel_w1"], prm["channel_b1"], prm["channel_w2"], prm["channel_b2"])
        result.append([a + b for a, b in zip(r, out)])
    return result


def distribute(v, p, cv, cp, mask, prm, heads, use_position=True):
    d = len(v[0])
    scale = 1.0 / math.sqrt(2 * d)
    q, k, vals = _project(v, prm["dist_wq"]), _project(cv, prm["dist_wk"]), _project(cv, prm["dist_wv"])
    pq = _project(p, prm["dist_uq"]) if use_position else None
    pk = _project(cp, prm["dist_uk"]) if use_position else None
    z, _ = attention(q, k, vals, heads, scale, pq, pk)
    out = []
    for t in range(len(v)):
        if not mask[t]:
            out.append([0.0] * d)
            continue
        zp = vecmat(z[t] + v[t], prm["dist_proj"])
        ffn = mlp(zp, prm["ffn_w1"], prm["ffn_b1"], prm["ffn_w2"], prm["ffn_b2"])
        out.append([a + b for a, b in zip(zp, ffn)])
    return out


def self_attention(v, p, mask, prm, heads):
    d = len(v[0])
    scale = 1.0 / math.sqrt(2 * d)
    q, k, vals = _project(v, prm["wq"]), _project(v, prm["wk"]), _project(v, prm["wv"])
    pq, pk = _project(p, prm["uq"]), _project(p, prm["uk"])
    ctx, _ = attention(q, k, vals, heads, scale, pq, pk, key_valid=mask)
    out = []
    for t in range(len(v)):
        if not mask[t]:
            out.append([0.0] * d)
            continue
        h = [a + b for a, b in zip(v[t], vecmat(ctx[t], prm["wo"]))]
        ffn = mlp(h, prm["ffn_w1"], prm["ffn_b1"], prm["ffn_w2"], prm["ffn_b2"])
        out.append([a + b for a, b in zip(h, ffn)])
    return out


def as_lists(params: dict) -> dict:
    """Convert a name -> array dict into nested lists (1-D arrays become flat lists)."""
    out = {}
    for name, value in params.items():
        arr = getattr(value, "data", value)
        out[name] = vec(arr) if arr.ndim == 1 else rows(arr)
    return out
