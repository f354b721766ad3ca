"""Brute-force scalar oracles.

Deliberately written with plain Python floats, explicit loops, and the math
module only, so they share nothing with the vectorized implementations they
check. Slow and obvious beats fast and clever here.
"""

import math


def bce_scalar(preds, targets, eps=1e-7):
    n = len(preds)
    assert n == len(targets) and n > 0
    total = 0.0
    for s, g in zip(preds, targets):
        s = min(max(s, eps), 1.0 - eps)
        total += g * math.log(s) + (1.0 - g) * math.log(1.0 - s)
    return -total / n


def dice_scalar(preds, targets, smooth=1e-6):
    assert len(preds) == len(targets)
    inter = 0.0
    denom = 0.0
    for s, g in zip(preds, targets):
        inter += g * s
        denom += g * g + s * s
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def combined_scalar(preds, targets):
    return bce_scalar(preds, targets) + dice_scalar(preds, targets)


def _softmax_row(row, temperature):
    scaled = [v / temperature for v in row]
    m = max(scaled)
    exps = [math.exp(v - m) for v in scaled]
    z = sum(exps)
    return [e / z for e in exps]


def sce_scalar(sim, temperature=0.07, alpha=1.0, beta=1.0, log_zero=-4.0):
    n = len(sim)
    for row in sim:
        assert len(row) == n

    def one_direction(matrix):
        ce = 0.0
        rce = 0.0
        for i in range(n):
            p = _softmax_row(matrix[i], temperature)
            ce += -math.log(p[i])
            for j in range(n):
                logq = 0.0 if j == i else log_zero
                rce += -p[j] * logq
        return ce / n, rce / n

    cols = [[sim[j][i] for j in range(n)] for i in range(n)]
    ce_r, rce_r = one_direction(sim)
    ce_c, rce_c = one_direction(cols)
    return alpha * 0.5 * (ce_r + ce_c) + beta * 0.5 * (rce_r + rce_c)


def auc_scalar(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    assert pos and neg
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def top_k_scalar(similarities, k):
    """Indices of the k largest values, ties broken by lower index."""
    order = sorted(range(len(similarities)), key=lambda i: (-similarities[i], i))
    return order[: min(k, len(similarities))]


def mean_vector_scalar(vectors):
    n = len(vectors)
    assert n > 0
    dim = len(vectors[0])
    out = []
    for d in range(dim):
        out.append(sum(v[d] for v in vectors) / n)
    return out
