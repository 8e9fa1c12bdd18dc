"""Independent brute-force reference implementations of the four losses and
retrieval, written as plain loops over Python floats / numpy scalars.

These deliberately avoid the vectorized formulations used in the package so
agreement between the two is meaningful evidence of correctness.
"""

from __future__ import annotations

import math

import numpy as np


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na = math.sqrt(float(sum(x * x for x in a)))
    nb = math.sqrt(float(sum(x * x for x in b)))
    return float(sum(x * y for x, y in zip(a, b))) / (na * nb)


def _unit(a: np.ndarray) -> np.ndarray:
    n = math.sqrt(float(sum(x * x for x in a)))
    return np.array([x / n for x in a])


def distill_oracle(z_ms: np.ndarray, z_teacher: np.ndarray) -> float:
    vals = [1.0 - _cos(z_ms[i], z_teacher[i]) for i in range(len(z_ms))]
    return sum(vals) / len(vals)


def contrastive_oracle(z_rgb: np.ndarray, z_ms: np.ndarray, tau: float) -> float:
    b = len(z_rgb)
    zr = [_unit(z_rgb[i]) for i in range(b)]
    zm = [_unit(z_ms[i]) for i in range(b)]

    def direction(queries, keys):
        total = 0.0
        for i in range(b):
            logits = [float(queries[i] @ keys[j]) / tau for j in range(b)]
            mx = max(logits)  # the usual log-sum-exp shift
            lse = mx + math.log(sum(math.exp(v - mx) for v in logits))
            total += -(logits[i] - lse)
        return total / b

    return 0.5 * (direction(zr, zm) + direction(zm, zr))


def patch_oracle(p_rgb: np.ndarray, p_ms: np.ndarray, idx) -> float:
    """Mean cosine distance over the given patch indices, all batch rows."""
    vals = []
    for b in range(p_rgb.shape[0]):
        for i in idx:
            vals.append(1.0 - _cos(p_rgb[b, i], p_ms[b, i]))
    return sum(vals) / len(vals)


def neighborhood_oracle(z_teacher: np.ndarray, z_ms: np.ndarray,
                        entries: np.ndarray, k: int, tau: float) -> float:
    """Mean KL(p_t || p_m) over the teacher's top-k entries, per sample.

    ``entries`` are the queue's stored rows in physical order (already
    normalized); ties in teacher similarity go to the lower physical index.
    """
    fill = len(entries)
    k_eff = min(k, fill)
    total = 0.0
    for i in range(len(z_teacher)):
        zt = _unit(z_teacher[i])
        zm = _unit(z_ms[i])
        sims_t = [float(zt @ entries[j]) for j in range(fill)]
        # sort by (-similarity, physical index): lower index wins ties
        order = sorted(range(fill), key=lambda j: (-sims_t[j], j))[:k_eff]
        st = [sims_t[j] / tau for j in order]
        sm = [float(zm @ entries[j]) / tau for j in order]

        def softmax(v):
            mx = max(v)
            e = [math.exp(x - mx) for x in v]
            s = sum(e)
            return [x / s for x in e]

        pt, pm = softmax(st), softmax(sm)
        total += sum(p * (math.log(p) - math.log(q)) for p, q in zip(pt, pm))
    return total / len(z_teacher)


def queue_top_k_oracle(entries: np.ndarray, z_ref: np.ndarray, k: int):
    """(indices, sims) per reference row over the stored entries."""
    k_eff = min(k, len(entries))
    all_idx, all_sims = [], []
    for i in range(len(z_ref)):
        zr = _unit(z_ref[i])
        sims = [float(zr @ e) for e in entries]
        order = sorted(range(len(entries)), key=lambda j: (-sims[j], j))[:k_eff]
        all_idx.append(order)
        all_sims.append([sims[j] for j in order])
    return all_idx, all_sims


def retrieval_top1_oracle(queries: np.ndarray, gallery: np.ndarray) -> float:
    """Naive double loop: query i hits if gallery i strictly beats all lower
    indices and every tie sits at an index >= i."""
    hits = 0
    n = len(queries)
    for i in range(n):
        sims = [_cos(queries[i], gallery[j]) for j in range(n)]
        best = max(sims)
        winners = [j for j in range(n) if sims[j] == best]
        if min(winners) == i:
            hits += 1
    return hits / n
