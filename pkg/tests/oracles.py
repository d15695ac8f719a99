"""Independent reference implementations used as test oracles.

These avoid the package's own machinery: plain loops, itertools and numpy
formulas written from the definitions.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def brute_force_assignment(costs: np.ndarray) -> float:
    """Minimum total cost of a matching of size min(n, m), by enumeration."""
    c = np.asarray(costs, dtype=float)
    n, m = c.shape
    if n == 0 or m == 0:
        return 0.0
    best = math.inf
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            best = min(best, sum(c[i, j] for i, j in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(n), m):
            best = min(best, sum(c[i, j] for j, i in enumerate(rows)))
    return float(best)


def pair_count_auc(scores, labels) -> float:
    """O(n^2) pair counting; ties count one half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def linear_quantile(values, q: float) -> float:
    """Linear interpolation between order statistics at rank q * (n - 1)."""
    v = sorted(values)
    pos = q * (len(v) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


def enumerate_windows(n: int, T: int, s: int) -> list[int]:
    """All window starts b = s*i with b + T <= n, by scanning every i."""
    return [s * i for i in range(n + 1) if s * i + T <= n]


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def reference_forward(tensors: dict[str, np.ndarray], g: np.ndarray, l: np.ndarray, P: int,
                      shared_heads: bool = True):
    """Single-segment MPED-RNN forward with explicit per-step loops.

    ``tensors`` maps parameter names to arrays (input-major weights).
    Returns (rec, pred): lists of (global, local, perceptual) per output frame
    in forward time order.
    """
    t = tensors
    H = t["enc_g.b_z"].shape[0]

    def gru(name, x, h):
        xh = np.concatenate([x, h])
        z = _sig(xh @ t[f"{name}.W_z"] + t[f"{name}.b_z"])
        r = _sig(xh @ t[f"{name}.W_r"] + t[f"{name}.b_r"])
        cand = np.tanh(np.concatenate([x, r * h]) @ t[f"{name}.W_h"] + t[f"{name}.b_h"])
        return (1 - z) * h + z * cand

    def msg(stage, direction, h):
        return _sig(h @ t[f"msg_{stage}_{direction}.W"] + t[f"msg_{stage}_{direction}.b"])

    def head(prefix, hg, hl):
        fg = hg @ t[f"{prefix}.W_g"] + t[f"{prefix}.b_g"]
        fl = hl @ t[f"{prefix}.W_l"] + t[f"{prefix}.b_l"]
        hid = np.tanh(np.concatenate([fg, fl]) @ t[f"{prefix}.W_p1"] + t[f"{prefix}.b_p1"])
        return fg, fl, hid @ t[f"{prefix}.W_p2"] + t[f"{prefix}.b_p2"]

    hg, hl = np.zeros(H), np.zeros(H)
    for step in range(len(g)):
        mg, ml = msg("enc", "l2g", hl), msg("enc", "g2l", hg)
        hg, hl = gru("enc_g", np.concatenate([g[step], mg]), hg), gru("enc_l", np.concatenate([l[step], ml]), hl)

    def decode(stage, steps):
        a, b = hg, hl
        out = []
        for _ in range(steps):
            ma, mb = msg(stage, "l2g", b), msg(stage, "g2l", a)
            a, b = gru(f"{stage}_g", ma, a), gru(f"{stage}_l", mb, b)
            out.append(head("head" if shared_heads else f"head_{stage}", a, b))
        return out

    rec = decode("rec", len(g))[::-1]
    pred = decode("pred", P)
    return rec, pred
