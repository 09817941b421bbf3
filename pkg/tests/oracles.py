"""Independent brute-force oracles shared by the unit and acceptance tests."""

import itertools

import mpmath
import numpy as np
import torch

from swinmae.swin import shifted_attention_mask, window_partition


def region_oracle(H, W, M, s):
    """Allowed pairs in original coordinates: same shifted window, same wrap side."""
    toks = [(r, c) for r in range(H) for c in range(W)]

    def key(r, c):
        sr, sc = (r - s) % H, (c - s) % W
        return (sr // M, sc // M, r < s, c < s)

    keys = [key(r, c) for r, c in toks]
    return torch.tensor([[ki == kj for kj in keys] for ki in keys])


def mask_reachability(H, W, M, s):
    """Allowed pairs implied by shifted_attention_mask, mapped back to original coordinates."""
    mask = shifted_attention_mask((H, W), M, s)
    orig = torch.arange(H * W).view(1, H, W, 1)
    shifted = torch.roll(orig, shifts=(-s, -s), dims=(1, 2))
    wins = window_partition(shifted, M).squeeze(-1)
    out = torch.zeros(H * W, H * W, dtype=torch.bool)
    for w in range(wins.shape[0]):
        for a in range(M * M):
            for b in range(M * M):
                if mask[w, a, b] == 0:
                    out[wins[w, a], wins[w, b]] = True
    return out


def shift_cases(max_grid=8, windows=(2, 4)):
    return [
        (H, W, M, s)
        for M in windows
        for H, W in itertools.product(range(M, max_grid + 1, M), repeat=2)
        for s in range(1, M)
    ]


def auroc_pairwise(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(tie), by counting every pair."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def auroc_pairwise_rows(S, labels):
    """Vectorized pairwise count over the rows of ``S``."""
    S = np.asarray(S)
    labels = np.asarray(labels)
    P, N = S[:, labels == 1], S[:, labels == 0]
    gt = (P[:, :, None] > N[:, None, :]).sum(axis=(1, 2))
    eq = (P[:, :, None] == N[:, None, :]).sum(axis=(1, 2))
    return (gt + 0.5 * eq) / (P.shape[1] * N.shape[1])


def weak_orderings(n):
    """Every score vector over n items up to monotone relabeling (ties included),
    as an int array of shape (Fubini(n), n)."""
    v = np.stack(np.unravel_index(np.arange(n ** n), (n,) * n), axis=1).astype(np.int8)
    used = np.zeros((len(v), n), dtype=bool)
    np.put_along_axis(used, v.astype(np.int64), True, axis=1)
    keep = used.sum(axis=1) == v.max(axis=1) + 1
    return v[keep]


def binary_labelings(n, canonical=False):
    """All 0/1 vectors of length n with both classes; ``canonical`` keeps one
    per positive count (positives first)."""
    if canonical:
        return [np.array([1] * m + [0] * (n - m)) for m in range(1, n)]
    return [np.array(b) for b in itertools.product((0, 1), repeat=n) if 0 < sum(b) < n]


def t_two_sided_mp(t, dof, dps=40):
    """Two-sided Student-t tail by direct quadrature of the density."""
    with mpmath.workdps(dps):
        nu = mpmath.mpf(dof)
        c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
        tail = mpmath.quad(lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2), [abs(mpmath.mpf(t)), mpmath.inf])
        return float(2 * tail)


def delong_fixture(seed, m=20, n=20, shift=1.0):
    """Fixed 40-sample score/label fixture with overlapping classes."""
    rng = np.random.default_rng(seed)
    scores = np.concatenate([rng.normal(shift, 1.0, m), rng.normal(0.0, 1.0, n)])
    labels = np.concatenate([np.ones(m, int), np.zeros(n, int)])
    return scores, labels
