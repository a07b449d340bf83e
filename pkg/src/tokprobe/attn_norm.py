"""Attention-norm change maps for original/perturbed sentence pairs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class BetaMap:
    layer: int
    values: np.ndarray


@dataclass
class DeltaBetaMap:
    layer: int
    values: np.ndarray
    bigram_anchor: int
    raw: np.ndarray | None = None


@dataclass
class CenteredAverage:
    layer: int
    mean: np.ndarray  # (2W+1, 2W+1), 0 where no map covers the cell
    counts: np.ndarray


def _check_perm(perm, n):
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (n,) or sorted(perm.tolist()) != list(range(n)):
        raise ValueError(f"permutation is not a bijection on {n} positions")
    return perm


def reorder_map(beta: BetaMap, permutation) -> BetaMap:
    """out[i, j] = values[perm[i], perm[j]]."""
    perm = _check_perm(permutation, beta.values.shape[0])
    return BetaMap(beta.layer, beta.values[np.ix_(perm, perm)])


def min_max(values):
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def delta_beta(original: BetaMap, perturbed: BetaMap, permutation, anchor: int = 0, normalize=True) -> DeltaBetaMap:
    """|reorder(perturbed) - original|, min-max normalized."""
    if original.values.shape != perturbed.values.shape:
        raise ShapeError(f"map shapes differ: {original.values.shape} vs {perturbed.values.shape}")
    if original.layer != perturbed.layer:
        raise ShapeError("maps come from different layers")
    diff = np.abs(reorder_map(perturbed, permutation).values.astype(np.float64) - original.values)
    values = min_max(diff) if normalize else diff
    return DeltaBetaMap(original.layer, values, anchor, raw=diff)


def window(values, anchor, radius):
    """(2W+1)^2 window centred on (anchor, anchor); NaN where out of range."""
    n = values.shape[0]
    size = 2 * radius + 1
    out = np.full((size, size), np.nan)
    lo, hi = anchor - radius, anchor + radius + 1
    src = slice(max(lo, 0), min(hi, n))
    dst = slice(src.start - lo, src.stop - lo)
    out[dst, dst] = values[src, src]
    return out


def center_and_average(maps, window_radius: int = 10) -> CenteredAverage:
    if not maps:
        raise ValueError("no maps to average")
    size = 2 * window_radius + 1
    total = np.zeros((size, size))
    counts = np.zeros((size, size), dtype=np.int64)
    for m in maps:
        w = window(np.asarray(m.values, dtype=np.float64), m.bigram_anchor, window_radius)
        seen = ~np.isnan(w)
        total[seen] += w[seen]
        counts += seen
    mean = np.divide(total, counts, out=np.zeros_like(total), where=counts > 0)
    return CenteredAverage(maps[0].layer, mean, counts)


def cumulative(averages, mode="mean"):
    """Running mean (or sum) of per-layer averaged maps through each layer."""
    out = []
    acc = np.zeros_like(averages[0].mean)
    for k, avg in enumerate(averages, 1):
        acc = acc + avg.mean
        out.append(acc / k if mode == "mean" else acc.copy())
    return out


def block_contrast(raw_maps, anchors, rng, block=2):
    """Mean unnormalized change inside the bigram block vs a random off-bigram block.

    Returns ``(bigram_mean, off_mean)`` over all maps with room for an
    off-bigram block of the same size.
    """
    inside, outside = [], []
    for values, a in zip(raw_maps, anchors):
        n = values.shape[0]
        starts = [s for s in range(0, n - block + 1) if s + block <= a or s >= a + block]
        if not starts or a + block > n:
            continue
        s = starts[int(rng.integers(len(starts)))]
        inside.append(values[a:a + block, a:a + block].mean())
        outside.append(values[s:s + block, s:s + block].mean())
    return float(np.mean(inside)), float(np.mean(outside))
