"""Corpus statistics: correlations, self-distances, top tokens, control runs."""
from __future__ import annotations

import hashlib
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import tensor_math as tm
from .datasets import ShiftMask, subsample_indices
from .errors import UndefinedCorrelationError
from .tokenizer import PAD


def _as_pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"series differ in length: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise ValueError("correlation needs at least two points")
    return x, y


def pearson(x, y) -> float:
    x, y = _as_pair(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    syy = float(np.dot(yc, yc))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant series")
    r = float(np.dot(xc, yc)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def rankdata(x) -> np.ndarray:
    """1-based ranks; ties share their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    x, y = _as_pair(x, y)
    return pearson(rankdata(x), rankdata(y))


# ---------------------------------------------------------------- masks


def mask_correlation(scores, mask: ShiftMask, is_special, use_abs=False) -> float:
    """Spearman rho between per-token scores and the shift mask over non-special tokens."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(mask.mask) or len(is_special) != len(scores):
        raise ValueError("scores, mask and special flags are not aligned")
    keep = ~np.asarray(is_special, dtype=bool)
    s = scores[keep]
    if use_abs:
        s = np.abs(s)
    return spearman(s, np.asarray(mask.mask, dtype=np.float64)[keep])


# ---------------------------------------------------------------- self distance


@dataclass
class SelfDistance:
    marked: list  # per-layer mean distance of marked tokens
    other: list  # per-layer mean distance of the remaining non-special tokens


def token_self_distance(states_a, states_b, alignment, marked, is_special) -> SelfDistance:
    """Cosine distance of each token to its aligned twin, per layer.

    ``states_a``/``states_b``: (layers, n_real, d) stacks. ``alignment[p]`` is
    the position in b of real token p in a. ``marked`` and ``is_special`` are
    per-position flags over a's real tokens.
    """
    alignment = np.asarray(alignment)
    marked = np.asarray(marked, dtype=bool)
    regular = ~np.asarray(is_special, dtype=bool) & ~marked
    out_m, out_o = [], []
    for layer in range(states_a.shape[0]):
        dist = tm.cosine_distance_rows(states_a[layer], states_b[layer][alignment])
        out_m.append(float(dist[marked].mean()) if marked.any() else float("nan"))
        out_o.append(float(dist[regular].mean()) if regular.any() else float("nan"))
    return SelfDistance(out_m, out_o)


def mean_curves(items):
    """Average a list of equal-length curves, ignoring NaN entries."""
    arr = np.asarray(items, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return np.nanmean(arr, axis=0).tolist() if len(arr) else []


# ---------------------------------------------------------------- top tokens


@dataclass
class TopTokenTable:
    per_layer: dict = field(default_factory=dict)  # layer -> [(token, mean score, count)]
    frequencies: dict = field(default_factory=dict)


def token_frequencies(token_lists):
    freq = defaultdict(int)
    for toks in token_lists:
        for t in toks:
            if t != PAD:
                freq[t] += 1
    return dict(freq)


def aggregate_top_tokens(records, min_freq: int = 128, k: int = 4, frequencies=None) -> TopTokenTable:
    """Mean normalized absolute saliency per token type, top-k per layer.

    ``records`` yields ``(layer, tokens, normalized_abs_scores)``. Only types
    seen more than ``min_freq`` times in the corpus qualify; ties break on
    the token string.
    """
    sums = defaultdict(lambda: defaultdict(float))
    counts = defaultdict(lambda: defaultdict(int))
    seen_freq = defaultdict(lambda: defaultdict(int))
    for layer, tokens, scores in records:
        for t, s in zip(tokens, scores):
            if t == PAD:
                continue
            sums[layer][t] += float(s)
            counts[layer][t] += 1
            seen_freq[layer][t] += 1
    table = TopTokenTable()
    for layer in sorted(sums):
        freq = frequencies if frequencies is not None else seen_freq[layer]
        rows = [
            (t, sums[layer][t] / counts[layer][t], counts[layer][t])
            for t in sums[layer]
            if freq.get(t, 0) > min_freq
        ]
        rows.sort(key=lambda r: (-r[1], r[0]))
        table.per_layer[layer] = rows[:k]
    table.frequencies = dict(frequencies) if frequencies is not None else {}
    return table


# ---------------------------------------------------------------- control experiment


def score_correlations(scores_a, scores_b):
    """Per-sentence Pearson and Spearman between two token-score vectors.

    Returns ``(pearson, spearman)``; a sentence whose scores are constant in
    either vector yields ``(nan, nan)``.
    """
    try:
        return pearson(scores_a, scores_b), spearman(scores_a, scores_b)
    except UndefinedCorrelationError:
        return float("nan"), float("nan")


@dataclass
class ControlSummary:
    per_layer_pearson: dict  # layer -> mean over runs of the sentence-averaged correlation
    per_layer_spearman: dict
    pearson_mean: float
    pearson_max: float
    spearman_mean: float
    spearman_max: float
    runs: int
    skipped: int = 0


def summarize_control(run_tables, max_over="layer_means") -> ControlSummary:
    """Aggregate control runs.

    ``run_tables`` is a list (one per run) of ``{layer: [(pearson, spearman), ...]}``.
    Per run, sentence correlations are averaged per layer; mean and max are
    then taken over layers and averaged across runs. With
    ``max_over="all"`` the max is over every (sentence, layer) value instead.
    """
    layers = sorted(run_tables[0])
    p_layer = defaultdict(list)
    s_layer = defaultdict(list)
    stats = {"pm": [], "px": [], "sm": [], "sx": []}
    skipped = 0
    for table in run_tables:
        p_means, s_means, p_all, s_all = [], [], [], []
        for layer in layers:
            vals = np.asarray(table[layer], dtype=np.float64).reshape(-1, 2)
            ok = ~np.isnan(vals).any(axis=1)
            skipped += int((~ok).sum())
            p, s = vals[ok, 0], vals[ok, 1]
            p_means.append(float(p.mean()))
            s_means.append(float(s.mean()))
            p_all.extend(p.tolist())
            s_all.extend(s.tolist())
            p_layer[layer].append(p_means[-1])
            s_layer[layer].append(s_means[-1])
        stats["pm"].append(float(np.mean(p_means)))
        stats["sm"].append(float(np.mean(s_means)))
        stats["px"].append(max(p_all) if max_over == "all" else max(p_means))
        stats["sx"].append(max(s_all) if max_over == "all" else max(s_means))
    return ControlSummary(
        per_layer_pearson={l: float(np.mean(v)) for l, v in p_layer.items()},
        per_layer_spearman={l: float(np.mean(v)) for l, v in s_layer.items()},
        pearson_mean=float(np.mean(stats["pm"])),
        pearson_max=float(np.mean(stats["px"])),
        spearman_mean=float(np.mean(stats["sm"])),
        spearman_max=float(np.mean(stats["sx"])),
        runs=len(run_tables),
        skipped=skipped,
    )


def control_experiment(examples, features, test_items, layers, kind="classifier", config=None, fraction=0.1,
                       runs=3, seed=0, classes=None, full_probes=None, max_over="layer_means", logit=False):
    """Compare token scores of probes trained on all vs. a fraction of the training data.

    ``features[layer]`` is an (N, d) array aligned with ``examples``.
    ``test_items`` holds ``(sentence, trace, label)`` triples to attribute.
    Subsample probes reuse the full probe's seed, so ``fraction=1`` gives
    identical probes and correlations of exactly 1. Returns the summary and
    the raw per-run tables.
    """
    from .probe import ProbeConfig, fit_probe, saliency_scores

    config = config or ProbeConfig()
    layers = sorted(layers)
    labels = [ex.label for ex in examples]

    def fit(idx_tr, idx_va, layer):
        x = np.asarray(features[layer])
        return fit_probe(x[idx_tr], [labels[i] for i in idx_tr], x[idx_va], [labels[i] for i in idx_va],
                         kind=kind, config=config, layer=layer, classes=classes)

    tr_all = [i for i, ex in enumerate(examples) if ex.split == "tr"]
    va = [i for i, ex in enumerate(examples) if ex.split == "va"]
    full_probes = dict(full_probes or {})
    for layer in layers:
        if layer not in full_probes:
            full_probes[layer] = fit(tr_all, va, layer)

    full_scores = {
        layer: [saliency_scores(full_probes[layer], trace, sent, layer, label, logit).token_scores
                for sent, trace, label in test_items]
        for layer in layers
    }
    tables = []
    for r in range(runs):
        keep = subsample_indices(examples, fraction, seed=_run_seed(seed, r))
        tr = [i for i in keep if examples[i].split == "tr"]
        table = {}
        for layer in layers:
            sub = fit(tr, va, layer)
            rows = []
            for (sent, trace, label), ref in zip(test_items, full_scores[layer]):
                got = saliency_scores(sub, trace, sent, layer, label, logit).token_scores
                keep_tok = [i for i, t in enumerate(sent.tokens) if t != PAD]
                rows.append(score_correlations(ref[keep_tok], got[keep_tok]))
            table[layer] = rows
        tables.append(table)
    return summarize_control(tables, max_over), tables


def _run_seed(seed, run):
    digest = hashlib.sha256(f"{seed}\x1fcontrol\x1f{run}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


# ---------------------------------------------------------------- layer series


@dataclass
class LayerSeries:
    task: str
    metric: str
    values: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError(f"{self.task}/{self.metric}: non-finite value in layer series")
