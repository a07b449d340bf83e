"""Sentence pooling and bulk representation extraction."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .encoder import Encoder, LayerTrace
from .errors import TokprobeError
from .model_io import RepresentationCache
from .tokenizer import CLS, PAD, TokenizedSentence, Vocabulary, encode


@dataclass
class PooledRepresentation:
    layer: int
    vector: np.ndarray
    strategy: str


class ExtractionError(TokprobeError):
    def __init__(self, index, cause):
        self.index = index
        self.cause = cause
        super().__init__(f"sentence {index}: {cause}")


def pooling_eligible(sentence: TokenizedSentence) -> list[int]:
    """Positions averaged by mean pooling: everything but [PAD] and [CLS]."""
    return [i for i, t in enumerate(sentence.tokens) if t not in (PAD, CLS)]


def mean_pool(trace: LayerTrace, sentence: TokenizedSentence, layer: int) -> PooledRepresentation:
    idx = pooling_eligible(sentence)
    if not idx:
        raise ValueError("sentence has no tokens eligible for pooling")
    vec = trace.hidden_states[layer][idx].astype(np.float64).mean(axis=0)
    return PooledRepresentation(layer, vec.astype(np.float32), "mean")


def cls_pool(trace: LayerTrace, layer: int) -> PooledRepresentation:
    return PooledRepresentation(layer, np.array(trace.hidden_states[layer][0]), "cls")


POOLERS = {
    "mean": lambda trace, sent, layer: mean_pool(trace, sent, layer),
    "cls": lambda trace, sent, layer: cls_pool(trace, layer),
}


def _one(encoder, vocab, max_len, text, layers, strategies, keep_tokens):
    sent = encode(text, vocab, max_len, pad=False)
    trace = encoder.forward(sent)
    pooled = {s: np.stack([POOLERS[s](trace, sent, l).vector for l in layers]) for s in strategies}
    reps = trace.hidden_states[list(layers)] if keep_tokens else None
    return pooled, reps, sent.tokens


def extract_dataset(
    encoder: Encoder,
    vocab: Vocabulary,
    examples,
    layers,
    pooling="mean",
    keep_token_reps=False,
    dataset_id="dataset",
    max_len=128,
    executor: ThreadPoolExecutor | None = None,
) -> RepresentationCache:
    """Run every example through the encoder and pool the requested layers.

    ``pooling`` is a strategy name or a collection of them. Results come back
    in example order regardless of how work is scheduled.
    """
    layers = sorted(set(layers))
    strategies = [pooling] if isinstance(pooling, str) else sorted(set(pooling))
    for s in strategies:
        if s not in POOLERS:
            raise ValueError(f"unknown pooling strategy {s!r}")

    def work(item):
        k, ex = item
        try:
            return _one(encoder, vocab, max_len, ex.sentence, layers, strategies, keep_token_reps)
        except Exception as exc:
            raise ExtractionError(k, exc) from exc

    items = list(enumerate(examples))
    if executor is None:
        results = [work(it) for it in items]
    else:
        results = list(executor.map(work, items))

    d = encoder.config.hidden_size
    pooled = {
        s: (np.stack([r[0][s] for r in results]) if results else np.zeros((0, len(layers), d), np.float32))
        for s in strategies
    }
    return RepresentationCache(
        dataset_id=dataset_id,
        layers=layers,
        model_layers=encoder.config.num_layers + 1,
        sentences=[ex.sentence for _, ex in items],
        labels=[ex.label for _, ex in items],
        splits=[ex.split for _, ex in items],
        pooled=pooled,
        token_reps=[r[1] for r in results] if keep_token_reps else None,
        tokens=[r[2] for r in results],
    )
