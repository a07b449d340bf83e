"""Instrumented post-layer-norm BERT encoder in numpy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_math as tm
from .errors import ShapeError, TokenIdError
from .model_io import EncoderConfig, manifest
from .tokenizer import TokenizedSentence


@dataclass
class LayerTrace:
    """All hidden states of one sentence.

    hidden_states: (L+1, n, d); index 0 is the embedding output.
    beta_maps: (L, n_real, n_real) attention-norm maps with [PAD] rows and
    columns dropped, or None when internals were not requested.
    attention_weights: (L, H, n, n) or None.
    attention_outputs: (L, n, d) attention sublayer output before the
    residual add, or None.
    """

    hidden_states: np.ndarray
    real_positions: list
    beta_maps: np.ndarray | None = None
    attention_weights: np.ndarray | None = None
    attention_outputs: np.ndarray | None = None

    @property
    def num_layers(self):
        return self.hidden_states.shape[0] - 1

    def real_states(self, layer):
        return self.hidden_states[layer][self.real_positions]


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray

    @classmethod
    def from_named(cls, weights, i):
        p = f"encoder.layer.{i}."
        a = p + "attention."
        return cls(
            wq=weights[a + "self.query.weight"], bq=weights[a + "self.query.bias"],
            wk=weights[a + "self.key.weight"], bk=weights[a + "self.key.bias"],
            wv=weights[a + "self.value.weight"], bv=weights[a + "self.value.bias"],
            wo=weights[a + "output.dense.weight"], bo=weights[a + "output.dense.bias"],
            ln1_g=weights[a + "output.LayerNorm.weight"], ln1_b=weights[a + "output.LayerNorm.bias"],
            w1=weights[p + "intermediate.dense.weight"], b1=weights[p + "intermediate.dense.bias"],
            w2=weights[p + "output.dense.weight"], b2=weights[p + "output.dense.bias"],
            ln2_g=weights[p + "output.LayerNorm.weight"], ln2_b=weights[p + "output.LayerNorm.bias"],
        )


def split_heads(x, num_heads):
    n, d = x.shape
    return x.reshape(n, num_heads, d // num_heads).transpose(1, 0, 2)


def attention_probs(x, lw: LayerWeights, num_heads, key_mask=None):
    """Per-head attention weights (H, n, n) for layer input ``x``."""
    q = split_heads(tm.linear(x, lw.wq, lw.bq), num_heads).astype(np.float64)
    k = split_heads(tm.linear(x, lw.wk, lw.bk), num_heads).astype(np.float64)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = np.where(np.asarray(key_mask, dtype=bool)[None, None, :], scores, -np.inf)
    return tm.softmax_rows(scores)


def value_transforms(x, lw: LayerWeights, num_heads):
    """f^head(x_j) for every head and token: (H, n, d).

    The value projection of one head followed by that head's slice of the
    output projection, so that summing over heads and adding the output bias
    reproduces the dense output.
    """
    d = x.shape[1]
    hd = d // num_heads
    v = split_heads(tm.linear(x, lw.wv, lw.bv), num_heads).astype(np.float64)
    wo = lw.wo.astype(np.float64)
    out = np.empty((num_heads, x.shape[0], d))
    for h in range(num_heads):
        out[h] = v[h] @ wo[:, h * hd:(h + 1) * hd].T
    return out


def attention_norms(layer_inputs, lw: LayerWeights, num_heads, key_mask=None, probs=None) -> np.ndarray:
    """beta[i, j] = || sum_head alpha[head, i, j] * f^head(h_j) || over real tokens."""
    x = np.asarray(layer_inputs, dtype=np.float32)
    if probs is None:
        probs = attention_probs(x, lw, num_heads, key_mask)
    f = value_transforms(x, lw, num_heads)
    if key_mask is not None:
        keep = np.flatnonzero(np.asarray(key_mask, dtype=bool))
        probs = probs[:, keep][:, :, keep]
        f = f[:, keep]
    # (i, j, d) = sum_h alpha[h, i, j] f[h, j, d]
    contrib = np.einsum("hij,hjd->ijd", probs.astype(np.float64), f)
    return tm.as_tensor(np.sqrt((contrib * contrib).sum(-1)))


class Encoder:
    def __init__(self, config: EncoderConfig, weights: dict[str, np.ndarray]):
        expected = manifest(config)
        for name, shape in expected.items():
            if name not in weights:
                raise ShapeError(f"weights lack {name}")
            if tuple(weights[name].shape) != shape:
                raise ShapeError(f"{name}: shape {tuple(weights[name].shape)} does not match config {shape}")
        self.config = config
        self.word_emb = weights["embeddings.word_embeddings.weight"]
        self.pos_emb = weights["embeddings.position_embeddings.weight"]
        self.type_emb = weights["embeddings.token_type_embeddings.weight"]
        self.emb_ln_g = weights["embeddings.LayerNorm.weight"]
        self.emb_ln_b = weights["embeddings.LayerNorm.bias"]
        self.layers = [LayerWeights.from_named(weights, i) for i in range(config.num_layers)]

    def embed(self, sentence: TokenizedSentence) -> np.ndarray:
        ids = np.asarray(sentence.ids, dtype=np.int64)
        n = len(ids)
        if n > self.config.max_position:
            raise TokenIdError(f"sequence of {n} tokens exceeds max_position {self.config.max_position}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise TokenIdError(f"token id out of range for vocab_size {self.config.vocab_size}")
        x = (
            self.word_emb[ids].astype(np.float64)
            + self.pos_emb[:n]
            + self.type_emb[0]
        )
        return tm.layer_norm(x, self.emb_ln_g, self.emb_ln_b, self.config.layer_norm_eps)

    def layer_forward(self, x, lw: LayerWeights, key_mask):
        eps = self.config.layer_norm_eps
        probs = attention_probs(x, lw, self.config.num_heads, key_mask)
        v = split_heads(tm.linear(x, lw.wv, lw.bv), self.config.num_heads).astype(np.float64)
        ctx = (probs.astype(np.float64) @ v).transpose(1, 0, 2).reshape(x.shape)
        attn_out = tm.linear(ctx, lw.wo, lw.bo)
        h1 = tm.layer_norm(attn_out.astype(np.float64) + x, lw.ln1_g, lw.ln1_b, eps)
        ff = tm.gelu(tm.linear(h1, lw.w1, lw.b1))
        ff_out = tm.linear(ff, lw.w2, lw.b2)
        h2 = tm.layer_norm(ff_out.astype(np.float64) + h1, lw.ln2_g, lw.ln2_b, eps)
        return h2, probs, attn_out

    def forward(self, sentence: TokenizedSentence, with_attention_internals: bool = False) -> LayerTrace:
        mask = np.asarray(sentence.attention_mask, dtype=bool)
        key_mask = None if mask.all() else mask
        x = self.embed(sentence)
        states = [x]
        probs_all, betas, attn_outs = [], [], []
        for lw in self.layers:
            h, probs, attn_out = self.layer_forward(x, lw, key_mask)
            if with_attention_internals:
                probs_all.append(probs)
                attn_outs.append(attn_out)
                betas.append(attention_norms(x, lw, self.config.num_heads, key_mask, probs=probs))
            states.append(h)
            x = h
        trace = LayerTrace(np.stack(states), list(np.flatnonzero(mask)))
        if with_attention_internals:
            trace.attention_weights = np.stack(probs_all)
            trace.beta_maps = np.stack(betas)
            trace.attention_outputs = np.stack(attn_outs)
        return trace
