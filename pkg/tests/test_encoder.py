import math
import os

import numpy as np
import pytest

from tokprobe.encoder import Encoder, LayerWeights, attention_norms, attention_probs, value_transforms
from tokprobe.errors import ShapeError, TokenIdError
from tokprobe.model_io import EncoderConfig, manifest
from tokprobe.tokenizer import TokenizedSentence, Vocabulary, encode
from tokprobe.toy import random_weights

from .conftest import FIXTURES

SENTENCES = ["the dog walked into the old market .", "she saw them .", "my friends played with a red ball today ."]


def _sentence(ids):
    n = len(ids)
    return TokenizedSentence(tokens=["x"] * n, ids=list(ids), word_index=[None] * n, source_index=[None] * n,
                             is_special=[False] * n)


def test_embed_distinguishes_tokens_and_positions(encoder, vocab):
    a = encoder.embed(_sentence([vocab["dog"], vocab["cat"]]))
    assert not np.allclose(a[0], a[1])
    b = encoder.embed(_sentence([vocab["dog"]] * 6))
    assert not np.allclose(b[0], b[5])


def test_embed_golden(encoder, vocab):
    golden = np.load(os.path.join(FIXTURES, "golden_embedding.npy"))
    got = encoder.embed(encode("the glass broke and i cut myself .", vocab, max_len=16))
    assert got.dtype == np.float32
    assert np.array_equal(got, golden)


def test_embed_id_errors(encoder, model_config):
    with pytest.raises(TokenIdError):
        encoder.embed(_sentence([model_config.vocab_size]))
    with pytest.raises(TokenIdError):
        encoder.embed(_sentence([5] * (model_config.max_position + 1)))


def test_weight_shape_mismatch(model_config, weights):
    w = dict(weights)
    w["encoder.layer.0.attention.self.query.weight"] = np.zeros((3, 3), np.float32)
    with pytest.raises(ShapeError):
        Encoder(model_config, w)


def test_forward_shapes_masks_and_determinism(encoder, vocab, model_config):
    s = encode(SENTENCES[1], vocab, max_len=12)
    t1 = encoder.forward(s, with_attention_internals=True)
    t2 = encoder.forward(s, with_attention_internals=True)
    L, H, d = model_config.num_layers, model_config.num_heads, model_config.hidden_size
    assert t1.hidden_states.shape == (L + 1, 12, d)
    assert t1.attention_weights.shape == (L, H, 12, 12)
    assert t1.beta_maps.shape == (L, s.n_real, s.n_real)
    assert np.all(t1.beta_maps >= 0)
    assert t1.hidden_states.tobytes() == t2.hidden_states.tobytes()
    assert t1.beta_maps.tobytes() == t2.beta_maps.tobytes()
    real = np.array(s.attention_mask)
    att = t1.attention_weights.astype(np.float64)
    assert np.all(att[:, :, :, ~real] == 0)
    assert np.allclose(att[:, :, :, real].sum(-1), 1.0, atol=1e-5)


def test_padding_does_not_change_real_states(encoder, vocab):
    short = encoder.forward(encode(SENTENCES[0], vocab, pad=False))
    padded = encoder.forward(encode(SENTENCES[0], vocab, max_len=30))
    n = short.hidden_states.shape[1]
    assert np.allclose(short.hidden_states, padded.hidden_states[:, :n], atol=1e-5)


def _tiny():
    cfg = EncoderConfig(num_layers=1, num_heads=1, hidden_size=4, intermediate_size=6, vocab_size=10,
                        max_position=8, type_vocab_size=2, layer_norm_eps=1e-12)
    r = np.random.default_rng(7)
    w = {k: (r.normal(size=s) * 0.5).astype(np.float32) for k, s in manifest(cfg).items()}
    return cfg, w


def _oracle_forward(cfg, w, ids):
    """Step-by-step pure-Python composition of the same operations."""
    d = cfg.hidden_size

    def mat(name):
        return w[name].astype(float).tolist()

    def lin(x, wname, bname):
        W, b = mat(wname), w[bname].astype(float).tolist()
        return [[sum(row[k] * W[o][k] for k in range(len(row))) + b[o] for o in range(len(W))] for row in x]

    def ln(x, g, b):
        g, b = w[g].astype(float).tolist(), w[b].astype(float).tolist()
        out = []
        for row in x:
            mu = sum(row) / len(row)
            var = sum((v - mu) ** 2 for v in row) / len(row)
            out.append([(v - mu) / math.sqrt(var + cfg.layer_norm_eps) * g[k] + b[k] for k, v in enumerate(row)])
        return out

    we, pe, te = mat("embeddings.word_embeddings.weight"), mat("embeddings.position_embeddings.weight"), mat(
        "embeddings.token_type_embeddings.weight")
    x = [[we[t][k] + pe[i][k] + te[0][k] for k in range(d)] for i, t in enumerate(ids)]
    x = ln(x, "embeddings.LayerNorm.weight", "embeddings.LayerNorm.bias")
    p = "encoder.layer.0."
    q = lin(x, p + "attention.self.query.weight", p + "attention.self.query.bias")
    k = lin(x, p + "attention.self.key.weight", p + "attention.self.key.bias")
    v = lin(x, p + "attention.self.value.weight", p + "attention.self.value.bias")
    ctx = []
    for i in range(len(ids)):
        s = [sum(q[i][c] * k[j][c] for c in range(d)) / math.sqrt(d) for j in range(len(ids))]
        m = max(s)
        e = [math.exp(v_ - m) for v_ in s]
        a = [v_ / sum(e) for v_ in e]
        ctx.append([sum(a[j] * v[j][c] for j in range(len(ids))) for c in range(d)])
    att = lin(ctx, p + "attention.output.dense.weight", p + "attention.output.dense.bias")
    h1 = ln([[att[i][c] + x[i][c] for c in range(d)] for i in range(len(ids))],
            p + "attention.output.LayerNorm.weight", p + "attention.output.LayerNorm.bias")
    ff = lin(h1, p + "intermediate.dense.weight", p + "intermediate.dense.bias")
    ff = [[0.5 * v_ * (1 + math.erf(v_ / math.sqrt(2))) for v_ in row] for row in ff]
    ff = lin(ff, p + "output.dense.weight", p + "output.dense.bias")
    return ln([[ff[i][c] + h1[i][c] for c in range(d)] for i in range(len(ids))],
              p + "output.LayerNorm.weight", p + "output.LayerNorm.bias")


def test_tiny_model_matches_step_by_step_oracle():
    cfg, w = _tiny()
    ids = [2, 7, 4, 3]
    got = Encoder(cfg, w).forward(_sentence(ids)).hidden_states[1]
    assert np.max(np.abs(got - np.array(_oracle_forward(cfg, w, ids)))) < 1e-5


def test_matches_transformers_bert(encoder, model_config, weights, vocab):
    torch = pytest.importorskip("torch")
    transformers = pytest.importorskip("transformers")
    hc = transformers.BertConfig(
        vocab_size=model_config.vocab_size, hidden_size=model_config.hidden_size,
        num_hidden_layers=model_config.num_layers, num_attention_heads=model_config.num_heads,
        intermediate_size=model_config.intermediate_size, max_position_embeddings=model_config.max_position,
        type_vocab_size=model_config.type_vocab_size, layer_norm_eps=model_config.layer_norm_eps,
        hidden_act="gelu", attn_implementation="eager")
    ref = transformers.BertModel(hc, add_pooling_layer=False).eval()
    ref.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in weights.items()}, strict=True)
    for text in SENTENCES:
        s = encode(text, vocab, max_len=16)
        ours = encoder.forward(s).hidden_states
        with torch.no_grad():
            out = ref(input_ids=torch.tensor([s.ids]),
                      attention_mask=torch.tensor([s.attention_mask], dtype=torch.long), output_hidden_states=True)
        theirs = np.stack([h[0].numpy() for h in out.hidden_states])
        real = s.real_positions
        assert np.max(np.abs(ours[:, real] - theirs[:, real])) < 1e-4


def _layer(d=4, heads=1, seed=0, zero_value=False):
    r = np.random.default_rng(seed)
    f = lambda *s: r.normal(size=s).astype(np.float32)  # noqa: E731
    lw = dict(wq=f(d, d), bq=f(d), wk=f(d, d), bk=f(d), wv=f(d, d), bv=f(d), wo=f(d, d), bo=f(d),
              ln1_g=f(d), ln1_b=f(d), w1=f(8, d), b1=f(8), w2=f(d, 8), b2=f(d), ln2_g=f(d), ln2_b=f(d))
    if zero_value:
        lw["wv"][:] = 0
        lw["bv"][:] = 0
    return LayerWeights(**lw)


def test_attention_norm_one_hot_alpha():
    lw = _layer()
    x = np.random.default_rng(1).normal(size=(3, 4)).astype(np.float32)
    probs = np.zeros((1, 3, 3), np.float32)
    probs[0, :, 2] = 1.0
    beta = attention_norms(x, lw, 1, probs=probs)
    v = value_transforms(x, lw, 1)[0, 2]
    assert np.allclose(beta[:, 2], np.linalg.norm(v), rtol=1e-5)
    assert np.all(beta[:, :2] == 0)


def test_attention_norm_zero_values():
    x = np.random.default_rng(2).normal(size=(5, 4)).astype(np.float32)
    assert np.all(attention_norms(x, _layer(zero_value=True), 1) == 0)


def test_decomposition_identity_all_layers(encoder, vocab, model_config):
    H = model_config.num_heads
    for text in SENTENCES:
        s = encode(text, vocab, max_len=20)
        trace = encoder.forward(s, with_attention_internals=True)
        real = np.array(s.attention_mask)
        for l, lw in enumerate(encoder.layers):
            x = trace.hidden_states[l]
            probs = attention_probs(x, lw, H, real)
            f = value_transforms(x, lw, H)
            recon = np.einsum("hij,hjd->id", probs.astype(np.float64), f) + lw.bo
            assert np.max(np.abs(recon[real] - trace.attention_outputs[l][real])) < 1e-4
