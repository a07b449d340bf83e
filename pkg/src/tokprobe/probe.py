"""Diagnostic probes over pooled representations and gradient attribution.

Probes are small numpy MLPs (or linear maps) trained with Adam. Their input
gradient is computed in closed form, which is all token attribution needs:
the score of token i is ``dy_c/dh_avg . h_i``.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import LayerTrace
from .errors import ProbeError
from .model_io import RepresentationCache
from .representations import mean_pool, pooling_eligible
from .tokenizer import PAD, TokenizedSentence

PROBE_MAGIC = b"TKPPROBE"
PROBE_VERSION = 1


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


_ACTIVATIONS = {
    "sigmoid": (_sigmoid, lambda a: a * (1.0 - a)),
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda a: (a > 0).astype(np.float64)),
}


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ProbeConfig:
    hidden_sizes: tuple = (50, 100, 200)
    dropouts: tuple = (0.0, 0.1)
    activation: str = "sigmoid"
    linear: bool = False
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 10
    patience: int = 2
    seed: int = 0

    def grid(self):
        if self.linear:
            return [(0, 0.0)]
        return [(h, d) for h in self.hidden_sizes for d in self.dropouts]


@dataclass
class ProbeModel:
    kind: str  # "classifier" or "regressor"
    params: dict
    classes: list = field(default_factory=list)
    activation: str = "sigmoid"
    layer: int = -1
    dropout: float = 0.0
    strategy: str = "mean"
    label_mean: float = 0.0
    label_std: float = 1.0
    label_min: float = 0.0
    label_max: float = 0.0
    history: list = field(default_factory=list)

    @property
    def is_linear(self):
        return "W" in self.params

    @property
    def input_dim(self):
        return (self.params["W"] if self.is_linear else self.params["W1"]).shape[0]

    def _hidden(self, x):
        act, _ = _ACTIVATIONS[self.activation]
        return act(x @ self.params["W1"] + self.params["b1"])

    def logits(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.is_linear:
            return x @ self.params["W"] + self.params["b"]
        return self._hidden(x) @ self.params["W2"] + self.params["b2"]

    def output(self, x):
        """Class probabilities (classifier) or label-space estimates (regressor)."""
        z = self.logits(x)
        if self.kind == "classifier":
            return _softmax(z)
        return z[..., 0] * self.label_std + self.label_mean

    def predict(self, x):
        out = self.output(x)
        if self.kind == "classifier":
            return [self.classes[i] for i in np.argmax(out, axis=-1)]
        return out

    def class_index(self, label):
        if self.kind == "regressor":
            return 0
        try:
            return self.classes.index(label)
        except ValueError:
            raise ProbeError(f"label {label!r} is not one of {self.classes}") from None

    def input_gradient(self, h, target=0, logit=False) -> np.ndarray:
        """d y_target / d h for a single pooled vector ``h``.

        ``target`` is a class index. With ``logit`` the derivative is taken
        of the pre-softmax score instead of the probability.
        """
        h = np.asarray(h, dtype=np.float64)
        if self.kind == "classifier":
            z = self.logits(h)
            if logit:
                dz = np.zeros_like(z)
                dz[target] = 1.0
            else:
                p = _softmax(z)
                dz = -p[target] * p
                dz[target] += p[target]
        else:
            dz = np.array([self.label_std])
        if self.is_linear:
            return self.params["W"] @ dz
        _, dact = _ACTIVATIONS[self.activation]
        a = self._hidden(h)
        return self.params["W1"] @ (dact(a) * (self.params["W2"] @ dz))


# ---------------------------------------------------------------- training


def _init_params(rng, d, hidden, c, linear):
    def glorot(fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    if linear:
        return {"W": glorot(d, c), "b": np.zeros(c)}
    return {"W1": glorot(d, hidden), "b1": np.zeros(hidden), "W2": glorot(hidden, c), "b2": np.zeros(c)}


def _loss_grads(model, params, xb, yb, rng, dropout):
    """Mean loss and parameter gradients for one batch (dropout on hidden units)."""
    n = xb.shape[0]
    act, dact = _ACTIVATIONS[model.activation]
    if "W" in params:
        z = xb @ params["W"] + params["b"]
    else:
        a = act(xb @ params["W1"] + params["b1"])
        keep = None
        if dropout > 0:
            keep = (rng.random(a.shape) >= dropout) / (1.0 - dropout)
            a_d = a * keep
        else:
            a_d = a
        z = a_d @ params["W2"] + params["b2"]
    if model.kind == "classifier":
        p = _softmax(z)
        loss = -np.log(p[np.arange(n), yb] + 1e-300).mean()
        dz = p
        dz[np.arange(n), yb] -= 1.0
        dz /= n
    else:
        diff = z[:, 0] - yb
        loss = float((diff * diff).mean())
        dz = (2.0 / n) * diff[:, None]
    grads = {}
    if "W" in params:
        grads["W"] = xb.T @ dz
        grads["b"] = dz.sum(0)
    else:
        grads["W2"] = a_d.T @ dz
        grads["b2"] = dz.sum(0)
        da = dz @ params["W2"].T
        if keep is not None:
            da *= keep
        dz1 = da * dact(a)
        grads["W1"] = xb.T @ dz1
        grads["b1"] = dz1.sum(0)
    return float(loss), grads


def _val_metric(model, x, y):
    """Higher is better: accuracy for classifiers, negative RMSE for regressors."""
    if model.kind == "classifier":
        pred = np.argmax(model.logits(x), axis=-1)
        return float((pred == y).mean())
    z = model.logits(x)[:, 0]
    return -float(np.sqrt(((z - y) ** 2).mean()))


def fit_probe(x_tr, y_tr, x_va, y_va, kind="classifier", config: ProbeConfig | None = None, layer=-1,
              classes=None) -> ProbeModel:
    """Grid search + early-stopped Adam training on raw arrays."""
    config = config or ProbeConfig()
    x_tr = np.asarray(x_tr, dtype=np.float64)
    x_va = np.asarray(x_va, dtype=np.float64)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ProbeError("training and validation splits must be non-empty")
    template = ProbeModel(kind=kind, params={}, activation=config.activation, layer=layer)
    if kind == "classifier":
        classes = sorted(set(y_tr)) if classes is None else list(classes)
        if len(set(y_tr)) < 2:
            raise ProbeError("training labels contain a single class")
        lookup = {c: i for i, c in enumerate(classes)}
        try:
            t_tr = np.array([lookup[v] for v in y_tr])
            t_va = np.array([lookup[v] for v in y_va])
        except KeyError as exc:
            raise ProbeError(f"label {exc.args[0]!r} outside class set {classes}") from None
        template.classes = classes
        c = len(classes)
    elif kind == "regressor":
        raw = np.asarray(y_tr, dtype=np.float64)
        template.label_mean = float(raw.mean())
        template.label_std = float(raw.std()) or 1.0
        template.label_min = float(raw.min())
        template.label_max = float(raw.max())
        t_tr = (raw - template.label_mean) / template.label_std
        t_va = (np.asarray(y_va, dtype=np.float64) - template.label_mean) / template.label_std
        c = 1
    else:
        raise ProbeError(f"unknown probe kind {kind!r}")

    best = None
    for gi, (hidden, dropout) in enumerate(config.grid()):
        rng = np.random.default_rng([config.seed, gi])
        params = _init_params(rng, x_tr.shape[1], hidden, c, config.linear)
        model = ProbeModel(**{**template.__dict__, "params": params, "dropout": dropout, "history": []})
        m = {k: np.zeros_like(v) for k, v in params.items()}
        v = {k: np.zeros_like(p) for k, p in params.items()}
        b1, b2, eps = 0.9, 0.999, 1e-8
        step = 0
        best_here = (_val_metric(model, x_va, t_va), {k: p.copy() for k, p in params.items()}, 0)
        stale = 0
        for epoch in range(1, config.max_epochs + 1):
            order = rng.permutation(len(x_tr))
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                _, grads = _loss_grads(model, params, x_tr[idx], t_tr[idx], rng, dropout)
                step += 1
                for k in params:
                    m[k] = b1 * m[k] + (1 - b1) * grads[k]
                    v[k] = b2 * v[k] + (1 - b2) * grads[k] ** 2
                    mhat = m[k] / (1 - b1 ** step)
                    vhat = v[k] / (1 - b2 ** step)
                    params[k] -= config.lr * mhat / (np.sqrt(vhat) + eps)
            score = _val_metric(model, x_va, t_va)
            model.history.append({"epoch": epoch, "val_metric": score})
            if score > best_here[0]:
                best_here = (score, {k: p.copy() for k, p in params.items()}, epoch)
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
        model.params = best_here[1]
        if best is None or best_here[0] > best[0]:
            best = (best_here[0], model)
    return best[1]


def train_probe(cache: RepresentationCache, layer: int, config: ProbeConfig | None = None, kind="classifier",
                strategy="mean", train_split="tr", val_split="va", classes=None) -> ProbeModel:
    x_tr, y_tr = cache.features(train_split, layer, strategy)
    x_va, y_va = cache.features(val_split, layer, strategy)
    if len(y_tr) == 0:
        raise ProbeError(f"split {train_split!r} is empty")
    if len(y_va) == 0:
        raise ProbeError(f"split {val_split!r} is empty")
    model = fit_probe(x_tr, y_tr, x_va, y_va, kind=kind, config=config, layer=layer, classes=classes)
    model.strategy = strategy
    return model


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def metrics_for(model: ProbeModel, x, y) -> dict:
    if model.kind == "classifier":
        pred = model.predict(x)
        return {"accuracy": float(np.mean([p == t for p, t in zip(pred, y)])) if len(y) else float("nan"),
                "n": len(y)}
    est = model.output(x)
    gold = np.asarray(y, dtype=np.float64)
    rounded = np.clip(round_half_up(est), model.label_min, model.label_max)
    return {
        "accuracy": float((rounded == gold).mean()),
        "rmse": float(np.sqrt(((est - gold) ** 2).mean())),
        "n": len(y),
    }


def evaluate(model: ProbeModel, cache: RepresentationCache, split="te") -> dict:
    x, y = cache.features(split, model.layer, model.strategy)
    return metrics_for(model, x, y)


# ---------------------------------------------------------------- attribution


@dataclass
class AttributionResult:
    layer: int
    gradient: np.ndarray
    token_scores: np.ndarray
    normalized_abs_scores: np.ndarray
    correct_class: object
    tokens: list = field(default_factory=list)


def normalize_abs(scores, valid=None):
    """|s| / sum|s| over ``valid`` positions; all-zero input becomes uniform."""
    s = np.abs(np.asarray(scores, dtype=np.float64))
    valid = np.ones(len(s), bool) if valid is None else np.asarray(valid, bool)
    s = np.where(valid, s, 0.0)
    total = s.sum()
    if total == 0:
        return np.where(valid, 1.0 / max(valid.sum(), 1), 0.0)
    return s / total


def dimension_sensitivity(model: ProbeModel, h, target=None, logit=False) -> np.ndarray:
    """Per-dimension derivative of the target output w.r.t. the pooled input."""
    idx = 0 if target is None else model.class_index(target)
    return model.input_gradient(h, idx, logit=logit)


def mean_abs_sensitivity(sensitivity) -> float:
    s = np.asarray(sensitivity, dtype=np.float64)
    return float(np.abs(s).mean())


def saliency_scores(model: ProbeModel, trace: LayerTrace, sentence: TokenizedSentence, layer: int,
                    target=None, logit=False) -> AttributionResult:
    """Gradient x input score of every token representation at ``layer``.

    ``target`` is a label from ``model.classes`` (ignored for regressors).
    """
    if not model.params:
        raise ProbeError("probe has no trained parameters")
    if model.layer != layer:
        raise ProbeError(f"probe was trained on layer {model.layer}, not {layer}")
    if model.kind == "classifier" and target is None:
        raise ProbeError("classifier attribution needs a target class")
    states = trace.hidden_states[layer].astype(np.float64)
    if len(states) != sentence.n:
        raise ProbeError("trace and sentence lengths differ")
    h_avg = mean_pool(trace, sentence, layer).vector.astype(np.float64)
    grad = model.input_gradient(h_avg, model.class_index(target), logit=logit)
    scores = states @ grad
    valid = [t != PAD for t in sentence.tokens]
    return AttributionResult(
        layer=layer,
        gradient=grad,
        token_scores=scores,
        normalized_abs_scores=normalize_abs(scores, valid),
        correct_class=target,
        tokens=list(sentence.tokens),
    )


def pooled_score(result: AttributionResult, sentence: TokenizedSentence) -> float:
    """Mean token score over pooling-eligible tokens (equals g . h_avg)."""
    return float(np.mean(result.token_scores[pooling_eligible(sentence)]))


# ---------------------------------------------------------------- checkpoints


def save_probe(model: ProbeModel, path):
    meta = {k: v for k, v in asdict(model).items() if k != "params"}
    names = sorted(model.params)
    meta["tensors"] = [{"name": n, "shape": list(model.params[n].shape)} for n in names]
    head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(PROBE_MAGIC + struct.pack("<IQ", PROBE_VERSION, len(head)))
        f.write(head)
        for n in names:
            f.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())


def load_probe(path) -> ProbeModel:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != PROBE_MAGIC:
        raise ProbeError(f"{path}: not a probe checkpoint")
    version, m = struct.unpack("<IQ", blob[8:20])
    if version != PROBE_VERSION:
        raise ProbeError(f"{path}: probe checkpoint version {version} unsupported")
    meta = json.loads(blob[20:20 + m].decode("utf-8"))
    offset = 20 + m
    params = {}
    for t in meta.pop("tensors"):
        count = int(np.prod(t["shape"], dtype=np.int64))
        chunk = blob[offset:offset + 8 * count]
        if len(chunk) != 8 * count:
            raise ProbeError(f"{path}: truncated tensor {t['name']}")
        params[t["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(t["shape"]).copy()
        offset += 8 * count
    return ProbeModel(params=params, **meta)
