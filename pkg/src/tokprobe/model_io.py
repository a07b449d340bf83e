"""On-disk artifacts: encoder config, weight archives, vocabularies, caches.

Weight archive layout (little-endian)::

    u64 N | N bytes UTF-8 JSON header | raw tensor payload

The header maps tensor name -> {"dtype", "shape", "data_offsets": [begin, end)}
with offsets relative to the first payload byte; an optional "__metadata__"
entry holds string pairs. This is the common single-file tensor archive
layout, so converted BERT checkpoints load directly.

Cache layout::

    8s magic "TKPCACHE" | u32 version | u64 M | M bytes JSON manifest |
    raw float32 payload | 32-byte SHA-256 over everything before it
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import (
    CacheError,
    CacheVersionError,
    ChecksumError,
    LoadError,
    MalformedHeaderError,
    MissingTensorError,
    NameCollisionError,
    OffsetError,
    ShapeError,
    TruncatedFileError,
    UnsupportedDtypeError,
    VocabError,
)
from .tokenizer import Vocabulary

_HF_CONFIG_KEYS = {
    "num_hidden_layers": "num_layers",
    "num_attention_heads": "num_heads",
    "max_position_embeddings": "max_position",
}


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 12
    num_heads: int = 12
    hidden_size: int = 768
    intermediate_size: int = 3072
    vocab_size: int = 30522
    max_position: int = 512
    type_vocab_size: int = 2
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        for f in fields(self):
            if f.name != "layer_norm_eps" and getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")

    @property
    def head_dim(self):
        return self.hidden_size // self.num_heads

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            key = _HF_CONFIG_KEYS.get(key, key)
            if key in known:
                kwargs[key] = value
        return cls(**kwargs)

    def to_dict(self):
        return asdict(self)


def load_config(path) -> EncoderConfig:
    with open(path, encoding="utf-8") as f:
        return EncoderConfig.from_dict(json.load(f))


def save_config(config: EncoderConfig, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------- weights

_DTYPES = {"F32": np.dtype("<f4")}
_KNOWN_DTYPES = {"F16", "BF16", "F64", "I64", "I32", "I16", "I8", "U8", "BOOL", "F8_E4M3", "F8_E5M2"}


def manifest(config: EncoderConfig) -> dict[str, tuple]:
    """Every tensor the encoder needs, with its expected shape."""
    d, ff = config.hidden_size, config.intermediate_size
    shapes = {
        "embeddings.word_embeddings.weight": (config.vocab_size, d),
        "embeddings.position_embeddings.weight": (config.max_position, d),
        "embeddings.token_type_embeddings.weight": (config.type_vocab_size, d),
        "embeddings.LayerNorm.weight": (d,),
        "embeddings.LayerNorm.bias": (d,),
    }
    for i in range(config.num_layers):
        p = f"encoder.layer.{i}."
        for proj in ("query", "key", "value"):
            shapes[p + f"attention.self.{proj}.weight"] = (d, d)
            shapes[p + f"attention.self.{proj}.bias"] = (d,)
        shapes[p + "attention.output.dense.weight"] = (d, d)
        shapes[p + "attention.output.dense.bias"] = (d,)
        shapes[p + "attention.output.LayerNorm.weight"] = (d,)
        shapes[p + "attention.output.LayerNorm.bias"] = (d,)
        shapes[p + "intermediate.dense.weight"] = (ff, d)
        shapes[p + "intermediate.dense.bias"] = (ff,)
        shapes[p + "output.dense.weight"] = (d, ff)
        shapes[p + "output.dense.bias"] = (d,)
        shapes[p + "output.LayerNorm.weight"] = (d,)
        shapes[p + "output.LayerNorm.bias"] = (d,)
    return shapes


def _canonical_name(name):
    if name.startswith("bert."):
        name = name[len("bert."):]
    if name.endswith("LayerNorm.gamma"):
        name = name[: -len("gamma")] + "weight"
    elif name.endswith("LayerNorm.beta"):
        name = name[: -len("beta")] + "bias"
    return name


def read_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    """Parse a weight archive into ``(tensors, metadata)`` without manifest checks."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise TruncatedFileError(f"{path}: file shorter than the 8-byte header length")
    (n,) = struct.unpack("<Q", blob[:8])
    if n == 0:
        raise MalformedHeaderError(f"{path}: header length is 0")
    if 8 + n > len(blob):
        raise TruncatedFileError(f"{path}: header claims {n} bytes but file has {len(blob) - 8}")
    try:
        header = json.loads(blob[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: header is not valid UTF-8 JSON ({exc})") from None
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"{path}: header must be a JSON object")
    payload = memoryview(blob)[8 + n:]
    metadata = header.pop("__metadata__", {}) or {}

    tensors = {}
    spans = []
    for name, info in header.items():
        try:
            dtype = info["dtype"]
            shape = tuple(int(s) for s in info["shape"])
            begin, end = (int(o) for o in info["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise MalformedHeaderError(f"{path}: bad header entry for {name!r}") from None
        if dtype not in _DTYPES:
            if dtype in _KNOWN_DTYPES:
                raise UnsupportedDtypeError(f"{name}: dtype {dtype} not supported (F32 only)")
            raise MalformedHeaderError(f"{name}: unknown dtype {dtype!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPES[dtype].itemsize
        if begin < 0 or end < begin or end - begin != nbytes:
            raise OffsetError(f"{name}: offsets [{begin},{end}) do not match shape {shape}")
        if end > len(payload):
            raise TruncatedFileError(f"{name}: data ends at {end} but payload has {len(payload)} bytes")
        spans.append((begin, end, name))
        tensors[name] = np.frombuffer(payload[begin:end], dtype=_DTYPES[dtype]).reshape(shape).astype(np.float32)
    spans.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise OffsetError(f"tensors {n0!r} and {n1!r} overlap")
    return tensors, metadata


def load_weight_archive(path, config: EncoderConfig | None = None) -> dict[str, np.ndarray]:
    """Load encoder weights; with ``config`` the full manifest is enforced."""
    raw, _ = read_archive(path)
    weights = {}
    for name, t in raw.items():
        canon = _canonical_name(name)
        if canon in weights:
            raise NameCollisionError(f"{name!r} and another entry both map to {canon!r}")
        weights[canon] = t
    if config is not None:
        for name, shape in manifest(config).items():
            if name not in weights:
                raise MissingTensorError(name)
            if weights[name].shape != shape:
                raise ShapeError(f"{name}: shape {weights[name].shape}, expected {shape}")
    return weights


def save_weight_archive(tensors: dict[str, np.ndarray], path, metadata: dict | None = None):
    header = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        data = arr.tobytes()
        header[name] = {"dtype": "F32", "shape": list(arr.shape), "data_offsets": [offset, offset + len(data)]}
        chunks.append(data)
        offset += len(data)
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    head = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    head += b" " * (-len(head) % 8)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for c in chunks:
            f.write(c)


def load_vocab(path) -> Vocabulary:
    with open(path, encoding="utf-8") as f:
        lines = f.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    tokens = [line.rstrip("\r") for line in lines]
    return Vocabulary(tokens)


def save_vocab(vocab: Vocabulary, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for tok in vocab.id_to_token:
            f.write(tok + "\n")


# ---------------------------------------------------------------- cache

CACHE_MAGIC = b"TKPCACHE"
CACHE_VERSION = 1


@dataclass
class RepresentationCache:
    """Pooled (and optionally token-level) representations for one dataset.

    ``pooled[strategy]`` is an (N, len(layers), d) float32 array.
    ``token_reps[k]`` holds sentence k's (len(layers), n_real, d) stack.
    ``model_layers`` is L + 1 for the encoder the cache came from.
    """

    dataset_id: str
    layers: list
    model_layers: int
    sentences: list
    labels: list
    splits: list
    pooled: dict = field(default_factory=dict)
    token_reps: list | None = None
    tokens: list | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        bad = [l for l in self.layers if not 0 <= l < self.model_layers]
        if bad:
            raise CacheError(f"layers {bad} outside 0..{self.model_layers - 1}")

    def layer_slot(self, layer):
        try:
            return self.layers.index(layer)
        except ValueError:
            raise CacheError(f"layer {layer} not in cache (has {self.layers})") from None

    def split_indices(self, split):
        return [i for i, s in enumerate(self.splits) if s == split]

    def features(self, split, layer, strategy="mean"):
        idx = self.split_indices(split)
        x = self.pooled[strategy][idx, self.layer_slot(layer)]
        y = [self.labels[i] for i in idx]
        return x, y


def write_cache(path, cache: RepresentationCache):
    arrays = []
    entries = []
    offset = 0

    def add(name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        arrays.append(arr.tobytes())
        offset += arr.nbytes

    for strategy in sorted(cache.pooled):
        add(f"pooled/{strategy}", cache.pooled[strategy])
    if cache.token_reps is not None:
        for k, arr in enumerate(cache.token_reps):
            add(f"tokens/{k}", arr)
    man = {
        "dataset_id": cache.dataset_id,
        "layers": list(cache.layers),
        "model_layers": cache.model_layers,
        "sentences": cache.sentences,
        "labels": cache.labels,
        "splits": cache.splits,
        "tokens": cache.tokens,
        "meta": cache.meta,
        "has_token_reps": cache.token_reps is not None,
        "arrays": entries,
        "payload_bytes": offset,
    }
    head = json.dumps(man, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = CACHE_MAGIC + struct.pack("<IQ", CACHE_VERSION, len(head)) + head + b"".join(arrays)
    digest = hashlib.sha256(body).digest()
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(body)
        f.write(digest)
    os.replace(tmp, path)


def read_cache(path) -> RepresentationCache:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20 or blob[:8] != CACHE_MAGIC:
        raise CacheVersionError(f"{path}: not a representation cache (bad magic)")
    version, m = struct.unpack("<IQ", blob[8:20])
    if version != CACHE_VERSION:
        raise CacheVersionError(f"{path}: cache version {version}, expected {CACHE_VERSION}")
    if len(blob) < 20 + m + 32:
        raise ChecksumError(f"{path}: file truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch")
    try:
        man = json.loads(body[20:20 + m].decode("utf-8"))
    except ValueError as exc:
        raise CacheError(f"{path}: corrupt manifest ({exc})") from None
    payload = memoryview(body)[20 + m:]
    if len(payload) != man["payload_bytes"]:
        raise ChecksumError(f"{path}: payload length mismatch")

    def get(entry):
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        arr = np.frombuffer(payload[start:start + 4 * count], dtype="<f4")
        return arr.reshape(entry["shape"]).astype(np.float32)

    pooled, token_reps = {}, [] if man["has_token_reps"] else None
    for entry in man["arrays"]:
        kind, _, key = entry["name"].partition("/")
        if kind == "pooled":
            pooled[key] = get(entry)
        else:
            token_reps.append(get(entry))
    return RepresentationCache(
        dataset_id=man["dataset_id"],
        layers=man["layers"],
        model_layers=man["model_layers"],
        sentences=man["sentences"],
        labels=man["labels"],
        splits=man["splits"],
        pooled=pooled,
        token_reps=token_reps,
        tokens=man["tokens"],
        meta=man["meta"],
    )


__all__ = [
    "EncoderConfig",
    "LoadError",
    "RepresentationCache",
    "VocabError",
    "load_config",
    "load_vocab",
    "load_weight_archive",
    "manifest",
    "read_archive",
    "read_cache",
    "save_config",
    "save_vocab",
    "save_weight_archive",
    "write_cache",
]
