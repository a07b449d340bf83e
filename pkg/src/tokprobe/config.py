"""Run configuration: flat JSON with dotted keys, strict validation, hashing."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os

from .datasets import TASKS
from .errors import ConfigError

log = logging.getLogger(__name__)

CACHE_ENV = "TOKPROBE_CACHE_DIR"

REQUIRED_PATHS = ("paths.weights", "paths.vocab", "paths.config", "paths.data_dir", "paths.output_dir")

DEFAULTS = {
    "paths.weights": None,
    "paths.vocab": None,
    "paths.config": None,
    "paths.data_dir": None,
    "paths.output_dir": None,
    "paths.cache_dir": None,
    "tasks": ["sentlen", "tense", "objnum", "bshift", "coordinv"],
    "layers": None,
    "include_embedding_layer": False,
    "pooling": "mean",
    "compare_cls": True,
    "max_len": 128,
    "seed": 0,
    "probe.hidden_sizes": [50, 100, 200],
    "probe.dropouts": [0.0, 0.1],
    "probe.activation": "sigmoid",
    "probe.linear": False,
    "probe.lr": 0.001,
    "probe.batch_size": 64,
    "probe.max_epochs": 10,
    "probe.patience": 2,
    "attribution.logit": False,
    "attribution.max_sentences": None,
    "bshift.max_pairs": None,
    "mask.use_abs": False,
    "attn.window_radius": 10,
    "attn.cumulative": "mean",
    "attn.max_pairs": None,
    "top_tokens.min_freq": 128,
    "top_tokens.k": 4,
    "control.fraction": 0.1,
    "control.runs": 3,
    "control.max_over": "layer_means",
    "control.tasks": None,
    "export.tokens": ["[SEP]", ".", "##s"],
    "export.max_sentences": 500,
}

# keys that locate artifacts but do not change results
_LOCATION_KEYS = {"paths.output_dir", "paths.cache_dir"}
_INPUT_FILES = ("paths.weights", "paths.vocab", "paths.config")


def _is_data_key(key):
    return key.startswith("data.") and key[5:] in TASKS


class RunConfig(dict):
    """Normalized configuration; a dict of dotted keys with attribute helpers."""

    @property
    def run_hash(self):
        return self["_hash"]

    @property
    def short_hash(self):
        return self["_hash"][:12]

    @property
    def run_dir(self):
        return os.path.join(self["paths.output_dir"], self.short_hash)

    def task_file(self, task):
        return self.get(f"data.{task}") or os.path.join(self["paths.data_dir"], TASKS[task].filename)

    def public(self):
        return {k: v for k, v in sorted(self.items()) if not k.startswith("_")}


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(cfg: dict) -> str:
    """SHA-256 over the result-relevant config plus the content of every input file."""
    material = {k: v for k, v in sorted(cfg.items()) if not k.startswith("_") and k not in _LOCATION_KEYS}
    for key in _INPUT_FILES:
        if material.get(key):
            material[key] = _file_digest(material[key]) if os.path.isfile(material[key]) else None
    material["paths.data_dir"] = None
    for task in cfg.get("tasks") or []:
        path = cfg.get(f"data.{task}") or (
            os.path.join(cfg["paths.data_dir"], TASKS[task].filename) if cfg.get("paths.data_dir") else None)
        material[f"data.{task}"] = _file_digest(path) if path and os.path.isfile(path) else None
    blob = json.dumps(material, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def read_config_file(path) -> dict:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    if not text.strip():
        return {}
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def validate_config(source, base_dir=None, check_paths=True, overrides=None) -> RunConfig:
    """Fill defaults, check keys/ranges/paths and return the normalized config.

    ``source`` is a path or a dict. Relative paths resolve against the config
    file's directory. All problems are gathered into one ConfigError, which
    also carries the normalized config.
    """
    if isinstance(source, (str, os.PathLike)):
        raw = read_config_file(source)
        base_dir = base_dir or os.path.dirname(os.path.abspath(source))
    else:
        raw = dict(source)
    overrides = dict(overrides or {})
    raw.update(overrides)
    base_dir = base_dir or os.getcwd()
    errors = []

    unknown = sorted(k for k in raw if k not in DEFAULTS and not _is_data_key(k))
    if unknown:
        errors.append(f"unknown config keys: {', '.join(unknown)}")
    cfg = copy.deepcopy(DEFAULTS)
    cfg.update({k: v for k, v in raw.items() if k in DEFAULTS or _is_data_key(k)})

    # precedence for the cache dir: explicit override > environment > file
    if os.environ.get(CACHE_ENV) and not overrides.get("paths.cache_dir"):
        cfg["paths.cache_dir"] = os.environ[CACHE_ENV]
    for key in [k for k in cfg if k.startswith("paths.") or _is_data_key(k)]:
        if cfg[key]:
            cfg[key] = os.path.normpath(os.path.join(base_dir, os.path.expanduser(cfg[key])))
    if cfg["paths.cache_dir"] is None and cfg["paths.output_dir"]:
        cfg["paths.cache_dir"] = os.path.join(cfg["paths.output_dir"], "cache")

    for key in REQUIRED_PATHS:
        if not cfg[key]:
            errors.append(f"{key} is required")
        elif check_paths and key != "paths.output_dir" and not os.path.exists(cfg[key]):
            errors.append(f"{key}: path does not exist: {cfg[key]}")

    tasks = cfg["tasks"]
    if not isinstance(tasks, list) or not tasks:
        errors.append("tasks must be a non-empty list")
        tasks = []
    deduped = []
    for t in tasks:
        if t in deduped:
            log.warning("duplicate task %r removed", t)
            continue
        if t not in TASKS:
            errors.append(f"unknown task {t!r}")
            continue
        deduped.append(t)
    cfg["tasks"] = deduped
    if cfg["control.tasks"] is None:
        cfg["control.tasks"] = list(deduped)
    else:
        cfg["control.tasks"] = [t for i, t in enumerate(cfg["control.tasks"]) if t not in cfg["control.tasks"][:i]]
        stray = [t for t in cfg["control.tasks"] if t not in deduped]
        if stray:
            errors.append(f"control.tasks not in tasks: {stray}")

    if check_paths:
        for t in deduped:
            path = cfg.get(f"data.{t}") or (
                os.path.join(cfg["paths.data_dir"], TASKS[t].filename) if cfg["paths.data_dir"] else None)
            if path and not os.path.isfile(path):
                errors.append(f"data file for task {t!r} does not exist: {path}")

    num_layers = None
    if cfg["paths.config"] and os.path.isfile(cfg["paths.config"]):
        try:
            with open(cfg["paths.config"], encoding="utf-8") as f:
                model_cfg = json.load(f)
            num_layers = int(model_cfg.get("num_layers", model_cfg.get("num_hidden_layers")))
        except (ValueError, TypeError, OSError) as exc:
            errors.append(f"paths.config: cannot read layer count ({exc})")
    if cfg["layers"] is None and num_layers is not None:
        cfg["layers"] = list(range(1, num_layers + 1))
    if cfg["layers"] is not None:
        layers = sorted(set(int(l) for l in cfg["layers"]))
        low = 0 if cfg["include_embedding_layer"] else 1
        bad = [l for l in layers if l < low or (num_layers is not None and l > num_layers)]
        if bad:
            errors.append(f"layers out of range {low}..{num_layers}: {bad}")
        cfg["layers"] = layers
        if cfg["include_embedding_layer"] and 0 not in layers:
            cfg["layers"] = [0] + layers

    if cfg["pooling"] not in ("mean", "cls"):
        errors.append("pooling must be 'mean' or 'cls'")
    if cfg["probe.activation"] not in ("sigmoid", "tanh", "relu"):
        errors.append("probe.activation must be sigmoid, tanh or relu")
    if not 0 < float(cfg["control.fraction"]) <= 1:
        errors.append("control.fraction must be in (0, 1]")
    if int(cfg["control.runs"]) < 1:
        errors.append("control.runs must be >= 1")
    if cfg["attn.cumulative"] not in ("mean", "sum"):
        errors.append("attn.cumulative must be 'mean' or 'sum'")
    if cfg["control.max_over"] not in ("layer_means", "all"):
        errors.append("control.max_over must be 'layer_means' or 'all'")
    if int(cfg["max_len"]) < 3:
        errors.append("max_len must be >= 3")
    for key in ("probe.lr", "probe.batch_size", "probe.max_epochs", "probe.patience", "attn.window_radius"):
        if float(cfg[key]) <= 0 and key != "attn.window_radius":
            errors.append(f"{key} must be positive")
    if int(cfg["attn.window_radius"]) < 0:
        errors.append("attn.window_radius must be >= 0")

    result = RunConfig(cfg)
    result["_hash"] = config_hash(cfg)
    if errors:
        raise ConfigError(errors, config=result)
    return result
