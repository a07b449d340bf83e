import json
import logging

import pytest

from tokprobe.config import CACHE_ENV, DEFAULTS, config_hash, validate_config
from tokprobe.errors import ConfigError
from tokprobe.toy import build_toy_artifacts


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toycfg")
    build_toy_artifacts(str(root), seed=0, n_train=20, n_val=10, n_test=10)
    return root


def base(toy_dir, **extra):
    cfg = {
        "paths.weights": str(toy_dir / "weights.safetensors"),
        "paths.vocab": str(toy_dir / "vocab.txt"),
        "paths.config": str(toy_dir / "config.json"),
        "paths.data_dir": str(toy_dir / "data"),
        "paths.output_dir": str(toy_dir / "runs"),
    }
    cfg.update(extra)
    return cfg


def test_empty_file_lists_required_paths(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("")
    with pytest.raises(ConfigError) as info:
        validate_config(str(path))
    msgs = info.value.errors
    for key in ("paths.weights", "paths.vocab", "paths.config", "paths.data_dir", "paths.output_dir"):
        assert any(key in m for m in msgs), key


def test_defaults_fill_in(toy_dir):
    cfg = validate_config(base(toy_dir))
    assert cfg["layers"] == [1, 2, 3, 4]
    assert cfg["max_len"] == DEFAULTS["max_len"]
    assert cfg["control.tasks"] == cfg["tasks"]
    assert cfg["paths.cache_dir"].endswith("cache")
    assert cfg.run_dir.endswith(cfg.run_hash[:12])


def test_layer_out_of_range(toy_dir):
    with pytest.raises(ConfigError) as info:
        validate_config(base(toy_dir, layers=[1, 13]))
    assert any("13" in m and "range" in m for m in info.value.errors)
    with pytest.raises(ConfigError):
        validate_config(base(toy_dir, layers=[0]))
    assert validate_config(base(toy_dir, layers=[2], include_embedding_layer=True))["layers"] == [0, 2]


def test_duplicate_tasks_warn(toy_dir, caplog):
    with caplog.at_level(logging.WARNING):
        cfg = validate_config(base(toy_dir, tasks=["tense", "bshift", "tense"]))
    assert cfg["tasks"] == ["tense", "bshift"]
    assert "duplicate" in caplog.text


@pytest.mark.parametrize("extra,needle", [
    ({"probe.lrate": 0.1}, "unknown config keys"),
    ({"tasks": ["nonsense"]}, "unknown task"),
    ({"pooling": "max"}, "pooling"),
    ({"control.fraction": 0}, "control.fraction"),
    ({"control.tasks": ["sentlen"], "tasks": ["tense"]}, "control.tasks"),
    ({"attn.cumulative": "median"}, "attn.cumulative"),
    ({"max_len": 2}, "max_len"),
])
def test_invalid_values(toy_dir, extra, needle):
    with pytest.raises(ConfigError) as info:
        validate_config(base(toy_dir, **extra))
    assert any(needle in m for m in info.value.errors)


def test_missing_path_is_named(toy_dir):
    with pytest.raises(ConfigError) as info:
        validate_config(base(toy_dir, **{"paths.weights": str(toy_dir / "nope.safetensors")}))
    assert any("nope.safetensors" in m for m in info.value.errors)


def test_relative_paths_resolve_against_config_file(toy_dir):
    path = toy_dir / "run.json"
    path.write_text(json.dumps({"paths.weights": "weights.safetensors", "paths.vocab": "vocab.txt",
                                "paths.config": "config.json", "paths.data_dir": "data",
                                "paths.output_dir": "runs"}))
    cfg = validate_config(str(path))
    assert cfg["paths.weights"] == str(toy_dir / "weights.safetensors")


def test_hash_ignores_location_keys(toy_dir, tmp_path):
    a = validate_config(base(toy_dir))
    b = validate_config(base(toy_dir, **{"paths.output_dir": str(tmp_path / "elsewhere"),
                                         "paths.cache_dir": str(tmp_path / "c")}))
    assert a.run_hash == b.run_hash
    assert a.run_dir != b.run_dir
    c = validate_config(base(toy_dir, seed=1))
    assert c.run_hash != a.run_hash


def test_hash_tracks_input_content(toy_dir, tmp_path):
    vocab = tmp_path / "vocab.txt"
    vocab.write_bytes((toy_dir / "vocab.txt").read_bytes())
    a = validate_config(base(toy_dir, **{"paths.vocab": str(vocab)}))
    assert a.run_hash == validate_config(base(toy_dir)).run_hash
    vocab.write_bytes(vocab.read_bytes() + b"zzzextra\n")
    assert validate_config(base(toy_dir, **{"paths.vocab": str(vocab)})).run_hash != a.run_hash


def test_hash_is_recomputable(toy_dir):
    cfg = validate_config(base(toy_dir))
    assert config_hash({k: v for k, v in cfg.items() if not k.startswith("_")}) == cfg.run_hash


def test_cache_dir_precedence(toy_dir, tmp_path, monkeypatch):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "env"))
    assert validate_config(base(toy_dir))["paths.cache_dir"] == str(tmp_path / "env")
    over = validate_config(base(toy_dir), overrides={"paths.cache_dir": str(tmp_path / "flag")})
    assert over["paths.cache_dir"] == str(tmp_path / "flag")
