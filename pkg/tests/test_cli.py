import csv
import json
import os
import shutil

import pytest

from tokprobe.cli import main
from tokprobe.pipeline import MARKER


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["toy", str(root)]) == 0
    cfg_path = root / "run.json"
    cfg = json.loads(cfg_path.read_text())
    # a lighter grid keeps the module quick
    cfg.update({"probe.hidden_sizes": [16], "probe.dropouts": [0.0], "probe.max_epochs": 4,
                "control.runs": 1, "attribution.max_sentences": 20, "attn.max_pairs": 20,
                "export.max_sentences": 30})
    cfg_path.write_text(json.dumps(cfg))
    return root


def test_dry_run_writes_nothing(toy, capsys):
    before = sorted(os.listdir(toy))
    code, out, _ = run_cli(capsys, "pipeline", "-c", str(toy / "run.json"), "--dry-run")
    assert code == 0
    payload = json.loads(out)
    assert payload["valid"] and len(payload["config_hash"]) == 64
    assert sorted(os.listdir(toy)) == before


def test_missing_weights_exit_1(toy, capsys):
    code, _, err = run_cli(capsys, "extract", "-c", str(toy / "run.json"), "--weights", str(toy / "absent.bin"))
    assert code == 1
    payload = json.loads(err)
    assert payload["error"] == "ConfigError"
    assert any("absent.bin" in e for e in payload["errors"])


def test_usage_error_exit_1(capsys):
    code, _, err = run_cli(capsys, "no-such-stage")
    assert code == 1
    assert json.loads(err)["error"] == "UsageError"


def test_missing_config_file_exit_1(tmp_path, capsys):
    code, _, err = run_cli(capsys, "extract", "-c", str(tmp_path / "nothing.json"))
    assert code == 1
    assert "nothing.json" in json.loads(err)["message"]


@pytest.fixture(scope="module")
def finished(toy):
    assert main(["pipeline", "-c", str(toy / "run.json"), "--workers", "1"]) == 0
    runs = toy / "runs"
    run_dir = next(p for p in runs.iterdir() if p.name != "cache")
    return run_dir


def test_pipeline_outputs(finished):
    for stage in ("prepare-data", "extract", "train-probe", "attribute", "attn-norm", "analyze", "control", "report"):
        marker = json.loads((finished / stage / MARKER).read_text())
        assert marker["config_hash"].startswith(finished.name)
    report = finished / "report"
    for name in ("layer_accuracy.csv", "layer_accuracy.json", "summary.json", "accuracy.png"):
        assert (report / name).is_file(), name
    with open(report / "layer_accuracy.csv", encoding="utf-8") as f:
        first = f.readline()
    assert first.startswith("# config_hash=" + json.loads((finished / "config.normalized.json").read_text())[
        "config_hash"])
    assert (report / "accuracy.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_resume_skips_and_force_recomputes(toy, finished, capsys):
    code, out, _ = run_cli(capsys, "train-probe", "-c", str(toy / "run.json"))
    assert code == 0 and json.loads(out)["stages"][0]["skipped"] is True
    code, out, _ = run_cli(capsys, "analyze", "-c", str(toy / "run.json"), "--force", "--workers", "1")
    assert code == 0 and json.loads(out)["stages"][0]["skipped"] is False


def test_export_vectors_structure(toy, finished, capsys):
    code, _, _ = run_cli(capsys, "export-vectors", "-c", str(toy / "run.json"), "--workers", "1")
    assert code == 0
    cfg = json.loads((finished / "config.normalized.json").read_text())
    dim = 64
    for task in cfg["tasks"]:
        path = finished / "export-vectors" / f"{task}.tsv"
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith("# config_hash=")
        rows = list(csv.DictReader(lines[1:], delimiter="\t"))
        assert rows
        tokens = {r["token"] for r in rows}
        assert tokens <= set(cfg["export.tokens"])
        assert "[SEP]" in tokens
        assert {int(r["layer"]) for r in rows} == set(cfg["layers"])
        assert all(len(r["vector"].split()) == dim for r in rows)
        # one [SEP] per sentence and layer
        sep = [r for r in rows if r["token"] == "[SEP]"]
        assert len(sep) == cfg["export.max_sentences"] * len(cfg["layers"])
        labels = {r["label"] for r in rows}
        assert len(labels) >= 2


def test_report_with_deleted_probes_is_a_user_error(toy, finished, capsys, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(toy / "runs", out)
    probes = out / finished.name / "train-probe" / "tense"
    victim = sorted(probes.glob("mean_layer*.probe"))[0]
    victim.unlink()
    code, _, err = run_cli(capsys, "report", "-c", str(toy / "run.json"), "--output-dir", str(out), "--force",
                           "--workers", "1")
    assert code == 1
    layer = int(victim.stem.split("layer")[1])
    assert f"tense/mean/layer {layer}" in json.loads(err)["message"]
