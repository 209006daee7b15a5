import csv
import json
import os
import subprocess
import sys

import pytest
import yaml

from sliver import cli
from sliver.config import DEFAULT_CONFIG_YAML, load_config

TINY = {
    "generator": {"num_users": 120, "num_lives": 10, "horizon_ms": 3 * 3600_000, "drain_ms": 3600_000},
    "model": {"hash_size": 512},
    "eval": {"start_hour": 1, "hours": 2, "seeds": [0]},
    "rereco": {"episodes": 200, "generator_overrides": {"num_users": 80, "horizon_ms": 1800_000,
                                                        "drain_ms": 900_000}},
}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


def sliver(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_print_config_is_the_documented_default(capsys):
    assert sliver("--print-config") == 0
    out = capsys.readouterr().out
    assert out == DEFAULT_CONFIG_YAML and "#" in out
    assert yaml.safe_load(out) == load_config()


def test_generate_label_audit_pipeline(tiny, tmp_path):
    out = tmp_path / "run"
    assert sliver("generate", "--config", tiny, "--out", out) == 0
    assert sliver("label", "--config", tiny, "--out", out, "--paradigm", "sliver") == 0
    assert sliver("audit", "--config", tiny, "--out", out, "--paradigm", "sliver") == 0
    rep = json.loads((out / "audit-sliver.json").read_text())
    assert rep["tasks"]["click"]["accuracy"] == 1.0
    assert read_csv(out / "samples-sliver.csv")
    assert read_csv(out / "accuracy-curve.csv")
    for name in ("generate", "label-sliver", "audit"):
        assert (out / f"config.{name}.yaml").exists()
    assert not (out / "INCOMPLETE").exists()
    saved = yaml.safe_load((out / "config.generate.yaml").read_text())
    assert saved["generator"]["num_users"] == 120


def test_train_eval_report_and_model_rereco(tiny, tmp_path):
    out = tmp_path / "run"
    assert sliver("generate", "--config", tiny, "--out", out) == 0
    assert sliver("train", "--config", tiny, "--out", out, "--paradigm", "sliver", "--arch", "mmoe") == 0
    assert (out / "model-sliver-mmoe.ckpt").exists() and read_csv(out / "trace-sliver-mmoe.csv")
    assert sliver("eval", "--config", tiny, "--out", out) == 0
    assert sliver("report", "--config", tiny, "--out", out) == 0
    assert "| shared-bottom | sliver |" in (out / "report.md").read_text()
    assert sliver("rereco-sim", "--config", tiny, "--out", out, "--scorer", "model", "--checkpoint",
                  out / "model-sliver-mmoe.ckpt", "--episodes", 50) == 0
    doc = json.loads((out / "rereco.json").read_text())
    assert doc["scorer"] == "model" and doc["n"] == 50


def test_compare_matrix_shape(tiny, tmp_path):
    out = tmp_path / "run"
    assert sliver("compare", "--config", tiny, "--out", out, "--seeds", 0) == 0
    rows = read_csv(out / "comparison.csv")
    assert len(rows) == 3 and {r["paradigm"] for r in rows} == {"one-hour", "five-minute", "sliver"}
    cells = [r[f"{t}_auc"] for r in rows for t in ("click", "follow", "like")]
    assert len(cells) == 9 and all(cells)
    assert all("click_rela_impr" in r for r in rows)
    base = next(r for r in rows if r["paradigm"] == "one-hour")
    assert float(base["click_rela_impr"]) == 0.0


def test_reruns_are_byte_identical(tiny, tmp_path):
    out = tmp_path / "run"
    snapshots = []
    for _ in range(2):
        assert sliver("compare", "--config", tiny, "--out", out) == 0
        assert sliver("rereco-sim", "--config", tiny, "--out", out, "--episodes", 100) == 0
        snapshots.append({p: (out / p).read_bytes() for p in sorted(os.listdir(out))})
    assert snapshots[0] == snapshots[1]


def test_rereco_flags(tiny, tmp_path):
    out = tmp_path / "run"
    assert sliver("rereco-sim", "--config", tiny, "--out", out, "--rereco", "off", "--episodes", 100) == 0
    doc = json.loads((out / "rereco.json").read_text())
    assert doc["enabled"] is False and doc["mean_diff"] == 0.0
    assert sliver("rereco-sim", "--config", tiny, "--out", out, "--rereco-period-ms", 5000,
                  "--episodes", 100) == 0
    doc = json.loads((out / "rereco.json").read_text())
    assert doc["max_staleness_on_ms"] <= 5000 and doc["period_ms"] == 5000


def test_usage_errors_exit_one(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    assert sliver() == 1
    assert sliver("label", "--out", out, "--window-ms", 5) == 1
    assert sliver("label", "--out", out, "--paradigm", "one-hour", "--t-uni-ms", 5) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: {hash_size: 0}\n")
    assert sliver("generate", "--config", bad, "--out", out) == 1
    bad.write_text("modle: {}\n")
    assert sliver("generate", "--config", bad, "--out", out) == 1
    bad.write_text("generator: {num_users: 0}\n")
    assert sliver("generate", "--config", bad, "--out", out) == 1
    with pytest.raises(SystemExit) as e:
        sliver("generate", "--bogus")
    assert e.value.code == 1
    assert "sliver" in capsys.readouterr().err


def test_runtime_errors_exit_two_and_mark_incomplete(tiny, tmp_path):
    out = tmp_path / "empty"
    assert sliver("label", "--config", tiny, "--out", out) == 2
    assert (out / "INCOMPLETE").exists()
    assert sliver("report", "--config", tiny, "--out", out) == 2


def test_output_root_from_environment(tiny, tmp_path):
    env = {**os.environ, "SLIVER_OUTPUT_ROOT": str(tmp_path / "root")}
    res = subprocess.run([sys.executable, "-m", "sliver.cli", "generate", "--config", tiny], env=env,
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "root" / "run" / "events.jsonl").exists()
