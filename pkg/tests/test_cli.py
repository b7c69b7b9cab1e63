import csv
import io
import json
import time

import pytest
import yaml

from uncgate import cli
from uncgate.errors import NonFiniteLoss
from uncgate.metrics import read_report_csv

SMOKE = {"benchmark": {"n_train": 20, "n_val": 6, "n_test": 6},
         "mapper": {"epochs": 3}, "predictor": {"epochs": 3}, "gate": {"epochs": 3}}
ARTIFACTS = ["mapper/checkpoint.npz", "predictor-base/checkpoint.npz", "predictor-unc/checkpoint.npz",
             "gate/checkpoint.npz", "mapper/loss_curve.csv", "gate/loss_curve.csv", "eval/report.csv",
             "eval/report.json", "eval/scenes.jsonl", "eval/gate_summary.json"]


@pytest.fixture
def smoke_cfg(tmp_path):
    p = tmp_path / "smoke.yaml"
    p.write_text(yaml.safe_dump(SMOKE))
    return str(p)


def run_all(cfg, out, *extra):
    for argv in (["generate"], ["train"], ["eval", *extra]):
        assert cli.main([*argv, "--config", cfg, "--out", str(out)]) == 0


def test_smoke_pipeline_is_fast_and_deterministic(smoke_cfg, tmp_path, capsys):
    t0 = time.perf_counter()
    run_all(smoke_cfg, tmp_path / "a", "--svg", "2")
    assert time.perf_counter() - t0 < 300
    run_all(smoke_cfg, tmp_path / "b", "--svg", "2")
    for rel in ARTIFACTS + ["eval/svg/test-00000.svg"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    assert "run_meta.json" in {p.name for p in (tmp_path / "a").iterdir()}


def test_generate_creates_missing_directory_and_prints_manifest(smoke_cfg, tmp_path, capsys):
    out = tmp_path / "deep" / "nested"
    assert cli.main(["generate", "--config", smoke_cfg, "--out", str(out)]) == 0
    assert (out / "data" / "manifest.json").exists()
    assert "train: n=20" in capsys.readouterr().out


def test_report_schema_and_rebuild(smoke_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    run_all(smoke_cfg, out, "--streams", "base,gated")
    text = (out / "eval" / "report.csv").read_text()
    rows = read_report_csv(text)
    assert len(rows) == 5 * 2
    assert [r["stream"] for r in rows] == ["base"] * 5 + ["gated"] * 5
    assert [r["bin"] for r in rows[:5]] == ["[0,1)", "[1,2)", "[2,3)", "[3,inf)", "overall"]
    assert json.loads((out / "eval" / "report.json").read_text())["schema_version"] == "1.0"
    lines = (out / "eval" / "scenes.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 6
    rec = json.loads(lines[0])
    assert abs(rec["w_base"] + rec["w_unc"] - 1) < 1e-9
    (out / "eval" / "report.csv").unlink()
    assert cli.main(["report", "--config", smoke_cfg, "--out", str(out)]) == 0
    assert (out / "eval" / "report.csv").read_text() == text


def test_exit_codes(smoke_cfg, tmp_path, monkeypatch):
    out = str(tmp_path / "run")
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"benchmark": {"bin_quotas": [50, 30, 10, 5]}}))
    assert cli.main(["generate", "--config", str(bad), "--out", out]) == 2
    assert cli.main(["train", "--stage", "mapper", "--config", smoke_cfg, "--out", out]) == 3
    assert cli.main(["generate", "--config", smoke_cfg, "--out", out]) == 0
    assert cli.main(["train", "--stage", "gate", "--config", smoke_cfg, "--out", out]) == 3
    assert cli.main(["eval", "--config", smoke_cfg, "--out", out]) == 3
    assert cli.main(["report", "--config", smoke_cfg, "--out", out]) == 3
    assert cli.main(["eval", "--streams", "base,nope", "--config", smoke_cfg, "--out", out]) == 2

    def explode(*a, **k):
        raise NonFiniteLoss("loss overflow", batch_index=0)

    monkeypatch.setattr("uncgate.pipeline.train_mapper", explode)
    assert cli.main(["train", "--stage", "mapper", "--config", smoke_cfg, "--out", out]) == 4


def test_output_root_from_environment(smoke_cfg, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.ENV_OUT, str(tmp_path / "env"))
    assert cli.main(["generate", "--config", smoke_cfg]) == 0
    assert (tmp_path / "env" / "data" / "manifest.json").exists()


def test_seed_flag_changes_data_and_is_echoed(smoke_cfg, tmp_path):
    out = tmp_path / "s"
    assert cli.main(["generate", "--config", smoke_cfg, "--seed", "3", "--out", str(out)]) == 0
    eff = yaml.safe_load((out / "effective_config.yaml").read_text())
    assert eff["seed"] == 3 and eff["benchmark"]["master_seed"] == 300_000
    assert json.loads((out / "data" / "manifest.json").read_text())["master_seed"] == 300_000


def test_ablation_table_schema(tmp_path):
    cfg = {**SMOKE, "ablate": {"seeds": [0, 1]}}
    p = tmp_path / "abl.yaml"
    p.write_text(yaml.safe_dump(cfg))
    assert cli.main(["ablate", "--config", str(p), "--out", str(tmp_path / "a")]) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "a" / "ablate" / "ablation.csv").read_text())))
    variants = ["laplace_indep", "gaussian_indep", "gaussian_cov"]
    assert len(rows) == 3 * 2 + 3 * 2
    assert {(r["variant"], r["seed"]) for r in rows[:6]} == {(v, s) for v in variants for s in ("0", "1")}
    assert [(r["variant"], r["seed"]) for r in rows[6:]] == [(v, s) for v in variants for s in ("mean", "std")]
    doc = json.loads((tmp_path / "a" / "ablate" / "ablation.json").read_text())
    assert "Laplace with covariance" in doc["notes"]
