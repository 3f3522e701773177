import json
import os

import numpy as np
import pytest

from curvlink import cli, nn
from curvlink import config as C


def _run(tmp_path, *argv):
    return cli.main(list(argv) + ["--preset", "tiny", "--out", str(tmp_path)])


def _manifest(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        return json.load(fh)


def test_unknown_key_exits_1_and_writes_nothing(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"data": {"bogus": 1}}))
    out = tmp_path / "runs"
    code = cli.main(["gen-data", "--config", str(cfg), "--preset", "tiny", "--out", str(out)])
    assert code == 1
    assert not out.exists()
    assert "unknown config key" in capsys.readouterr().err


def test_gen_data_writes_manifest_and_digest_headers(tmp_path):
    assert _run(tmp_path, "gen-data", "--run-id", "a") == 0
    d = tmp_path / "a"
    man = _manifest(d)
    assert man["status"] == "ok" and man["exit_code"] == 0
    assert set(man["outputs"]) == {"data.csv", "data.json", "holdout.csv", "holdout.json"}
    assert man["config_digest"] == C.digest(C.resolve("tiny"))
    assert (d / "data.csv").read_text().startswith(f"# config_digest={man['config_digest']}\n")
    assert man["wall_time_s"] >= 0 and man["library_version"]


def test_rerun_is_byte_identical(tmp_path):
    assert _run(tmp_path, "train-ensemble", "--run-id", "a") == 0
    assert _run(tmp_path, "train-ensemble", "--run-id", "b", "--workers", "3") == 0
    a, b = _manifest(tmp_path / "a"), _manifest(tmp_path / "b")
    assert a["config_digest"] == b["config_digest"]
    assert a["outputs"] and a["outputs"] == b["outputs"]


def test_existing_run_directory_is_refused(tmp_path):
    assert _run(tmp_path, "gen-data", "--run-id", "x") == 0
    assert _run(tmp_path, "gen-data", "--run-id", "x") == 1


def test_numeric_failure_exits_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"lr": 1e308}}))
    code = cli.main(["train", "--config", str(cfg), "--preset", "tiny", "--out", str(tmp_path), "--run-id", "n"])
    assert code == 2
    man = _manifest(tmp_path / "n")
    assert man["status"] == "numeric_failure" and "Divergence" in man["error"]


def test_train_and_dp_train(tmp_path):
    assert _run(tmp_path, "train", "--run-id", "p") == 0
    model = nn.load_model(str(tmp_path / "p" / "model.crvl"))
    assert model.spec == C.model_spec(C.resolve("tiny"))
    json.loads((tmp_path / "p" / "model.json").read_text())
    assert _run(tmp_path, "train", "--run-id", "q", "--dp-eps", "2.0") == 0
    budget = json.loads((tmp_path / "q" / "budget.json").read_text())
    assert budget["epsilon"] <= 2.0 and "sampled-gaussian-approx" in budget["accounting_mode"]


def test_ensemble_round_trip_and_reuse(tmp_path):
    assert _run(tmp_path, "train-ensemble", "--run-id", "e") == 0
    ens = cli.load_ensemble(str(tmp_path / "e"))
    assert ens.K == C.resolve("tiny")["experiment"]["K"]
    assert _run(tmp_path, "curvature", "--run-id", "c", "--ensemble", str(tmp_path / "e"), "--which", "all") == 0
    lines = (tmp_path / "c" / "curvature.csv").read_text().splitlines()
    assert lines[1] == "sample_id,model_count,mean_curv,stderr_curv,mode,h,n,seed"
    assert _run(tmp_path, "memorization", "--run-id", "m", "--ensemble", str(tmp_path / "e")) == 0
    fits = json.loads((tmp_path / "m" / "fits.json").read_text())
    assert len(fits["topk"]) == C.resolve("tiny")["experiment"]["top_k"]
    assert _manifest(tmp_path / "m")["inputs"]


def test_workers_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("CURVLINK_WORKERS", "2")
    assert _run(tmp_path, "gen-data", "--run-id", "w") == 0
    assert _manifest(tmp_path / "w")["workers"] == 2
    monkeypatch.setenv("CURVLINK_WORKERS", "lots")
    assert _run(tmp_path, "gen-data", "--run-id", "w2") == 1


def test_dp_sweep_and_refit(tmp_path):
    assert _run(tmp_path, "dp-sweep", "--run-id", "s") == 0
    d = tmp_path / "s"
    for name in ("sweep.csv", "fig6_losseps.dat", "fig7_curveps.dat", "fits.json", "verification.json"):
        assert (d / name).is_file()
    assert cli.main(["fit", "--run", str(d), "--preset", "tiny", "--out", str(tmp_path), "--run-id", "f"]) == 0
    refit = json.loads((tmp_path / "f" / "fits.json").read_text())
    orig = json.loads((d / "fits.json").read_text())
    for key in ("a", "b", "c"):
        assert refit["loss_vs_eps"]["params"][key] == pytest.approx(orig["loss_vs_eps"]["params"][key], rel=1e-9)


def test_fit_without_figures_is_an_error(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["fit", "--run", str(empty), "--preset", "tiny", "--out", str(tmp_path),
                     "--run-id", "f"]) == 1


# ---------------------------------------------------------------- report


def test_empty_report(capsys):
    assert cli.main(["report"]) == 0
    text, doc = cli.build_report([])
    assert doc == {"runs": [], "missing_manifests": [], "warnings": []}


def test_report_lists_missing_manifests(tmp_path):
    text, doc = cli.build_report([str(tmp_path)])
    assert doc["missing_manifests"] == [str(tmp_path)]
    assert "missing manifests" in text


def test_report_warns_on_mixed_versions(tmp_path):
    for name, version in (("r1", "0.1.0"), ("r2", "9.9.9")):
        (tmp_path / name).mkdir()
        (tmp_path / name / "manifest.json").write_text(json.dumps(
            {"command": "gen-data", "status": "ok", "library_version": version, "outputs": {}}))
    text, doc = cli.build_report([str(tmp_path / "r1"), str(tmp_path / "r2")])
    assert "WARNINGS" in text and len(doc["warnings"]) == 1


def test_verify_tiny_report_has_verdict_rows(tmp_path):
    assert _run(tmp_path, "verify", "--run-id", "v") == 0
    d = tmp_path / "v"
    ver = json.loads((d / "verification.json").read_text())
    names = {r["bound_name"].split("_bin")[0] for r in ver["reports"]}
    assert {"thm1", "thm2", "thm3", "lemma1", "lossdiff", "curv_intermediate"} <= names
    text, doc = cli.build_report([str(d)])
    for row in ("Theorem 1 (bins)", "Theorem 2", "Theorem 3", "Lemma 1"):
        assert row in text
    out = tmp_path / "rep"
    assert cli.main(["report", str(d), "--out", str(out)]) == 0
    assert json.loads((out / "report.json").read_text())["runs"][0]["command"] == "verify"
    assert np.isfinite(json.loads((d / "fits.json").read_text())["loss_vs_eps"]["params"]["a"])
