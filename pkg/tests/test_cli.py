import csv
import json

import numpy as np
import pytest

from mmvmlab import cli
from mmvmlab.errors import ConfigError, NumericError
from mmvmlab.model import load_checkpoint

SMALL = ["--n-modalities", "2", "--n-classes", "3", "--n-train", "90", "--n-test", "60",
         "--dims", "5,4", "--seed", "2"]
FAST = ["--epochs", "2", "--hidden", "8", "--batch-size", "32"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--out", str(out), *SMALL]) == 0
    return out


def test_gen_data_outputs(data_dir):
    assert {p.name for p in data_dir.iterdir()} >= {"train.mmds", "test.mmds", "manifest.json"}
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["config"]["n_classes"] == 3 and len(manifest["dataset_hash"]) == 64


def test_gen_data_deterministic(data_dir, tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path), *SMALL]) == 0
    for name in ("train.mmds", "test.mmds", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()


def test_gen_data_from_config_file_with_override(tmp_path):
    conf = tmp_path / "cfg.json"
    conf.write_text(json.dumps({"n_modalities": 2, "n_classes": 4, "dims": [3, 3], "n_train": 20,
                                "n_test": 10}))
    assert cli.main(["gen-data", "--config", str(conf), "--n-classes", "3", "--out", str(tmp_path / "d")]) == 0
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["config"]["n_classes"] == 3


def test_single_class_rejected(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path), "--n-classes", "1"]) == 2
    assert "n_classes" in capsys.readouterr().err


def test_bad_flag_is_config_error():
    assert cli.main(["train", "--strategy", "vamp"]) == 2


def test_train_and_eval(data_dir, tmp_path):
    run = tmp_path / "r0"
    assert cli.main(["train", "--data", str(data_dir), "--strategy", "mmvm", "--beta", "0.001", "--seed", "0",
                     "--out", str(run), "--log-interval", "2", *FAST]) == 0
    assert (run / "checkpoint.mmck").is_file() and (run / "metrics.json").is_file()
    model, header = load_checkpoint(run / "checkpoint.mmck")
    assert header["run_config"]["beta"] == 0.001 and header["run_config"]["epochs"] == 2
    doc = json.loads((run / "metrics.json").read_text())
    steps = [e["step"] for e in doc["objective_trace"]]
    assert steps == [0, 2, 4, 5]

    sweep_csv = tmp_path / "rows.csv"
    for _ in range(2):
        assert cli.main(["eval", "--run", str(run), "--data", str(data_dir), "--csv", str(sweep_csv),
                         "--deterministic"]) == 0
    rows = list(csv.reader(open(sweep_csv)))
    assert rows[0][-1] == "status" and len(rows) == 3 and rows[1] == rows[2]
    metrics = json.loads((run / "metrics.json").read_text())
    assert metrics["config"]["strategy"] == "mmvm" and len(metrics["objective_trace"]) == 4
    assert any(p.suffix == ".npz" for p in (data_dir / ".coherence-cache").iterdir())


def test_train_config_file_echoed(data_dir, tmp_path):
    conf = tmp_path / "run.json"
    conf.write_text(json.dumps({"strategy": "poe", "beta": 2.0, "epochs": 1, "hidden": [4]}))
    run = tmp_path / "r"
    assert cli.main(["train", "--config", str(conf), "--beta", "0.25", "--data", str(data_dir),
                     "--out", str(run)]) == 0
    _, header = load_checkpoint(run / "checkpoint.mmck")
    assert header["strategy"] == "poe" and header["beta"] == 0.25
    assert header["run_config"]["hidden"] == [4]


def test_eval_dimension_mismatch(data_dir, tmp_path, capsys):
    other = tmp_path / "other"
    assert cli.main(["gen-data", "--out", str(other), "--n-modalities", "2", "--dims", "3,3",
                     "--n-classes", "3", "--n-train", "30", "--n-test", "30"]) == 0
    run = tmp_path / "r"
    assert cli.main(["train", "--data", str(data_dir), "--strategy", "avg", "--out", str(run), *FAST]) == 0
    assert cli.main(["eval", "--run", str(run), "--data", str(other)]) == 2
    err = capsys.readouterr().err
    assert "[5, 4]" in err and "[3, 3]" in err


def test_divergence_exit_code(tmp_path):
    data = tmp_path / "huge"
    run = tmp_path / "r"
    with np.errstate(all="ignore"):
        # features overflow float32 to inf
        assert cli.main(["gen-data", "--out", str(data), "--n-modalities", "2", "--dims", "3,3",
                         "--class-scale", "1e100", "--n-train", "20", "--n-test", "10"]) == 0
        code = cli.main(["train", "--data", str(data), "--strategy", "independent", "--out", str(run), *FAST])
    assert code == 3
    assert (run / "checkpoint.mmck").is_file()
    _, header = load_checkpoint(run / "checkpoint.mmck")
    assert header["diverged_at_step"] == 0


def test_missing_dataset_is_config_error(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "r")]) == 2


def test_sweep_combinatorics_and_aggregate(data_dir, tmp_path):
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--data", str(data_dir), "--out", str(out), "--strategies", "independent,mmvm",
                     "--betas", "2^-3,1", "--seeds", "0,1", *FAST]) == 0
    rows = cli.read_sweep_csv(out / "sweep.csv")
    assert len(rows) == 8 and all(r["status"] == "ok" for r in rows)
    assert [(r["strategy"], float(r["beta"]), int(r["seed"])) for r in rows] == \
        cli.SweepSpec(("independent", "mmvm"), (0.125, 1.0), (0, 1)).cells()
    agg = list(csv.DictReader(open(out / "aggregate.csv")))
    assert len(agg) == 4
    for a in agg:
        grp = [r for r in rows if r["strategy"] == a["strategy"] and float(r["beta"]) == float(a["beta"])]
        vals = [float(r["recon_total"]) for r in grp]
        assert float(a["recon_total_mean"]) == pytest.approx(np.mean(vals), rel=1e-15)
        assert float(a["recon_total_std"]) == pytest.approx(np.std(vals), rel=1e-12, abs=1e-15)
        assert int(a["n_seeds"]) == 2


def test_sweep_records_failures_and_continues(data_dir, tmp_path, monkeypatch):
    real = cli.train

    def flaky(model, data, cfg, rng=None, **kw):
        if cfg.strategy == "poe":
            raise NumericError("synthetic failure")
        return real(model, data, cfg, rng, **kw)

    monkeypatch.setattr(cli, "train", flaky)
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--data", str(data_dir), "--out", str(out), "--strategies", "poe,avg",
                     "--betas", "1", "--seeds", "0", *FAST]) == 0
    rows = cli.read_sweep_csv(out / "sweep.csv")
    assert [r["status"] for r in rows] == ["numeric-error: synthetic failure", "ok"]
    assert len(list(csv.DictReader(open(out / "aggregate.csv")))) == 1


def test_sweep_appends_without_overwriting(data_dir, tmp_path):
    out = tmp_path / "sweep"
    args = ["sweep", "--data", str(data_dir), "--out", str(out), "--strategies", "avg", "--betas", "1",
            "--seeds", "0", *FAST]
    assert cli.main(args) == 0 and cli.main(args) == 0
    assert len(cli.read_sweep_csv(out / "sweep.csv")) == 2


def test_worker_count(monkeypatch):
    monkeypatch.delenv("MMVAE_THREADS", raising=False)
    assert cli.worker_count() == 1 and cli.worker_count(3) == 3
    monkeypatch.setenv("MMVAE_THREADS", "2")
    assert cli.worker_count() == 2 and cli.worker_count(8) == 2
    monkeypatch.setenv("MMVAE_THREADS", "many")
    with pytest.raises(ConfigError):
        cli.worker_count(2)


def test_parallel_sweep_matches_serial(data_dir, tmp_path):
    common = ["--data", str(data_dir), "--strategies", "independent", "--betas", "1", "--seeds", "0,1",
              "--deterministic", *FAST]
    assert cli.main(["sweep", "--out", str(tmp_path / "a"), *common]) == 0
    assert cli.main(["sweep", "--out", str(tmp_path / "b"), "--workers", "2", *common]) == 0
    assert (tmp_path / "a" / "sweep.csv").read_text() == (tmp_path / "b" / "sweep.csv").read_text()


def test_rerun_from_echoed_config_is_bit_exact(data_dir, tmp_path):
    first = tmp_path / "a"
    assert cli.main(["train", "--data", str(data_dir), "--strategy", "moe", "--beta", "0.5", "--seed", "4",
                     "--out", str(first), *FAST]) == 0
    model_a, header = load_checkpoint(first / "checkpoint.mmck")
    echoed = tmp_path / "echo.json"
    echoed.write_text(json.dumps({**header["run_config"], "out_dir": str(tmp_path / "b")}))
    assert cli.main(["train", "--config", str(echoed)]) == 0
    model_b, _ = load_checkpoint(tmp_path / "b" / "checkpoint.mmck")
    assert model_a.params.to_bytes() == model_b.params.to_bytes()
    trace_a = json.loads((first / "metrics.json").read_text())["objective_trace"]
    trace_b = json.loads((tmp_path / "b" / "metrics.json").read_text())["objective_trace"]
    assert trace_a == trace_b
