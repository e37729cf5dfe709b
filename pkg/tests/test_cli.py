import json
import subprocess
import sys

import numpy as np
import pytest

from viashap.cli import RunConfig, UsageError, parse_config, run
from viashap.io import load_model


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    x = rng.normal(size=(240, 4))
    y = (x[:, 0] + 0.5 * x[:, 1] * x[:, 2] > 0).astype(int)
    colour = rng.choice(["red", "green"], size=240)
    lines = ["a,b,c,d,colour,label"] + [
        ",".join([*(f"{v:.5f}" for v in row), c, "yes" if t else "no"]) for row, c, t in zip(x, colour, y)
    ]
    (root / "d.csv").write_text("\n".join(lines) + "\n")
    (root / "m.json").write_text(json.dumps({"data": "d.csv", "label": "label", "hints": {"colour": "categorical"}}))
    (root / "small.json").write_text(json.dumps({"hidden": [6, 6], "max_epochs": 2, "coalitions": 4,
                                                 "batch_size": 64, "oracle_max_samples": 4000}))
    out = root / "run"
    assert run(["train", "--data", str(root / "m.json"), "--config", str(root / "small.json"), "--out", str(out)]) == 0
    return root, out


def common(root, out):
    return ["--data", str(root / "m.json"), "--config", str(root / "small.json"), "--out", str(out)]


# -- configuration ----------------------------------------------------------------


def test_defaults_from_empty_file(tmp_path):
    (tmp_path / "c.json").write_text("")
    cfg = parse_config(["train", "--config", str(tmp_path / "c.json")])
    assert (cfg.beta, cfg.coalitions, cfg.backbone, cfg.link, cfg.efficiency) == (10.0, 32, "kan-spline", "auto", "on")
    assert cfg == parse_config(["train"])


def test_flag_overrides_file(tmp_path):
    (tmp_path / "c.json").write_text('{"beta": 1, "seed": 4}')
    cfg = parse_config(["train", "--config", str(tmp_path / "c.json"), "--beta", "5"])
    assert cfg.beta == 5.0 and cfg.seed == 4


def test_malformed_file_reports_position(tmp_path):
    (tmp_path / "c.json").write_text('{\n  "beta": 1,\n  oops\n}')
    with pytest.raises(UsageError, match="line 3, column 3"):
        parse_config(["train", "--config", str(tmp_path / "c.json")])


def test_unknown_key_and_type_mismatch(tmp_path):
    (tmp_path / "a.json").write_text('{"betta": 1}')
    with pytest.raises(UsageError, match="valid keys"):
        parse_config(["train", "--config", str(tmp_path / "a.json")])
    (tmp_path / "b.json").write_text('{"coalitions": "many"}')
    with pytest.raises(UsageError, match="wrong type"):
        parse_config(["train", "--config", str(tmp_path / "b.json")])
    (tmp_path / "c.json").write_text('{"relaxed": 1}')
    with pytest.raises(UsageError):
        parse_config(["train", "--config", str(tmp_path / "c.json")])


def test_usage_errors_exit_nonzero(capsys):
    assert run(["fly"]) == 2
    assert run(["train", "--bogus", "1"]) == 2
    assert run(["ablate", "--data", "x"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_model_is_an_error(workspace, tmp_path, capsys):
    root, _ = workspace
    assert run(["explain", *common(root, tmp_path / "none")]) == 1
    assert "not found" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "viashap", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "ablate" in res.stdout


# -- commands ---------------------------------------------------------------------


def test_train_writes_artifacts(workspace):
    _, out = workspace
    for name in ("model.bin", "config.json", "epochs.tsv", "metrics.json"):
        assert (out / name).exists()
    assert len((out / "epochs.tsv").read_text().strip().splitlines()) == 3
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["local_accuracy_max_gap"] <= 1e-6
    net = load_model(out / "model.bin").net
    assert net.spec.feature_names == ["a", "b", "c", "d", "colour"] and net.spec.output_labels == ["yes"]


def test_rerun_from_echoed_config_is_bit_identical(workspace, tmp_path):
    _, out = workspace
    cfg = json.loads((out / "config.json").read_text())
    cfg["out"] = str(tmp_path / "again")
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run(["train", "--config", str(tmp_path / "c.json")]) == 0
    assert (tmp_path / "again" / "epochs.tsv").read_bytes() == (out / "epochs.tsv").read_bytes()
    assert (tmp_path / "again" / "model.bin").read_bytes() == (out / "model.bin").read_bytes()


def test_explain_and_predict_shapes(workspace, tmp_path):
    root, out = workspace
    args = [*common(root, tmp_path), "--model", str(out / "model.bin"), "--rows", "7"]
    assert run(["explain", *args]) == 0 and run(["predict", *args]) == 0
    rows = (tmp_path / "attributions.tsv").read_text().strip().splitlines()
    assert len(rows) == 8 and all(len(r.split("\t")) == 1 + 5 for r in rows)
    assert rows[0].split("\t")[1] == "a:yes"
    preds = (tmp_path / "predictions.tsv").read_text().strip().splitlines()
    assert len(preds) == 8


def test_oracle_fidelity_and_curves(workspace, tmp_path):
    root, out = workspace
    args = [*common(root, tmp_path), "--model", str(out / "model.bin"), "--rows", "3", "--oracle-tolerance", "0.05"]
    assert run(["eval-fidelity", *args]) == 0
    summary = json.loads((tmp_path / "metrics.json").read_text())
    assert summary["instances"] == 3
    assert len((tmp_path / "oracle.tsv").read_text().strip().splitlines()) == 1 + 3 * 5
    assert run(["curves", *args[:-2]]) == 0
    curves = (tmp_path / "curves.tsv").read_text().strip().splitlines()
    assert curves[0] == "fraction\tinclusion\texclusion" and len(curves) == 11


def test_threads_do_not_change_oracle(workspace, tmp_path):
    root, out = workspace
    base = ["--model", str(out / "model.bin"), "--rows", "4", "--oracle-tolerance", "0.05"]
    assert run(["oracle", *common(root, tmp_path / "one"), *base]) == 0
    assert run(["oracle", *common(root, tmp_path / "two"), *base, "--threads", "2"]) == 0
    assert (tmp_path / "one" / "oracle.tsv").read_text() == (tmp_path / "two" / "oracle.tsv").read_text()


def test_benchmark_writes_timing(workspace, tmp_path):
    root, out = workspace
    args = [*common(root, tmp_path), "--model", str(out / "model.bin"), "--instances", "100",
            "--oracle-tolerance", "0.1"]
    assert run(["benchmark", *args]) == 0
    timing = (tmp_path / "timing.tsv").read_text().strip().splitlines()
    assert [t.split("\t")[0] for t in timing[1:]] == ["amortized", "unbiased_kernelshap"]
    assert json.loads((tmp_path / "metrics.json").read_text())["speedup"] > 0


def test_ablate_beta_gives_one_row_per_value(workspace, tmp_path):
    root, _ = workspace
    assert run(["ablate", *common(root, tmp_path), "--sweep", "beta", "--rows", "2", "--max-epochs", "1",
                "--oracle-tolerance", "0.1"]) == 0
    rows = (tmp_path / "ablation.tsv").read_text().strip().splitlines()
    assert len(rows) == 5
    assert [float(r.split("\t")[1]) for r in rows[1:]] == [0.1, 1.0, 10.0, 100.0]


def test_runconfig_json_round_trip():
    cfg = RunConfig(command="train", data="m.json")
    assert RunConfig(**json.loads(cfg.to_json())) == cfg
