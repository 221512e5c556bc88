import csv
import json
import math
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from studentflow.checkpoint import load_model
from studentflow.cli import main
from studentflow.config import ConfigError, default_config, resolve_config
from studentflow.experiments import grid_table, stability_outcome

FIXTURES = Path(__file__).parent / "fixtures"
TINY = ["--set", "model.K=2", "--set", "model.hidden=8", "--set", "data.n=300"]


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


# -- config ---------------------------------------------------------------------------------

def test_defaults_validate_for_every_experiment():
    for exp in ("fig1", "train", "stability", "grid"):
        cfg = resolve_config(exp)
        assert cfg["experiment"] == exp


def test_override_parsing():
    cfg = resolve_config("train", overrides=["train.max_steps=7", "model.nu=inf", "model.activation=relu",
                                             "train.clip={\"kind\": \"norm\", \"threshold\": 100}"])
    assert cfg["train"]["max_steps"] == 7
    assert cfg["model"]["nu"] == "inf"
    assert cfg["model"]["activation"] == "relu"
    assert cfg["train"]["clip"] == {"kind": "norm", "threshold": 100}


def test_schedule_fields_and_kind_switch():
    cfg = resolve_config("train", overrides=["train.lr_schedule.lr=3e-3"])
    assert cfg["train"]["lr_schedule"] == {"kind": "constant", "lr": 3e-3}
    cfg = resolve_config("train", overrides=[
        'train.lr_schedule={"kind": "cosine", "lr_start": 1e-3, "lr_end": 1e-4, "total_steps": 10}',
        "train.lr_schedule.total_steps=20"])
    assert cfg["train"]["lr_schedule"]["total_steps"] == 20
    # switching only the kind leaves the constant schedule's lr behind, which is reported
    with pytest.raises(ConfigError) as info:
        resolve_config("train", overrides=["train.lr_schedule.kind=cosine"])
    assert info.value.field == "train.lr_schedule.lr"


@pytest.mark.parametrize("override,field", [
    ("train.max_steps=-1", "train.max_steps"),
    ("train.batch_size=1.5", "train.batch_size"),
    ("model.nu=-3", "model.nu"),
    ("model.base=cauchy", "model.base"),
    ("data.outliers.fraction=0.9", "data.outliers.fraction"),
    ("data.split=[0.5,0.5]", "data.split"),
    ("train.clip.kind=norm", "train.clip.threshold"),
    ("model.widthz=3", "model.widthz"),
    ("seed=-4", "seed"),
])
def test_config_errors_name_field(override, field):
    with pytest.raises(ConfigError) as info:
        resolve_config("train", overrides=[override])
    assert info.value.field == field


def test_file_then_overrides(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"experiment": "train", "model": {"K": 3}, "train": {"max_steps": 5}}))
    from studentflow.config import load_config_file
    cfg = resolve_config("train", load_config_file(f), ["train.max_steps=9"], seed=4, out="x")
    assert cfg["model"]["K"] == 3 and cfg["train"]["max_steps"] == 9 and cfg["seed"] == 4 and cfg["out"] == "x"
    assert cfg["model"]["hidden"] == default_config("train")["model"]["hidden"]


# -- subcommands -------------------------------------------------------------------------------

def test_fig1_command(tmp_path, capsys):
    code, out, _ = _run(capsys, "fig1", "--out", str(tmp_path))
    assert code == 0 and json.loads(out)["diverged"] is False
    for fam in ("gaussian", "laplace", "student_t"):
        rows = list(csv.reader(open(tmp_path / f"fig1_{fam}.csv")))
        assert rows[0] == ["epsilon", "density", "penalty", "influence"]
    ET.parse(tmp_path / "fig1.svg")
    assert json.loads((tmp_path / "config.json").read_text())["fig1"]["nu"] == 5.0
    assert "done" in (tmp_path / "run.log").read_text()


def test_train_zero_steps_gives_initialized_checkpoint(tmp_path, capsys):
    code, _, _ = _run(capsys, "train", "--out", str(tmp_path), "--set", "train.max_steps=0", *TINY)
    assert code == 0
    model = load_model(tmp_path / "model.json")
    assert model.initialized
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("0,")
    for name in ("config.json", "run.log", "summary.json"):
        assert (tmp_path / name).exists()


def test_train_rerun_bitwise_identical(tmp_path, capsys):
    args = ["train", "--seed", "3", "--set", "train.max_steps=30", "--set", "train.eval_every=10", *TINY]
    for d in ("a", "b"):
        assert _run(capsys, *args, "--out", str(tmp_path / d))[0] == 0
    for name in ("metrics.csv", "model.json", "summary.json", "config.json"):
        a, b = (tmp_path / "a" / name).read_bytes(), (tmp_path / "b" / name).read_bytes()
        if name == "config.json":
            a, b = (json.loads(x) for x in (a, b))
            a.pop("out"), b.pop("out")
        assert a == b, name


def test_train_checkpoint_cadence(tmp_path, capsys):
    code, _, _ = _run(capsys, "train", "--out", str(tmp_path), "--set", "train.max_steps=20",
                      "--set", "train.eval_every=5", "--set", "train.checkpoint_every=10", *TINY)
    assert code == 0
    assert sorted(p.name for p in tmp_path.glob("model_step*.json")) == [
        "model_step0.json", "model_step10.json", "model_step20.json"]


def test_train_on_idx_images(tmp_path, capsys):
    code, _, err = _run(capsys, "train", "--out", str(tmp_path), "--set", "data.source=idx",
                        "--set", f"data.path={FIXTURES / 'images4.idx'}", "--set", "data.downsample=8",
                        "--set", "data.split=[0.5,0.25,0.25]", "--set", "model.L=2", "--set", "model.K=1",
                        "--set", "model.hidden=4", "--set", "train.max_steps=3", "--set", "train.batch_size=2",
                        "--set", "train.eval_every=1")
    assert code == 0, err
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["units"] == "bits/dim"
    assert load_model(tmp_path / "model.json").input_shape == (1, 8, 8)


def test_exit_code_config_error(tmp_path, capsys):
    code, _, err = _run(capsys, "train", "--out", str(tmp_path), "--set", "train.max_steps=abc")
    assert code == 2
    assert json.loads(err) == {"error": "config", "field": "train.max_steps",
                               "message": "train.max_steps: expected a number, got 'abc'"}


def test_exit_code_bad_config_file(tmp_path, capsys):
    f = tmp_path / "c.json"
    f.write_text('{"train": {"max_steps": 5,}}')
    code, _, err = _run(capsys, "train", "--config", str(f))
    assert code == 2 and "offset" in json.loads(err)["message"]
    code, _, err = _run(capsys, "train", "--config", str(tmp_path / "missing.json"))
    assert code == 2


def test_exit_code_unknown_command(capsys):
    assert _run(capsys, "nonsense")[0] == 2
    assert _run(capsys)[0] == 2


def test_exit_code_data_error_with_offset(tmp_path, capsys):
    code, _, err = _run(capsys, "train", "--out", str(tmp_path), "--set", "data.source=idx",
                        "--set", f"data.path={FIXTURES / 'images4_truncated.idx'}")
    assert code == 3
    payload = json.loads(err)
    assert payload["error"] == "data" and payload["offset"] == 1000


def test_exit_code_missing_data_file(tmp_path, capsys):
    code, _, err = _run(capsys, "train", "--out", str(tmp_path), "--set", "data.source=idx",
                        "--set", f"data.path={tmp_path / 'nope.idx'}")
    assert code == 3


def test_exit_code_divergence(tmp_path, capsys):
    code, out, _ = _run(capsys, "train", "--out", str(tmp_path), "--set", "model.K=1", "--set", "model.hidden=8",
                        "--set", "data.n=300", "--set", "train.lr_schedule.lr=50", "--set", "train.max_steps=400",
                        "--set", "model.base=gaussian")
    assert code == 4 and json.loads(out)["diverged"] is True
    assert json.loads((tmp_path / "summary.json").read_text())["status"] == "diverged"


def test_stability_command_small(tmp_path, capsys):
    code, _, _ = _run(capsys, "stability", "--out", str(tmp_path), "--set", "stability.seeds=[0,1]",
                      "--set", "train.max_steps=20", "--set", "train.eval_every=10", *TINY)
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert len(rows) == 2 * 2 * 3
    assert {r["variant"] for r in rows} == {"gaussian", "gaussian_clip", "student_t"}
    assert {r["clip_norm"] for r in rows if r["variant"] == "gaussian_clip"} == {"100.0"}
    for lr in ("low", "high"):
        ET.parse(tmp_path / f"loss_{lr}.svg")
        assert (tmp_path / lr / "student_t" / "seed1" / "model.json").exists()
    outcome = json.loads((tmp_path / "outcome.json").read_text())
    assert outcome["low"]["seeds"] == 2


def test_grid_command_small(tmp_path, capsys):
    code, _, _ = _run(capsys, "grid", "--out", str(tmp_path), "--set", "grid.seeds=[0]",
                      "--set", "grid.nus=[\"inf\",50]", "--set", "train.max_steps=20",
                      "--set", "train.eval_every=10", "--set", "train.lr_schedule.total_steps=20", *TINY)
    assert code == 0
    table = list(csv.DictReader(open(tmp_path / "table.csv")))
    assert [(r["train"], r["test"]) for r in table] == [("clean", "clean"), ("clean", "outliers"),
                                                       ("outliers", "clean"), ("outliers", "outliers")]
    assert all(float(r["delta_nu=inf"]) == 0.0 for r in table)
    runs = list(csv.DictReader(open(tmp_path / "runs.csv")))
    assert len(runs) == 2 * 2 * 2
    audit = json.loads((tmp_path / "contamination.json").read_text())
    assert audit["seeds"] == [0]
    cell = next(c for c in audit["cells"] if c["train"] == "outliers")
    assert {o["split"] for o in cell["outliers"]["train"]} == {"train", "val"}
    assert [o["split"] for o in cell["outliers"]["test"]] == ["test"]
    assert len(cell["outliers"]["test"][0]["rows"]) == math.ceil(0.01 * 30)


def test_grid_rerun_identical(tmp_path, capsys):
    args = ["grid", "--set", "grid.seeds=[0]", "--set", "grid.nus=[\"inf\",1000]", "--set", "train.max_steps=10",
            "--set", "train.eval_every=5", "--set", "train.lr_schedule.total_steps=10", *TINY]
    for d in ("a", "b"):
        assert _run(capsys, *args, "--out", str(tmp_path / d))[0] == 0
    assert (tmp_path / "a" / "table.csv").read_bytes() == (tmp_path / "b" / "table.csv").read_bytes()


def test_grid_parallel_workers_match_serial(tmp_path, capsys):
    args = ["grid", "--set", "grid.seeds=[0]", "--set", "grid.nus=[\"inf\",20]", "--set", "train.max_steps=10",
            "--set", "train.eval_every=5", "--set", "train.lr_schedule.total_steps=10", *TINY]
    assert _run(capsys, *args, "--out", str(tmp_path / "serial"))[0] == 0
    assert _run(capsys, *args, "--out", str(tmp_path / "par"), "--set", "workers=2")[0] == 0
    assert (tmp_path / "serial" / "table.csv").read_bytes() == (tmp_path / "par" / "table.csv").read_bytes()


# -- report helpers ----------------------------------------------------------------------------

def test_stability_outcome_counts():
    rows = []
    for seed, (g_status, g_val, t_val) in enumerate([("converged", 3.0, 1.0), ("diverged", math.inf, 1.0),
                                                       ("converged", 1.2, 1.0)]):
        rows += [
            {"lr_label": "high", "variant": "gaussian", "seed": seed, "status": g_status, "final_val_nll": g_val},
            {"lr_label": "high", "variant": "gaussian_clip", "seed": seed, "status": "converged", "final_val_nll": 1.0},
            {"lr_label": "high", "variant": "student_t", "seed": seed, "status": "converged", "final_val_nll": t_val},
        ]
    out = stability_outcome(rows, 1.5)["high"]
    assert out["gaussian_unstable"] == 2
    assert out["converged"] == {"gaussian": 2, "gaussian_clip": 3, "student_t": 3}


def test_grid_table_delta_reference():
    runs = [["clean", "clean", "inf", 0, "converged", 1.0, 0.0],
            ["clean", "clean", "50", 0, "converged", 0.9, -0.1],
            ["clean", "clean", "inf", 1, "converged", 2.0, 0.0],
            ["clean", "clean", "50", 1, "converged", 1.7, -0.3]]
    table = grid_table(runs, [math.inf, 50.0])
    assert table[0]["nll"]["inf"] == 1.5
    assert table[0]["delta"]["inf"] == 0.0
    assert table[0]["delta"]["50"] == pytest.approx(-0.2)
    assert math.isnan(table[1]["nll"]["50"])
