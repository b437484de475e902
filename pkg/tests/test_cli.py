"""Command line: config validation, reproducible outputs, and exit codes."""

import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from elcontrol.cli import main
from elcontrol.control import design_lqr
from elcontrol.model import ELModel, ModelArch, ModelDims, load_model, read_csv, save_model

TINY_ARCH = dict(phi_depth=1, phi_hidden=8, psi_depth=1, psi_hidden=8,
                 xi_depth=2, xi_hidden=8, core_hidden=8)
TINY_DIMS = dict(ny=2, nu=2, nd=1, nz=1)


def write_config(path, cfg):
    with open(path, "w") as f:
        yaml.safe_dump(cfg, f)
    return str(path)


def run_cli(tmp_path, command, cfg, name="config.yaml", extra=()):
    config = write_config(tmp_path / name, cfg)
    return main([command, "--config", config, *extra])


def gen_config(out, duration=2.0, kind="teacher"):
    plant = ({"kind": "teacher", "seed": 7, "dims": TINY_DIMS, "arch": TINY_ARCH}
             if kind == "teacher" else {"kind": "mismatch"})
    return {
        "seed": 5,
        "output": str(out),
        "plant": plant,
        "dataset": {"duration": duration, "step": 0.005, "fd_tol": 0.05},
        "excitation": {
            "v": {"kind": "sum-of-sines", "period": 0.1, "low": -1.0, "high": 1.0,
                  "seed": 11},
            "d": {"kind": "sum-of-sines", "period": 0.2, "low": -0.5, "high": 0.5,
                  "seed": 12},
        },
    }


@pytest.fixture(scope="module")
def teacher_run(tmp_path_factory):
    """One gen-data run shared by the tests that need a dataset and a model."""
    root = tmp_path_factory.mktemp("teacher")
    out = root / "gen"
    assert main(["gen-data", "--config",
                 write_config(root / "gen.yaml", gen_config(out))]) == 0
    return out


# ---------------------------------------------------------------------------
# shared behavior: echo, hash, seed override, output dir, unknown keys

def test_run_writes_config_echo_and_hash(tmp_path):
    cfg = {"output": str(tmp_path / "run"),
           "system": {"fixture": "integrator-chain", "n": 3},
           "domain": {"low": -1.0, "high": 1.0}, "samples": 10}
    config = write_config(tmp_path / "config.yaml", cfg)
    assert main(["check-linearizable", "--config", config]) == 0
    raw = open(config).read()
    echoed = open(tmp_path / "run" / "config.echo.yaml").read()
    assert echoed == raw
    summary = json.load(open(tmp_path / "run" / "summary.json"))
    assert summary["config_sha256"] == hashlib.sha256(raw.encode()).hexdigest()
    assert summary["command"] == "check-linearizable"
    assert "config.echo.yaml" in summary["outputs"]
    assert "report.json" in summary["outputs"]


def test_seed_flag_overrides_config_seed(tmp_path):
    cfg = {"seed": 3, "output": str(tmp_path / "a"),
           "system": {"fixture": "integrator-chain"},
           "domain": {"low": -1.0, "high": 1.0}, "samples": 8}
    assert run_cli(tmp_path, "check-linearizable", cfg, extra=["--seed", "9"]) == 0
    summary = json.load(open(tmp_path / "a" / "summary.json"))
    assert summary["seed"] == 9
    report = json.load(open(tmp_path / "a" / "report.json"))
    cfg["output"] = str(tmp_path / "b")
    assert run_cli(tmp_path, "check-linearizable", cfg, name="b.yaml") == 0
    other = json.load(open(tmp_path / "b" / "report.json"))
    assert report["points"] != other["points"]


def test_out_flag_overrides_config_output(tmp_path):
    cfg = {"output": str(tmp_path / "ignored"),
           "system": {"fixture": "integrator-chain"},
           "domain": {"low": -1.0, "high": 1.0}, "samples": 5}
    assert run_cli(tmp_path, "check-linearizable", cfg,
                   extra=["--out", str(tmp_path / "chosen")]) == 0
    assert (tmp_path / "chosen" / "report.json").exists()
    assert not (tmp_path / "ignored").exists()


def test_missing_output_dir_is_an_error(tmp_path, capsys):
    cfg = {"system": {"fixture": "integrator-chain"},
           "domain": {"low": -1.0, "high": 1.0}}
    assert run_cli(tmp_path, "check-linearizable", cfg) == 1
    assert "output" in capsys.readouterr().err


@pytest.mark.parametrize("mutate", [
    lambda cfg: cfg.update(extra_section=1),
    lambda cfg: cfg["dataset"].update(typo_key=3),
    lambda cfg: cfg["excitation"]["v"].update(amplitude=2.0),
    lambda cfg: cfg["plant"].update(model="x.npz", kind="mismatch"),
])
def test_unknown_config_keys_are_rejected(tmp_path, capsys, mutate):
    cfg = gen_config(tmp_path / "out", duration=0.0, kind="teacher")
    mutate(cfg)
    assert run_cli(tmp_path, "gen-data", cfg) == 1
    assert "unknown keys" in capsys.readouterr().err


def test_malformed_yaml_is_a_clean_error(tmp_path, capsys):
    config = tmp_path / "config.yaml"
    config.write_text("output: [unclosed\n")
    assert main(["gen-data", "--config", str(config)]) == 1
    assert "error:" in capsys.readouterr().err


def test_missing_config_file_is_a_clean_error(tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "nope.yaml")]) == 1
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# gen-data

def test_gen_data_dataset_round_trips(teacher_run):
    ds = read_csv(teacher_run / "dataset.csv")
    assert len(ds) == 401
    assert ds.v.shape == (401, 2) and ds.d.shape == (401, 1)
    summary = json.load(open(teacher_run / "summary.json"))
    assert summary["rows"] == 401
    teacher = load_model(teacher_run / "plant_model.npz")
    pred = teacher.predict_ydot(ds.v, ds.y, ds.d, ds.d_dot)
    assert np.allclose(pred, ds.y_dot, atol=1e-9)


def test_gen_data_is_byte_identical_across_reruns(tmp_path):
    config = write_config(tmp_path / "config.yaml", gen_config(tmp_path / "a"))
    assert main(["gen-data", "--config", config]) == 0
    assert main(["gen-data", "--config", config, "--out", str(tmp_path / "b")]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["config.echo.yaml", "dataset.csv", "dataset.csv.meta.json",
                     "plant_model.npz", "summary.json"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() \
            == (tmp_path / "b" / name).read_bytes(), name


def test_gen_data_zero_duration_writes_header_only(tmp_path):
    cfg = gen_config(tmp_path / "out", duration=0.0, kind="mismatch")
    assert run_cli(tmp_path, "gen-data", cfg) == 0
    lines = (tmp_path / "out" / "dataset.csv").read_text().splitlines()
    assert lines == ["t,v1,v2,d1,y1,y2,z1,ydot1,ydot2,ddot1"]
    assert json.load(open(tmp_path / "out" / "summary.json"))["rows"] == 0


# ---------------------------------------------------------------------------
# train / eval

def test_train_epochs_zero_serializes_the_initial_model(tmp_path, teacher_run):
    cfg = {"seed": 1, "output": str(tmp_path / "run"),
           "dataset": str(teacher_run / "dataset.csv"),
           "dims": TINY_DIMS, "arch": TINY_ARCH,
           "init": {"seed": 4, "map_scale": 0.02},
           "train": {"epochs": 0}}
    assert run_cli(tmp_path, "train", cfg) == 0
    # the serialized model must equal an identically seeded fresh one, bit for bit
    ds = read_csv(teacher_run / "dataset.csv")
    fresh = ELModel.for_training(ModelDims(**TINY_DIMS), ds, ModelArch(**TINY_ARCH),
                                 seed=4, map_scale=0.02)
    save_model(fresh, tmp_path / "fresh.npz")
    assert (tmp_path / "run" / "model.npz").read_bytes() \
        == (tmp_path / "fresh.npz").read_bytes()
    # zero epochs leave no loss entries, so no val column either
    assert (tmp_path / "run" / "history.csv").read_text() == "epoch,train_loss\n"
    reloaded = load_model(tmp_path / "run" / "model.npz")
    assert np.array_equal(reloaded.predict_ydot(ds.v, ds.y, ds.d, ds.d_dot),
                          fresh.predict_ydot(ds.v, ds.y, ds.d, ds.d_dot))


def test_train_writes_history_and_r2_table(tmp_path, teacher_run):
    cfg = {"seed": 1, "output": str(tmp_path / "run"),
           "dataset": str(teacher_run / "dataset.csv"),
           "dims": TINY_DIMS, "arch": TINY_ARCH,
           "init": {"seed": 4, "map_scale": 0.02},
           "train": {"epochs": 2, "batch_size": 64, "step_size": 0.01},
           "holdout": str(teacher_run / "dataset.csv")}
    assert run_cli(tmp_path, "train", cfg) == 0
    lines = (tmp_path / "run" / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss"
    assert len(lines) == 3
    losses = [float(line.split(",")[1]) for line in lines[1:]]
    assert all(np.isfinite(losses))
    table = (tmp_path / "run" / "r2.csv").read_text().splitlines()
    assert table[0] == "channel,r2"
    assert [row.split(",")[0] for row in table[1:]] == ["ydot1", "ydot2", "z1"]
    summary = json.load(open(tmp_path / "run" / "summary.json"))
    assert summary["epochs"] == 2
    assert set(summary["r2"]) == {"ydot1", "ydot2", "z1"}
    assert np.isfinite(summary["r2_mean"])


def test_train_corrupted_dataset_is_an_error(tmp_path, teacher_run, capsys):
    lines = (teacher_run / "dataset.csv").read_text().splitlines()
    parts = lines[3].split(",")
    parts[0] = "0.5"     # break the uniform time grid
    lines[3] = ",".join(parts)
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines) + "\n")
    cfg = {"output": str(tmp_path / "run"), "dataset": str(bad),
           "dims": TINY_DIMS, "train": {"epochs": 1}}
    assert run_cli(tmp_path, "train", cfg) == 1
    assert "error:" in capsys.readouterr().err


def test_eval_scores_the_generating_model_perfectly(tmp_path, teacher_run):
    cfg = {"output": str(tmp_path / "run"),
           "model": str(teacher_run / "plant_model.npz"),
           "dataset": str(teacher_run / "dataset.csv")}
    assert run_cli(tmp_path, "eval", cfg) == 0
    summary = json.load(open(tmp_path / "run" / "summary.json"))
    for value in summary["r2"].values():
        assert value > 1.0 - 1e-9
    assert summary["r2_mean"] > 1.0 - 1e-9


def test_eval_missing_model_is_a_clean_error(tmp_path, teacher_run, capsys):
    cfg = {"output": str(tmp_path / "run"),
           "model": str(tmp_path / "missing.npz"),
           "dataset": str(teacher_run / "dataset.csv")}
    assert run_cli(tmp_path, "eval", cfg) == 1
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# design-lqr / simulate

def test_design_lqr_matches_library_design(tmp_path, teacher_run):
    model_path = str(teacher_run / "plant_model.npz")
    cfg = {"output": str(tmp_path / "run"), "model": model_path,
           "target": {"y": [0.2, -0.1], "d": [0.0]},
           "weights": {"q": 4.0, "r": [1.0, 1.0]}}
    assert run_cli(tmp_path, "design-lqr", cfg) == 0
    design = json.load(open(tmp_path / "run" / "design.json"))
    model = load_model(model_path)
    expected = design_lqr(model, [0.2, -0.1], [0.0], 4.0 * np.eye(2), np.eye(2))
    assert np.allclose(design["K"], expected.K, atol=1e-10)
    assert np.allclose(design["x_d"], expected.x_d, atol=1e-10)
    assert max(design["closed_loop_eigs_real"]) < 0.0
    summary = json.load(open(tmp_path / "run" / "summary.json"))
    assert summary["spectral_abscissa"] < 0.0


def sim_config(out, model_path, controllers):
    return {
        "seed": 2, "output": str(out), "model": model_path,
        "plant": {"kind": "teacher", "model": model_path},
        "controllers": controllers,
        "target": {"schedule": {"times": [0.0, 0.05],
                                "values": [[0.2, -0.1], [0.1, 0.0]]}},
        "disturbance": {"constant": [0.0]},
        "horizon": 0.1, "control_period": 0.005, "substeps": 2,
        "weights": {"q": 4.0},
        "barrier": {"z_max": [1.0e6], "v_min": [-5.0, -5.0], "v_max": [5.0, 5.0],
                    "k1": 10.0, "k2": 1.0, "rate_weight": 0.05},
        "plots": True,
    }


def test_simulate_paired_run_emits_traces_and_comparison(tmp_path, teacher_run):
    out = tmp_path / "run"
    cfg = sim_config(out, str(teacher_run / "plant_model.npz"), ["lqr", "icbf"])
    assert run_cli(tmp_path, "simulate", cfg) == 0
    for ctrl in ("lqr", "icbf"):
        table = np.loadtxt(out / f"trace_{ctrl}.csv", delimiter=",", skiprows=1)
        assert table.shape[0] == 20           # horizon / control_period ticks
        assert np.all(np.isfinite(table))
    summary = json.load(open(out / "summary.json"))
    assert set(summary["comparison"]["max_h"]) == {"lqr", "icbf"}
    for ctrl in ("lqr", "icbf"):
        per = summary["controllers"][ctrl]
        assert per["ticks"] == 20
        assert len(per["tracking_rmse"]) == 2
        assert per["max_h"] < 0.0             # wide barrier, never active
    script = (out / "plot.gp").read_text()
    assert "trace_lqr.csv" in script and "trace_icbf.csv" in script


def test_simulate_is_byte_identical_across_reruns(tmp_path, teacher_run):
    config = write_config(tmp_path / "config.yaml", sim_config(
        tmp_path / "a", str(teacher_run / "plant_model.npz"), ["sontag"]))
    assert main(["simulate", "--config", config]) == 0
    assert main(["simulate", "--config", config, "--out", str(tmp_path / "b")]) == 0
    for name in ("trace_sontag.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() \
            == (tmp_path / "b" / name).read_bytes(), name


def test_simulate_icbf_without_barrier_is_an_error(tmp_path, teacher_run, capsys):
    cfg = sim_config(tmp_path / "run", str(teacher_run / "plant_model.npz"), ["icbf"])
    del cfg["barrier"]
    assert run_cli(tmp_path, "simulate", cfg) == 1
    assert "barrier" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# check-linearizable

def check_config(out, system):
    return {"seed": 0, "output": str(out), "system": system,
            "domain": {"low": -1.0, "high": 1.0}, "samples": 15, "tol": 1e-6}


def test_check_fixture_verdicts(tmp_path):
    cfg = check_config(tmp_path / "pass", {"fixture": "integrator-chain", "n": 3})
    assert run_cli(tmp_path, "check-linearizable", cfg, name="a.yaml") == 0
    report = json.load(open(tmp_path / "pass" / "report.json"))
    assert report["verdict"] == "pass"
    assert report["samples"] == 15

    cfg = check_config(tmp_path / "fail", {"fixture": "noninvolutive-chain"})
    assert run_cli(tmp_path, "check-linearizable", cfg, name="b.yaml") == 0
    report = json.load(open(tmp_path / "fail" / "report.json"))
    assert report["verdict"] == "fail-involutive"
    assert report["max_involutivity_residual"] > 10.0 * report["tol"]


def test_check_reads_expression_file(tmp_path):
    system_file = tmp_path / "system.yaml"
    write_config(system_file, {"n": 3,
                               "f": ["y2", "y3", "0"],
                               "g": ["0", "0", "1"]})
    cfg = check_config(tmp_path / "run", {"file": str(system_file)})
    assert run_cli(tmp_path, "check-linearizable", cfg) == 0
    report = json.load(open(tmp_path / "run" / "report.json"))
    assert report["verdict"] == "pass"


def test_check_bad_expression_file_is_an_error(tmp_path, capsys):
    system_file = tmp_path / "system.yaml"
    write_config(system_file, {"n": 2, "f": ["y1 / y2", "0"], "g": ["0", "1"]})
    cfg = check_config(tmp_path / "run", {"file": str(system_file)})
    assert run_cli(tmp_path, "check-linearizable", cfg) == 1
    assert "error:" in capsys.readouterr().err


def test_check_rejects_ambiguous_system_blocks(tmp_path, capsys):
    cfg = check_config(tmp_path / "run",
                       {"fixture": "integrator-chain", "f": ["0", "0"]})
    assert run_cli(tmp_path, "check-linearizable", cfg) == 1
    assert "exactly one" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# entry point

def test_module_entry_point_runs(tmp_path):
    config = write_config(tmp_path / "config.yaml", check_config(
        tmp_path / "run", {"fixture": "integrator-chain"}))
    proc = subprocess.run([sys.executable, "-m", "elcontrol.cli",
                           "check-linearizable", "--config", config],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "verdict: pass" in proc.stdout
    assert (tmp_path / "run" / "summary.json").exists()
