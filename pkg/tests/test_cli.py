import json
import subprocess
import sys

import pytest

from flexattn.cli import main


def write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return p


def test_selftest_exit_zero(tmp_path):
    assert main(["selftest", "--out", str(tmp_path), "--quiet"]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["metrics"]["all_passed"]
    assert (tmp_path / "report.csv").exists()


def test_config_error_exit_two(tmp_path):
    bad = write(tmp_path, "bad.json", {"no_such_key": 1})
    assert main(["cost", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2
    notjson = tmp_path / "x.json"
    notjson.write_text("{")
    assert main(["gen", "--config", str(notjson), "--out", str(tmp_path / "o")]) == 2
    axis = write(tmp_path, "axis.json", {"ablate_axes": ["colour"]})
    assert main(["ablate", "--config", str(axis), "--out", str(tmp_path / "o")]) == 2


def test_cost_outputs(tmp_path):
    cfg = write(tmp_path, "c.json", {"cost_m_values": [0, 8], "cost_n_sa": [16], "cost_output_lens": [1]})
    assert main(["cost", "--config", str(cfg), "--out", str(tmp_path / "o"), "--quiet"]) == 0
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["metrics"]["llava_scale"][0]["ordered"]
    assert sorted(p.name for p in (tmp_path / "o" / "plots").iterdir()) == \
        ["flops_vs_m.svg", "flops_vs_resolution.svg", "tflops_per_variant.svg"]


def test_empty_sweep(tmp_path):
    cfg = write(tmp_path, "c.json", {"cost_m_values": [], "cost_n_sa": [], "cost_output_lens": []})
    assert main(["cost", "--config", str(cfg), "--out", str(tmp_path / "o"), "--quiet"]) == 0
    assert (tmp_path / "o" / "report.csv").read_text() == ""
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["metrics"]["toy"] == [] and rep["metrics"]["llava_scale"] == []


def test_train_writes_weights(tmp_path):
    from flexattn.model import load_weights
    cfg = write(tmp_path, "t.json", {"steps": 2, "batch": 4, "eval_size": 8, "d_model": 8, "n_sa": 1, "n_fa": 1})
    assert main(["train", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "o"), "--quiet"]) == 0
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["config"]["seed"] == 3
    mcfg, _ = load_weights(tmp_path / "o" / "weights.bin")
    assert mcfg.d_model == 8
    assert (tmp_path / "o" / "plots" / "loss_curve.svg").exists()


def test_train_divergence_exit_one(tmp_path):
    cfg = write(tmp_path, "t.json", {"steps": 3, "batch": 2, "eval_size": 4, "d_model": 8, "n_sa": 1, "n_fa": 1,
                                     "lr": float("inf"), "log_every": 1})
    # json.dumps writes Infinity, which json.load accepts
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o"), "--quiet"]) == 1
    assert json.loads((tmp_path / "o" / "report.json").read_text())["status"] == "diverged"


def test_ablate_byte_identical(tmp_path):
    cfg = write(tmp_path, "a.json", {"steps": 2, "batch": 4, "eval_size": 8, "d_model": 8, "n_sa": 1, "n_fa": 1,
                                     "log_every": 1, "ablate_axes": ["strategy", "ratio"]})
    for o in ("a", "b"):
        assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / o), "--quiet"]) == 0
    ra = json.loads((tmp_path / "a" / "report.json").read_text())
    rb = json.loads((tmp_path / "b" / "report.json").read_text())
    assert json.dumps(ra["metrics"]) == json.dumps(rb["metrics"])
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()
    assert len(ra["metrics"]["runs"]) == 6


def test_gen(tmp_path):
    cfg = write(tmp_path, "g.json", {"gen_count": 5})
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "o"), "--quiet"]) == 0
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert len(rep["metrics"]["items"]) == 5
    assert (tmp_path / "o" / "tasks.npz").exists()


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "flexattn", "gen", "--out", str(tmp_path), "--quiet"])
    assert r.returncode == 0


def test_missing_subcommand():
    with pytest.raises(SystemExit):
        main([])
