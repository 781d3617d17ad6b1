import math
from dataclasses import replace

import numpy as np
import pytest

from flexattn.bench import needle
from flexattn.bench.train import RunConfig, TrainingDiverged, train
from flexattn.errors import ConfigError

TINY = RunConfig(d_model=8, heads=2, n_sa=1, n_fa=1, steps=6, batch=4, eval_size=8, log_every=3)


def test_zero_learning_rate_keeps_loss_constant():
    rep = train(replace(TINY, lr=0.0, steps=4, log_every=1))
    losses = [p["loss"] for p in rep["metrics"]["curve"]]
    accs = {p["eval_accuracy"] for p in rep["metrics"]["curve"]}
    assert len(accs) == 1
    # batches differ, so compare on one fixed batch instead
    rep_a = train(replace(TINY, lr=0.0, steps=1, log_every=1))
    rep_b = train(replace(TINY, lr=0.0, steps=1, log_every=1))
    assert rep_a["metrics"]["curve"][0]["loss"] == rep_b["metrics"]["curve"][0]["loss"]
    assert all(math.isfinite(x) for x in losses)


def test_zero_learning_rate_weights_unchanged():
    _, _, w0 = train(replace(TINY, lr=0.0, steps=0), return_weights=True)
    _, _, w1 = train(replace(TINY, lr=0.0, steps=3), return_weights=True)
    for a, b in zip(w0.trainable(), w1.trainable()):
        assert np.array_equal(a.data, b.data)


def test_single_class_task_is_learned():
    rc = replace(TINY, classes=[3], steps=200, lr=1e-2, log_every=20)
    rep = train(rc)
    assert rep["metrics"]["final_loss"] < 0.05
    assert rep["metrics"]["final_accuracy"] == 1.0


def test_same_config_same_metrics():
    a, b = train(TINY), train(TINY)
    assert a["metrics"] == b["metrics"]


def test_seed_changes_run():
    a, b = train(TINY), train(replace(TINY, seed=1))
    assert a["metrics"]["curve"] != b["metrics"]["curve"]


def test_nan_aborts_with_report():
    with pytest.raises(TrainingDiverged) as ei:
        train(replace(TINY, lr=float("inf"), steps=5, log_every=1))
    assert ei.value.report["status"] == "diverged"
    assert ei.value.step >= 1


@pytest.mark.parametrize("factor", [2, 3, 4])
def test_resolution_axis_runs(factor):
    rep = train(replace(TINY, hr_factor=factor, steps=1))
    assert 0.0 <= rep["metrics"]["final_accuracy"] <= 1.0


@pytest.mark.parametrize("variant", ["lr_only", "flex", "hd_concat", "cross_attn"])
def test_every_variant_trains(variant):
    rep = train(replace(TINY, variant=variant, steps=2))
    assert rep["status"] == "ok"


def test_bad_config_rejected():
    with pytest.raises(ConfigError):
        RunConfig(variant="nope")
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"steps": 1, "colour": "red"})
    with pytest.raises(ConfigError):
        RunConfig(hr_factor=5)


def test_config_round_trip(tmp_path):
    rc = replace(TINY, classes=[1, 2], strategy="center")
    p = tmp_path / "rc.json"
    import json
    p.write_text(json.dumps(rc.to_dict()))
    assert RunConfig.load(p) == rc


def test_needle_items_stable_across_batch_sizes():
    a = needle.gen_needle(5, 8)
    b = needle.gen_needle(5, 4, start=4)
    assert [t.label_id for t in a[4:]] == [t.label_id for t in b]
