"""Command bodies: train, ablate, cost sweep, task generation, self-test.

Each returns the report document; the CLI writes it out.  Metric sections
never contain timings, so reruns of one RunConfig give identical bytes.
"""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from .. import __version__
from ..cost import (
    REFERENCE_TFLOPS,
    VARIANTS,
    CostConfig,
    attention_core_total,
    concat_layer_flops,
    cost_config_for,
    counted_attention_core,
    flex_layer_flops,
    full_run_flops,
    llava_scale_reports,
)
from ..errors import ConfigError
from ..model import save_weights
from . import needle, report
from .selftest import run_selftest
from .train import RunConfig, selection_traces, train

AXES = ("strategy", "resolution", "ratio")


def _axis_values(rc: RunConfig, axis: str) -> list:
    return {"strategy": rc.strategies, "resolution": rc.resolutions, "ratio": rc.ratios}[axis]


def _apply(rc: RunConfig, axis: str, value) -> RunConfig:
    key = {"strategy": "strategy", "resolution": "hr_factor", "ratio": "ratio"}[axis]
    return replace(rc, **{key: value})


def modeled_flops(rc: RunConfig) -> int:
    """Analytical FLOPs of one prefill over a needle item for this run's model."""
    return full_run_flops(cost_config_for(rc.model_config(), 2), rc.variant).total().total()


def run_train(rc: RunConfig, out_dir=None, log=None) -> dict:
    t0 = time.perf_counter()
    rep, cfg, w = train(rc, log=log, return_weights=True)
    metrics = dict(rep["metrics"])
    metrics["modeled_flops_per_item"] = modeled_flops(rc)
    doc = {"command": "train", "config": rc.to_dict(), "version": __version__, "metrics": metrics,
           "selection_traces": selection_traces(cfg, w, needle.gen_needle(rc.eval_seed, 4, classes=rc.classes))
           if rc.variant == "flex" else [],
           "timing": {"seconds": time.perf_counter() - t0}}
    if out_dir is not None:
        save_weights(report.ensure_dir(out_dir) / "weights.bin", cfg, w)
        report.write_json(out_dir, doc)
        report.write_csv(out_dir, [{"step": p["step"], "loss": p["loss"], "eval_accuracy": p["eval_accuracy"]}
                                   for p in metrics["curve"]], ["step", "loss", "eval_accuracy"])
        curve = metrics["curve"]
        report.line_plot(out_dir, "loss_curve", {"train loss": ([p["step"] for p in curve], [p["loss"] for p in curve])},
                         "step", "cross-entropy", f"{rc.variant} / {rc.strategy}")
    return doc


def run_ablate(rc: RunConfig, out_dir=None, log=None) -> dict:
    """One training run per value on each requested axis, all from the same seed."""
    for axis in rc.ablate_axes:
        if axis not in AXES:
            raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    runs, timing = [], {}
    for axis in rc.ablate_axes:
        for value in _axis_values(rc, axis):
            sub = _apply(rc, axis, value)
            if log:
                log(f"[{axis}={value}]")
            t0 = time.perf_counter()
            rep = train(sub, log=log)
            timing[f"{axis}={value}"] = time.perf_counter() - t0
            runs.append({"axis": axis, "value": value, "config": sub.to_dict(),
                         "final_accuracy": rep["metrics"]["final_accuracy"],
                         "in_block_fraction": rep["metrics"]["in_block_fraction"],
                         "final_loss": rep["metrics"]["final_loss"],
                         "curve": rep["metrics"]["curve"],
                         "modeled_flops_per_item": modeled_flops(sub)})
    doc = {"command": "ablate", "config": rc.to_dict(), "version": __version__,
           "metrics": {"runs": runs}, "timing": {"seconds_per_run": timing}}
    if out_dir is not None:
        report.write_json(out_dir, doc)
        fields = ["axis", "value", "final_accuracy", "in_block_fraction", "final_loss", "modeled_flops_per_item"]
        report.write_csv(out_dir, [{k: r[k] for k in fields} for r in runs], fields)
        for axis in rc.ablate_axes:
            sel = [r for r in runs if r["axis"] == axis]
            report.bar_plot(out_dir, f"ablate_{axis}", [r["value"] for r in sel],
                            [r["final_accuracy"] for r in sel], "held-out accuracy", f"needle accuracy by {axis}")
    return doc


def cost_sweep(rc: RunConfig) -> dict:
    """Toy-scale attention-core FLOPs vs M and LLaVA-scale totals per variant."""
    toy = []
    for m in rc.cost_m_values:
        c = CostConfig(n_i=16, n_t=16, m=m, n_hr=max(m, 64), d_model=32)
        toy.append({"m": m,
                    "flex_core": attention_core_total(flex_layer_flops(c)),
                    "concat_core": attention_core_total(concat_layer_flops(c)),
                    "flex_core_counted": counted_attention_core(32, m, 32, 1, "flex"),
                    "concat_core_counted": counted_attention_core(32, m, 32, 1, "concat"),
                    "flex_layer_total": sum(v.total() for v in flex_layer_flops(c).values()),
                    "concat_layer_total": sum(v.total() for v in concat_layer_flops(c).values())})
    llava = []
    for output_len in rc.cost_output_lens:
        for n_sa in rc.cost_n_sa:
            reps = llava_scale_reports(n_sa, output_len)
            row = {"n_sa": n_sa, "output_len": output_len}
            for v in VARIANTS:
                row[f"{v}_tflops"] = reps[v].tflops(True)
                row[f"{v}_tflops_no_encoder"] = reps[v].tflops(False)
            row["flex_over_cross"] = row["flex_tflops"] / row["cross_attn_tflops"]
            row["flex_over_concat"] = row["flex_tflops"] / row["hd_concat_tflops"]
            row["ordered"] = row["flex_tflops"] < row["hd_concat_tflops"] < row["cross_attn_tflops"]
            llava.append(row)
    resolution = []
    if rc.cost_n_sa:
        for side in (672, 1008, 1344):
            reps = llava_scale_reports(rc.cost_n_sa[len(rc.cost_n_sa) // 2], 1, hr_side=side)
            resolution.append({"hr_side": side, **{f"{v}_tflops": reps[v].tflops(True) for v in ("flex", "cross_attn")}})
    assumptions = []
    if llava:
        assumptions = llava_scale_reports(rc.cost_n_sa[0], rc.cost_output_lens[0])["flex"].assumptions
    return {"toy": toy, "llava_scale": llava, "resolution": resolution,
            "reference_tflops": REFERENCE_TFLOPS if llava else {}, "assumptions": assumptions}


def run_cost(rc: RunConfig, out_dir=None) -> dict:
    sweep = cost_sweep(rc)
    doc = {"command": "cost", "config": rc.to_dict(), "version": __version__, "metrics": sweep}
    if out_dir is not None:
        report.write_json(out_dir, doc)
        rows = [{"table": "toy", **r} for r in sweep["toy"]] + \
               [{"table": "llava_scale", **r} for r in sweep["llava_scale"]] + \
               [{"table": "resolution", **r} for r in sweep["resolution"]]
        report.write_csv(out_dir, rows)
        toy = sweep["toy"]
        report.line_plot(out_dir, "flops_vs_m",
                         {"flex (linear)": ([r["m"] for r in toy], [r["flex_core"] for r in toy]),
                          "concat (quadratic)": ([r["m"] for r in toy], [r["concat_core"] for r in toy])},
                         "selected HR tokens M", "attention-core FLOPs", "N = 32, D = 32")
        res = sweep["resolution"]
        report.line_plot(out_dir, "flops_vs_resolution",
                         {v: ([r["hr_side"] for r in res], [r[f"{v}_tflops"] for r in res]) for v in ("flex", "cross_attn")},
                         "HR side (px)", "TFLOPs", "modeled TFLOPs vs input resolution")
        first = [r for r in sweep["llava_scale"] if r["output_len"] == (rc.cost_output_lens or [1])[0]]
        report.line_plot(out_dir, "tflops_per_variant",
                         {v: ([r["n_sa"] for r in first], [r[f"{v}_tflops"] for r in first]) for v in VARIANTS},
                         "vanilla layers N_SA (of 32)", "TFLOPs", "modeled TFLOPs per variant")
    return doc


def run_gen(rc: RunConfig, out_dir=None) -> dict:
    tasks = needle.gen_needle(rc.data_seed, rc.gen_count, classes=rc.classes)
    items = [{"index": i, "target_cell": list(t.target_cell), "glyph_class": t.glyph_class,
              "glyph_patch": list(t.glyph_patch), "prompt_ids": list(t.prompt_ids), "label_id": t.label_id,
              "pixel_sum": float(t.image.pixels.sum())} for i, t in enumerate(tasks)]
    doc = {"command": "gen", "config": rc.to_dict(), "version": __version__, "metrics": {"items": items}}
    if out_dir is not None:
        d = report.ensure_dir(out_dir)
        report.write_json(d, doc)
        report.write_csv(d, [{k: (v if not isinstance(v, list) else " ".join(map(str, v))) for k, v in it.items()}
                             for it in items])
        np.savez_compressed(d / "tasks.npz", images=np.stack([t.image.pixels for t in tasks]),
                            prompts=np.array([t.prompt_ids for t in tasks]),
                            labels=np.array([t.label_id for t in tasks]))
    return doc


def run_selftest_report(rc: RunConfig, out_dir=None, overrides=None) -> dict:
    results = run_selftest(rc.seed, overrides)
    doc = {"command": "selftest", "config": rc.to_dict(), "version": __version__,
           "metrics": {"suites": [{"name": r.name, "passed": r.passed, "cases": r.cases, "detail": r.detail}
                                  for r in results],
                       "all_passed": all(r.passed for r in results)}}
    if out_dir is not None:
        report.write_json(out_dir, doc)
        report.write_csv(out_dir, doc["metrics"]["suites"], ["name", "passed", "cases", "detail"])
    return doc


def run_efficacy(rc: RunConfig, log=None) -> dict:
    """Needle accuracy of flex under each strategy, plus the lr_only baseline, from one seed."""
    acc, block, seconds = {}, {}, {}
    plan = [("lr_only", replace(rc, variant="lr_only"))]
    plan += [(s, replace(rc, variant="flex", strategy=s)) for s in ("attention_map", "random", "center")]
    for name, sub in plan:
        t0 = time.perf_counter()
        rep = train(sub, log=log)
        seconds[name] = time.perf_counter() - t0
        acc[name] = rep["metrics"]["final_accuracy"]
        block[name] = rep["metrics"]["in_block_fraction"]
    gap = acc["attention_map"] - acc["lr_only"]
    return {"accuracy": acc, "in_block_fraction": block, "gap_points": 100 * gap,
            "passed": gap >= 0.30 and acc["attention_map"] >= max(acc["random"], acc["center"]),
            "seconds": seconds}
