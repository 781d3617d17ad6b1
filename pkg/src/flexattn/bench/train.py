"""Tiny training loop for the needle task.

Cross-entropy on the answer token, Adam with a fixed step size, float64
by default.  Selection is a hard, non-differentiable gather; gradients
reach only the selected HR token values.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .. import __version__
from ..errors import ConfigError, MaskError
from ..model import ModelConfig, ModelWeights, build_variant, forward, strategy_selector
from ..selection import SelectionStrategy
from ..tensor import GradTape, Matrix, backward, block, cross_entropy
from . import needle


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, report: dict):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.report = report


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run.  Serialised verbatim into reports."""

    variant: str = "flex"
    strategy: str = "attention_map"
    ratio: float = 0.125
    hr_factor: int = 4
    d_model: int = 32
    heads: int = 1
    n_sa: int = 1
    n_fa: int = 3
    seed: int = 0
    steps: int = 3000
    batch: int = 32
    lr: float = 3e-3
    eval_size: int = 256
    log_every: int = 500
    data_seed: int = 1
    eval_seed: int = 2
    classes: list | None = None
    dtype: str = "float64"
    # ablation axes: lists of values swept by `ablate`
    strategies: list = field(default_factory=lambda: ["random", "center", "attention_map"])
    resolutions: list = field(default_factory=lambda: [2, 3, 4])
    ratios: list = field(default_factory=lambda: [0.05, 0.1, 0.2])
    ablate_axes: list = field(default_factory=lambda: ["strategy"])
    # cost sweep: `cost` evaluates these M values at toy scale and the LLaVA-scale sweep
    cost_m_values: list = field(default_factory=lambda: list(range(0, 65, 8)))
    cost_n_sa: list = field(default_factory=lambda: [8, 16, 24])
    cost_output_lens: list = field(default_factory=lambda: [1, 8, 32])
    gen_count: int = 16

    def __post_init__(self):
        if self.variant not in ("lr_only", "flex", "hd_concat", "cross_attn"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.hr_factor not in (1, 2, 3, 4):
            raise ConfigError(f"hr_factor must be one of 1..4, got {self.hr_factor}")
        if self.steps < 0 or self.batch < 1 or self.eval_size < 1 or self.log_every < 1:
            raise ConfigError("steps >= 0, batch >= 1, eval_size >= 1 and log_every >= 1 required")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        SelectionStrategy(self.strategy, self.ratio, self.seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model, heads=self.heads, n_sa=self.n_sa, n_fa=self.n_fa,
            vocab=needle.VOCAB, lr_image_side=needle.LR_SIDE,
            hr_image_side=needle.LR_SIDE * self.hr_factor, patch_size=needle.PATCH, channels=1,
            selection=SelectionStrategy(self.strategy, self.ratio, self.seed),
            variant=self.variant)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown RunConfig keys: {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read RunConfig {path}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("RunConfig JSON must be an object")
        return cls.from_dict(d)


class Adam:
    def __init__(self, params, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


def answer_logits(cfg: ModelConfig, w: ModelWeights, img, prompts, select=None):
    res = forward(cfg, w, img, prompts, select=select)
    last = res.logits.rows - 1
    return block(res.logits, rows=slice(last, last + 1)), res


def loss_and_grads(cfg, w, img, prompts, labels, select):
    params = w.trainable()
    with GradTape() as tape:
        tape.watch(*params)
        logits, _ = answer_logits(cfg, w, img, prompts, select)
        loss = cross_entropy(logits, labels[:, None])
    g = backward(tape, loss)
    grads = []
    for p in params:
        gp = g.get(p)
        grads.append(np.zeros_like(p.data) if gp is None or not isinstance(gp, np.ndarray) else gp)
    return float(loss.data[0, 0]), grads


def evaluate(cfg: ModelConfig, w: ModelWeights, tasks, chunk: int = 128) -> dict:
    """Exact-match accuracy on the answer token, plus where the last Flex layer looked."""
    correct, hits, picked = 0, 0, 0
    select = strategy_selector(cfg, np.random.default_rng([cfg.selection.seed, 1]))
    for s in range(0, len(tasks), chunk):
        part = tasks[s:s + chunk]
        img, prompts, labels = needle.stack(part, cfg.hr_image_side)
        logits, res = answer_logits(cfg, w, img, prompts, select)
        pred = logits.data[:, 0, :].argmax(axis=-1)
        ok = pred == labels
        correct += int(ok.sum())
        if res.trace:
            final = res.trace[-1].hr_indices
            for j, t in enumerate(part):
                if ok[j]:
                    blk = needle.target_block(t, cfg.factor)
                    hits += sum(int(i) in blk for i in final[j])
                    picked += len(final[j])
    return {"accuracy": correct / len(tasks),
            "in_block_fraction": hits / picked if picked else None,
            "n": len(tasks)}


def train(rc: RunConfig, log=None, return_weights: bool = False):
    """Train from scratch and evaluate; returns a report dict (and the weights if asked)."""
    cfg = rc.model_config()
    dtype = np.dtype(rc.dtype)
    w = build_variant(cfg, rc.seed, dtype=dtype)
    params = [p.data for p in w.trainable()]
    opt = Adam(params, rc.lr)
    select = strategy_selector(cfg, np.random.default_rng([rc.seed, 0]))
    eval_tasks = needle.gen_needle(rc.eval_seed, rc.eval_size, classes=rc.classes)
    curve = []
    window = []
    t0 = time.perf_counter()
    for step in range(1, rc.steps + 1):
        batch = needle.gen_needle(rc.data_seed, rc.batch, start=(step - 1) * rc.batch, classes=rc.classes)
        img, prompts, labels = needle.stack(batch, cfg.hr_image_side)
        if dtype != np.float64:
            img = type(img)(img.pixels.astype(dtype))
        try:
            loss, grads = loss_and_grads(cfg, w, img, prompts, labels, select)
        except MaskError:  # non-finite weights reach a softmax
            loss = float("nan")
        if not math.isfinite(loss):
            report = {"status": "diverged", "step": step, "config": rc.to_dict(), "curve": curve}
            raise TrainingDiverged(step, report)
        window.append(loss)
        params = opt.step(params, grads)
        if not all(np.isfinite(p).all() for p in params):
            report = {"status": "diverged", "step": step, "config": rc.to_dict(), "curve": curve}
            raise TrainingDiverged(step, report)
        w = w.with_matrices([Matrix.wrap(p.astype(dtype, copy=False)) for p in params])
        if step % rc.log_every == 0 or step == rc.steps:
            ev = evaluate(cfg, w, eval_tasks)
            point = {"step": step, "loss": float(np.mean(window)), "eval_accuracy": ev["accuracy"]}
            curve.append(point)
            window = []
            if log:
                log(f"step {step:5d}  loss {point['loss']:.4f}  eval acc {ev['accuracy']:.3f}")
    final = evaluate(cfg, w, eval_tasks)
    report = {
        "status": "ok",
        "config": rc.to_dict(),
        "version": __version__,
        "metrics": {"final_accuracy": final["accuracy"],
                    "in_block_fraction": final["in_block_fraction"],
                    "final_loss": curve[-1]["loss"] if curve else None,
                    "curve": curve},
        "timing": {"train_seconds": time.perf_counter() - t0},
    }
    if return_weights:
        return report, cfg, w
    return report


def selection_traces(cfg: ModelConfig, w: ModelWeights, tasks) -> list[dict]:
    """Per-item selection records (layer, source map, LR and HR indices) for reports."""
    img, prompts, _ = needle.stack(tasks, cfg.hr_image_side)
    select = strategy_selector(cfg, np.random.default_rng([cfg.selection.seed, 1]))
    res = forward(cfg, w, img, prompts, select=select)
    out = []
    for j in range(len(tasks)):
        out.append({"item": j, "layers": [
            {"layer": r.layer, "source_layer": r.source_layer,
             "attention": np.asarray(r.attention[j]).tolist(),
             "lr_indices": np.asarray(r.lr_indices[j]).tolist(),
             "hr_indices": np.asarray(r.hr_indices[j]).tolist()} for r in res.trace]})
    return out


def with_overrides(rc: RunConfig, **kw) -> RunConfig:
    return replace(rc, **kw)


# Needle configuration used by the mechanism-efficacy check; sized for one CPU core.
EFFICACY_CONFIG = RunConfig()
