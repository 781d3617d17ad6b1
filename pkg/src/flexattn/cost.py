"""Analytical FLOP model for the four model variants.

Formulas follow the counting convention of :mod:`flexattn.tensor` term by
term, so that :func:`reconcile` can demand exact equality with an
instrumented forward pass.  At LLaVA scale the same formulas, plus an
optional ViT-style encoder term, give TFLOPs estimates per variant.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import FlopCounter, Matrix

VARIANTS = ("lr_only", "flex", "hd_concat", "cross_attn")


@dataclass(frozen=True)
class EncoderSpec:
    """ViT-style vision tower: ``layers`` blocks of width ``width`` with a ``mlp_ratio`` MLP.

    ``projector`` adds a two-layer MLP (width -> D -> D) on every patch token,
    as in LLaVA-1.5.  ``cls_token`` adds one token per tower that the
    projector drops.
    """

    layers: int = 24
    width: int = 1024
    mlp_ratio: int = 4
    projector: bool = True
    cls_token: bool = True


@dataclass(frozen=True)
class CostConfig:
    n_i: int
    n_t: int
    m: int
    n_hr: int
    d_model: int
    heads: int = 1
    ffn_inner: int | None = None
    n_sa: int = 1
    n_fa: int = 1
    vocab: int = 32
    output_len: int = 1
    patch_dim: int | None = None
    encoder: EncoderSpec | None = None

    def __post_init__(self):
        if self.m > self.n_hr and self.m:
            raise ConfigError(f"M={self.m} exceeds N_hr={self.n_hr}")
        if self.output_len < 1:
            raise ConfigError("output_len must be >= 1")
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")

    @property
    def n(self) -> int:
        return self.n_i + self.n_t

    @property
    def inner(self) -> int:
        return self.ffn_inner if self.ffn_inner is not None else 4 * self.d_model

    @property
    def n_layers(self) -> int:
        return self.n_sa + self.n_fa


def _fc(mul_adds=0, exps=0, divs=0, adds=0) -> FlopCounter:
    return FlopCounter(int(mul_adds), int(exps), int(divs), int(adds))


# --------------------------------------------------------------------------
# building blocks, one per counted op

def matmul_flops(m: int, k: int, n: int) -> FlopCounter:
    return _fc(mul_adds=2 * m * k * n)


def softmax_flops(rows: int, length: int) -> FlopCounter:
    size = rows * length
    return _fc(exps=size, divs=size, adds=T.SOFTMAX_ADDS_PER_ELEM * size)


def layer_norm_flops(rows: int, width: int) -> FlopCounter:
    return _fc(adds=T.LN_ADDS_PER_ELEM * rows * width + T.LN_ADDS_PER_ROW * rows,
               divs=T.LN_DIVS_PER_ROW * rows)


def gelu_flops(n: int) -> FlopCounter:
    return _fc(adds=T.GELU_ADDS_PER_ELEM * n, exps=T.GELU_EXPS_PER_ELEM * n,
               divs=T.GELU_DIVS_PER_ELEM * n)


def attention_core_terms(n_q: int, n_keys: int, d: int, heads: int) -> dict:
    """Scores, scaling, softmax and weighted sum for ``n_q`` queries over ``n_keys`` keys."""
    return {
        "scores": matmul_flops(n_q, d // heads, n_keys).scaled(heads) + _fc(divs=n_q * n_keys * heads),
        "softmax": softmax_flops(n_q * heads, n_keys),
        "weighted_sum": matmul_flops(n_q, n_keys, d // heads).scaled(heads),
    }


def _sublayer_tail(prefix: str, n: int, d: int) -> dict:
    return {f"{prefix}residual": _fc(adds=n * d), f"{prefix}norm": layer_norm_flops(n, d)}


def vanilla_layer_flops(n: int, d: int, heads: int, ffn_inner: int, n_keys: int | None = None) -> dict:
    """Decoder layer with self-attention: ``n`` queries over ``n_keys`` (default ``n``) keys."""
    n_keys = n if n_keys is None else n_keys
    terms = {"qkv": matmul_flops(n, d, d).scaled(3)}
    terms.update(attention_core_terms(n, n_keys, d, heads))
    terms["out_proj"] = matmul_flops(n, d, d)
    terms.update(_sublayer_tail("attn_", n, d))
    terms.update(ffn_terms(n, d, ffn_inner))
    return terms


def ffn_terms(n: int, d: int, ffn_inner: int) -> dict:
    return {"ffn": matmul_flops(n, d, ffn_inner) + matmul_flops(n, ffn_inner, d),
            "activation": gelu_flops(n * ffn_inner),
            **_sublayer_tail("ffn_", n, d)}


def flex_layer_flops(c: CostConfig, n_q: int | None = None, n_keys: int | None = None) -> dict:
    """FlexAttention layer: vanilla terms over N + M keys plus K'/V' projections of M tokens.

    The attention core is linear in M: 2*2*N*(N+M)*D multiply-add FLOPs.
    """
    n_q = c.n if n_q is None else n_q
    n_keys = c.n if n_keys is None else n_keys
    terms = vanilla_layer_flops(n_q, c.d_model, c.heads, c.inner, n_keys + c.m)
    terms["kv_prime"] = matmul_flops(c.m, c.d_model, c.d_model).scaled(2)
    return terms


def concat_layer_flops(c: CostConfig) -> dict:
    """Vanilla layer over the concatenated sequence of length N + M (quadratic in M)."""
    return vanilla_layer_flops(c.n + c.m, c.d_model, c.heads, c.inner)


def cross_terms(n_q: int, n_hr: int, d: int, heads: int, project_kv: bool = True) -> dict:
    terms = {"cross_q": matmul_flops(n_q, d, d)}
    if project_kv:
        terms["cross_kv"] = matmul_flops(n_hr, d, d).scaled(2)
    core = attention_core_terms(n_q, n_hr, d, heads)
    terms.update({f"cross_{k}": v for k, v in core.items()})
    terms["cross_out_proj"] = matmul_flops(n_q, d, d)
    terms.update(_sublayer_tail("cross_", n_q, d))
    return terms


def cross_layer_flops(c: CostConfig) -> dict:
    """Vanilla layer at N plus a cross-attention sub-layer over all N_hr HR tokens."""
    terms = vanilla_layer_flops(c.n, c.d_model, c.heads, c.inner)
    terms.update(cross_terms(c.n, c.n_hr, c.d_model, c.heads))
    return terms


def attention_core_total(terms: dict) -> int:
    """Multiply-add FLOPs of scores + weighted sum (the part the complexity analysis talks about)."""
    return terms["scores"].mul_adds + terms["weighted_sum"].mul_adds


def vit_flops(tokens: int, enc: EncoderSpec, d_model: int) -> FlopCounter:
    """ViT tower: per block 2*(4 + 2*mlp_ratio)*T*W^2 projection FLOPs + 4*T^2*W attention FLOPs."""
    w = enc.width
    per_layer = 2 * (4 + 2 * enc.mlp_ratio) * tokens * w * w + 4 * tokens * tokens * w
    total = enc.layers * per_layer
    if enc.projector:
        patches = tokens - (1 if enc.cls_token else 0)
        total += 2 * patches * (w * d_model + d_model * d_model)
    return _fc(mul_adds=total)


# --------------------------------------------------------------------------
# full runs

@dataclass
class CostRow:
    phase: str
    layer: int | None
    term: str
    flops: FlopCounter


@dataclass
class CostReport:
    variant: str
    config: CostConfig
    rows: list[CostRow] = field(default_factory=list)
    assumptions: list[str] = field(default_factory=list)
    reconciliation: str = "not run"

    def add(self, phase: str, layer: int | None, terms: dict) -> None:
        index = self.__dict__.setdefault("_index", {})
        for name, fc in terms.items():
            row = index.get((phase, layer, name))
            if row is None:
                row = index[(phase, layer, name)] = CostRow(phase, layer, name, FlopCounter())
                self.rows.append(row)
            row.flops = row.flops + fc

    def total(self, include_encoder: bool = True) -> FlopCounter:
        out = FlopCounter()
        for r in self.rows:
            if include_encoder or r.phase != "encoder":
                out = out + r.flops
        return out

    def phase_total(self, phase: str) -> FlopCounter:
        out = FlopCounter()
        for r in self.rows:
            if r.phase == phase:
                out = out + r.flops
        return out

    def layer_total(self, phase: str, layer: int | None) -> FlopCounter:
        out = FlopCounter()
        for r in self.rows:
            if r.phase == phase and r.layer == layer:
                out = out + r.flops
        return out

    def tflops(self, include_encoder: bool = True) -> float:
        return self.total(include_encoder).total() / 1e12

    def to_json(self) -> dict:
        cfg = asdict(self.config)
        return {
            "variant": self.variant,
            "config": cfg,
            "convention": "multiply-add = 2 FLOPs (mul_adds); exp = 1 (exps); division = 1 (divs); "
                          "other elementwise ops = 1 (adds)",
            "totals": {"with_encoder": self.total(True).as_dict(),
                       "without_encoder": self.total(False).as_dict(),
                       "tflops_with_encoder": self.tflops(True),
                       "tflops_without_encoder": self.tflops(False)},
            "rows": [{"phase": r.phase, "layer": r.layer, "term": r.term, **r.flops.as_dict()}
                     for r in self.rows],
            "assumptions": list(self.assumptions),
            "reconciliation": self.reconciliation,
        }

    def csv_rows(self) -> list[dict]:
        return [{"variant": self.variant, "phase": r.phase,
                 "layer": "" if r.layer is None else r.layer, "term": r.term,
                 **{k: v for k, v in r.flops.as_dict().items()}} for r in self.rows]


CSV_FIELDS = ("variant", "phase", "layer", "term", "mul_adds", "exps", "divs", "adds", "total")


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerows(rep.csv_rows())
    return buf.getvalue()


def _layer_kind(variant: str, c: CostConfig, i: int) -> str:
    if variant == "flex" and i >= c.n_sa:
        return "flex"
    return "self"


def prefill_length(c: CostConfig, variant: str) -> int:
    return c.n + c.n_hr if variant == "hd_concat" else c.n


def uses_hr_tokens(c: CostConfig, variant: str) -> bool:
    return variant in ("flex", "cross_attn") or (variant == "hd_concat" and c.n_hr > 0)


def prefill_layer_terms(c: CostConfig, variant: str, i: int) -> dict:
    n = prefill_length(c, variant)
    if _layer_kind(variant, c, i) == "flex":
        return flex_layer_flops(c)
    terms = vanilla_layer_flops(n, c.d_model, c.heads, c.inner)
    if variant == "cross_attn":
        terms.update(cross_terms(n, c.n_hr, c.d_model, c.heads))
    return terms


def decode_layer_terms(c: CostConfig, variant: str, i: int, n_keys: int) -> dict:
    """One decode step: a single query over ``n_keys`` cached keys (new token included)."""
    if _layer_kind(variant, c, i) == "flex":
        return flex_layer_flops(c, n_q=1, n_keys=n_keys)
    terms = vanilla_layer_flops(1, c.d_model, c.heads, c.inner, n_keys)
    if variant == "cross_attn":
        terms.update(cross_terms(1, c.n_hr, c.d_model, c.heads, project_kv=False))
    return terms


def embed_terms(c: CostConfig, variant: str) -> dict:
    if c.patch_dim is None:
        return {}
    d = c.d_model
    terms = {"patch_embed_lr": matmul_flops(c.n_i, c.patch_dim, d) + _fc(adds=c.n_i * d)}
    if uses_hr_tokens(c, variant):
        terms["patch_embed_hr"] = matmul_flops(c.n_hr, c.patch_dim, d) + _fc(adds=c.n_hr * d)
    return terms


def full_run_flops(c: CostConfig, variant: str, encoder_tokens: tuple[int, int] | None = None) -> CostReport:
    """Prefill over the prompt plus ``output_len - 1`` KV-cached decode steps.

    The first output token comes from the prefill logits; each later token
    costs one decode step.  ``encoder_tokens`` = (LR tower tokens, HR tower
    tokens) enables the ViT encoder term when ``c.encoder`` is set.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    rep = CostReport(variant, c)
    rep.assumptions += [
        "FLOP convention: multiply-add = 2, exp = 1, division = 1, other elementwise op = 1",
        "dense attention: causal masking does not skip masked score entries",
        "post-LN decoder layers: LN(x + SubLayer(x)) after attention and after the FFN",
        "FFN is two matrices (D x ffn_inner, ffn_inner x D) with tanh-GELU",
        "prefill computes head logits for every sequence row; decode steps for one row",
        f"decode steps = output_len - 1 = {c.output_len - 1}",
        "selection bookkeeping (head-averaged map, top-k, gather) is not arithmetic and is excluded",
    ]
    if variant == "flex":
        rep.assumptions.append("flex layers rebuild K'/V' for all M selected tokens at every decode step")
    if variant == "cross_attn":
        rep.assumptions.append("cross-attention uses the full hidden width D for queries, keys and values")
        rep.assumptions.append("cross-attention keys/values over HR tokens are projected once at prefill and cached")
    if variant == "hd_concat":
        rep.assumptions.append("HR tokens are appended to the sequence: prefill length N + N_hr")

    if c.encoder is not None and encoder_tokens is not None:
        lr_tok, hr_tok = encoder_tokens
        rep.add("encoder", None, {"vit_lr": vit_flops(lr_tok, c.encoder, c.d_model)})
        if uses_hr_tokens(c, variant) and hr_tok:
            rep.add("encoder", None, {"vit_hr": vit_flops(hr_tok, c.encoder, c.d_model)})
        rep.assumptions.append(
            f"encoder: {c.encoder.layers}-layer ViT width {c.encoder.width}, "
            f"{lr_tok} LR tower tokens, {hr_tok if uses_hr_tokens(c, variant) else 0} HR tower tokens, "
            f"projector={'on' if c.encoder.projector else 'off'}")
    emb = embed_terms(c, variant)
    if emb:
        rep.add("embed", None, emb)
    n = prefill_length(c, variant)
    for i in range(c.n_layers):
        rep.add("prefill", i, prefill_layer_terms(c, variant, i))
    rep.add("prefill", None, {"head": matmul_flops(n, c.d_model, c.vocab)})
    for s in range(c.output_len - 1):
        n_keys = n + s + 1
        for i in range(c.n_layers):
            rep.add("decode", i, decode_layer_terms(c, variant, i, n_keys))
        rep.add("decode", None, {"head": matmul_flops(1, c.d_model, c.vocab)})
    return rep


# --------------------------------------------------------------------------
# LLaVA-scale assumptions

LLAVA_D = 4096
LLAVA_LAYERS = 32
LLAVA_HEADS = 32
LLAVA_VOCAB = 32000
# two-matrix FFN width with the FLOPs of LLaMA-7B's three 4096 x 11008 SwiGLU matrices
LLAVA_FFN_INNER = 11008 * 3 // 2
LLAVA_LR_SIDE = 336
LLAVA_LR_TOKENS = 576          # 336 px / 14 px patches = 24 x 24
LLAVA_TEXT_TOKENS = 32
CLIP_L = EncoderSpec(layers=24, width=1024, mlp_ratio=4, projector=True, cls_token=True)


def hr_tokens_for(side_px: int, patch_px: int = 14) -> int:
    return (side_px // patch_px) ** 2


def llava_scale_configs(n_sa: int = 16, output_len: int = 1, ratio: float = 0.1,
                        text_tokens: int = LLAVA_TEXT_TOKENS,
                        encoder: EncoderSpec | None = CLIP_L, hr_side: int = 1008) -> dict:
    """(CostConfig, encoder tower tokens) per variant under LLaVA-1.5-7B-like assumptions.

    flex and cross_attn see an ``hr_side`` px image (1008 px: 72 x 72 = 5184
    HR tokens, factor 3 over the 24 x 24 LR grid); hd_concat sees 448 px
    (32 x 32 = 1024 HR tokens).  flex selects ceil(ratio * 576) LR patches,
    each lifted to factor x factor HR patches.
    """
    from .selection import SelectionStrategy
    n_i = LLAVA_LR_TOKENS
    factor = hr_side // LLAVA_LR_SIDE
    if factor * LLAVA_LR_SIDE != hr_side:
        raise ConfigError(f"HR side {hr_side} is not a multiple of {LLAVA_LR_SIDE}")
    k = SelectionStrategy(ratio=ratio).count(n_i)
    base = dict(n_i=n_i, n_t=text_tokens, d_model=LLAVA_D, heads=LLAVA_HEADS,
                ffn_inner=LLAVA_FFN_INNER, vocab=LLAVA_VOCAB, output_len=output_len, encoder=encoder)
    cls = 1 if encoder is not None and encoder.cls_token else 0
    hr_flex, hr_448 = hr_tokens_for(hr_side), hr_tokens_for(448)
    lr_tower = n_i + cls
    return {
        "lr_only": (CostConfig(m=0, n_hr=0, n_sa=LLAVA_LAYERS, n_fa=0, **base), (lr_tower, 0)),
        "flex": (CostConfig(m=k * factor * factor, n_hr=hr_flex, n_sa=n_sa, n_fa=LLAVA_LAYERS - n_sa, **base),
                 (lr_tower, hr_flex + cls)),
        "hd_concat": (CostConfig(m=hr_448, n_hr=hr_448, n_sa=LLAVA_LAYERS, n_fa=0, **base),
                      (lr_tower, hr_448 + cls)),
        "cross_attn": (CostConfig(m=0, n_hr=hr_flex, n_sa=LLAVA_LAYERS, n_fa=0, **base),
                       (lr_tower, hr_flex + cls)),
    }


def llava_scale_reports(n_sa: int = 16, output_len: int = 1, **kw) -> dict:
    """Full-run reports per variant for :func:`llava_scale_configs`."""
    return {v: full_run_flops(c, v, toks) for v, (c, toks) in llava_scale_configs(n_sa, output_len, **kw).items()}


# reported TFLOPs on MagnifierBench: FlexAttn 17.1, HD 24.9, XAttn 27.1
REFERENCE_TFLOPS = {"flex": 17.1, "hd_concat": 24.9, "cross_attn": 27.1}


def table5_band(n_sa_values=(8, 16, 24), output_len: int = 1, include_encoder: bool = True) -> dict:
    """Modeled TFLOPs and ratios across the N_SA sweep."""
    points = []
    for n_sa in n_sa_values:
        reps = llava_scale_reports(n_sa, output_len)
        tf = {v: r.tflops(include_encoder) for v, r in reps.items()}
        points.append({"n_sa": n_sa, "tflops": tf,
                       "flex_over_cross": tf["flex"] / tf["cross_attn"],
                       "flex_over_concat": tf["flex"] / tf["hd_concat"],
                       "ordered": tf["flex"] < tf["hd_concat"] < tf["cross_attn"]})
    fx = [p["flex_over_cross"] for p in points]
    fc = [p["flex_over_concat"] for p in points]
    return {"points": points,
            "flex_over_cross_band": (min(fx), max(fx)),
            "flex_over_concat_band": (min(fc), max(fc)),
            "reference_flex_over_cross": REFERENCE_TFLOPS["flex"] / REFERENCE_TFLOPS["cross_attn"],
            "reference_flex_over_concat": REFERENCE_TFLOPS["flex"] / REFERENCE_TFLOPS["hd_concat"]}


# --------------------------------------------------------------------------
# reconciliation against the instrumented model

@dataclass
class ReconcileResult:
    ok: bool
    max_deviation: int
    first_divergence: str | None
    counted: FlopCounter
    analytical: FlopCounter

    def summary(self) -> str:
        if self.ok:
            return "exact match"
        return f"mismatch at {self.first_divergence} (max deviation {self.max_deviation})"


def _compare(label: str, counted: FlopCounter, expected: FlopCounter):
    for kind in ("mul_adds", "exps", "divs", "adds"):
        a, b = getattr(counted, kind), getattr(expected, kind)
        if a != b:
            return f"{label}:{kind} counted={a} analytical={b}", abs(a - b)
    return None, 0


def reconcile(c: CostConfig, variant: str, seed: int = 0) -> ReconcileResult:
    """Run the real decoder stack with FLOP counters and compare with :func:`full_run_flops`.

    Inputs are random hidden states (N x D) and HR tokens (N_hr x D); flex
    layers use a fixed selection of ``c.m`` HR tokens, so any M is
    reachable.  Every layer's counters and the head must agree exactly.
    """
    from .model import (ModelConfig, PrefillResult, build_variant, decode_step,
                        fixed_selector, run_layers)

    if c.n > 64 or c.d_model > 64:
        raise ConfigError("reconcile runs the real model; keep N <= 64 and D <= 64")
    if c.patch_dim is not None or c.encoder is not None:
        raise ConfigError("reconcile covers the decoder stack; drop patch_dim/encoder")
    if variant == "flex" and c.n_hr < max(c.m, 1):
        raise ConfigError("flex reconcile needs N_hr >= max(M, 1)")
    if variant == "cross_attn" and c.n_hr < 1:
        raise ConfigError("cross_attn reconcile needs N_hr >= 1")
    cfg = ModelConfig(d_model=c.d_model, heads=c.heads, n_sa=c.n_sa, n_fa=c.n_fa,
                      ffn_inner=c.inner, vocab=c.vocab, lr_image_side=4, hr_image_side=4,
                      patch_size=4, variant=variant)
    w = build_variant(cfg, seed)
    rng = np.random.default_rng(seed)
    n = prefill_length(c, variant)
    h0 = Matrix(rng.uniform(-1, 1, size=(n, c.d_model)))
    f_hr = Matrix(rng.uniform(-1, 1, size=(max(c.n_hr, 1), c.d_model)))
    hr_idx = np.linspace(0, max(c.n_hr, 1) - 1, num=c.m).round().astype(np.int64) if c.m else np.zeros(0, np.int64)
    select = fixed_selector(hr_idx)

    layer_ctrs = [FlopCounter() for _ in range(cfg.n_layers)]
    head_ctr = FlopCounter()
    out = run_layers(cfg, w, h0, f_hr if uses_hr_tokens(c, variant) else None, min(c.n_i, n),
                     select, None, keep_cache=True, layer_ctrs=layer_ctrs)
    from .tensor import matmul
    logits = matmul(out.hidden, w.head, head_ctr)
    expected = full_run_flops(c, variant)
    checks = [(f"prefill layer {i}", layer_ctrs[i], expected.layer_total("prefill", i))
              for i in range(cfg.n_layers)]
    checks.append(("prefill head", head_ctr, expected.layer_total("prefill", None)))

    state = PrefillResult(logits, out.maps, out.caches, f_hr, out.trace, min(c.n_i, n), out.hidden)
    step_layers = [FlopCounter() for _ in range(cfg.n_layers)]
    step_head = FlopCounter()
    for _ in range(c.output_len - 1):
        decode_step(cfg, w, state, 0, step_head, select, layer_ctrs=step_layers)
    if c.output_len > 1:
        checks += [(f"decode layer {i}", step_layers[i], expected.layer_total("decode", i))
                   for i in range(cfg.n_layers)]
        checks.append(("decode head", step_head, expected.layer_total("decode", None)))

    counted = FlopCounter()
    first, worst = None, 0
    for label, got, want in checks:
        counted = counted + got
        where, dev = _compare(label, got, want)
        worst = max(worst, dev)
        if where and first is None:
            first = where
    analytical = expected.total(include_encoder=False)
    ok = first is None and counted == analytical
    if first is None and not ok:
        first, worst = _compare("total", counted, analytical)
    expected.reconciliation = "exact match" if ok else f"mismatch: {first}"
    return ReconcileResult(ok, worst, first, counted, analytical)


def report_json(reports) -> str:
    return json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True)


def with_m(c: CostConfig, m: int) -> CostConfig:
    return replace(c, m=m)


def counted_attention_core(n: int, m: int, d: int, heads: int = 1, mode: str = "flex",
                           seed: int = 0) -> int:
    """Instrumented multiply-add FLOPs of scores + weighted sum.

    ``flex``: N queries over N + M keys.  ``concat``: N + M queries over
    N + M keys.  Runs the real attention kernel on random projections.
    """
    from .attention import _attend, causal_mask

    rng = np.random.default_rng(seed)
    n_q = n if mode == "flex" else n + m
    if mode not in ("flex", "concat"):
        raise ConfigError(f"mode must be 'flex' or 'concat', got {mode!r}")
    q = Matrix(rng.normal(size=(n_q, d)))
    k, v = Matrix(rng.normal(size=(n + m, d))), Matrix(rng.normal(size=(n + m, d)))
    ctr = FlopCounter()
    _attend(q, k, v, heads, causal_mask(n, m) if mode == "flex" else causal_mask(n + m), ctr)
    return ctr.mul_adds


def cost_config_for(model_cfg, n_text: int, output_len: int = 1) -> CostConfig:
    """CostConfig describing a :class:`~flexattn.model.ModelConfig` run with ``n_text`` prompt tokens."""
    n_i = model_cfg.lr_grid.patch_count
    n_hr = model_cfg.hr_grid.patch_count if model_cfg.uses_hr_tokens() else 0
    k = model_cfg.selection.count(n_i)
    m = {"flex": k * model_cfg.factor ** 2, "hd_concat": n_hr}.get(model_cfg.variant, 0)
    return CostConfig(n_i=n_i, n_t=n_text, m=m, n_hr=n_hr, d_model=model_cfg.d_model,
                      heads=model_cfg.heads, ffn_inner=model_cfg.inner, n_sa=model_cfg.n_sa,
                      n_fa=model_cfg.n_fa, vocab=model_cfg.vocab, output_len=output_len,
                      patch_dim=model_cfg.patch_dim)
