"""A small vision-language decoder with FlexAttention layers and its baselines.

Variants:

``lr_only``
    image downsampled, LR tokens + text through vanilla layers.
``flex``
    first ``n_sa`` layers vanilla, last ``n_fa`` layers select HR tokens from
    the previous layer's attention map and run hierarchical attention.
``hd_concat``
    every HR token is appended after the LR tokens; vanilla layers.
``cross_attn``
    vanilla layers with an extra cross-attention sub-layer over all HR tokens.

Inputs are laid out as [LR image tokens, (HR tokens for hd_concat), text tokens].
Sub-layers use post-LN, ``LN(x + SubLayer(x))``, unless ``pre_ln`` is set.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .attention import (
    AttentionMap,
    AttentionWeights,
    KVCache,
    attention_step,
    cross_attention,
    cross_attention_step,
    hierarchical_self_attention,
    self_attention,
)
from .errors import ConfigError, ShapeError
from .selection import (
    STRATEGIES,
    PatchGrid,
    SelectionStrategy,
    extract_image_attention,
    select_lr_indices,
    upsample_indices,
)
from .tensor import (
    FlopCounter,
    Matrix,
    add,
    concat_rows,
    embedding,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
)

VARIANTS = ("lr_only", "flex", "hd_concat", "cross_attn")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    heads: int = 2
    n_sa: int = 2
    n_fa: int = 2
    ffn_inner: int | None = None
    vocab: int = 32
    lr_image_side: int = 16
    hr_image_side: int = 64
    patch_size: int = 4
    channels: int = 1
    selection: SelectionStrategy = field(default_factory=SelectionStrategy)
    variant: str = "flex"
    pre_ln: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.n_sa < 1 or self.n_fa < 0:
            raise ConfigError("need n_sa >= 1 and n_fa >= 0")
        if self.lr_image_side % self.patch_size or self.hr_image_side % self.patch_size:
            raise ConfigError("image sides must be multiples of the patch size")
        if self.hr_image_side % self.lr_image_side:
            raise ConfigError("HR side must be an integer multiple of the LR side")

    @property
    def inner(self) -> int:
        return self.ffn_inner if self.ffn_inner is not None else 4 * self.d_model

    @property
    def n_layers(self) -> int:
        return self.n_sa + self.n_fa

    @property
    def factor(self) -> int:
        return self.hr_image_side // self.lr_image_side

    @property
    def lr_grid(self) -> PatchGrid:
        return PatchGrid(self.lr_image_side // self.patch_size)

    @property
    def hr_grid(self) -> PatchGrid:
        return PatchGrid(self.hr_image_side // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def layer_kind(self, i: int) -> str:
        if self.variant == "flex" and i >= self.n_sa:
            return "flex"
        return "self"

    def uses_hr_tokens(self) -> bool:
        if self.variant == "hd_concat":
            return self.factor > 1
        return self.variant in ("flex", "cross_attn")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "selection"}
        d["selection"] = {"kind": self.selection.kind, "ratio": self.selection.ratio,
                          "seed": self.selection.seed}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        sel = d.pop("selection", None)
        if sel is not None and not isinstance(sel, SelectionStrategy):
            sel = SelectionStrategy(**sel)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d, **({"selection": sel} if sel is not None else {}))


@dataclass(frozen=True)
class Image:
    """Square image(s); ``pixels`` has shape (..., side, side, channels) with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim < 3 or p.shape[-3] != p.shape[-2]:
            raise ShapeError(f"image must be (..., side, side, channels), got {p.shape}")
        object.__setattr__(self, "pixels", p)

    @property
    def side(self) -> int:
        return self.pixels.shape[-2]

    @property
    def channels(self) -> int:
        return self.pixels.shape[-1]


@dataclass
class LayerWeights:
    attn: AttentionWeights
    ffn_in: Matrix
    ffn_out: Matrix
    ln1_gain: Matrix
    ln1_bias: Matrix
    ln2_gain: Matrix
    ln2_bias: Matrix
    cross: AttentionWeights | None = None
    lnx_gain: Matrix | None = None
    lnx_bias: Matrix | None = None


@dataclass
class ModelWeights:
    patch_proj: Matrix
    pos_lr: Matrix
    pos_hr: Matrix
    token_embed: Matrix
    layers: list[LayerWeights]
    head: Matrix
    final_gain: Matrix
    final_bias: Matrix

    def trainable(self) -> list[Matrix]:
        """Every learned matrix in the fixed persistence order (positional tables excluded)."""
        out = [self.patch_proj, self.token_embed]
        for lw in self.layers:
            out += [lw.attn.w_q, lw.attn.w_k, lw.attn.w_v, lw.attn.w_o]
            if lw.attn.is_flex:
                out += [lw.attn.w_k_prime, lw.attn.w_v_prime]
            out += [lw.ffn_in, lw.ffn_out, lw.ln1_gain, lw.ln1_bias, lw.ln2_gain, lw.ln2_bias]
            if lw.cross is not None:
                out += [lw.cross.w_q, lw.cross.w_k, lw.cross.w_v, lw.cross.w_o,
                        lw.lnx_gain, lw.lnx_bias]
        out += [self.head, self.final_gain, self.final_bias]
        return out

    def all_matrices(self) -> list[Matrix]:
        return [self.pos_lr, self.pos_hr] + self.trainable()

    def with_matrices(self, mats: list[Matrix]) -> "ModelWeights":
        """Copy of these weights with ``trainable()`` replaced, element for element."""
        it = iter(mats)
        nxt = lambda: next(it)  # noqa: E731
        patch_proj, token_embed = nxt(), nxt()
        layers = []
        for lw in self.layers:
            a = lw.attn
            q, k, v, o = nxt(), nxt(), nxt(), nxt()
            kp, vp = (nxt(), nxt()) if a.is_flex else (None, None)
            attn = AttentionWeights(q, k, v, o, a.heads, kp, vp)
            ffn_in, ffn_out = nxt(), nxt()
            g1, b1, g2, b2 = nxt(), nxt(), nxt(), nxt()
            cross = lnx_g = lnx_b = None
            if lw.cross is not None:
                cross = AttentionWeights(nxt(), nxt(), nxt(), nxt(), lw.cross.heads)
                lnx_g, lnx_b = nxt(), nxt()
            layers.append(LayerWeights(attn, ffn_in, ffn_out, g1, b1, g2, b2, cross, lnx_g, lnx_b))
        head, fg, fb = nxt(), nxt(), nxt()
        return ModelWeights(patch_proj, self.pos_lr, self.pos_hr, token_embed, layers, head, fg, fb)


# --------------------------------------------------------------------------
# construction

def sinusoid_2d(side: int, width: int, scale: float = 1.0) -> np.ndarray:
    """Fixed 2-D sinusoidal table for a side x side grid, rows in row-major patch order.

    Half the channels encode the patch-center row, half the column; ``scale``
    converts grid units to a shared coordinate frame so LR and HR tables
    describe the same image locations.
    """
    if width % 4:
        raise ConfigError(f"2-D sinusoidal encoding needs width divisible by 4, got {width}")
    quarter = width // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / quarter))
    centers = (np.arange(side) + 0.5) * scale
    r, c = np.divmod(np.arange(side * side), side)
    parts = []
    for coord in (centers[r], centers[c]):
        ang = coord[:, None] * freqs[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1)


def build_variant(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelWeights:
    """Seeded initialisation.

    Shared matrices are drawn first in a fixed order, so every variant built
    from the same seed agrees on them.  Projections are U(-a, a) with
    a = 1/sqrt(fan_in).  Flex layers start with W_K' = W_K and W_V' = W_V;
    cross-attention weights are drawn last.
    """
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {cfg.variant!r}")
    rng = np.random.default_rng(seed)
    D, F = cfg.d_model, cfg.inner

    def proj(fan_in, fan_out):
        a = 1.0 / math.sqrt(fan_in)
        return Matrix(rng.uniform(-a, a, size=(fan_in, fan_out)), dtype=dtype)

    ones = lambda: Matrix(np.ones((1, D)), dtype=dtype)  # noqa: E731
    zeros = lambda: Matrix(np.zeros((1, D)), dtype=dtype)  # noqa: E731

    patch_proj = proj(cfg.patch_dim, D)
    token_embed = Matrix(rng.uniform(-1.0, 1.0, size=(cfg.vocab, D)), dtype=dtype)
    raw_layers = []
    for i in range(cfg.n_layers):
        q, k, v, o = proj(D, D), proj(D, D), proj(D, D), proj(D, D)
        ffn_in, ffn_out = proj(D, F), proj(F, D)
        raw_layers.append((i, q, k, v, o, ffn_in, ffn_out))
    head = proj(D, cfg.vocab)

    layers = []
    for i, q, k, v, o, ffn_in, ffn_out in raw_layers:
        flex = cfg.layer_kind(i) == "flex"
        attn = AttentionWeights(q, k, v, o, cfg.heads,
                                Matrix(k.data, dtype=dtype) if flex else None,
                                Matrix(v.data, dtype=dtype) if flex else None)
        layers.append(LayerWeights(attn, ffn_in, ffn_out, ones(), zeros(), ones(), zeros()))
    if cfg.variant == "cross_attn":
        for lw in layers:
            lw.cross = AttentionWeights(proj(D, D), proj(D, D), proj(D, D), proj(D, D), cfg.heads)
            lw.lnx_gain, lw.lnx_bias = ones(), zeros()

    factor = cfg.factor
    pos_lr = Matrix(sinusoid_2d(cfg.lr_grid.side, D, scale=factor), dtype=dtype)
    pos_hr = Matrix(sinusoid_2d(cfg.hr_grid.side, D), dtype=dtype)
    return ModelWeights(patch_proj, pos_lr, pos_hr, token_embed, layers, head, ones(), zeros())


# --------------------------------------------------------------------------
# image path

def downsample(img: Image, factor: int) -> Image:
    """Area-average pooling over factor x factor pixel blocks."""
    if factor < 1 or img.side % factor:
        raise ConfigError(f"image side {img.side} not divisible by factor {factor}")
    if factor == 1:
        return img
    p = img.pixels
    s, ch = img.side // factor, img.channels
    blocks = p.reshape(p.shape[:-3] + (s, factor, s, factor, ch))
    return Image(blocks.mean(axis=(-4, -2)))


def patchify(img: Image, patch: int) -> np.ndarray:
    """(..., side, side, ch) -> (..., n_patches, patch*patch*ch), patches in row-major order."""
    p = img.pixels
    if img.side % patch:
        raise ShapeError(f"image side {img.side} not divisible by patch size {patch}")
    g, ch = img.side // patch, img.channels
    lead = p.shape[:-3]
    x = p.reshape(lead + (g, patch, g, patch, ch))
    nd = len(lead)
    x = x.transpose(tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3, nd + 4))
    return x.reshape(lead + (g * g, patch * patch * ch))


def encode_image(img: Image, cfg: ModelConfig, w: ModelWeights, which: str,
                 ctr: FlopCounter | None = None) -> Matrix:
    """Linear patch embedding plus the matching positional table."""
    pos = {"lr": w.pos_lr, "hr": w.pos_hr}.get(which)
    if pos is None:
        raise ConfigError(f"which must be 'lr' or 'hr', got {which!r}")
    patches = patchify(img, cfg.patch_size)
    if patches.shape[-2] != pos.rows:
        raise ShapeError(f"{patches.shape[-2]} patches but {which} positional table has {pos.rows} rows")
    x = Matrix.wrap(patches.astype(w.patch_proj.dtype, copy=False))
    return add(matmul(x, w.patch_proj, ctr), pos, ctr)


# --------------------------------------------------------------------------
# decoder stack

Selector = Callable[[int, np.ndarray], tuple[np.ndarray, np.ndarray]]


def strategy_selector(cfg: ModelConfig, rng: np.random.Generator | None = None) -> Selector:
    """Selector applying ``cfg.selection`` on the LR grid and lifting to the HR grid."""
    grid, factor = cfg.lr_grid, cfg.factor
    if rng is None and cfg.selection.kind == "random":
        rng = np.random.default_rng(cfg.selection.seed)

    def select(layer: int, attn: np.ndarray):
        lr = select_lr_indices(attn, grid, cfg.selection, rng)
        return lr, upsample_indices(lr, grid.side, factor)

    return select


def fixed_selector(hr_indices) -> Selector:
    """Selector that ignores the map and always returns ``hr_indices``."""
    idx = np.asarray(hr_indices, dtype=np.int64)

    def select(layer: int, attn: np.ndarray):
        lead = attn.shape[:-1]
        return (np.zeros(lead + (0,), dtype=np.int64),
                np.broadcast_to(idx, lead + idx.shape).copy())

    return select


@dataclass
class SelectionRecord:
    layer: int
    source_layer: int
    attention: np.ndarray
    lr_indices: np.ndarray
    hr_indices: np.ndarray

    def to_dict(self) -> dict:
        return {"layer": self.layer, "source_layer": self.source_layer,
                "attention": np.asarray(self.attention).tolist(),
                "lr_indices": np.asarray(self.lr_indices).tolist(),
                "hr_indices": np.asarray(self.hr_indices).tolist()}


def _sublayer(h: Matrix, fn, gain: Matrix, bias: Matrix, pre_ln: bool, ctr):
    if pre_ln:
        out, extra = fn(layer_norm(h, gain, bias, ctr))
        return add(h, out, ctr), extra
    out, extra = fn(h)
    return layer_norm(add(h, out, ctr), gain, bias, ctr), extra


def _ffn(h: Matrix, lw: LayerWeights, ctr):
    return matmul(gelu(matmul(h, lw.ffn_in, ctr), ctr), lw.ffn_out, ctr), None


def _forced_hr(f_hr: Matrix, segments, n: int):
    """Concatenate per-segment HR selections and the row-visibility mask."""
    starts = [s for s, _ in segments]
    if starts[0] != 0 or starts != sorted(starts):
        raise ConfigError("forced selection segments must start at row 0 and ascend")
    idx = np.concatenate([np.asarray(ix, dtype=np.int64) for _, ix in segments])
    visible = np.zeros((n, idx.size), dtype=bool)
    col = 0
    bounds = starts[1:] + [n]
    for (start, ix), stop in zip(segments, bounds):
        visible[start:stop, col:col + len(ix)] = True
        col += len(ix)
    return gather_rows(f_hr, idx), visible


@dataclass
class StackOutput:
    hidden: Matrix
    maps: list[AttentionMap]
    trace: list[SelectionRecord]
    caches: KVCache | None


def run_layers(cfg: ModelConfig, w: ModelWeights, h: Matrix, f_hr: Matrix | None,
               n_image: int, select: Selector | None = None,
               ctr: FlopCounter | None = None, keep_cache: bool = False,
               forced: dict | None = None,
               layer_ctrs: list[FlopCounter] | None = None) -> StackOutput:
    """Run the decoder stack on H^0 (shape (..., N, D)).

    ``forced`` maps a flex layer index to a list of (row_start, hr_indices)
    segments; rows in a segment attend only to that segment's HR tokens.
    It replays a decode-time selection schedule through one prefill pass.
    ``layer_ctrs``, if given, receives layer i's FLOPs instead of ``ctr``.
    """
    if select is None:
        select = strategy_selector(cfg)
    maps: list[AttentionMap] = []
    trace: list[SelectionRecord] = []
    caches = KVCache.empty(cfg.n_layers) if keep_cache else None
    prev: AttentionMap | None = None
    top_ctr = ctr
    for i, lw in enumerate(w.layers):
        ctr = layer_ctrs[i] if layer_ctrs is not None else top_ctr
        kind = cfg.layer_kind(i)
        if kind == "flex":
            attn_vec = extract_image_attention(prev, n_image)
            hr_visible = None
            if forced is not None and i in forced:
                f_shr, hr_visible = _forced_hr(f_hr, forced[i], h.rows)
                lr_idx = np.zeros((0,), dtype=np.int64)
                hr_idx = np.concatenate([np.asarray(ix) for _, ix in forced[i]])
            else:
                lr_idx, hr_idx = select(i, attn_vec)
                f_shr = gather_rows(f_hr, hr_idx, decided_by=prev.values)
            trace.append(SelectionRecord(i, i - 1, attn_vec, lr_idx, hr_idx))

            def attn_fn(x, lw=lw, f_shr=f_shr, hr_visible=hr_visible, ctr=ctr):
                out, _, trunc = hierarchical_self_attention(x, f_shr, lw.attn, True, ctr, hr_visible)
                return out, trunc
        else:
            def attn_fn(x, lw=lw, ctr=ctr):
                return self_attention(x, lw.attn, True, ctr)

        x_in = h
        h, prev = _sublayer(h, attn_fn, lw.ln1_gain, lw.ln1_bias, cfg.pre_ln, ctr)
        if keep_cache:
            _fill_cache(caches.layers[i], lw, x_in, cfg, f_hr)
        maps.append(prev)
        if lw.cross is not None:
            h, _ = _sublayer(h, lambda x, lw=lw, ctr=ctr: (cross_attention(x, f_hr, lw.cross, ctr), None),
                             lw.lnx_gain, lw.lnx_bias, cfg.pre_ln, ctr)
            if keep_cache:
                c = caches.layers[i]
                # projections are recomputed uncounted; the counted pass above already paid for them
                c.cross_keys = matmul(f_hr, lw.cross.w_k)
                c.cross_values = matmul(f_hr, lw.cross.w_v)
        h, _ = _sublayer(h, lambda x, lw=lw, ctr=ctr: _ffn(x, lw, ctr), lw.ln2_gain, lw.ln2_bias,
                         cfg.pre_ln, ctr)
    if cfg.pre_ln:
        h = layer_norm(h, w.final_gain, w.final_bias, top_ctr)
    return StackOutput(h, maps, trace, caches)


def _fill_cache(cache, lw: LayerWeights, x_in: Matrix, cfg: ModelConfig, f_hr) -> None:
    if x_in.data.ndim != 2:
        raise ShapeError("KV caches are kept for a single sequence only")
    # cache filling is bookkeeping outside the counted forward pass
    src = x_in
    if cfg.pre_ln:
        src = layer_norm(x_in, lw.ln1_gain, lw.ln1_bias)
    cache.keys = matmul(src, lw.attn.w_k)
    cache.values = matmul(src, lw.attn.w_v)


# --------------------------------------------------------------------------
# prefill / decode

@dataclass
class PrefillResult:
    logits: Matrix
    maps: list[AttentionMap]
    caches: KVCache | None
    f_hr: Matrix | None
    trace: list[SelectionRecord]
    n_image: int
    hidden: Matrix
    step_traces: list[list[SelectionRecord]] = field(default_factory=list)


def embed_inputs(cfg: ModelConfig, w: ModelWeights, img_hr: Image, text_ids,
                 ctr: FlopCounter | None = None) -> tuple[Matrix, Matrix | None, int]:
    """H^0 = [LR tokens, (all HR tokens for hd_concat), text embeddings] and f_HR."""
    text_ids = np.asarray(text_ids, dtype=np.int64)
    if text_ids.shape[-1] == 0:
        raise ConfigError("text input must contain at least one token")
    if img_hr.side != cfg.hr_image_side or img_hr.channels != cfg.channels:
        raise ShapeError(f"expected {cfg.hr_image_side}px x {cfg.channels}ch image, "
                         f"got {img_hr.side}px x {img_hr.channels}ch")
    if img_hr.pixels.shape[:-3] != text_ids.shape[:-1]:
        raise ShapeError("image batch and text batch shapes differ")
    img_lr = downsample(img_hr, cfg.factor)
    f_lr = encode_image(img_lr, cfg, w, "lr", ctr)
    f_hr = encode_image(img_hr, cfg, w, "hr", ctr) if cfg.uses_hr_tokens() else None
    h = f_lr
    if cfg.variant == "hd_concat" and f_hr is not None:
        h = concat_rows(h, f_hr)
    h = concat_rows(h, embedding(w.token_embed, text_ids))
    return h, f_hr, f_lr.rows


def forward(cfg: ModelConfig, w: ModelWeights, img_hr: Image, text_ids,
            select: Selector | None = None, ctr: FlopCounter | None = None,
            keep_cache: bool = False, forced: dict | None = None) -> PrefillResult:
    """Prefill over a single sequence or a batch (leading axes on image and ids)."""
    h0, f_hr, n_image = embed_inputs(cfg, w, img_hr, text_ids, ctr)
    out = run_layers(cfg, w, h0, f_hr, n_image, select, ctr, keep_cache, forced)
    logits = matmul(out.hidden, w.head, ctr)
    return PrefillResult(logits, out.maps, out.caches, f_hr, out.trace, n_image, out.hidden)


def prefill(cfg: ModelConfig, w: ModelWeights, img_hr: Image, text_ids,
            ctr: FlopCounter | None = None, select: Selector | None = None) -> PrefillResult:
    """Single-sequence prefill that also builds the KV caches for :func:`decode_step`."""
    if np.asarray(text_ids).ndim != 1:
        raise ShapeError("prefill takes one id sequence; use forward() for batches")
    return forward(cfg, w, img_hr, text_ids, select, ctr, keep_cache=True)


def decode_step(cfg: ModelConfig, w: ModelWeights, state: PrefillResult, token_id: int,
                ctr: FlopCounter | None = None, select: Selector | None = None,
                layer_ctrs: list[FlopCounter] | None = None) -> Matrix:
    """Feed one token through every layer against the caches; returns its 1 x vocab logits.

    Flex layers reselect HR tokens from the previous layer's newest map row
    and rebuild their HR keys/values.  The step's selections are appended to
    ``state.step_traces``.
    """
    if select is None:
        select = strategy_selector(cfg)
    x = embedding(w.token_embed, [int(token_id)])
    prev_row = None
    records = []
    top_ctr = ctr
    for i, lw in enumerate(w.layers):
        ctr = layer_ctrs[i] if layer_ctrs is not None else top_ctr
        cache = state.caches.layers[i]
        kind = cfg.layer_kind(i)
        seq_len = cache.length + 1
        if kind == "flex":
            attn_vec = extract_image_attention(prev_row, state.n_image)
            lr_idx, hr_idx = select(i, attn_vec[None])
            lr_idx, hr_idx = lr_idx[0], hr_idx[0]
            f_shr = gather_rows(state.f_hr, hr_idx)
            records.append(SelectionRecord(i, i - 1, attn_vec, lr_idx, hr_idx))

            def attn_fn(t, cache=cache, lw=lw, f_shr=f_shr, hr_idx=hr_idx, ctr=ctr):
                return attention_step(cache, t, lw.attn, "flex", f_shr, ctr, hr_idx)
        else:
            def attn_fn(t, cache=cache, lw=lw, ctr=ctr):
                return attention_step(cache, t, lw.attn, "self", None, ctr)

        x, row = _sublayer(x, attn_fn, lw.ln1_gain, lw.ln1_bias, cfg.pre_ln, ctr)
        prev_row = row[:seq_len]
        if lw.cross is not None:
            x, _ = _sublayer(
                x, lambda t, c=cache, lw=lw, ctr=ctr: (cross_attention_step(c, t, lw.cross, state.f_hr, ctr), None),
                lw.lnx_gain, lw.lnx_bias, cfg.pre_ln, ctr)
        x, _ = _sublayer(x, lambda t, lw=lw, ctr=ctr: _ffn(t, lw, ctr), lw.ln2_gain, lw.ln2_bias,
                         cfg.pre_ln, ctr)
    if cfg.pre_ln:
        x = layer_norm(x, w.final_gain, w.final_bias, top_ctr)
    state.step_traces.append(records)
    return matmul(x, w.head, top_ctr)


def generate(cfg: ModelConfig, w: ModelWeights, img_hr: Image, prompt_ids, max_new: int,
             end_id: int | None = None, ctr: FlopCounter | None = None,
             return_state: bool = False):
    """Greedy decoding; the first new token comes from the prefill's last row."""
    if max_new < 1:
        raise ConfigError("max_new must be >= 1")
    state = prefill(cfg, w, img_hr, prompt_ids, ctr)
    step_logits = [state.logits.data[-1]]
    out = [int(np.argmax(step_logits[-1]))]
    while len(out) < max_new and (end_id is None or out[-1] != end_id):
        logits = decode_step(cfg, w, state, out[-1], ctr)
        step_logits.append(logits.data[0])
        out.append(int(np.argmax(logits.data[0])))
    if return_state:
        return out, state, np.array(step_logits)
    return out


def teacher_forced(cfg: ModelConfig, w: ModelWeights, img_hr: Image, prompt_ids,
                   fed_ids, state: PrefillResult) -> Matrix:
    """Prefill over prompt + fed tokens, replaying the recorded per-step selections.

    Row ``n_image + len(prompt) - 1 + t`` of the result holds the logits
    produced at decode step t (t = 0 is the prefill's last row).
    """
    prompt_ids = list(prompt_ids)
    fed_ids = list(fed_ids)
    forced = {}
    p = state.logits.rows
    for rec in state.trace:
        forced[rec.layer] = [(0, rec.hr_indices)]
    for t, records in enumerate(state.step_traces):
        for rec in records:
            forced[rec.layer].append((p + t, rec.hr_indices))
    ids = np.array(prompt_ids + fed_ids, dtype=np.int64)
    return forward(cfg, w, img_hr, ids, forced=forced or None).logits


# --------------------------------------------------------------------------
# persistence

MAGIC = b"FLEXATTN1"
_HEADER_FIELDS = ("d_model", "heads", "n_sa", "n_fa", "ffn_inner", "vocab", "lr_image_side",
                  "hr_image_side", "patch_size", "channels", "variant", "selection_kind",
                  "selection_ratio_bits", "selection_seed", "pre_ln")


def _header_values(cfg: ModelConfig) -> list[int]:
    ratio_bits = struct.unpack("<q", struct.pack("<d", cfg.selection.ratio))[0]
    return [cfg.d_model, cfg.heads, cfg.n_sa, cfg.n_fa, cfg.inner, cfg.vocab, cfg.lr_image_side,
            cfg.hr_image_side, cfg.patch_size, cfg.channels, VARIANTS.index(cfg.variant),
            STRATEGIES.index(cfg.selection.kind), ratio_bits, cfg.selection.seed, int(cfg.pre_ln)]


def save_weights(path, cfg: ModelConfig, w: ModelWeights) -> None:
    """Write ``FLEXATTN1`` + header (int64 LE fields) + float64 LE matrices.

    Header: field count, then the fields of ``_HEADER_FIELDS`` in order
    (the selection ratio travels as the int64 view of its float64 bits).
    Body: ``ModelWeights.all_matrices()`` order, i.e. pos_lr, pos_hr,
    patch_proj, token_embed, then per layer w_q, w_k, w_v, w_o, [w_k', w_v'],
    ffn_in, ffn_out, ln1 gain/bias, ln2 gain/bias, [cross w_q..w_o, ln gain/bias],
    then head, final gain/bias.  Shapes follow from the header.
    """
    vals = _header_values(cfg)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<q", len(vals)))
        fh.write(struct.pack(f"<{len(vals)}q", *vals))
        for m in w.all_matrices():
            fh.write(np.ascontiguousarray(m.data, dtype="<f8").tobytes())


def load_weights(path) -> tuple[ModelConfig, ModelWeights]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise ConfigError(f"{path}: not a FLEXATTN1 weight file")
    pos = len(MAGIC)
    (count,) = struct.unpack_from("<q", blob, pos)
    pos += 8
    if count != len(_HEADER_FIELDS):
        raise ConfigError(f"{path}: header has {count} fields, expected {len(_HEADER_FIELDS)}")
    vals = dict(zip(_HEADER_FIELDS, struct.unpack_from(f"<{count}q", blob, pos)))
    pos += 8 * count
    ratio = struct.unpack("<d", struct.pack("<q", vals["selection_ratio_bits"]))[0]
    cfg = ModelConfig(
        d_model=vals["d_model"], heads=vals["heads"], n_sa=vals["n_sa"], n_fa=vals["n_fa"],
        ffn_inner=vals["ffn_inner"], vocab=vals["vocab"], lr_image_side=vals["lr_image_side"],
        hr_image_side=vals["hr_image_side"], patch_size=vals["patch_size"],
        channels=vals["channels"], variant=VARIANTS[vals["variant"]],
        selection=SelectionStrategy(STRATEGIES[vals["selection_kind"]], ratio,
                                    vals["selection_seed"]),
        pre_ln=bool(vals["pre_ln"]))
    template = build_variant(cfg, seed=0)
    mats = []
    for m in template.all_matrices():
        n = m.data.size
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
        mats.append(Matrix.wrap(arr.reshape(m.shape)))
    if pos != len(blob):
        raise ConfigError(f"{path}: {len(blob) - pos} trailing bytes")
    w = template.with_matrices(mats[2:])
    w.pos_lr, w.pos_hr = mats[0], mats[1]
    return cfg, w


def with_selection(cfg: ModelConfig, **kw) -> ModelConfig:
    return replace(cfg, selection=replace(cfg.selection, **kw))
