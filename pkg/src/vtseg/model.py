"""Multimodal fusion model: projections, fusion layers, gating, predictor.

The model consumes two per-clip feature streams (visual, text), projects
them to a shared width, runs M fusion layers of the configured kind, and
predicts a per-clip boundary probability from the concatenated streams.

Four fusion layer designs are supported:

* ``merge``:     one shared self-attention over the 2n-row concatenation of
                 both streams, followed by a feed-forward block.
* ``co``:        per-stream self-attention, then symmetric cross-attention
                 (each stream queries the other), then per-stream FFN.
* ``merge_moe`` / ``co_moe``: the feed-forward block is replaced by a
                 noisy-top-k-gated mixture of expert MLPs applied to the
                 2n-row concatenation of the streams.

Blocks are pre-norm residual (layer norm before each sub-block, residual
add after). Positional information enters only through learned per-head
relative-position biases on attention logits (zero-initialized), keeping
the residual stream position-free.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import (AttentionParams, FfnParams, Param, Tensor, concat, dropout,
                       feed_forward, layer_norm, linear, multi_head_attention,
                       narrow, reshape, sigmoid, softmax, softplus)
from .config import ModelConfig, model_config_canonical, model_config_from_canonical
from .errors import ConfigError, DataError, FormatError

INIT_STD = 0.02
LOAD_NOISE_FLOOR = 1e-3

# Each attention head starts preferring one clip offset so neighbor-comparison
# paths exist from step one; heads cycle through this pattern (0 keeps a head
# purely content-driven). The bias must dominate log(seq_len) of uniform mass
# to actually concentrate a head; training is free to unlearn it.
HEAD_OFFSET_CYCLE = (1, -1, 2, -2, 3, -3, 0, 0)
HEAD_OFFSET_BIAS = 8.0

CHECKPOINT_MAGIC = b"VTSM"
CHECKPOINT_VERSION = 1


@dataclass
class ForwardMode:
    """Runtime switches for a forward pass.

    Deterministic mode disables dropout and gating noise so repeated
    passes (and finite differencing) see the exact same graph.
    """

    training: bool = False
    deterministic: bool = True
    rng: np.random.Generator | None = None

    @property
    def stochastic(self) -> bool:
        return self.training and not self.deterministic

    def drop(self, x, p):
        return dropout(x, p, self.rng, self.stochastic)


EVAL_MODE = ForwardMode(training=False, deterministic=True)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class LayerNormParams:
    gain: Param
    bias: Param


@dataclass
class GateParams:
    wg: Param
    wn: Param


@dataclass
class MergeLayerParams:
    ln_attn: LayerNormParams
    attn: AttentionParams
    ln_ff: LayerNormParams
    ffn: FfnParams | None = None
    gate: GateParams | None = None
    experts: list[FfnParams] = field(default_factory=list)


@dataclass
class CoLayerParams:
    ln_self_v: LayerNormParams
    self_v: AttentionParams
    ln_self_t: LayerNormParams
    self_t: AttentionParams
    ln_q_v: LayerNormParams
    ln_kv_v: LayerNormParams
    cross_v: AttentionParams
    ln_q_t: LayerNormParams
    ln_kv_t: LayerNormParams
    cross_t: AttentionParams
    ln_ff_v: LayerNormParams | None = None
    ffn_v: FfnParams | None = None
    ln_ff_t: LayerNormParams | None = None
    ffn_t: FfnParams | None = None
    ln_moe: LayerNormParams | None = None
    gate: GateParams | None = None
    experts: list[FfnParams] = field(default_factory=list)


@dataclass
class ModelParams:
    proj_v: Param
    proj_t: Param
    layers: list
    pred_w: Param
    pred_b: Param


@dataclass
class GateStats:
    """Per-layer gating record consumed by the balance loss."""

    gate: Tensor            # [rows x E], rows sum to 1 with exactly K nonzeros
    clean: Tensor           # [rows x E] pre-noise scores
    noisy: Tensor           # [rows x E] scores used for top-k selection
    load_scale: Tensor      # [rows x E] noise scale for the smooth load estimator
    row_valid: np.ndarray   # [rows] bool, False for padded rows


@dataclass
class FusedStates:
    h_v: Tensor
    h_t: Tensor
    m: Tensor
    p: Tensor
    gate_stats: list[GateStats]


# ---------------------------------------------------------------------------
# Initialization and parameter registry
# ---------------------------------------------------------------------------


def _w(rng, shape, name):
    return Param(rng.normal(0.0, INIT_STD, size=shape), name=name)


def _b(shape, name):
    return Param(np.zeros(shape), name=name)


def _ln(d, name):
    return LayerNormParams(Param(np.ones(d), name=f"{name}.gain"),
                           Param(np.zeros(d), name=f"{name}.bias"))


def _attn(rng, d, heads, rel_window, name):
    bias = np.zeros((heads, 2 * rel_window + 1))
    for h in range(heads):
        off = HEAD_OFFSET_CYCLE[h % len(HEAD_OFFSET_CYCLE)]
        if off != 0 and abs(off) <= rel_window:
            bias[h, rel_window + off] = HEAD_OFFSET_BIAS
    return AttentionParams(
        heads,
        _w(rng, (d, d), f"{name}.wq"), _b(d, f"{name}.bq"),
        _w(rng, (d, d), f"{name}.wk"), _b(d, f"{name}.bk"),
        _w(rng, (d, d), f"{name}.wv"), _b(d, f"{name}.bv"),
        _w(rng, (d, d), f"{name}.wo"), _b(d, f"{name}.bo"),
        rel_bias=Param(bias, name=f"{name}.rel_bias"),
    )


def _ffn(rng, d, hidden, name):
    return FfnParams(_w(rng, (d, hidden), f"{name}.w1"), _b(hidden, f"{name}.b1"),
                     _w(rng, (hidden, d), f"{name}.w2"), _b(d, f"{name}.b2"))


def _gate(rng, d, experts, name):
    return GateParams(_w(rng, (d, experts), f"{name}.wg"),
                      _w(rng, (d, experts), f"{name}.wn"))


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Fresh parameters: N(0, 0.02) weights, zero biases, unit LN gains."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    d = cfg.hidden_dim
    layers = []
    for i in range(0 if cfg.fusion_kind == "none" else cfg.num_layers):
        nm = f"layers.{i}"
        if cfg.fusion_kind.startswith("merge"):
            lp = MergeLayerParams(
                ln_attn=_ln(d, f"{nm}.ln_attn"),
                attn=_attn(rng, d, cfg.heads, cfg.rel_window, f"{nm}.attn"),
                ln_ff=_ln(d, f"{nm}.ln_ff"),
            )
            if cfg.fusion_kind == "merge_moe":
                lp.gate = _gate(rng, d, cfg.expert_count, f"{nm}.gate")
                lp.experts = [_ffn(rng, d, cfg.expert_intermediate, f"{nm}.experts.{e}")
                              for e in range(cfg.expert_count)]
            else:
                lp.ffn = _ffn(rng, d, cfg.ffn_intermediate, f"{nm}.ffn")
        else:
            lp = CoLayerParams(
                ln_self_v=_ln(d, f"{nm}.ln_self_v"),
                self_v=_attn(rng, d, cfg.heads, cfg.rel_window, f"{nm}.self_v"),
                ln_self_t=_ln(d, f"{nm}.ln_self_t"),
                self_t=_attn(rng, d, cfg.heads, cfg.rel_window, f"{nm}.self_t"),
                ln_q_v=_ln(d, f"{nm}.ln_q_v"),
                ln_kv_v=_ln(d, f"{nm}.ln_kv_v"),
                cross_v=_attn(rng, d, cfg.heads, cfg.rel_window, f"{nm}.cross_v"),
                ln_q_t=_ln(d, f"{nm}.ln_q_t"),
                ln_kv_t=_ln(d, f"{nm}.ln_kv_t"),
                cross_t=_attn(rng, d, cfg.heads, cfg.rel_window, f"{nm}.cross_t"),
            )
            if cfg.fusion_kind == "co_moe":
                lp.ln_moe = _ln(d, f"{nm}.ln_moe")
                lp.gate = _gate(rng, d, cfg.expert_count, f"{nm}.gate")
                lp.experts = [_ffn(rng, d, cfg.expert_intermediate, f"{nm}.experts.{e}")
                              for e in range(cfg.expert_count)]
            else:
                lp.ln_ff_v = _ln(d, f"{nm}.ln_ff_v")
                lp.ffn_v = _ffn(rng, d, cfg.ffn_intermediate, f"{nm}.ffn_v")
                lp.ln_ff_t = _ln(d, f"{nm}.ln_ff_t")
                lp.ffn_t = _ffn(rng, d, cfg.ffn_intermediate, f"{nm}.ffn_t")
        layers.append(lp)
    return ModelParams(
        proj_v=_w(rng, (cfg.visual_dim, d), "proj_v"),
        proj_t=_w(rng, (cfg.text_dim, d), "proj_t"),
        layers=layers,
        pred_w=_w(rng, (2 * d, 1), "pred_w"),
        pred_b=_b(1, "pred_b"),
    )


def _attn_params(a: AttentionParams):
    out = [a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo]
    if a.rel_bias is not None:
        out.append(a.rel_bias)
    return out


def _ffn_params(f: FfnParams):
    return [f.w1, f.b1, f.w2, f.b2]


def _ln_params(ln: LayerNormParams):
    return [ln.gain, ln.bias]


def named_params(params: ModelParams) -> list[Param]:
    """All trainable parameters in a fixed, documented traversal order."""
    out = [params.proj_v, params.proj_t]
    for lp in params.layers:
        if isinstance(lp, MergeLayerParams):
            out += _ln_params(lp.ln_attn) + _attn_params(lp.attn) + _ln_params(lp.ln_ff)
            if lp.gate is not None:
                out += [lp.gate.wg, lp.gate.wn]
                for e in lp.experts:
                    out += _ffn_params(e)
            else:
                out += _ffn_params(lp.ffn)
        else:
            out += _ln_params(lp.ln_self_v) + _attn_params(lp.self_v)
            out += _ln_params(lp.ln_self_t) + _attn_params(lp.self_t)
            out += _ln_params(lp.ln_q_v) + _ln_params(lp.ln_kv_v) + _attn_params(lp.cross_v)
            out += _ln_params(lp.ln_q_t) + _ln_params(lp.ln_kv_t) + _attn_params(lp.cross_t)
            if lp.gate is not None:
                out += _ln_params(lp.ln_moe) + [lp.gate.wg, lp.gate.wn]
                for e in lp.experts:
                    out += _ffn_params(e)
            else:
                out += _ln_params(lp.ln_ff_v) + _ffn_params(lp.ffn_v)
                out += _ln_params(lp.ln_ff_t) + _ffn_params(lp.ffn_t)
    out += [params.pred_w, params.pred_b]
    return out


def param_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count for a config."""
    d, h = cfg.hidden_dim, cfg.heads
    attn = 4 * d * d + 4 * d + h * (2 * cfg.rel_window + 1)
    ln = 2 * d
    ffn = d * cfg.ffn_intermediate + cfg.ffn_intermediate + cfg.ffn_intermediate * d + d
    expert = d * cfg.expert_intermediate + cfg.expert_intermediate \
        + cfg.expert_intermediate * d + d
    moe = 2 * d * cfg.expert_count + cfg.expert_count * expert
    if cfg.fusion_kind == "none":
        layer = 0
    elif cfg.fusion_kind == "merge":
        layer = ln + attn + ln + ffn
    elif cfg.fusion_kind == "merge_moe":
        layer = ln + attn + ln + moe
    elif cfg.fusion_kind == "co":
        layer = 2 * (ln + attn) + 2 * (2 * ln + attn) + 2 * (ln + ffn)
    else:  # co_moe
        layer = 2 * (ln + attn) + 2 * (2 * ln + attn) + ln + moe
    n_layers = 0 if cfg.fusion_kind == "none" else cfg.num_layers
    return (cfg.visual_dim * d + cfg.text_dim * d) + n_layers * layer + (2 * d + 1)


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------


def concat_visual_features(v2d: np.ndarray, v3d: np.ndarray, vocr: np.ndarray,
                           video_id: str = "<unknown>") -> np.ndarray:
    """Per-clip concatenation of the three visual feature subtypes (2D;3D;OCR)."""
    arrays = {"2d": v2d, "3d": v3d, "ocr": vocr}
    for name, a in arrays.items():
        if a is None:
            raise DataError(f"video {video_id}: missing visual feature subtype {name!r}")
    v2d, v3d, vocr = (np.asarray(a, dtype=np.float64) for a in (v2d, v3d, vocr))
    rows = {a.shape[0] for a in (v2d, v3d, vocr)}
    if len(rows) != 1:
        raise DataError(
            f"video {video_id}: visual feature row counts differ: "
            f"2d={v2d.shape[0]} 3d={v3d.shape[0]} ocr={vocr.shape[0]}")
    return np.concatenate([v2d, v3d, vocr], axis=1)


def project(raw_v, raw_t, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Map raw unimodal features to the shared hidden width."""
    return linear(raw_v, params.proj_v), linear(raw_t, params.proj_t)


def noisy_topk_gate(x: Tensor, gate: GateParams, k: int, mode: ForwardMode,
                    row_valid: np.ndarray | None = None) -> GateStats:
    """Noisy top-k gating: per row keep the k highest-scoring experts.

    Training adds standard-normal noise scaled by softplus of a learned
    projection; deterministic mode (and evaluation) omits it. Rows get
    exactly k nonzero weights summing to 1; score ties resolve to the
    lowest expert index.
    """
    e_count = gate.wg.shape[1]
    if k > e_count:
        raise ConfigError(f"active experts {k} exceeds expert count {e_count}")
    clean = ad.matmul(x, gate.wg)
    raw_scale = softplus(ad.matmul(x, gate.wn))
    if mode.stochastic:
        if mode.rng is None:
            raise ConfigError("gating noise requires an rng in stochastic mode")
        eps = mode.rng.standard_normal(clean.shape)
        noisy = ad.add(clean, ad.mul(Tensor(eps), raw_scale))
    else:
        noisy = clean
    load_scale = ad.clamp(raw_scale, lo=LOAD_NOISE_FLOOR)

    rows, _ = clean.shape
    # Stable ranking: score descending, index ascending on ties.
    order = np.argsort(-noisy.data, axis=1, kind="stable")
    keep = np.full((rows, e_count), -np.inf)
    np.put_along_axis(keep, order[:, :k], 0.0, axis=1)
    gates = softmax(ad.add(noisy, Tensor(keep)), axis=1)
    if row_valid is None:
        row_valid = np.ones(rows, dtype=bool)
    return GateStats(gate=gates, clean=clean, noisy=noisy,
                     load_scale=load_scale, row_valid=row_valid)


def moe_block(x: Tensor, gates: Tensor, experts: list[FfnParams]) -> Tensor:
    """Weighted sum of expert MLP outputs, evaluated only where routed."""
    rows = x.shape[0]
    out = None
    for e, ep in enumerate(experts):
        idx = np.nonzero(gates.data[:, e] > 0.0)[0]
        if idx.size == 0:
            continue
        sub = ad.gather_rows(x, idx)
        weight = ad.gather_rows(narrow(gates, 1, e, e + 1), idx)
        contrib = ad.scatter_rows(ad.mul(feed_forward(sub, ep), weight), idx, rows)
        out = contrib if out is None else ad.add(out, contrib)
    if out is None:
        raise ConfigError("moe_block: no expert received any row")
    return out


def moe_block_dense(x: Tensor, gates: Tensor, experts: list[FfnParams]) -> Tensor:
    """Reference: dense sum over all experts with zero-weight inactive entries."""
    out = None
    for e, ep in enumerate(experts):
        contrib = ad.mul(feed_forward(x, ep), narrow(gates, 1, e, e + 1))
        out = contrib if out is None else ad.add(out, contrib)
    return out


def _self_block(x, ln, attn, pos, mask, cfg, mode):
    a_in = layer_norm(x, ln.gain, ln.bias)
    out = multi_head_attention(a_in, a_in, a_in, attn, mask=mask,
                               pos_q=pos, pos_k=pos, dropout_p=cfg.dropout_p,
                               rng=mode.rng, training=mode.stochastic)
    return ad.add(x, mode.drop(out, cfg.dropout_p))


def _cross_block(x_q, x_kv, ln_q, ln_kv, attn, pos_q, pos_k, mask_kv, cfg, mode):
    q_in = layer_norm(x_q, ln_q.gain, ln_q.bias)
    kv_in = layer_norm(x_kv, ln_kv.gain, ln_kv.bias)
    out = multi_head_attention(q_in, kv_in, kv_in, attn, mask=mask_kv,
                               pos_q=pos_q, pos_k=pos_k, dropout_p=cfg.dropout_p,
                               rng=mode.rng, training=mode.stochastic)
    return ad.add(x_q, mode.drop(out, cfg.dropout_p))


def _ffn_block(x, ln, ffn, cfg, mode):
    f_in = layer_norm(x, ln.gain, ln.bias)
    return ad.add(x, mode.drop(feed_forward(f_in, ffn), cfg.dropout_p))


def _moe_residual(x, lp_ln, gate, experts, cfg, mode, row_valid):
    f_in = layer_norm(x, lp_ln.gain, lp_ln.bias)
    stats = noisy_topk_gate(f_in, gate, cfg.active_experts, mode, row_valid=row_valid)
    out = moe_block(f_in, stats.gate, experts)
    return ad.add(x, mode.drop(out, cfg.dropout_p)), stats


def merge_attention_layer(v: Tensor, t: Tensor, mask: np.ndarray,
                          lp: MergeLayerParams, cfg: ModelConfig,
                          mode: ForwardMode) -> tuple[Tensor, Tensor, GateStats | None]:
    """Shared-parameter attention over the 2n-row concatenation of both streams."""
    n = v.shape[0]
    x = concat([v, t], axis=0)
    pos = np.concatenate([np.arange(n), np.arange(n)])
    mask2 = np.concatenate([mask, mask])
    x = _self_block(x, lp.ln_attn, lp.attn, pos, mask2, cfg, mode)
    stats = None
    if lp.gate is not None:
        x, stats = _moe_residual(x, lp.ln_ff, lp.gate, lp.experts, cfg, mode,
                                 row_valid=mask2)
    else:
        x = _ffn_block(x, lp.ln_ff, lp.ffn, cfg, mode)
    return narrow(x, 0, 0, n), narrow(x, 0, n, 2 * n), stats


def co_attention_layer(v: Tensor, t: Tensor, mask: np.ndarray,
                       lp: CoLayerParams, cfg: ModelConfig,
                       mode: ForwardMode) -> tuple[Tensor, Tensor, GateStats | None]:
    """Per-stream self-attention, symmetric cross-attention, then FFN/MoE."""
    n = v.shape[0]
    pos = np.arange(n)
    sv = _self_block(v, lp.ln_self_v, lp.self_v, pos, mask, cfg, mode)
    st = _self_block(t, lp.ln_self_t, lp.self_t, pos, mask, cfg, mode)
    cv = _cross_block(sv, st, lp.ln_q_v, lp.ln_kv_v, lp.cross_v, pos, pos, mask, cfg, mode)
    ct = _cross_block(st, sv, lp.ln_q_t, lp.ln_kv_t, lp.cross_t, pos, pos, mask, cfg, mode)
    stats = None
    if lp.gate is not None:
        x = concat([cv, ct], axis=0)
        mask2 = np.concatenate([mask, mask])
        x, stats = _moe_residual(x, lp.ln_moe, lp.gate, lp.experts, cfg, mode,
                                 row_valid=mask2)
        hv, ht = narrow(x, 0, 0, n), narrow(x, 0, n, 2 * n)
    else:
        hv = _ffn_block(cv, lp.ln_ff_v, lp.ffn_v, cfg, mode)
        ht = _ffn_block(ct, lp.ln_ff_t, lp.ffn_t, cfg, mode)
    return hv, ht, stats


def fusion_stack(v: Tensor, t: Tensor, mask: np.ndarray, params: ModelParams,
                 cfg: ModelConfig, mode: ForwardMode = EVAL_MODE) -> FusedStates:
    """Run the configured fusion layers and the boundary predictor.

    `mask` marks valid (non-padded) clips; attention never reads invalid
    keys. With ``fusion_kind == "none"`` the streams pass through
    unchanged (pure concatenation model).
    """
    mask = np.asarray(mask, dtype=bool)
    if v.shape != t.shape:
        raise ConfigError(f"stream shapes differ: {v.shape} vs {t.shape}")
    h_v, h_t = v, t
    stats: list[GateStats] = []
    for lp in params.layers:
        if isinstance(lp, MergeLayerParams):
            h_v, h_t, st = merge_attention_layer(h_v, h_t, mask, lp, cfg, mode)
        else:
            h_v, h_t, st = co_attention_layer(h_v, h_t, mask, lp, cfg, mode)
        if st is not None:
            stats.append(st)
    second = h_v if cfg.duplicate_visual_concat else h_t
    m = concat([h_v, second], axis=1)
    logits = linear(m, params.pred_w, params.pred_b)
    p = sigmoid(reshape(logits, (-1,)))
    return FusedStates(h_v=h_v, h_t=h_t, m=m, p=p, gate_stats=stats)


def model_forward(raw_v, raw_t, mask: np.ndarray, params: ModelParams,
                  cfg: ModelConfig, mode: ForwardMode = EVAL_MODE) -> FusedStates:
    """Projection + fusion stack over raw per-clip features."""
    v, t = project(raw_v, raw_t, params)
    return fusion_stack(v, t, mask, params, cfg, mode)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(model_config_canonical(cfg).encode()).hexdigest()


def save_checkpoint(path: str, params: ModelParams, cfg: ModelConfig) -> None:
    """VTSM container: magic, version, canonical config, ordered f64 blobs."""
    plist = named_params(params)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    ctext = model_config_canonical(cfg).encode()
    buf.write(struct.pack("<I", len(ctext)))
    buf.write(ctext)
    buf.write(hashlib.sha256(ctext).digest())
    buf.write(struct.pack("<I", len(plist)))
    for p in plist:
        name = p.name.encode()
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        buf.write(struct.pack("<I", p.data.ndim))
        for s in p.data.shape:
            buf.write(struct.pack("<I", s))
        buf.write(p.data.astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path: str, expect: ModelConfig | None = None
                    ) -> tuple[ModelParams, ModelConfig]:
    """Load a VTSM checkpoint; optionally require config-hash equality."""
    with open(path, "rb") as f:
        blob = f.read()

    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"checkpoint truncated reading {what} at byte {off}: "
                              f"need {n}, have {len(blob) - off}")
        piece = blob[off:off + n]
        off += n
        return piece

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic at byte 0 in {path}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte 4")
    (clen,) = struct.unpack("<I", take(4, "config length"))
    ctext = take(clen, "config")
    digest = take(32, "config hash")
    if hashlib.sha256(ctext).digest() != digest:
        raise FormatError(f"checkpoint config hash mismatch at byte {off - 32}")
    cfg = model_config_from_canonical(ctext.decode())
    if expect is not None and config_hash(expect) != config_hash(cfg):
        raise ConfigError(
            f"checkpoint config hash {config_hash(cfg)[:12]} does not match "
            f"expected {config_hash(expect)[:12]}")
    (count,) = struct.unpack("<I", take(4, "parameter count"))

    params = init_params(cfg, seed=0)
    plist = named_params(params)
    if count != len(plist):
        raise FormatError(f"checkpoint holds {count} parameters, model needs {len(plist)}")
    for p in plist:
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode()
        if name != p.name:
            raise FormatError(f"parameter order mismatch: expected {p.name}, found {name}")
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        shape = tuple(struct.unpack("<I", take(4, "dim"))[0] for _ in range(ndim))
        if shape != p.data.shape:
            raise FormatError(f"parameter {name}: shape {shape} != expected {p.data.shape}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        raw = take(nbytes, f"data of {name}")
        p.data = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        p.zero_grad()
    if off != len(blob):
        raise FormatError(f"trailing {len(blob) - off} bytes after parameters at byte {off}")
    return params, cfg
