"""Fusion layers, gating, parameter management, checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtseg import autodiff as ad
from vtseg.autodiff import Param, Tensor, grad_check, zero_grads
from vtseg.config import FUSION_KINDS, ModelConfig, desk_model_config
from vtseg.errors import ConfigError, DataError, FormatError
from vtseg.model import (EVAL_MODE, ForwardMode, GateParams, co_attention_layer,
                         concat_visual_features, config_hash, fusion_stack,
                         init_params, load_checkpoint, merge_attention_layer,
                         model_forward, moe_block, moe_block_dense, named_params,
                         noisy_topk_gate, param_count, project, save_checkpoint)


def tiny_cfg(kind="co", **kw):
    base = dict(fusion_kind=kind, hidden_dim=16, heads=2, ffn_intermediate=8,
                expert_intermediate=8, rel_window=4, visual_dim=6, text_dim=6,
                num_layers=1)
    base.update(kw)
    return ModelConfig(**base).validate()


# ---------------------------------------------------------------------------
# visual concatenation and projection
# ---------------------------------------------------------------------------


def test_concat_visual_features_order_and_dims():
    rng = np.random.default_rng(0)
    v2d, v3d, vocr = rng.random((5, 2)), rng.random((5, 3)), rng.random((5, 1))
    out = concat_visual_features(v2d, v3d, vocr)
    assert out.shape == (5, 6)
    assert np.array_equal(out[:, :2], v2d)
    assert np.array_equal(out[:, 2:5], v3d)


def test_concat_visual_features_missing_subtype():
    with pytest.raises(DataError, match="ocr"):
        concat_visual_features(np.zeros((2, 2)), np.zeros((2, 2)), None, "vid7")


def test_concat_visual_features_row_mismatch_names_video():
    with pytest.raises(DataError, match="vid9"):
        concat_visual_features(np.zeros((2, 2)), np.zeros((3, 2)), np.zeros((2, 2)),
                               "vid9")


def test_concat_visual_features_empty_video():
    out = concat_visual_features(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 1)))
    assert out.shape == (0, 6)


def test_project_identity_and_zeros():
    cfg = tiny_cfg(visual_dim=16, text_dim=16)
    params = init_params(cfg, seed=0)
    params.proj_v.data = np.eye(16)
    raw = np.random.default_rng(1).standard_normal((4, 16))
    v, t = project(raw, np.zeros((4, 16)), params)
    assert np.allclose(v.data, raw)
    assert np.allclose(t.data, 0.0)


# ---------------------------------------------------------------------------
# gating
# ---------------------------------------------------------------------------


def make_gate(d, e, seed=0):
    rng = np.random.default_rng(seed)
    return GateParams(Param(rng.standard_normal((d, e)), "wg"),
                      Param(rng.standard_normal((d, e)), "wn"))


def test_gate_clean_scores_example():
    # per-row clean scores [1,3,2]: top-2 keeps experts 1,2 -> softmax(3,2)
    gate = GateParams(Param(np.array([[1.0, 3.0, 2.0]])), Param(np.zeros((1, 3))))
    stats = noisy_topk_gate(Tensor(np.ones((1, 1))), gate, k=2,
                            mode=ForwardMode(training=False))
    assert np.allclose(stats.gate.data, [[0.0, 0.7310585786300049, 0.2689414213699951]])


def test_gate_tie_breaks_to_lowest_indices():
    gate = GateParams(Param(np.zeros((1, 4))), Param(np.zeros((1, 4))))
    stats = noisy_topk_gate(Tensor(np.ones((2, 1))), gate, k=2,
                            mode=ForwardMode(training=False))
    assert np.allclose(stats.gate.data, [[0.5, 0.5, 0.0, 0.0]] * 2)


def test_gate_deterministic_training_equals_eval():
    gate = make_gate(5, 4, seed=2)
    x = Tensor(np.random.default_rng(3).standard_normal((6, 5)))
    det = noisy_topk_gate(x, gate, 2, ForwardMode(training=True, deterministic=True))
    ev = noisy_topk_gate(x, gate, 2, ForwardMode(training=False))
    assert np.array_equal(det.gate.data, ev.gate.data)


def test_gate_training_noise_changes_scores():
    gate = make_gate(5, 4, seed=2)
    x = Tensor(np.random.default_rng(3).standard_normal((6, 5)))
    noisy = noisy_topk_gate(x, gate, 2, ForwardMode(
        training=True, deterministic=False, rng=np.random.default_rng(0)))
    ev = noisy_topk_gate(x, gate, 2, ForwardMode(training=False))
    assert not np.array_equal(noisy.noisy.data, ev.noisy.data)


def test_gate_k_exceeds_experts():
    gate = make_gate(5, 3)
    with pytest.raises(ConfigError):
        noisy_topk_gate(Tensor(np.ones((2, 5))), gate, 4, EVAL_MODE)


@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_gate_rows_exactly_k_nonzero_sum_one(seed, k):
    rng = np.random.default_rng(seed)
    e = int(rng.integers(k, 6))
    gate = GateParams(Param(rng.standard_normal((3, e))),
                      Param(rng.standard_normal((3, e))))
    mode = ForwardMode(training=True, deterministic=False, rng=rng)
    stats = noisy_topk_gate(Tensor(rng.standard_normal((5, 3))), gate, k, mode)
    g = stats.gate.data
    assert ((g > 0).sum(axis=1) == k).all()
    assert np.abs(g.sum(axis=1) - 1.0).max() < 1e-12


# ---------------------------------------------------------------------------
# MoE block
# ---------------------------------------------------------------------------


def make_experts(d, hidden, e, seed=0):
    rng = np.random.default_rng(seed)
    from vtseg.autodiff import FfnParams
    return [FfnParams(Param(rng.standard_normal((d, hidden)) * 0.2, f"w1.{i}"),
                      Param(rng.standard_normal(hidden) * 0.2, f"b1.{i}"),
                      Param(rng.standard_normal((hidden, d)) * 0.2, f"w2.{i}"),
                      Param(rng.standard_normal(d) * 0.2, f"b2.{i}"))
            for i in range(e)]


def test_moe_one_hot_selects_single_expert():
    experts = make_experts(4, 6, 3, seed=4)
    x = Tensor(np.random.default_rng(5).standard_normal((5, 4)))
    g = np.zeros((5, 3))
    g[:, 1] = 1.0
    out = moe_block(x, Tensor(g), experts)
    expected = ad.feed_forward(x, experts[1])
    assert np.allclose(out.data, expected.data)


def test_moe_identical_experts_ignore_gate():
    experts = make_experts(4, 6, 1, seed=6) * 3
    x = Tensor(np.random.default_rng(7).standard_normal((5, 4)))
    rng = np.random.default_rng(8)
    g = rng.random((5, 3))
    g[:, 2] = 0.0
    g = g / g.sum(axis=1, keepdims=True)
    out = moe_block(x, Tensor(g), experts)
    expected = ad.feed_forward(x, experts[0])
    assert np.allclose(out.data, expected.data)


def test_moe_matches_dense_sum_oracle():
    rng = np.random.default_rng(9)
    experts = make_experts(6, 8, 4, seed=10)
    x = Tensor(rng.standard_normal((7, 6)))
    gate = make_gate(6, 4, seed=11)
    stats = noisy_topk_gate(x, gate, 2, ForwardMode(training=False))
    sparse = moe_block(x, stats.gate, experts)
    dense = moe_block_dense(x, stats.gate, experts)
    assert np.max(np.abs(sparse.data - dense.data)) < 1e-12


def test_moe_expert_permutation_invariance():
    rng = np.random.default_rng(12)
    d, e = 6, 4
    x = Tensor(rng.standard_normal((9, d)))
    gate = make_gate(d, e, seed=13)
    experts = make_experts(d, 8, e, seed=14)
    base = moe_block(x, noisy_topk_gate(x, gate, 2, EVAL_MODE).gate, experts)

    perm = np.array([2, 0, 3, 1])
    gate_p = GateParams(Param(gate.wg.data[:, perm], "wg"),
                        Param(gate.wn.data[:, perm], "wn"))
    experts_p = [experts[i] for i in perm]
    out = moe_block(x, noisy_topk_gate(x, gate_p, 2, EVAL_MODE).gate, experts_p)
    assert np.max(np.abs(base.data - out.data)) < 1e-12


# ---------------------------------------------------------------------------
# fusion layers
# ---------------------------------------------------------------------------


def test_merge_layer_averaging_params_equalize_streams():
    # scores forced uniform (wq=0) and identity value path: the shared
    # attention contribution to both streams is identical for n=1
    cfg = tiny_cfg("merge")
    params = init_params(cfg, seed=0)
    lp = params.layers[0]
    for p in (lp.attn.wq, lp.attn.wk, lp.attn.rel_bias):
        p.data = np.zeros_like(p.data)
    lp.attn.wv.data = np.eye(16)
    lp.attn.wo.data = np.eye(16)
    for p in (lp.ffn.w1, lp.ffn.w2):
        p.data = np.zeros_like(p.data)
    rng = np.random.default_rng(1)
    v = Tensor(rng.standard_normal((1, 16)))
    t = Tensor(rng.standard_normal((1, 16)))
    h_v, h_t, _ = merge_attention_layer(v, t, np.ones(1, dtype=bool), lp, cfg,
                                        EVAL_MODE)
    attn_v = h_v.data - v.data
    attn_t = h_t.data - t.data
    assert np.allclose(attn_v, attn_t)


def test_merge_layer_masked_clip_zero_gradient():
    cfg = tiny_cfg("merge")
    params = init_params(cfg, seed=1)
    rng = np.random.default_rng(2)
    v = Param(rng.standard_normal((4, 16)), "v")
    t = Param(rng.standard_normal((4, 16)), "t")
    mask = np.array([True, True, False, True])
    h_v, h_t, _ = merge_attention_layer(v, t, mask, params.layers[0], cfg, EVAL_MODE)
    # loss reads only valid rows
    keep = ad.concat([ad.gather_rows(h_v, np.array([0, 1, 3])),
                      ad.gather_rows(h_t, np.array([0, 1, 3]))], axis=0)
    loss = ad.tsum(ad.mul(keep, rng.standard_normal(keep.shape)))
    zero_grads([v, t])
    loss.backward()
    assert np.allclose(v.grad[2], 0.0) and np.allclose(t.grad[2], 0.0)
    assert not np.allclose(v.grad[0], 0.0)


@pytest.mark.parametrize("kind", ["merge", "co", "merge_moe", "co_moe"])
def test_layer_output_shapes(kind):
    cfg = tiny_cfg(kind)
    params = init_params(cfg, seed=3)
    for n in (1, 2, 5, 9):
        rng = np.random.default_rng(n)
        states = model_forward(rng.standard_normal((n, 6)),
                               rng.standard_normal((n, 6)),
                               np.ones(n, dtype=bool), params, cfg)
        assert states.h_v.shape == (n, 16)
        assert states.h_t.shape == (n, 16)
        assert states.m.shape == (n, 32)
        assert states.p.shape == (n,)
        assert ((states.p.data > 0) & (states.p.data < 1)).all()
        if cfg.is_moe:
            assert len(states.gate_stats) == cfg.num_layers
            assert states.gate_stats[0].gate.shape == (2 * n, cfg.expert_count)


def test_co_layer_zero_text_stream_cross_contribution_zero():
    cfg = tiny_cfg("co")
    params = init_params(cfg, seed=4)
    lp = params.layers[0]
    rng = np.random.default_rng(5)
    v = Tensor(rng.standard_normal((3, 16)))
    t = Tensor(np.zeros((3, 16)))
    mask = np.ones(3, dtype=bool)

    h_v, h_t, _ = co_attention_layer(v, t, mask, lp, cfg, EVAL_MODE)

    # reference: self-attention + FFN only on the visual stream
    from vtseg.model import _ffn_block, _self_block
    pos = np.arange(3)
    sv = _self_block(v, lp.ln_self_v, lp.self_v, pos, mask, cfg, EVAL_MODE)
    ref = _ffn_block(sv, lp.ln_ff_v, lp.ffn_v, cfg, EVAL_MODE)
    # zero value/out biases (default init) make the cross path vanish on a
    # zero stream: LN(0)=0, values = 0, attention output = 0
    assert np.allclose(h_v.data, ref.data)


def test_co_layer_swap_symmetry():
    cfg = tiny_cfg("co")
    params = init_params(cfg, seed=6)
    lp = params.layers[0]
    rng = np.random.default_rng(7)
    v = rng.standard_normal((4, 16))
    t = rng.standard_normal((4, 16))
    mask = np.ones(4, dtype=bool)
    h_v, h_t, _ = co_attention_layer(Tensor(v), Tensor(t), mask, lp, cfg, EVAL_MODE)

    # swap the streams together with the per-stream parameter sets
    from vtseg.model import CoLayerParams
    swapped = CoLayerParams(
        ln_self_v=lp.ln_self_t, self_v=lp.self_t,
        ln_self_t=lp.ln_self_v, self_t=lp.self_v,
        ln_q_v=lp.ln_q_t, ln_kv_v=lp.ln_kv_t, cross_v=lp.cross_t,
        ln_q_t=lp.ln_q_v, ln_kv_t=lp.ln_kv_v, cross_t=lp.cross_v,
        ln_ff_v=lp.ln_ff_t, ffn_v=lp.ffn_t,
        ln_ff_t=lp.ln_ff_v, ffn_t=lp.ffn_v)
    h_t2, h_v2, _ = co_attention_layer(Tensor(t), Tensor(v), mask, swapped, cfg,
                                       EVAL_MODE)
    assert np.allclose(h_v.data, h_v2.data)
    assert np.allclose(h_t.data, h_t2.data)


def test_co_layer_matches_step_by_step_composition():
    cfg = tiny_cfg("co")
    params = init_params(cfg, seed=8)
    lp = params.layers[0]
    rng = np.random.default_rng(9)
    v = Tensor(rng.standard_normal((4, 16)))
    t = Tensor(rng.standard_normal((4, 16)))
    mask = np.ones(4, dtype=bool)
    h_v, h_t, _ = co_attention_layer(v, t, mask, lp, cfg, EVAL_MODE)

    from vtseg.model import _cross_block, _ffn_block, _self_block
    pos = np.arange(4)
    sv = _self_block(v, lp.ln_self_v, lp.self_v, pos, mask, cfg, EVAL_MODE)
    st_ = _self_block(t, lp.ln_self_t, lp.self_t, pos, mask, cfg, EVAL_MODE)
    cv = _cross_block(sv, st_, lp.ln_q_v, lp.ln_kv_v, lp.cross_v, pos, pos, mask,
                      cfg, EVAL_MODE)
    ct = _cross_block(st_, sv, lp.ln_q_t, lp.ln_kv_t, lp.cross_t, pos, pos, mask,
                      cfg, EVAL_MODE)
    ref_v = _ffn_block(cv, lp.ln_ff_v, lp.ffn_v, cfg, EVAL_MODE)
    ref_t = _ffn_block(ct, lp.ln_ff_t, lp.ffn_t, cfg, EVAL_MODE)
    assert np.max(np.abs(h_v.data - ref_v.data)) < 1e-10
    assert np.max(np.abs(h_t.data - ref_t.data)) < 1e-10


# ---------------------------------------------------------------------------
# fusion stack
# ---------------------------------------------------------------------------


def test_stack_none_kind_is_projection_concat():
    cfg = tiny_cfg("none")
    params = init_params(cfg, seed=10)
    rng = np.random.default_rng(11)
    raw_v, raw_t = rng.standard_normal((5, 6)), rng.standard_normal((5, 6))
    states = model_forward(raw_v, raw_t, np.ones(5, dtype=bool), params, cfg)
    assert np.allclose(states.m.data[:, :16], raw_v @ params.proj_v.data)
    assert np.allclose(states.m.data[:, 16:], raw_t @ params.proj_t.data)
    assert states.gate_stats == []


def test_stack_zero_predictor_gives_half():
    cfg = tiny_cfg("co")
    params = init_params(cfg, seed=12)
    params.pred_w.data = np.zeros_like(params.pred_w.data)
    params.pred_b.data = np.zeros_like(params.pred_b.data)
    rng = np.random.default_rng(13)
    states = model_forward(rng.standard_normal((4, 6)), rng.standard_normal((4, 6)),
                           np.ones(4, dtype=bool), params, cfg)
    assert np.allclose(states.p.data, 0.5)


def test_stack_literal_concat_switch_duplicates_visual():
    cfg = tiny_cfg("co", duplicate_visual_concat=True)
    params = init_params(cfg, seed=14)
    rng = np.random.default_rng(15)
    states = model_forward(rng.standard_normal((3, 6)), rng.standard_normal((3, 6)),
                           np.ones(3, dtype=bool), params, cfg)
    assert np.allclose(states.m.data[:, :16], states.m.data[:, 16:])


def test_stack_deterministic_forward_bit_identical():
    cfg = tiny_cfg("co_moe", dropout_p=0.3)
    params = init_params(cfg, seed=16)
    rng = np.random.default_rng(17)
    raw_v, raw_t = rng.standard_normal((5, 6)), rng.standard_normal((5, 6))
    mode = ForwardMode(training=True, deterministic=True)
    a = model_forward(raw_v, raw_t, np.ones(5, dtype=bool), params, cfg, mode)
    b = model_forward(raw_v, raw_t, np.ones(5, dtype=bool), params, cfg, mode)
    assert np.array_equal(a.p.data, b.p.data)
    assert np.array_equal(a.m.data, b.m.data)


@pytest.mark.parametrize("kind", list(FUSION_KINDS))
def test_param_count_formula_matches(kind):
    cfg = tiny_cfg(kind, num_layers=2, heads=4, rel_window=3)
    params = init_params(cfg, seed=0)
    actual = sum(p.data.size for p in named_params(params))
    assert actual == param_count(cfg)


def test_param_count_desk_and_full_profiles():
    for cfg in (desk_model_config(), desk_model_config(fusion_kind="co_moe")):
        params = init_params(cfg, seed=0)
        assert sum(p.data.size for p in named_params(params)) == param_count(cfg)


# ---------------------------------------------------------------------------
# end-to-end gradients per fusion kind
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("kind", list(FUSION_KINDS))
def test_full_stack_grad_check(kind):
    from vtseg.train import sequence_loss

    cfg = tiny_cfg(kind, expert_count=4, active_experts=2)
    params = init_params(cfg, seed=21)
    rng = np.random.default_rng(22)
    n = 6
    visual = rng.standard_normal((n, 6))
    text = rng.standard_normal((n, 6))
    labels = np.array([0, 1, 0, 1, 0, 0])
    mask = np.ones(n, dtype=bool)
    mode = ForwardMode(training=True, deterministic=True)

    def obj():
        total, _, _ = sequence_loss(visual, text, mask, labels, params, cfg,
                                    mode, "finetune")
        return total

    err = grad_check(obj, named_params(params), max_entries_per_param=3,
                     rng=np.random.default_rng(23))
    assert err < 1e-4


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = tiny_cfg("co_moe")
    params = init_params(cfg, seed=30)
    path = str(tmp_path / "model.vtsm")
    save_checkpoint(path, params, cfg)
    loaded, cfg2 = load_checkpoint(path)
    assert config_hash(cfg) == config_hash(cfg2)
    for a, b in zip(named_params(params), named_params(loaded)):
        assert a.name == b.name
        assert np.array_equal(a.data, b.data)
        assert np.allclose(b.grad, 0.0)


def test_checkpoint_config_mismatch(tmp_path):
    cfg = tiny_cfg("co")
    params = init_params(cfg, seed=31)
    path = str(tmp_path / "model.vtsm")
    save_checkpoint(path, params, cfg)
    other = tiny_cfg("merge")
    with pytest.raises(ConfigError, match="hash"):
        load_checkpoint(path, expect=other)


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    cfg = tiny_cfg("none")
    params = init_params(cfg, seed=32)
    path = str(tmp_path / "model.vtsm")
    save_checkpoint(path, params, cfg)
    blob = open(path, "rb").read()

    bad = str(tmp_path / "bad.vtsm")
    with open(bad, "wb") as f:
        f.write(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(bad)

    trunc = str(tmp_path / "trunc.vtsm")
    with open(trunc, "wb") as f:
        f.write(blob[:len(blob) // 2])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(trunc)
