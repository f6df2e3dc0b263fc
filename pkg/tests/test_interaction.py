"""Part retrieval, torso partition, bidirectional correction blocks,
RefineNet fusion, and the regression heads."""

import numpy as np
import pytest

from upperpose import autograd as ag
from upperpose.autograd import Tensor, gradcheck, no_grad
from upperpose.errors import ConfigError
from upperpose.interaction import (BoxNet, CollabEvolution, PartBoxes,
                                   PartFeatureSet, RegressionHeads,
                                   partition_torso_tokens,
                                   retrieve_part_features, roi_tokens)
from upperpose.nn import CorrBlock, ParamStore

D, HEADS = 8, 2


def make_parts(rng, d=D, r=4, third=2):
    return PartFeatureSet(
        z_face=Tensor(rng.normal(size=(r, d))),
        z_lhand=Tensor(rng.normal(size=(r, d))),
        z_rhand=Tensor(rng.normal(size=(r, d))),
        t_face=Tensor(rng.normal(size=(third, d))),
        t_lhand=Tensor(rng.normal(size=(third, d))),
        t_rhand=Tensor(rng.normal(size=(third, d))),
    )


# ---------------------------------------------------------------- boxnet

def test_boxnet_zero_final_layer_gives_half_boxes(rng):
    ps = ParamStore(0)
    net = BoxNet(ps, D)
    ps.params["boxnet.fc2.weight"].data[:] = 0.0
    with no_grad():
        boxes = net(Tensor(rng.normal(size=(5, D))))
    np.testing.assert_allclose(boxes.numpy(), 0.5)


def test_boxnet_outputs_in_unit_interval(rng):
    for seed in range(5):
        ps = ParamStore(seed)
        net = BoxNet(ps, D)
        with no_grad():
            boxes = net(Tensor(rng.normal(size=(6, D)) * 10))
        b = boxes.numpy()
        assert b.min() >= 0.0 and b.max() <= 1.0


# ---------------------------------------------------------------- roi align

def test_roi_constant_map_constant_tokens(rng):
    fmap = Tensor(np.tile(np.arange(D, dtype=float)[:, None, None], (1, 6, 6)))
    box = Tensor(np.array([0.3, 0.7, 0.4, 0.2]))
    with no_grad():
        tokens = roi_tokens(fmap, box, 4)
    np.testing.assert_allclose(tokens.data, np.tile(np.arange(D), (16, 1)),
                               atol=1e-12)


def test_roi_full_box_identity_grid(rng):
    # box covering the whole map with grid == map size lands one sample on
    # each pixel center
    g = 4
    fmap = Tensor(rng.normal(size=(3, g, g)))
    box = Tensor(np.array([0.5, 0.5, 1.0, 1.0]))
    with no_grad():
        tokens = roi_tokens(fmap, box, g)
    want = fmap.data.reshape(3, g * g).T
    np.testing.assert_allclose(tokens.data, want, atol=1e-12)


def test_roi_formula_oracle(rng):
    from tests.test_autograd import bilinear_oracle
    fmap = rng.normal(size=(3, 6, 7))
    # both sides above the 2/max(H,W) degeneracy clamp
    box = np.array([0.41, 0.62, 0.3, 0.33])
    g = 4
    with no_grad():
        got = roi_tokens(Tensor(fmap), Tensor(box), g).data
    off = (np.arange(g) + 0.5) / g - 0.5
    pts = []
    for oy in off:
        for ox in off:
            pts.append(((box[1] + oy * box[3]) * 6 - 0.5,
                        (box[0] + ox * box[2]) * 7 - 0.5))
    want = bilinear_oracle(fmap, pts).T
    assert np.abs(got - want).max() <= 1e-10


def test_roi_degenerate_box_clamped(rng):
    fmap = Tensor(rng.normal(size=(2, 8, 8)))
    tiny = Tensor(np.array([0.5, 0.5, 0.0, 1e-9]))
    with no_grad():
        tokens = roi_tokens(fmap, tiny, 3)
    assert np.all(np.isfinite(tokens.data))
    # clamped width 2/8 spans more than one pixel: samples differ
    assert np.abs(tokens.data - tokens.data[0]).max() > 0


def test_roi_gradcheck_wrt_map_and_box(rng):
    fmap = Tensor(rng.normal(size=(3, 6, 6)), requires_grad=True)
    box = Tensor(np.array([0.52, 0.47, 0.4, 0.45]), requires_grad=True)
    err = gradcheck(lambda m, b: ag.tanh(roi_tokens(m, b, 3)).sum(), [fmap, box])
    assert err < 1e-4


def test_retrieve_part_features_three_groups(rng):
    fmap = Tensor(rng.normal(size=(D, 6, 6)))
    boxes = PartBoxes(face=Tensor(np.array([0.3, 0.3, 0.2, 0.2])),
                      lhand=Tensor(np.array([0.7, 0.5, 0.2, 0.2])),
                      rhand=Tensor(np.array([0.4, 0.8, 0.2, 0.2])))
    with no_grad():
        zf, zl, zr = retrieve_part_features(fmap, boxes, grid=4)
    for t in (zf, zl, zr):
        assert t.shape == (16, D)


# ---------------------------------------------------------------- partition

def test_partition_p12(rng):
    z = Tensor(rng.normal(size=(12, D)))
    a, b, c = partition_torso_tokens(z)
    assert a.shape == b.shape == c.shape == (4, D)
    np.testing.assert_array_equal(np.concatenate([a.data, b.data, c.data]), z.data)


def test_partition_p3_literal(rng):
    z = Tensor(rng.normal(size=(3, D)))
    a, b, c = partition_torso_tokens(z)
    assert a.shape == (1, D)
    np.testing.assert_array_equal(a.data, z.data[:1])


def test_partition_indivisible_raises(rng):
    with pytest.raises(ConfigError):
        partition_torso_tokens(Tensor(rng.normal(size=(7, D))))


# ---------------------------------------------------------------- corr block

def corr_oracle(ps, prefix, q, kv, heads=HEADS):
    """Loop re-implementation of the pre-norm residual correction block."""
    def p(n):
        return ps.params[f"{prefix}.{n}"].data

    def ln(x, g, b, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + eps) * g + b

    def gelu(x):
        c = np.sqrt(2 / np.pi)
        return 0.5 * x * (1 + np.tanh(c * (x + 0.044715 * x ** 3)))

    qn = ln(q, p("ln_q.gamma"), p("ln_q.beta"))
    kvn = ln(kv, p("ln_kv.gamma"), p("ln_kv.beta"))
    qp = qn @ p("attn.q.weight") + p("attn.q.bias")
    kp = kvn @ p("attn.k.weight") + p("attn.k.bias")
    vp = kvn @ p("attn.v.weight") + p("attn.v.bias")
    d = q.shape[1]
    hd = d // heads
    merged = np.zeros_like(qp)
    for hh in range(heads):
        qs = qp[:, hh * hd:(hh + 1) * hd]
        ks = kp[:, hh * hd:(hh + 1) * hd]
        vs = vp[:, hh * hd:(hh + 1) * hd]
        for i in range(q.shape[0]):
            scores = qs[i] @ ks.T / np.sqrt(hd)
            e = np.exp(scores - scores.max())
            w = e / e.sum()
            merged[i, hh * hd:(hh + 1) * hd] = w @ vs
    h = q + merged @ p("attn.out.weight") + p("attn.out.bias")
    hn = ln(h, p("ln_ffn.gamma"), p("ln_ffn.beta"))
    return h + gelu(hn @ p("ffn.fc1.weight") + p("ffn.fc1.bias")) \
        @ p("ffn.fc2.weight") + p("ffn.fc2.bias")


def nudged_block(seed=5, name="blk"):
    ps = ParamStore(seed)
    block = CorrBlock(ps, name, D, HEADS)
    rngw = np.random.default_rng(seed + 100)
    for n in (f"{name}.attn.out.weight", f"{name}.ffn.fc2.weight"):
        ps.params[n].data = rngw.normal(size=ps.params[n].shape) * 0.3
    return block, ps


def test_corr_zero_init_is_identity(rng):
    ps = ParamStore(2)
    block = CorrBlock(ps, "blk", D, HEADS)
    q = rng.normal(size=(4, D))
    with no_grad():
        out = block(Tensor(q), Tensor(rng.normal(size=(6, D))))
    np.testing.assert_array_equal(out.data, q)


def test_corr_matches_loop_oracle(rng):
    block, ps = nudged_block()
    q = rng.normal(size=(4, D))
    kv = rng.normal(size=(6, D))
    with no_grad():
        got = block(Tensor(q), Tensor(kv)).data
    want = corr_oracle(ps, "blk", q, kv)
    assert np.abs(got - want).max() <= 1e-10


def test_corr_single_key_attention(rng):
    block, _ = nudged_block()
    q = Tensor(rng.normal(size=(3, D)))
    kv = Tensor(rng.normal(size=(1, D)))
    with no_grad():
        block(q, kv)
    np.testing.assert_allclose(block.attn.last_weights, 1.0)


def test_corr_identical_keys_uniform_weights(rng):
    block, _ = nudged_block()
    q = Tensor(rng.normal(size=(3, D)))
    kv = Tensor(np.tile(rng.normal(size=(1, D)), (5, 1)))
    with no_grad():
        block(q, kv)
    np.testing.assert_allclose(block.attn.last_weights, 0.2, atol=1e-9)


def test_corr_attention_rows_sum_to_one(rng):
    block, _ = nudged_block()
    with no_grad():
        block(Tensor(rng.normal(size=(4, D))), Tensor(rng.normal(size=(6, D))))
    sums = block.attn.last_weights.sum(axis=-1)
    np.testing.assert_allclose(sums, 1.0, atol=1e-9)


# ---------------------------------------------------------------- interaction

def cee_with_nudged_blocks(seed=7, mode="full"):
    ps = ParamStore(seed)
    cee = CollabEvolution(ps, D, HEADS, mode=mode)
    rngw = np.random.default_rng(seed + 50)
    for n, p in ps.params.items():
        if n.endswith("attn.out.weight") or n.endswith("ffn.fc2.weight"):
            p.data = rngw.normal(size=p.shape) * 0.3
    return cee, ps


def test_bidirectional_matches_chained_oracle(rng):
    cee, ps = cee_with_nudged_blocks()
    parts = make_parts(rng)
    with no_grad():
        cee.bidirectional_interact(parts)
    for part in ("face", "lhand", "rhand"):
        zt = corr_oracle(ps, f"cee.corr.z_{part}",
                         getattr(parts, f"z_{part}").data,
                         getattr(parts, f"t_{part}").data)
        tt = corr_oracle(ps, f"cee.corr.t_{part}",
                         getattr(parts, f"t_{part}").data,
                         getattr(parts, f"z_{part}").data)
        assert np.abs(getattr(parts, f"zt_{part}").data - zt).max() <= 1e-10
        assert np.abs(getattr(parts, f"tt_{part}").data - tt).max() <= 1e-10


def test_bidirectional_asymmetry(rng):
    # Z->T and T->Z refinements differ whenever inputs and weights differ
    cee, _ = cee_with_nudged_blocks()
    z = rng.normal(size=(2, D))
    t = rng.normal(size=(2, D))
    with no_grad():
        a = cee.blocks["z_face"](Tensor(z), Tensor(t))
        b = cee.blocks["t_face"](Tensor(t), Tensor(z))
    assert np.abs(a.data - b.data).max() > 1e-6


def test_interact_does_not_mutate_sources(rng):
    cee, _ = cee_with_nudged_blocks()
    parts = make_parts(rng)
    before = {n: getattr(parts, n).data.copy()
              for n in ("z_face", "z_lhand", "z_rhand",
                        "t_face", "t_lhand", "t_rhand")}
    with no_grad():
        cee.interact(parts)
    for n, arr in before.items():
        np.testing.assert_array_equal(getattr(parts, n).data, arr)


def test_refined_shapes_match_sources(rng):
    cee, _ = cee_with_nudged_blocks()
    parts = make_parts(rng)
    with no_grad():
        cee.interact(parts)
    for part in ("face", "lhand", "rhand"):
        assert getattr(parts, f"zt_{part}").shape == getattr(parts, f"z_{part}").shape
        assert getattr(parts, f"tt_{part}").shape == getattr(parts, f"t_{part}").shape


def test_variant1_zero_init_identity(rng):
    ps = ParamStore(4)
    cee = CollabEvolution(ps, D, HEADS, mode="variant1")
    parts = make_parts(rng)
    with no_grad():
        cee.interact(parts)
    np.testing.assert_array_equal(parts.zt_face.data, parts.z_face.data)
    np.testing.assert_array_equal(parts.tt_rhand.data, parts.t_rhand.data)


def test_variant1_matches_self_attention_oracle(rng):
    cee, ps = cee_with_nudged_blocks(mode="variant1")
    parts = make_parts(rng)
    cat = np.concatenate([parts.z_face.data, parts.z_lhand.data,
                          parts.z_rhand.data, parts.t_face.data,
                          parts.t_lhand.data, parts.t_rhand.data])
    with no_grad():
        cee.interact(parts)
    want = corr_oracle(ps, "cee.variant1", cat, cat)
    got = np.concatenate([parts.zt_face.data, parts.zt_lhand.data,
                          parts.zt_rhand.data, parts.tt_face.data,
                          parts.tt_lhand.data, parts.tt_rhand.data])
    assert np.abs(got - want).max() <= 1e-10


def test_refine_fuse_zero_weights_is_residual_identity(rng):
    ps = ParamStore(9)
    cee = CollabEvolution(ps, D, HEADS)
    z_human = rng.normal(size=(6, D))
    with no_grad():
        out = cee.refine_fuse(Tensor(rng.normal(size=(2, D))),
                              Tensor(rng.normal(size=(2, D))),
                              Tensor(rng.normal(size=(2, D))),
                              Tensor(z_human))
    np.testing.assert_array_equal(out.data, z_human)


def test_refine_fuse_oracle(rng):
    cee, ps = cee_with_nudged_blocks()
    rngw = np.random.default_rng(77)
    ps.params["cee.refinenet.fc2.weight"].data = \
        rngw.normal(size=ps.params["cee.refinenet.fc2.weight"].shape) * 0.2
    tf, tl, tr = (rng.normal(size=(2, D)) for _ in range(3))
    z_human = rng.normal(size=(6, D))
    with no_grad():
        got = cee.refine_fuse(Tensor(tf), Tensor(tl), Tensor(tr),
                              Tensor(z_human)).data
    cat = np.concatenate([tf, tl, tr])
    w1 = ps.params["cee.refinenet.fc1.weight"].data
    b1 = ps.params["cee.refinenet.fc1.bias"].data
    w2 = ps.params["cee.refinenet.fc2.weight"].data
    b2 = ps.params["cee.refinenet.fc2.bias"].data
    c = np.sqrt(2 / np.pi)
    hid = cat @ w1 + b1
    hid = 0.5 * hid * (1 + np.tanh(c * (hid + 0.044715 * hid ** 3)))
    want = z_human + (hid @ w2 + b2)
    assert np.abs(got - want).max() <= 1e-10


# ---------------------------------------------------------------- heads

def test_heads_output_sizes(rng):
    ps = ParamStore(6)
    heads = RegressionHeads(ps, D)
    with no_grad():
        out = heads(Tensor(rng.normal(size=(6, D))),
                    Tensor(rng.normal(size=(4, D))),
                    Tensor(rng.normal(size=(4, D))),
                    Tensor(rng.normal(size=(4, D))))
    assert out.o_body.shape == (79,)
    assert out.o_face.shape == (13,)
    assert out.o_lhand.shape == (45,)
    assert out.o_rhand.shape == (45,)
    # pose entries across the four heads total 53x3
    pose = 66 + 3 + 45 + 45
    assert pose == 53 * 3


def test_heads_zero_final_layers_give_zero_params(rng):
    ps = ParamStore(6)
    heads = RegressionHeads(ps, D)
    for part in ("body", "face", "lhand", "rhand"):
        ps.params[f"heads.{part}.fc2.weight"].data[:] = 0.0
    with no_grad():
        out = heads(Tensor(rng.normal(size=(6, D))),
                    Tensor(rng.normal(size=(4, D))),
                    Tensor(rng.normal(size=(4, D))),
                    Tensor(rng.normal(size=(4, D))))
    for o in (out.o_body, out.o_face, out.o_lhand, out.o_rhand):
        np.testing.assert_array_equal(o.data, 0.0)
