import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import rebif.detector as det_mod
import rebif.modules as mod
from rebif.detector import DetectorConfig, detector_forward, init_detector
from rebif.modules import (
    VARIANTS,
    BfmParams,
    CheckpointError,
    CoreParams,
    PurificationParams,
    PyramidConfig,
    ReCoreParams,
    bfm_forward,
    bottom_up_fuse,
    build_residual_pyramid,
    conv_cost,
    core_forward,
    count_macs_params,
    init_pyramid_params,
    load_checkpoint,
    named_pyramid_convs,
    param_tensors,
    purification_forward,
    pyramid_forward,
    recore_forward,
    save_checkpoint,
)
from rebif.tensor import (
    ConvParams,
    Tensor,
    backward_many,
    concat_channels,
    conv2d,
    depth_to_space2,
    grad_check,
    init_conv,
    leaky_relu,
    make_rng,
    space_to_depth2,
    space_to_depth_w2,
    upsample_nearest2,
)

TOL = 1e-5


def rand(rng, shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape))


def toy_maps(cfg, seed, image=64, n=1):
    rng = make_rng(seed, "toy-maps")
    return [rand(rng, (n, c, image // s, image // s)) for c, s in zip(cfg.widths, cfg.strides)]


def toy_cfg(variant="recore+bfm", S=3):
    return PyramidConfig(S, tuple(4 * 2**i for i in range(S)), tuple(8 * 2**i for i in range(S)), variant)


def max_grad_error(f, leaves, seed, limit=25):
    """Worst relative error over leaves under a fixed random projection of f's output."""
    rng = make_rng(seed, "coords")
    w = projection(f().shape, seed)
    worst = 0.0
    for t in leaves:
        coords = None if t.data.size <= limit else rng.choice(t.data.size, limit, replace=False)
        worst = max(worst, grad_check(f, t, coords=coords, zero=leaves, weights=w))
    return worst


def projection(shape, seed):
    return make_rng(seed, "projection").uniform(-1, 1, size=shape)


# ---------------------------------------------------------------- purification


def test_purification_zero_network():
    out = purification_forward(Tensor(np.ones((2, 8, 4, 4))), PurificationParams.zeros(8))
    assert out.shape == (2, 4, 4, 4) and np.all(out.data == 0)


def test_purification_shape_and_gradient():
    rng = make_rng(0, "purify")
    d = 8
    p = PurificationParams(init_conv(4, d, 1, rng), init_conv(4, 4, 3, rng), init_conv(4, 4, 1, rng), init_conv(4, 4, 3, rng))
    x = rand(rng, (1, d, 4, 4))
    assert purification_forward(x, p).shape == (1, 4, 4, 4)
    assert max_grad_error(lambda: purification_forward(x, p), [x] + param_tensors(p), 0) < TOL


def test_purification_contract():
    with pytest.raises(ValueError):
        PurificationParams(ConvParams.zeros(3, 7, 1), ConvParams.zeros(3, 3, 3), ConvParams.zeros(3, 3, 1), ConvParams.zeros(3, 3, 3))


# ---------------------------------------------------------------- CORE / ReCORE


def test_core_degenerate_bundle():
    rng = make_rng(1, "core")
    cur = rand(rng, (1, 4, 4, 4))
    p = CoreParams(init_conv(8, 4, 1, rng))
    expect = leaky_relu(conv2d(cur, p.post_fuse), 0.1)
    assert np.array_equal(core_forward(None, cur, None, p).data, expect.data)


def test_core_channel_selector():
    rng = make_rng(2, "core-select")
    shallow, cur, deep = rand(rng, (1, 2, 8, 8)), rand(rng, (1, 4, 4, 4)), rand(rng, (1, 8, 2, 2))
    fuse = ConvParams.zeros(4, 8 + 4 + 8, 1)
    fuse.weight.data[np.arange(4), 8 + np.arange(4), 0, 0] = 1.0
    out = core_forward(shallow, cur, deep, CoreParams(fuse))
    assert np.array_equal(out.data, leaky_relu(cur, 0.1).data)


def test_core_spatial_ratio_checked():
    with pytest.raises(ValueError):
        core_forward(Tensor(np.zeros((1, 2, 6, 6))), Tensor(np.zeros((1, 4, 4, 4))), None,
                     CoreParams(ConvParams.zeros(8, 12, 1)))


def test_core_gradient_three_inputs():
    cfg = toy_cfg()
    params = init_pyramid_params(cfg, 3)
    rng = make_rng(3, "core-grad")
    shallow, cur, deep = rand(rng, (1, 4, 16, 16)), rand(rng, (1, 8, 8, 8)), rand(rng, (1, 16, 4, 4))
    core = params.topdown[1].core
    f = lambda: core_forward(shallow, cur, deep, core)  # noqa: E731
    assert max_grad_error(f, [shallow, cur, deep] + param_tensors(core), 3) < TOL


def _recore_toy(seed):
    cfg = toy_cfg()
    params = init_pyramid_params(cfg, seed)
    rng = make_rng(seed, "recore-inputs")
    return params.topdown[1], rand(rng, (1, 4, 16, 16)), rand(rng, (1, 8, 8, 8)), rand(rng, (1, 16, 4, 4))


def test_recore_zero_purify_is_identity():
    p, shallow, cur, deep = _recore_toy(4)
    for t in param_tensors(p.purify):
        t.data[...] = 0.0
    f, delta = recore_forward(shallow, cur, deep, p)
    assert np.all(delta.data == 0)
    assert np.array_equal(f.data, cur.data)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_recore_residual_identity(seed):
    p, shallow, cur, deep = _recore_toy(seed)
    for t in param_tensors(p):
        if t.data.ndim == 1:
            t.data[...] = make_rng(seed, "bias", t.data.size).normal(size=t.shape)
    f, delta = recore_forward(shallow, cur, deep, p)
    assert np.max(np.abs(f.data - delta.data - cur.data)) <= 1e-12


def test_recore_skip_projection_when_widths_differ():
    rng = make_rng(5, "proj")
    cur = rand(rng, (1, 6, 4, 4))
    p = ReCoreParams(CoreParams(init_conv(8, 6, 1, rng)), PurificationParams.zeros(8), init_conv(4, 6, 1, rng))
    f, delta = recore_forward(None, cur, None, p)
    assert f.shape == (1, 4, 4, 4)
    assert np.array_equal(f.data, conv2d(cur, p.skip_proj).data)


def test_recore_gradient():
    p, shallow, cur, deep = _recore_toy(6)
    f = lambda: recore_forward(shallow, cur, deep, p)[0]  # noqa: E731
    assert max_grad_error(f, [shallow, cur, deep] + param_tensors(p), 6) < TOL


# ---------------------------------------------------------------- BFM


def test_bfm_average_fusion_row():
    row = Tensor(np.array([0, 0, 1, 1, 0, 0, 1, 1], dtype=float).reshape(1, 1, 1, 8))
    fuse = ConvParams.zeros(1, 3, 1)
    fuse.weight.data[...] = 1 / 3
    out = bfm_forward(row, Tensor(np.ones((1, 1, 1, 4))), BfmParams(fuse), reorg=space_to_depth_w2)
    np.testing.assert_allclose(out.data.ravel(), [1 / 3, 1, 1 / 3, 1], rtol=0, atol=1e-12)


def test_bfm_zero_kernel_and_contract():
    rng = make_rng(7, "bfm")
    hi, lo = rand(rng, (1, 2, 8, 8)), rand(rng, (1, 3, 4, 4))
    assert np.all(bfm_forward(hi, lo, BfmParams(ConvParams.zeros(3, 11, 1))).data == 0)
    with pytest.raises(ValueError):
        bfm_forward(hi, lo, BfmParams(ConvParams.zeros(2, 11, 1)))
    with pytest.raises(ValueError):
        bfm_forward(rand(rng, (1, 2, 4, 4)), lo, BfmParams(ConvParams.zeros(3, 11, 1)))


def test_bfm_sub_patches_reconstruct_input():
    hi = rand(make_rng(8, "bfm-rt"), (2, 3, 8, 8))
    assert np.array_equal(depth_to_space2(space_to_depth2(hi)).data, hi.data)


def test_bfm_gradient():
    rng = make_rng(9, "bfm-grad")
    hi, lo = rand(rng, (1, 2, 8, 8)), rand(rng, (1, 3, 4, 4))
    p = BfmParams(init_conv(3, 11, 1, rng))
    assert max_grad_error(lambda: bfm_forward(hi, lo, p), [hi, lo, p.fuse.weight, p.fuse.bias], 9) < TOL


# ---------------------------------------------------------------- pyramids


def test_topdown_spatial_dims_256():
    cfg = PyramidConfig(3, (4, 8, 16), (8, 16, 32))
    state = build_residual_pyramid(toy_maps(cfg, 0, image=256), init_pyramid_params(cfg, 0), cfg)
    assert [m.shape[2:] for m in state.topdown_maps] == [(32, 32), (16, 16), (8, 8)]


def test_zero_purify_collapses_to_backbone():
    cfg = toy_cfg(S=2)
    params = init_pyramid_params(cfg, 1)
    for r in params.topdown:
        for t in param_tensors(r.purify):
            t.data[...] = 0.0
    maps = toy_maps(cfg, 1)
    state = build_residual_pyramid(maps, params, cfg)
    for f, m in zip(state.topdown_maps, maps):
        assert np.array_equal(f.data, m.data)


@pytest.mark.parametrize("S", [2, 3, 4, 5])
def test_pyramid_residual_identity_every_scale(S):
    cfg = toy_cfg(S=S)
    state = build_residual_pyramid(toy_maps(cfg, S, image=256), init_pyramid_params(cfg, S), cfg)
    for f, d, s in zip(state.topdown_maps, state.deltas, state.skips):
        assert np.max(np.abs(f.data - d.data - s.data)) <= 1e-12


def test_gradient_reaches_every_backbone_map():
    cfg = toy_cfg()
    maps = [Tensor(m.data, requires_grad=True) for m in toy_maps(cfg, 2)]
    state = pyramid_forward(maps, init_pyramid_params(cfg, 2), cfg)
    rng = make_rng(2, "loss-weights")
    backward_many(state.outputs, [rng.normal(size=m.shape) for m in state.outputs])
    assert all(m.grad is not None and np.abs(m.grad).sum() > 0 for m in maps)


def test_bottom_up_pass_through_kernel():
    cfg = toy_cfg(S=2)
    state = build_residual_pyramid(toy_maps(cfg, 3), init_pyramid_params(cfg, 3), cfg)
    fuse = ConvParams.zeros(8, 4 * 4 + 8, 1)
    fuse.weight.data[np.arange(8), 16 + np.arange(8), 0, 0] = 1.0
    out = bottom_up_fuse(state, [BfmParams(fuse)])
    assert np.array_equal(out.bottomup_maps[1].data, state.topdown_maps[1].data)
    assert out.bottomup_maps[0] is state.topdown_maps[0]


@settings(max_examples=8, deadline=None)
@given(st.integers(2, 5), st.sampled_from(VARIANTS), st.integers(0, 1000))
def test_output_shapes_follow_config(S, variant, seed):
    cfg = toy_cfg(variant, S)
    maps = toy_maps(cfg, seed, image=128)
    state = pyramid_forward(maps, init_pyramid_params(cfg, seed), cfg)
    assert [m.shape for m in state.outputs] == [m.shape for m in maps]
    if cfg.uses_bfm:
        assert [m.shape for m in state.bottomup_maps] == [m.shape for m in state.topdown_maps]


def test_bottom_up_needs_topdown():
    with pytest.raises(ValueError):
        bottom_up_fuse(mod.PyramidState([]), [])


def test_full_pipeline_gradient():
    cfg = PyramidConfig(3, (4, 8, 16), (8, 16, 32))
    maps = toy_maps(cfg, 4, image=128)
    params = init_pyramid_params(cfg, 4)

    def f():
        # bring every scale to the shallowest resolution so one tensor carries all outputs
        outs = pyramid_forward(maps, params, cfg).outputs
        return concat_channels([outs[0], upsample_nearest2(outs[1]), upsample_nearest2(upsample_nearest2(outs[2]))])

    assert max_grad_error(f, list(maps) + param_tensors(params), 4, limit=8) < TOL


def test_init_is_order_independent():
    cfg = toy_cfg()
    a = dict(named_pyramid_convs(init_pyramid_params(cfg, 11)))
    # rebuild single layers in reverse order from their own streams
    for name in reversed(list(a)):
        conv = a[name]
        again = init_conv(conv.c_out, conv.c_in, conv.k, make_rng(11, name))
        assert np.array_equal(again.weight.data, conv.weight.data)
    b = init_pyramid_params(cfg, 11)
    maps = toy_maps(cfg, 5)
    out_a = pyramid_forward(maps, init_pyramid_params(cfg, 11), cfg).outputs
    out_b = pyramid_forward(maps, b, cfg).outputs
    assert all(np.array_equal(x.data, y.data) for x, y in zip(out_a, out_b))


def test_backbone_shared_across_variants():
    p1 = init_detector(DetectorConfig(toy_cfg("plain-fpn"), image_size=64), 3)
    p2 = init_detector(DetectorConfig(toy_cfg("recore+bfm"), image_size=64), 3)
    for c1, c2 in zip(p1.backbone.stages, p2.backbone.stages):
        assert np.array_equal(c1.weight.data, c2.weight.data)


def test_pyramid_config_validation():
    with pytest.raises(ValueError, match=r"\[2, 5\]"):
        PyramidConfig(6, (2,) * 6, tuple(2**i for i in range(6)))
    with pytest.raises(ValueError, match="even"):
        PyramidConfig(2, (3, 6), (8, 16))
    with pytest.raises(ValueError, match="double"):
        PyramidConfig(2, (4, 8), (8, 32))
    assert PyramidConfig.make(3).widths == (32, 64, 128)
    assert PyramidConfig.make(5).strides == (2, 4, 8, 16, 32)


# ---------------------------------------------------------------- cost


def test_conv_cost_arithmetic():
    assert conv_cost(ConvParams.zeros(3, 2, 1), 4, 4) == (96, 9)
    assert conv_cost(ConvParams.zeros(4, 4, 3), 8, 8)[0] == 9216


def traced_macs(det_cfg, params):
    """MACs measured from the output shapes of every conv actually executed."""
    seen = []
    real = conv2d

    def spy(x, p):
        out = real(x, p)
        seen.append(p.c_out * p.c_in * p.k * p.k * out.shape[2] * out.shape[3])
        return out

    mp = pytest.MonkeyPatch()
    mp.setattr(mod, "conv2d", spy)
    mp.setattr(det_mod, "conv2d", spy)
    try:
        s = det_cfg.image_size
        detector_forward(Tensor(np.zeros((1, 1, s, s))), params, det_cfg)
    finally:
        mp.undo()
    return sum(seen)


@pytest.mark.parametrize("variant", VARIANTS)
def test_mac_count_matches_forward_trace(variant):
    for S in (2, 3, 4, 5):
        det_cfg = DetectorConfig(PyramidConfig.make(S, 8, 32, variant), image_size=64)
        params = init_detector(det_cfg, 0)
        cost = count_macs_params(params.named(), det_cfg.pyramid, (64, 64))
        assert cost.macs == traced_macs(det_cfg, params)
        assert cost.params == sum(t.data.size for t in params.tensors())
        assert cost.flops == 2 * cost.macs


@pytest.mark.parametrize("variant", VARIANTS)
def test_macs_strictly_increase_with_scales(variant):
    macs = []
    for S in (2, 3, 4, 5):
        det_cfg = DetectorConfig(PyramidConfig.make(S, variant=variant))
        macs.append(count_macs_params(init_detector(det_cfg, 0).named(), det_cfg.pyramid, (64, 64)).macs)
    assert all(b > a for a, b in zip(macs, macs[1:]))


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    cfg = toy_cfg()
    src = init_pyramid_params(cfg, 1)
    dst = init_pyramid_params(cfg, 2)
    save_checkpoint(tmp_path / "ck.txt", named_pyramid_convs(src))
    load_checkpoint(tmp_path / "ck.txt", named_pyramid_convs(dst))
    for a, b in zip(param_tensors(src), param_tensors(dst)):
        assert np.array_equal(a.data, b.data)
    first = (tmp_path / "ck.txt").read_text(encoding="utf-8").splitlines()[0]
    assert first == "pyramid.topdown.s0.core.post_fuse 8 12 1 1 0"


def test_checkpoint_mismatch_fails_loudly(tmp_path):
    path = tmp_path / "ck.txt"
    save_checkpoint(path, named_pyramid_convs(init_pyramid_params(toy_cfg(), 1)))
    with pytest.raises(CheckpointError, match="config needs"):
        load_checkpoint(path, named_pyramid_convs(init_pyramid_params(PyramidConfig(3, (6, 8, 16), (8, 16, 32)), 1)))
    with pytest.raises(CheckpointError, match="unexpected layer|missing"):
        load_checkpoint(path, named_pyramid_convs(init_pyramid_params(toy_cfg("recore"), 1)))
    lines = path.read_text(encoding="utf-8").splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n", encoding="utf-8")
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path, named_pyramid_convs(init_pyramid_params(toy_cfg(), 1)))
