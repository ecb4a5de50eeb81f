"""Built-in verification: finite-difference gradient suite and worked-example fixtures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import detector as det
from .experiments import shift_fixture
from .modules import (
    PyramidConfig,
    bfm_forward,
    bottom_up_fuse,
    build_residual_pyramid,
    core_forward,
    init_pyramid_params,
    param_tensors,
    purification_forward,
    recore_forward,
)
from .tensor import (
    Tensor,
    add,
    concat_channels,
    conv2d,
    depth_to_space2,
    grad_check,
    init_conv,
    leaky_relu,
    make_rng,
    maxpool2,
    space_to_depth2,
    upsample_nearest2,
)

OP_TOL = 1e-5
LOSS_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.value < self.tolerance


def _rand(rng, shape, away_from_zero=0.0):
    x = rng.normal(size=shape)
    if away_from_zero:
        x = x + np.sign(x) * away_from_zero
    return Tensor(x, requires_grad=True)


def _coords(t: Tensor, rng, limit: int):
    n = t.data.size
    return None if n <= limit else rng.choice(n, size=limit, replace=False)


def _signed_weights(shape, rng):
    """Random reduction weights bounded away from zero, so no output cancels out."""
    return rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _max_over(f, leaves, rng, limit, weights=None):
    return max(grad_check(f, t, coords=_coords(t, rng, limit), zero=leaves, weights=weights) for t in leaves)


def small_pyramid(seed: int, variant: str = "recore+bfm"):
    """S=3 toy: widths (4, 8, 16) over 16x16 / 8x8 / 4x4 maps, batch 2."""
    cfg = PyramidConfig(3, (4, 8, 16), (8, 16, 32), variant)
    rng = make_rng(seed, "small-pyramid-maps")
    maps = [_rand(rng, (2, c, s, s)) for c, s in zip(cfg.widths, (16, 8, 4))]
    params = init_pyramid_params(cfg, seed)
    for t in param_tensors(params):
        if t.data.ndim == 1:
            t.data[...] = make_rng(seed, "bias", t.data.size).normal(scale=0.1, size=t.shape)
    return cfg, maps, params


def gradient_suite(seed: int = 0, coords_per_tensor: int = 60) -> list:
    """Max relative error of tape vs central-difference gradients, per operation."""
    rng = make_rng(seed, "grad-suite")
    out = []

    def check(name, f, leaves, tol=OP_TOL):
        w = _signed_weights(f().shape, rng)
        out.append(CheckResult(name, _max_over(f, leaves, rng, coords_per_tensor, w), tol))

    x = _rand(rng, (2, 4, 8, 8))
    p3 = init_conv(3, 4, 3, rng)
    p3.bias.data[...] = rng.normal(size=3)
    check("conv2d_3x3", lambda: conv2d(x, p3), [x, p3.weight, p3.bias])
    p1 = init_conv(5, 4, 1, rng)
    check("conv2d_1x1", lambda: conv2d(x, p1), [x, p1.weight, p1.bias])
    ps = init_conv(3, 4, 3, rng, stride=2, padding=1)
    xo = _rand(rng, (2, 4, 9, 9))
    check("conv2d_3x3_stride2", lambda: conv2d(xo, ps), [xo, ps.weight])

    check("maxpool2", lambda: maxpool2(x)[0], [x])
    check("upsample_nearest2", lambda: upsample_nearest2(x), [x])
    check("space_to_depth2", lambda: space_to_depth2(x), [x])
    check("depth_to_space2", lambda: depth_to_space2(x), [x])
    y = _rand(rng, (2, 3, 8, 8))
    check("concat_channels", lambda: concat_channels([x, y]), [x, y])
    xa = _rand(rng, (2, 4, 8, 8), away_from_zero=1e-3)
    check("leaky_relu", lambda: leaky_relu(xa, 0.1), [xa])
    z = _rand(rng, (2, 4, 8, 8))
    check("add", lambda: add(x, z), [x, z])

    cfg, maps, params = small_pyramid(seed)
    rec = params.topdown[1]
    d = rec.purify.d_in
    pin = _rand(rng, (2, d, 8, 8))
    check("purification", lambda: purification_forward(pin, rec.purify), [pin] + param_tensors(rec.purify))
    deep = _rand(rng, (2, cfg.widths[2], 4, 4))
    check(
        "core_forward",
        lambda: core_forward(maps[0], maps[1], deep, rec.core),
        [maps[0], maps[1], deep] + param_tensors(rec.core),
    )
    check(
        "recore_forward",
        lambda: recore_forward(maps[0], maps[1], deep, rec)[0],
        [maps[0], maps[1], deep] + param_tensors(rec),
    )
    bfm = params.bfm[0]
    check("bfm_forward", lambda: bfm_forward(maps[0], maps[1], bfm), [maps[0], maps[1]] + param_tensors(bfm))

    def pipeline():
        state = bottom_up_fuse(build_residual_pyramid(maps, params, cfg), params.bfm)
        return concat_channels([upsample_nearest2(upsample_nearest2(state.bottomup_maps[2])),
                                upsample_nearest2(state.bottomup_maps[1]),
                                state.bottomup_maps[0]])

    check("pyramid_s3_topdown_bottomup", pipeline, list(maps) + param_tensors(params))

    dcfg = det.DetectorConfig(cfg, image_size=32)
    bb = det.BackboneParams([init_conv(4, 1, 3, rng), init_conv(4, 4, 3, rng)], (0, 1))
    img = _rand(rng, (2, 1, 16, 16))
    check("backbone_2_stages", lambda: concat_channels([det.backbone_forward(img, bb)[1]]),
          [img] + [t for c in bb.stages for t in c.tensors()])
    head = [init_conv(3 * 8, w, 1, rng) for w in cfg.widths]
    hm = [_rand(rng, (2, w, s, s)) for w, s in zip(cfg.widths, (4, 2, 1))]
    check("head_forward", lambda: det.head_forward(hm, head)[0], hm[:1] + list(head[0].tensors()))

    # detection loss on raw head tensors, with one positive per image
    grids = dcfg.grid_sizes
    raws = [_rand(rng, (2, 3 * 8, g, g)) for g in grids]
    gts = [[det.GroundTruthBox(1, 0.4, 0.55, 0.3, 0.25)], [det.GroundTruthBox(2, 0.7, 0.3, 0.5, 0.6),
                                                            det.GroundTruthBox(0, 0.2, 0.2, 0.15, 0.2)]]
    asg = [det.match_anchors(g, dcfg.anchors, grids, dcfg.image_size) for g in gts]
    loss_f = lambda: det.detection_loss(raws, asg, gts, dcfg)  # noqa: E731
    out.append(CheckResult("detection_loss", _max_over(loss_f, raws, rng, 10_000), LOSS_TOL))
    return out


# ------------------------------------------------------------------ fixtures


@dataclass
class FixtureResult:
    name: str
    passed: bool
    detail: str


def selftest_fixtures(seed: int = 0) -> list:
    """The worked examples every correct build must reproduce exactly."""
    fx = shift_fixture()
    results = []

    def record(name, ok, detail):
        results.append(FixtureResult(name, bool(ok), detail))

    record("shift_maxpool", fx["maxpool"] == [0.0, 1.0, 0.0, 1.0], f"{fx['maxpool']}")
    record("shift_maxpool_shifted", fx["maxpool_shifted"] == [1.0, 1.0, 1.0, 1.0], f"{fx['maxpool_shifted']}")
    split_ok = fx["subpatch_even"] == [0.0, 1.0, 0.0, 1.0] and fx["subpatch_odd"] == [0.0, 1.0, 0.0, 1.0]
    record("reorg_split", split_ok, f"{fx['subpatch_even']} {fx['subpatch_odd']}")
    expect = np.array([1 / 3, 1, 1 / 3, 1])
    err = float(np.max(np.abs(np.array(fx["bfm_average"]) - expect)))
    record("bfm_average_fusion", err < 1e-12, f"{fx['bfm_average']} max_err={err:.3g}")

    # residual identity on the toy pyramid
    cfg, maps, params = small_pyramid(seed)
    state = build_residual_pyramid(maps, params, cfg)
    worst = max(float(np.max(np.abs((f.data - d.data) - s.data)))
                for f, d, s in zip(state.topdown_maps, state.deltas, state.skips))
    record("residual_identity", worst <= 1e-12, f"max |F - dF - skip| = {worst:.3g}")
    for r in params.topdown:
        for t in param_tensors(r.purify):
            t.data[...] = 0.0
    state = build_residual_pyramid(maps, params, cfg)
    exact = all(np.array_equal(f.data, m.data) for f, m in zip(state.topdown_maps, maps))
    record("residual_zero_delta", exact, "F == backbone map bit-exactly" if exact else "mismatch")

    rng = make_rng(seed, "roundtrip")
    x = Tensor(rng.normal(size=(2, 3, 8, 6)))
    y = Tensor(rng.normal(size=(2, 8, 3, 5)))
    ok = np.array_equal(depth_to_space2(space_to_depth2(x)).data, x.data) and np.array_equal(
        space_to_depth2(depth_to_space2(y)).data, y.data
    )
    record("reorg_roundtrip", ok, "bit-exact" if ok else "mismatch")
    return results
