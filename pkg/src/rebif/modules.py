"""CORE, Purification, ReCORE and BiFusion blocks and the pyramids built from them.

Scale index 0 is the shallowest (highest resolution) map throughout.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .tensor import (
    ConvParams,
    ShapeError,
    Tensor,
    add,
    check4,
    concat_channels,
    conv2d,
    init_conv,
    leaky_relu,
    make_rng,
    space_to_depth2,
    upsample_nearest2,
)

VARIANTS = ("plain-fpn", "recore", "bfm", "recore+bfm")


@dataclass(frozen=True)
class PyramidConfig:
    num_scales: int = 3
    widths: tuple = (32, 64, 128)
    strides: tuple = (8, 16, 32)
    variant: str = "recore+bfm"
    slope: float = 0.1

    def __post_init__(self):
        if not 2 <= self.num_scales <= 5:
            raise ValueError(f"num_scales must lie in [2, 5], got {self.num_scales}")
        if len(self.widths) != self.num_scales or len(self.strides) != self.num_scales:
            raise ValueError("widths and strides need one entry per scale")
        if any(w < 2 or w % 2 for w in self.widths):
            raise ValueError(f"pyramid widths must be even, got {self.widths}")
        if any(b != 2 * a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError(f"strides must double from scale to scale, got {self.strides}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown pyramid variant {self.variant!r}; choose from {VARIANTS}")

    @classmethod
    def make(cls, num_scales=3, base_width=32, deepest_stride=32, variant="recore+bfm", slope=0.1):
        """Scales end at ``deepest_stride``; extra scales are added on the shallow side.

        Width scales with stride so that stride 8 carries ``base_width`` channels.
        """
        strides = tuple(deepest_stride >> (num_scales - 1 - i) for i in range(num_scales))
        if strides[0] < 1 or strides[0] << (num_scales - 1) != deepest_stride:
            raise ValueError(f"deepest stride {deepest_stride} cannot host {num_scales} scales")
        widths = tuple(max(2, base_width * s // 8) for s in strides)
        return cls(num_scales, widths, strides, variant, slope)

    @property
    def uses_recore(self) -> bool:
        return self.variant in ("recore", "recore+bfm")

    @property
    def uses_bfm(self) -> bool:
        return self.variant in ("bfm", "recore+bfm")

    def core_width(self, i: int) -> int:
        # Purification halves D, so D = 2 C_i keeps the residual skip an identity
        return 2 * self.widths[i]


# ------------------------------------------------------------------ params


@dataclass
class PurificationParams:
    stage1_bottleneck: ConvParams
    stage1_conv3: ConvParams
    stage2_bottleneck: ConvParams
    stage2_conv3: ConvParams

    def __post_init__(self):
        b1 = self.stage1_bottleneck
        if b1.k != 1 or b1.c_in % 2 or b1.c_out != b1.c_in // 2:
            raise ShapeError(f"stage-1 bottleneck must map D -> D/2 with a 1x1 kernel, got {b1.c_in}->{b1.c_out}")
        for conv in (self.stage1_conv3, self.stage2_conv3):
            if conv.k != 3 or conv.padding != 1 or conv.stride != 1:
                raise ShapeError("purification 3x3 convs need padding 1 and stride 1")

    @classmethod
    def zeros(cls, d: int):
        h = d // 2
        return cls(
            ConvParams.zeros(h, d, 1),
            ConvParams.zeros(h, h, 3),
            ConvParams.zeros(h, h, 1),
            ConvParams.zeros(h, h, 3),
        )

    @property
    def d_in(self) -> int:
        return self.stage1_bottleneck.c_in

    @property
    def d_out(self) -> int:
        return self.stage2_conv3.c_out


@dataclass
class CoreParams:
    post_fuse: ConvParams


@dataclass
class ReCoreParams:
    core: CoreParams
    purify: PurificationParams
    skip_proj: Optional[ConvParams] = None


@dataclass
class FpnParams:
    """Plain top-down level: concat(current, up(deep)) -> 1x1 -> 3x3."""

    fuse: ConvParams
    conv3: ConvParams


@dataclass
class BfmParams:
    fuse: ConvParams


@dataclass
class PyramidParams:
    topdown: list  # ReCoreParams or FpnParams per scale
    bfm: list = field(default_factory=list)  # BfmParams for scales 1..S-1


@dataclass
class PyramidState:
    backbone_maps: list
    topdown_maps: list = field(default_factory=list)
    bottomup_maps: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    skips: list = field(default_factory=list)

    @property
    def outputs(self) -> list:
        return self.bottomup_maps or self.topdown_maps


def named_convs(obj, prefix: str = "") -> Iterator[tuple[str, ConvParams]]:
    """Walk nested params dataclasses/lists, yielding dotted layer names."""
    if obj is None:
        return
    if isinstance(obj, ConvParams):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_convs(item, f"{prefix}.s{i}" if prefix else f"s{i}")
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            sub = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_convs(getattr(obj, f.name), sub)
    else:
        raise TypeError(f"cannot walk params of type {type(obj).__name__}")


def param_tensors(obj) -> list[Tensor]:
    return [t for _, conv in named_convs(obj) for t in conv.tensors()]


# ---------------------------------------------------------------- forwards


def purification_forward(x: Tensor, p: PurificationParams, slope: float = 0.1) -> Tensor:
    check4(x)
    if x.shape[1] % 2:
        raise ShapeError(f"purification needs an even channel count, got {x.shape[1]}")
    if x.shape[1] != p.d_in:
        raise ShapeError(f"purification expects {p.d_in} channels, got {x.shape[1]}")
    y = x
    for conv in (p.stage1_bottleneck, p.stage1_conv3, p.stage2_bottleneck, p.stage2_conv3):
        y = leaky_relu(conv2d(y, conv), slope)
    return y


def _check_ratio(small: Tensor, big: Tensor, what: str):
    if (big.shape[2], big.shape[3]) != (2 * small.shape[2], 2 * small.shape[3]):
        raise ShapeError(f"{what}: expected a 2x resolution ratio, got {big.shape[2:]} vs {small.shape[2:]}")


def core_forward(shallow, current: Tensor, deep, p: CoreParams, slope: float = 0.1) -> Tensor:
    """Fuse [reorg(shallow), current, upsample(deep)] with a learned 1x1 projection."""
    parts = []
    if shallow is not None:
        _check_ratio(current, shallow, "core shallow input")
        parts.append(space_to_depth2(shallow))
    parts.append(current)
    if deep is not None:
        _check_ratio(deep, current, "core deep input")
        parts.append(upsample_nearest2(deep))
    bundle = concat_channels(parts)
    if bundle.shape[1] != p.post_fuse.c_in:
        raise ShapeError(f"core bundle has {bundle.shape[1]} channels, post_fuse expects {p.post_fuse.c_in}")
    return leaky_relu(conv2d(bundle, p.post_fuse), slope)


def _recore(shallow, current, deep, p: ReCoreParams, slope):
    skip = conv2d(current, p.skip_proj) if p.skip_proj is not None else current
    delta = purification_forward(core_forward(shallow, current, deep, p.core, slope), p.purify, slope)
    if delta.shape != skip.shape:
        raise ShapeError(f"residual branch {delta.shape} cannot be added to skip path {skip.shape}")
    return add(skip, delta), delta, skip


def recore_forward(shallow, current: Tensor, deep, p: ReCoreParams, slope: float = 0.1):
    """Residual CORE: returns (F, delta) with F = skip(current) + delta."""
    out, delta, _ = _recore(shallow, current, deep, p, slope)
    return out, delta


def fpn_forward(current: Tensor, deep, p: FpnParams, slope: float = 0.1) -> Tensor:
    parts = [current]
    if deep is not None:
        _check_ratio(deep, current, "fpn deep input")
        parts.append(upsample_nearest2(deep))
    y = leaky_relu(conv2d(concat_channels(parts), p.fuse), slope)
    return leaky_relu(conv2d(y, p.conv3), slope)


def bfm_forward(fm_high: Tensor, fm_low: Tensor, p: BfmParams, reorg=space_to_depth2) -> Tensor:
    """Learned 1x1 fusion of the four stride-2 sub-patches of ``fm_high`` with ``fm_low``.

    ``reorg`` may be swapped for the width-only variant to reproduce 1-D examples.
    """
    check4(fm_high, "fm_high")
    check4(fm_low, "fm_low")
    patches = reorg(fm_high)
    if patches.shape[2:] != fm_low.shape[2:]:
        raise ShapeError(f"bfm: fm_high {fm_high.shape[2:]} is not 2x fm_low {fm_low.shape[2:]}")
    if p.fuse.c_in != patches.shape[1] + fm_low.shape[1] or p.fuse.c_out != fm_low.shape[1]:
        raise ShapeError(
            f"bfm fuse is {p.fuse.c_in}->{p.fuse.c_out}, needs "
            f"{patches.shape[1] + fm_low.shape[1]}->{fm_low.shape[1]}"
        )
    return conv2d(concat_channels([patches, fm_low]), p.fuse)


# ---------------------------------------------------------------- pyramids


def build_residual_pyramid(backbone_maps, params: PyramidParams, cfg: PyramidConfig) -> PyramidState:
    """Top-down pass from the deepest scale.

    Scale i sees the backbone map one level shallower, its own backbone map,
    and the already fused output of scale i+1. The plain-FPN variant drops the
    shallow input and the residual form.
    """
    S = cfg.num_scales
    if len(backbone_maps) != S or len(params.topdown) != S:
        raise ShapeError(f"expected {S} backbone maps and top-down params, got {len(backbone_maps)}/{len(params.topdown)}")
    for i in range(S - 1):
        _check_ratio(backbone_maps[i + 1], backbone_maps[i], f"backbone scale {i}")
    state = PyramidState(list(backbone_maps))
    fused = [None] * S
    deltas = [None] * S
    skips = [None] * S
    for i in reversed(range(S)):
        shallow = backbone_maps[i - 1] if i > 0 else None
        deep = fused[i + 1] if i + 1 < S else None
        p = params.topdown[i]
        if isinstance(p, ReCoreParams):
            fused[i], deltas[i], skips[i] = _recore(shallow, backbone_maps[i], deep, p, cfg.slope)
        else:
            fused[i] = fpn_forward(backbone_maps[i], deep, p, cfg.slope)
    state.topdown_maps = fused
    if cfg.uses_recore:
        state.deltas = deltas
        state.skips = skips
    return state


def bottom_up_fuse(state: PyramidState, bfm_params) -> PyramidState:
    if not state.topdown_maps:
        raise ValueError("bottom_up_fuse needs a populated top-down pass")
    S = len(state.topdown_maps)
    if len(bfm_params) != S - 1:
        raise ShapeError(f"need {S - 1} BFM blocks for {S} scales, got {len(bfm_params)}")
    out = [state.topdown_maps[0]]
    for i in range(1, S):
        out.append(bfm_forward(out[i - 1], state.topdown_maps[i], bfm_params[i - 1]))
    return dataclasses.replace(state, bottomup_maps=out)


def pyramid_forward(backbone_maps, params: PyramidParams, cfg: PyramidConfig) -> PyramidState:
    state = build_residual_pyramid(backbone_maps, params, cfg)
    if cfg.uses_bfm:
        state = bottom_up_fuse(state, params.bfm)
    return state


def init_pyramid_params(cfg: PyramidConfig, seed: int, prefix: str = "pyramid") -> PyramidParams:
    """He-uniform params; every layer draws from its own (seed, name) stream."""
    S, C = cfg.num_scales, cfg.widths

    def conv(name, c_out, c_in, k):
        return init_conv(c_out, c_in, k, make_rng(seed, f"{prefix}.{name}"))

    topdown = []
    for i in range(S):
        deep_w = C[i + 1] if i + 1 < S else 0
        if cfg.uses_recore:
            shallow_w = 4 * C[i - 1] if i > 0 else 0
            d = cfg.core_width(i)
            h = d // 2
            purify = PurificationParams(
                conv(f"topdown.s{i}.purify.stage1_bottleneck", h, d, 1),
                conv(f"topdown.s{i}.purify.stage1_conv3", h, h, 3),
                conv(f"topdown.s{i}.purify.stage2_bottleneck", h, h, 1),
                conv(f"topdown.s{i}.purify.stage2_conv3", h, h, 3),
            )
            skip = None if h == C[i] else conv(f"topdown.s{i}.skip_proj", h, C[i], 1)
            core = CoreParams(conv(f"topdown.s{i}.core.post_fuse", d, shallow_w + C[i] + deep_w, 1))
            topdown.append(ReCoreParams(core, purify, skip))
        else:
            topdown.append(
                FpnParams(
                    conv(f"topdown.s{i}.fuse", C[i], C[i] + deep_w, 1),
                    conv(f"topdown.s{i}.conv3", C[i], C[i], 3),
                )
            )
    bfm = []
    if cfg.uses_bfm:
        # named after the deeper scale they write into
        bfm = [BfmParams(conv(f"bfm.s{i}.fuse", C[i], 4 * C[i - 1] + C[i], 1)) for i in range(1, S)]
    return PyramidParams(topdown, bfm)


def named_pyramid_convs(params: PyramidParams, prefix: str = "pyramid"):
    for name, conv in named_convs(params.topdown, f"{prefix}.topdown"):
        yield name, conv
    for i, b in enumerate(params.bfm, start=1):
        yield f"{prefix}.bfm.s{i}.fuse", b.fuse


# ---------------------------------------------------------------- cost


_SCALE_RE = re.compile(r"\.s(\d+)(\.|$)")
_STAGE_RE = re.compile(r"stage(\d+)\.")


def layer_stride(name: str, cfg: PyramidConfig) -> int:
    """Output stride of a named conv: ``backbone.stageK.*`` or any ``*.s{i}*`` scale layer."""
    if name.startswith("backbone."):
        m = _STAGE_RE.search(name)
        return 2 ** (int(m.group(1)) - 1)
    m = _SCALE_RE.search(name)
    if m is None:
        raise ValueError(f"cannot place layer {name!r} on a scale")
    return cfg.strides[int(m.group(1))]


@dataclass
class CostReport:
    macs: int
    params: int
    per_module: dict

    @property
    def flops(self) -> int:
        return 2 * self.macs


def conv_cost(conv: ConvParams, h_out: int, w_out: int) -> tuple[int, int]:
    macs = conv.c_out * conv.c_in * conv.k * conv.k * h_out * w_out
    return macs, conv.weight.data.size + conv.bias.data.size


def count_macs_params(named, cfg: PyramidConfig, input_dims) -> CostReport:
    """MACs and parameter counts for an iterable of (name, ConvParams).

    Modules are keyed by the name with its final component dropped.
    """
    H, W = input_dims
    total_macs = total_params = 0
    per_module: dict = {}
    for name, conv in named:
        s = layer_stride(name, cfg)
        macs, n_params = conv_cost(conv, H // s, W // s)
        module = name.rsplit(".", 1)[0]
        m, p = per_module.get(module, (0, 0))
        per_module[module] = (m + macs, p + n_params)
        total_macs += macs
        total_params += n_params
    return CostReport(total_macs, total_params, per_module)


# ---------------------------------------------------------------- checkpoint


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, named) -> None:
    lines = []
    for name, conv in named:
        lines.append(f"{name} {conv.c_out} {conv.c_in} {conv.k} {conv.stride} {conv.padding}")
        lines.append(" ".join(repr(float(v)) for v in conv.weight.data.ravel()))
        lines.append(" ".join(repr(float(v)) for v in conv.bias.data.ravel()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path, named) -> None:
    """Load values into the given (name, ConvParams) layers in place.

    Layer names, shapes, strides and paddings must all match exactly.
    """
    expected = dict(named)
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) % 3:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(lines)} lines)")
    seen = set()
    for i in range(0, len(lines), 3):
        head = lines[i].split()
        if len(head) != 6:
            raise CheckpointError(f"{path}:{i + 1}: bad manifest line {lines[i]!r}")
        name, dims = head[0], tuple(int(t) for t in head[1:])
        if name not in expected:
            raise CheckpointError(f"{path}:{i + 1}: unexpected layer {name!r}")
        conv = expected[name]
        want = (conv.c_out, conv.c_in, conv.k, conv.stride, conv.padding)
        if dims != want:
            raise CheckpointError(f"{path}:{i + 1}: layer {name} is {dims}, config needs {want}")
        w = np.array(lines[i + 1].split(), dtype=float)
        b = np.array(lines[i + 2].split(), dtype=float)
        if w.size != conv.weight.data.size or b.size != conv.bias.data.size:
            raise CheckpointError(f"{path}:{i + 2}: layer {name} has the wrong number of values")
        conv.weight.data[...] = w.reshape(conv.weight.shape)
        conv.bias.data[...] = b
        seen.add(name)
    missing = sorted(set(expected) - seen)
    if missing:
        raise CheckpointError(f"{path}: missing layers {missing}")
