"""Desk-scale experiments: shift study, training, evaluation, scale sweep and ablation."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import train_test_split
from .detector import (
    DetectorConfig,
    DetectorParams,
    GroundTruthBox,
    average_precision,
    decode_nms,
    detection_loss,
    detector_forward,
    init_detector,
    match_anchors,
)
from .modules import (
    VARIANTS,
    BfmParams,
    PyramidConfig,
    bfm_forward,
    count_macs_params,
    save_checkpoint,
)
from .tensor import (
    ConvParams,
    Tensor,
    init_conv,
    make_rng,
    maxpool2,
    no_grad,
    space_to_depth_w2,
)

SIZE_BUCKETS = (("small", 0.0, 12.0), ("medium", 12.0, 24.0), ("large", 24.0, math.inf))
SHIFT_ROWS = np.array([[0, 0, 1, 1, 0, 0, 1, 1], [0, 0, 1, 1, 0, 0, 1, 1]], dtype=float)


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration


# ------------------------------------------------------------------ shift study


@dataclass
class ShiftStat:
    operator: str
    mean_l2: float
    max_l2: float
    n: int
    seed: int


@dataclass
class ShiftReport:
    fixture: dict
    stats: list

    def stat(self, operator: str) -> ShiftStat:
        return next(s for s in self.stats if s.operator == operator)

    def tsv(self) -> str:
        lines = ["section\tname\tvalues"]
        for name, values in self.fixture.items():
            lines.append("fixture\t" + name + "\t" + ",".join(f"{v:.12g}" for v in values))
        lines.append("operator\tmean_l2\tmax_l2\tn\tseed")
        for s in self.stats:
            lines.append(f"{s.operator}\t{s.mean_l2:.12g}\t{s.max_l2:.12g}\t{s.n}\t{s.seed}")
        return "\n".join(lines) + "\n"


def average_fuse(c_in: int, c_out: int = 1) -> BfmParams:
    """A 1x1 fuse that averages all of its input channels."""
    p = ConvParams.zeros(c_out, c_in, 1)
    p.weight.data[...] = 1.0 / c_in
    return BfmParams(p)


def shift_fixture() -> dict:
    """Max-pool of the two-row block, of its periodic one-pixel shift, and the
    1-D average fusion of its two sub-patches with a constant deeper map."""
    x = Tensor(SHIFT_ROWS[None, None])
    shifted = Tensor(np.roll(SHIFT_ROWS, -1, axis=1)[None, None])
    pooled, _ = maxpool2(x)
    pooled_shift, _ = maxpool2(shifted)

    row = Tensor(SHIFT_ROWS[:1][None, None])
    patches = space_to_depth_w2(row)
    fm_low = Tensor(np.ones((1, 1, 1, 4)))
    fused = bfm_forward(row, fm_low, average_fuse(3), reorg=space_to_depth_w2)
    return {
        "maxpool": pooled.data.ravel().tolist(),
        "maxpool_shifted": pooled_shift.data.ravel().tolist(),
        "subpatch_even": patches.data[0, 0, 0].tolist(),
        "subpatch_odd": patches.data[0, 1, 0].tolist(),
        "bfm_average": fused.data.ravel().tolist(),
    }


def _l2_per_sample(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a - b) ** 2).reshape(a.shape[0], -1).sum(axis=1))


def shift_experiment(seed: int, n_trials: int = 1000, size: int = 8) -> ShiftReport:
    """Output change of max-pool vs BFM fusion under a one-pixel periodic shift.

    Each trial is a fair random binary ``size``x``size`` grid; the deeper map fed
    to BFM is the max-pool of the same grid, as in a pooled backbone.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    rng = make_rng(seed, "shift-grids")
    grids = rng.integers(0, 2, size=(n_trials, 1, size, size)).astype(float)
    shifted = np.roll(grids, -1, axis=3)
    learned = BfmParams(init_conv(1, 5, 1, make_rng(seed, "shift-bfm-learned")))
    average = average_fuse(5)

    def run(fuse, g):
        x = Tensor(g)
        low, _ = maxpool2(x)
        return bfm_forward(x, low, fuse).data

    stats = []
    d = _l2_per_sample(maxpool2(Tensor(grids))[0].data, maxpool2(Tensor(shifted))[0].data)
    stats.append(ShiftStat("maxpool2", float(d.mean()), float(d.max()), n_trials, seed))
    for name, fuse in (("bfm-average", average), ("bfm-learned", learned)):
        d = _l2_per_sample(run(fuse, grids), run(fuse, shifted))
        stats.append(ShiftStat(name, float(d.mean()), float(d.max()), n_trials, seed))
    return ShiftReport(shift_fixture(), stats)


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    variant: str = "recore+bfm"
    num_scales: int = 3
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass
class MetricsLog:
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def smoothed(self, window: int = 20) -> np.ndarray:
        x = np.asarray(self.losses)
        k = min(window, len(x))
        return np.convolve(x, np.ones(k) / k, mode="valid")

    def losses_tsv(self) -> str:
        return "iteration\tloss\n" + "".join(f"{i}\t{v:.17g}\n" for i, v in enumerate(self.losses))


def batch_order(n: int, batch_size: int, iterations: int, seed: int):
    """Index batches from seed-derived epoch permutations; the last partial batch of an epoch is dropped."""
    rng = make_rng(seed, "batch-order")
    per_epoch = max(1, n // batch_size)
    size = min(batch_size, n)
    perm = None
    for it in range(iterations):
        j = it % per_epoch
        if j == 0:
            perm = rng.permutation(n)
        yield perm[j * size : (j + 1) * size]


def stack_images(samples) -> Tensor:
    return Tensor(np.concatenate([s.image.data for s in samples], axis=0))


def train(dataset, cfg: TrainConfig, params: DetectorParams, det_cfg: DetectorConfig, checkpoint=None) -> MetricsLog:
    """SGD with momentum; the loss is the per-image mean of the detection loss.

    ``grad_clip`` bounds the global gradient norm (0 disables it).
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    tensors = params.tensors()
    velocity = [np.zeros_like(t.data) for t in tensors]
    assignments = [
        match_anchors(s.boxes, det_cfg.anchors, det_cfg.grid_sizes, det_cfg.image_size) for s in dataset
    ]
    log = MetricsLog()
    for it, idx in enumerate(batch_order(len(dataset), cfg.batch_size, cfg.iterations, cfg.seed)):
        batch = [dataset[i] for i in idx]
        heads, _ = detector_forward(stack_images(batch), params, det_cfg)
        try:
            loss = detection_loss(heads, [assignments[i] for i in idx], [s.boxes for s in batch], det_cfg, normalize=len(idx))
        except FloatingPointError:
            raise TrainingDiverged(it, math.nan) from None
        value = loss.data.item()
        for t in tensors:
            t.zero_grad()
        loss.backward()
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        if not math.isfinite(norm):
            raise TrainingDiverged(it, value)
        scale = cfg.grad_clip / norm if cfg.grad_clip and norm > cfg.grad_clip else 1.0
        for t, v, g in zip(tensors, velocity, grads):
            v *= cfg.momentum
            v += scale * g
            t.data -= cfg.lr * v
        log.losses.append(value)
    for t in tensors:
        t.zero_grad()
    if checkpoint is not None:
        save_checkpoint(checkpoint, params.named())
    return log


# ------------------------------------------------------------------ evaluation


def box_side_px(b, image_size: int) -> float:
    return math.sqrt(b.w * b.h) * image_size


def size_bucket(b, image_size: int) -> str:
    side = box_side_px(b, image_size)
    for name, lo, hi in SIZE_BUCKETS:
        if lo <= side < hi:
            return name
    raise AssertionError(side)


def predict(dataset, params: DetectorParams, det_cfg: DetectorConfig, batch_size: int = 16,
            score_thresh: float = 0.05, nms_iou: float = 0.5) -> list:
    dets = []
    with no_grad(params.tensors()):
        for i in range(0, len(dataset), batch_size):
            heads, _ = detector_forward(stack_images(dataset[i : i + batch_size]), params, det_cfg)
            dets.extend(decode_nms(heads, det_cfg, score_thresh, nms_iou))
    return dets


def evaluate_detections(dets, gts, det_cfg: DetectorConfig, ap_iou: float = 0.5) -> dict:
    """mAP@ap_iou overall and per size bucket. Each box (GT or detection) falls
    in exactly one bucket by its side length sqrt(w*h)."""
    classes = list(range(det_cfg.num_classes))
    overall = average_precision(dets, gts, ap_iou, classes)
    out = {"mAP": overall.mAP, "per_class": overall.per_class, "per_size": {}}
    for name, _, _ in SIZE_BUCKETS:
        bd = [[d for d in ds if size_bucket(d, det_cfg.image_size) == name] for ds in dets]
        bg = [[g for g in gs if size_bucket(g, det_cfg.image_size) == name] for gs in gts]
        out["per_size"][name] = average_precision(bd, bg, ap_iou, classes).mAP
    return out


def evaluate(dataset, params: DetectorParams, det_cfg: DetectorConfig, ap_iou: float = 0.5, **predict_kw) -> dict:
    dets = predict(dataset, params, det_cfg, **predict_kw)
    return evaluate_detections(dets, [s.boxes for s in dataset], det_cfg, ap_iou)


def detections_as_truth(dets) -> list:
    """Turn detections into ground truth (clipped to the unit square)."""
    out = []
    for ds in dets:
        boxes = []
        for d in ds:
            x0, y0 = max(0.0, d.cx - d.w / 2), max(0.0, d.cy - d.h / 2)
            x1, y1 = min(1.0, d.cx + d.w / 2), min(1.0, d.cy + d.h / 2)
            if x1 > x0 and y1 > y0:
                boxes.append(GroundTruthBox(d.class_id, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0))
        out.append(boxes)
    return out


# ------------------------------------------------------------------ sweeps


@dataclass(frozen=True)
class Benchmark:
    n_train: int = 2000
    n_test: int = 500
    data_seed: int = 7
    image_size: int = 64
    base_width: int = 32
    deepest_stride: int = 32


@dataclass
class RunResult:
    variant: str
    num_scales: int
    seed: int
    mAP: float
    ap_small: float
    ap_medium: float
    ap_large: float
    params: int
    macs: int
    initial_loss: float
    final_loss: float

    HEADER = "variant\tnum_scales\tseed\tmAP\tap_small\tap_medium\tap_large\tparams\tmacs\tinitial_loss\tfinal_loss"

    def tsv_row(self) -> str:
        d = asdict(self)
        cells = [f"{v:.9g}" if isinstance(v, float) else str(v) for v in d.values()]
        return "\t".join(cells)


def detector_config(bench: Benchmark, variant: str, num_scales: int) -> DetectorConfig:
    pyr = PyramidConfig.make(num_scales, bench.base_width, bench.deepest_stride, variant)
    return DetectorConfig(pyr, image_size=bench.image_size)


_DATA_CACHE: dict = {}


def benchmark_data(bench: Benchmark):
    key = (bench.n_train, bench.n_test, bench.data_seed, bench.image_size)
    if key not in _DATA_CACHE:
        _DATA_CACHE.clear()
        _DATA_CACHE[key] = train_test_split(bench.n_train, bench.n_test, bench.data_seed, bench.image_size)
    return _DATA_CACHE[key]


def run_one(bench: Benchmark, tcfg: TrainConfig) -> RunResult:
    train_set, test_set = benchmark_data(bench)
    det_cfg = detector_config(bench, tcfg.variant, tcfg.num_scales)
    params = init_detector(det_cfg, tcfg.seed)
    cost = count_macs_params(params.named(), det_cfg.pyramid, (bench.image_size, bench.image_size))
    log = train(train_set, tcfg, params, det_cfg)
    ev = evaluate(test_set, params, det_cfg)
    tail = log.losses[-min(50, len(log.losses)):]
    return RunResult(
        tcfg.variant,
        tcfg.num_scales,
        tcfg.seed,
        ev["mAP"],
        ev["per_size"]["small"],
        ev["per_size"]["medium"],
        ev["per_size"]["large"],
        cost.params,
        cost.macs,
        log.losses[0],
        float(np.mean(tail)),
    )


def _run_star(args):
    return run_one(*args)


def run_many(bench: Benchmark, configs, workers: int = 1) -> list:
    """Run configs, possibly in parallel; results come back in input order."""
    jobs = [(bench, c) for c in configs]
    if workers <= 1:
        return [run_one(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_star, jobs))


def median_map(results, variant: str, num_scales: int) -> float:
    vals = [r.mAP for r in results if r.variant == variant and r.num_scales == num_scales]
    return float(np.median(vals))


@dataclass
class SweepReport:
    results: list
    scale_values: tuple
    variants: tuple
    flags: list = field(default_factory=list)

    def medians(self) -> dict:
        return {(v, s): median_map(self.results, v, s) for v in self.variants for s in self.scale_values}

    def tsv(self) -> str:
        lines = [RunResult.HEADER] + [r.tsv_row() for r in self.results]
        return "\n".join(lines) + "\n"

    def summary_tsv(self) -> str:
        lines = ["variant\tnum_scales\tmedian_mAP\tparams\tmacs"]
        for v in self.variants:
            for s in self.scale_values:
                row = next(r for r in self.results if r.variant == v and r.num_scales == s)
                lines.append(f"{v}\t{s}\t{median_map(self.results, v, s):.9g}\t{row.params}\t{row.macs}")
        for flag in self.flags:
            lines.append(f"# FLAG\t{flag}")
        return "\n".join(lines) + "\n"


def _sorted(results, variants):
    rank = {v: i for i, v in enumerate(variants)}
    return sorted(results, key=lambda r: (rank[r.variant], r.num_scales, r.seed))


def scale_sweep(bench: Benchmark, base: TrainConfig, scale_values=(2, 3, 4, 5), seeds=(0, 1, 2),
                variants=("plain-fpn", "recore+bfm"), workers: int = 1) -> SweepReport:
    """Train each variant at each scale count for every seed.

    The residual variant must not lose more than 0.01 median mAP going from
    2 to 4 scales; a violation is recorded in ``flags``.
    """
    configs = [
        TrainConfig(base.iterations, base.batch_size, base.lr, base.momentum, seed, v, s, base.grad_clip)
        for v in variants
        for s in scale_values
        for seed in seeds
    ]
    results = _sorted(run_many(bench, configs, workers), variants)
    report = SweepReport(results, tuple(scale_values), tuple(variants))
    for v in variants:
        macs = [next(r.macs for r in results if r.variant == v and r.num_scales == s) for s in scale_values]
        if any(b <= a for a, b in zip(macs, macs[1:])):
            report.flags.append(f"{v}: MACs not strictly increasing with scale count: {macs}")
    residual = "recore+bfm"
    if residual in variants and 2 in scale_values and 4 in scale_values:
        m2, m4 = median_map(results, residual, 2), median_map(results, residual, 4)
        if m4 < m2 - 0.01:
            report.flags.append(f"{residual}: median mAP at S=4 ({m4:.4f}) < S=2 ({m2:.4f}) - 0.01")
    return report


@dataclass
class AblationReport:
    results: list
    variants: tuple = VARIANTS

    def medians(self) -> dict:
        scales = self.results[0].num_scales
        return {v: median_map(self.results, v, scales) for v in self.variants}

    def tsv(self) -> str:
        return "\n".join([RunResult.HEADER] + [r.tsv_row() for r in self.results]) + "\n"

    def summary_tsv(self) -> str:
        lines = ["variant\tmedian_mAP\tmedian_ap_small\tmedian_ap_medium\tmedian_ap_large\tparams\tmacs"]
        for v in self.variants:
            rs = [r for r in self.results if r.variant == v]
            med = lambda f: float(np.median([getattr(r, f) for r in rs]))  # noqa: E731
            lines.append(
                f"{v}\t{med('mAP'):.9g}\t{med('ap_small'):.9g}\t{med('ap_medium'):.9g}\t{med('ap_large'):.9g}"
                f"\t{rs[0].params}\t{rs[0].macs}"
            )
        return "\n".join(lines) + "\n"


def ablation(bench: Benchmark, base: TrainConfig, seeds=(0, 1, 2), workers: int = 1) -> AblationReport:
    """{plain, +ReCORE, +BFM, +both} at a fixed scale count, same seeds and data order."""
    configs = [
        TrainConfig(base.iterations, base.batch_size, base.lr, base.momentum, seed, v, base.num_scales, base.grad_clip)
        for v in VARIANTS
        for seed in seeds
    ]
    return AblationReport(_sorted(run_many(bench, configs, workers), VARIANTS))
