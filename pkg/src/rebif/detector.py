"""Single-shot detection around the pyramid: backbone, heads, matching, loss, NMS and AP."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .modules import (
    PyramidConfig,
    PyramidParams,
    PyramidState,
    init_pyramid_params,
    named_convs,
    named_pyramid_convs,
    pyramid_forward,
)
from .tensor import (
    ConvParams,
    ShapeError,
    Tensor,
    _result,
    check4,
    conv2d,
    init_conv,
    leaky_relu,
    make_rng,
    maxpool2,
)

LOGIT_CLAMP = 20.0
OBJ_WEIGHT, CLS_WEIGHT, BOX_WEIGHT = 1.0, 1.0, 5.0
OBJ_PRIOR, HEAD_INIT_STD = 0.01, 0.01
CLASS_NAMES = ("square", "disk", "triangle")


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0 <= self.cx <= 1 and 0 <= self.cy <= 1 and 0 < self.w <= 1 and 0 < self.h <= 1):
            raise ValueError(f"box outside the unit square: {self}")


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    cx: float
    cy: float
    w: float
    h: float

    def sort_key(self):
        # score desc, class, then row-major position
        return (-self.score, self.class_id, self.cy, self.cx, self.h, self.w)


@dataclass(frozen=True)
class AnchorSet:
    sizes: tuple  # per scale, tuple of (w, h) in pixels

    def __post_init__(self):
        for per_scale in self.sizes:
            if not per_scale or any(w <= 0 or h <= 0 for w, h in per_scale):
                raise ValueError("every scale needs at least one anchor with positive size")

    @classmethod
    def default(cls, strides, multiples=(0.5, 1.0, 2.0)):
        return cls(tuple(tuple((m * s, m * s) for m in multiples) for s in strides))

    def count(self, scale: int) -> int:
        return len(self.sizes[scale])


@dataclass(frozen=True)
class DetectorConfig:
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    num_classes: int = 3
    image_size: int = 64
    in_channels: int = 1
    anchor_multiples: tuple = (0.5, 1.0, 2.0)

    @property
    def anchors(self) -> AnchorSet:
        return AnchorSet.default(self.pyramid.strides, self.anchor_multiples)

    @property
    def grid_sizes(self) -> tuple:
        return tuple(self.image_size // s for s in self.pyramid.strides)

    def backbone_widths(self) -> tuple:
        """Width of each backbone stage; stage k outputs stride 2**k."""
        deepest = self.pyramid.strides[-1]
        n_stages = deepest.bit_length() - 1
        first_tap = n_stages - self.pyramid.num_scales + 1
        widths = []
        for k in range(1, n_stages + 1):
            if k >= first_tap:
                widths.append(self.pyramid.widths[k - first_tap])
            else:
                widths.append(max(2, self.pyramid.widths[0] >> (first_tap - k)))
        return tuple(widths)


# ------------------------------------------------------------------ params


@dataclass
class BackboneParams:
    stages: list  # ConvParams, 3x3 pad 1, each followed by activation + maxpool2
    taps: tuple  # stage indices (0-based) whose pooled output is exported


@dataclass
class DetectorParams:
    backbone: BackboneParams
    pyramid: PyramidParams
    head: list

    def named(self):
        for k, conv in enumerate(self.backbone.stages, start=1):
            yield f"backbone.stage{k}.conv", conv
        yield from named_pyramid_convs(self.pyramid)
        yield from named_convs(self.head, "head")

    def tensors(self) -> list:
        return [t for _, conv in self.named() for t in conv.tensors()]


def init_detector(cfg: DetectorConfig, seed: int) -> DetectorParams:
    widths = cfg.backbone_widths()
    stages, c_in = [], cfg.in_channels
    for k, w in enumerate(widths, start=1):
        stages.append(init_conv(w, c_in, 3, make_rng(seed, f"backbone.stage{k}.conv")))
        c_in = w
    S = cfg.pyramid.num_scales
    taps = tuple(range(len(widths) - S, len(widths)))
    head = [init_head(cfg.anchors.count(i), cfg.num_classes, cfg.pyramid.widths[i], make_rng(seed, f"head.s{i}"))
            for i in range(S)]
    pyramid = init_pyramid_params(cfg.pyramid, seed)
    # residual branches start at zero so every ReCORE block begins as its skip path
    for r in pyramid.topdown:
        if hasattr(r, "purify"):
            r.purify.stage2_conv3.weight.data[...] = 0.0
    return DetectorParams(BackboneParams(stages, taps), pyramid, head)


def init_head(num_anchors: int, num_classes: int, c_in: int, rng) -> ConvParams:
    """Small weights, and an objectness bias giving every anchor prior probability OBJ_PRIOR."""
    p = ConvParams.zeros(num_anchors * (5 + num_classes), c_in, 1)
    p.weight.data[...] = rng.normal(scale=HEAD_INIT_STD, size=p.weight.shape)
    p.bias.data[4 :: 5 + num_classes] = -math.log((1 - OBJ_PRIOR) / OBJ_PRIOR)
    return p


# ------------------------------------------------------------------ forward


def backbone_forward(image: Tensor, p: BackboneParams, slope: float = 0.1) -> list:
    check4(image, "image")
    deepest = 2 ** len(p.stages)
    if image.shape[2] % deepest or image.shape[3] % deepest:
        raise ShapeError(f"image {image.shape[2]}x{image.shape[3]} is not divisible by stride {deepest}")
    maps, x = [], image
    for k, conv in enumerate(p.stages):
        x, _ = maxpool2(leaky_relu(conv2d(x, conv), slope))
        if k in p.taps:
            maps.append(x)
    return maps


def head_forward(pyramid_maps, head_params) -> list:
    if len(pyramid_maps) != len(head_params):
        raise ShapeError(f"{len(pyramid_maps)} pyramid maps but {len(head_params)} heads")
    return [conv2d(m, h) for m, h in zip(pyramid_maps, head_params)]


def detector_forward(images: Tensor, params: DetectorParams, cfg: DetectorConfig):
    """Returns (raw head tensors, pyramid state)."""
    maps = backbone_forward(images, params.backbone, cfg.pyramid.slope)
    state = pyramid_forward(maps, params.pyramid, cfg.pyramid)
    return head_forward(state.outputs, params.head), state


def split_head(raw: np.ndarray, num_anchors: int, num_classes: int) -> np.ndarray:
    n, c, h, w = raw.shape
    if c != num_anchors * (5 + num_classes):
        raise ShapeError(f"head has {c} channels, layout needs {num_anchors}*(5+{num_classes})")
    return raw.reshape(n, num_anchors, 5 + num_classes, h, w)


# ------------------------------------------------------------------ boxes


def to_corners(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    half = b[..., 2:4] / 2
    return np.concatenate([b[..., 0:2] - half, b[..., 0:2] + half], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of center-size boxes, shapes (N, 4) x (M, 4) -> (N, M)."""
    ca, cb = to_corners(a), to_corners(b)
    lt = np.maximum(ca[:, None, :2], cb[None, :, :2])
    rb = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    inter = np.minimum(wh[..., 0] * wh[..., 1], np.minimum(area_a[:, None], area_b[None, :]))
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def iou(a, b) -> float:
    """IoU of two center-size boxes given as (cx, cy, w, h)."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ValueError("boxes need positive width and height")
    iw = min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2)
    ih = min(ay + ah / 2, by + bh / 2) - max(ay - ah / 2, by - bh / 2)
    if iw <= 0 or ih <= 0:
        return 0.0
    # corner round-off can push the overlap past the smaller area
    inter = min(iw * ih, aw * ah, bw * bh)
    return inter / (aw * ah + bw * bh - inter)


def box_of(g) -> tuple:
    return (g.cx, g.cy, g.w, g.h)


def shape_iou(w1, h1, w2, h2):
    inter = np.minimum(w1, w2) * np.minimum(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


# ------------------------------------------------------------------ matching


@dataclass
class Assignment:
    """Per scale, an int array (A, h, w): index of the matched ground truth or -1."""

    gt_index: list

    def positives(self) -> int:
        return int(sum((g >= 0).sum() for g in self.gt_index))


def anchor_boxes(anchors: AnchorSet, scale: int, grid: int, image_size: int) -> np.ndarray:
    """(A, grid, grid, 4) normalized anchor boxes centred on each cell."""
    centers = (np.arange(grid) + 0.5) / grid
    A = anchors.count(scale)
    out = np.empty((A, grid, grid, 4))
    out[..., 0] = centers[None, None, :]
    out[..., 1] = centers[None, :, None]
    for a, (aw, ah) in enumerate(anchors.sizes[scale]):
        out[a, ..., 2] = aw / image_size
        out[a, ..., 3] = ah / image_size
    return out


def center_cell(g: GroundTruthBox, grid: int) -> tuple:
    return min(int(g.cy * grid), grid - 1), min(int(g.cx * grid), grid - 1)


def match_anchors(gts, anchors: AnchorSet, grid_sizes, image_size: int, pos_iou: float = 0.5) -> Assignment:
    """Best-shape anchor in the centre cell for every GT, plus any anchor with IoU > pos_iou."""
    S = len(grid_sizes)
    index = [np.full((anchors.count(s), g, g), -1, dtype=np.int64) for s, g in enumerate(grid_sizes)]
    if not gts:
        return Assignment(index)
    boxes = np.array([box_of(g) for g in gts])

    for s, grid in enumerate(grid_sizes):
        ab = anchor_boxes(anchors, s, grid, image_size).reshape(-1, 4)
        m = iou_matrix(boxes, ab)  # (G, A*grid*grid)
        best_gt = m.argmax(axis=0)
        pos = m.max(axis=0) > pos_iou
        flat = index[s].reshape(-1)
        flat[pos] = best_gt[pos]

    # shape-only IoU against every (scale, anchor), scale-major so argmax breaks ties low
    shapes = [(s, a, aw, ah) for s in range(S) for a, (aw, ah) in enumerate(anchors.sizes[s])]
    sw = np.array([x[2] for x in shapes]) / image_size
    sh = np.array([x[3] for x in shapes]) / image_size
    claims: dict = {}
    for gi, g in enumerate(gts):
        ious = shape_iou(g.w, g.h, sw, sh)
        k = int(ious.argmax())
        s, a = shapes[k][0], shapes[k][1]
        r, c = center_cell(g, grid_sizes[s])
        slot = (s, a, r, c)
        prev = claims.get(slot)
        if prev is None or ious[k] > prev[1]:
            claims[slot] = (gi, ious[k])
    for (s, a, r, c), (gi, _) in claims.items():
        index[s][a, r, c] = gi
    return Assignment(index)


# ------------------------------------------------------------------ loss


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _bce_logits(z, y):
    return np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))


def build_targets(assignments, gts_batch, anchors: AnchorSet, grid_sizes, image_size, num_classes):
    """Dense per-scale targets: obj (n,A,h,w), cls (n,A,K,h,w), box (n,A,4,h,w)."""
    n = len(assignments)
    out = []
    for s, grid in enumerate(grid_sizes):
        A = anchors.count(s)
        obj = np.zeros((n, A, grid, grid))
        cls = np.zeros((n, A, num_classes, grid, grid))
        box = np.zeros((n, A, 4, grid, grid))
        for b, (asg, gts) in enumerate(zip(assignments, gts_batch)):
            idx = asg.gt_index[s]
            for a, r, c in zip(*np.nonzero(idx >= 0)):
                g = gts[idx[a, r, c]]
                aw, ah = anchors.sizes[s][a]
                obj[b, a, r, c] = 1.0
                cls[b, a, g.class_id, r, c] = 1.0
                box[b, a, 0, r, c] = np.clip(g.cx * grid - c, 0.0, 1.0)
                box[b, a, 1, r, c] = np.clip(g.cy * grid - r, 0.0, 1.0)
                box[b, a, 2, r, c] = math.log(g.w * image_size / aw)
                box[b, a, 3, r, c] = math.log(g.h * image_size / ah)
        out.append((obj, cls, box))
    return out


def detection_loss(raw_heads, assignments, gts_batch, cfg: DetectorConfig, normalize: float = 1.0) -> Tensor:
    """Scalar loss over a batch, divided by ``normalize``.

    Objectness BCE over every anchor, class BCE and squared box error over
    positives, weighted 1 / 1 / 5. Logits are clamped to +-20 first.
    """
    anchors, K = cfg.anchors, cfg.num_classes
    grids = tuple(r.shape[2] for r in raw_heads)
    targets = build_targets(assignments, gts_batch, anchors, grids, cfg.image_size, K)
    total_loss = 0.0
    grads = []
    for s, (raw, (obj_t, cls_t, box_t)) in enumerate(zip(raw_heads, targets)):
        A = anchors.count(s)
        r = split_head(raw.data, A, K)
        z = np.clip(r, -LOGIT_CLAMP, LOGIT_CLAMP)
        live = (r >= -LOGIT_CLAMP) & (r <= LOGIT_CLAMP)
        sig = _sigmoid(z)
        g = np.zeros_like(r)
        pos = obj_t  # 0/1 mask, (n, A, h, w)

        zo = z[:, :, 4]
        total_loss += OBJ_WEIGHT * _bce_logits(zo, obj_t).sum()
        g[:, :, 4] = OBJ_WEIGHT * (sig[:, :, 4] - obj_t)

        zc = z[:, :, 5:]
        pm = pos[:, :, None]
        total_loss += CLS_WEIGHT * (pm * _bce_logits(zc, cls_t)).sum()
        g[:, :, 5:] = CLS_WEIGHT * pm * (sig[:, :, 5:] - cls_t)

        sxy = sig[:, :, 0:2]
        dxy = sxy - box_t[:, :, 0:2]
        dwh = r[:, :, 2:4] - box_t[:, :, 2:4]
        total_loss += BOX_WEIGHT * (pm * (dxy**2)).sum() + BOX_WEIGHT * (pm * (dwh**2)).sum()
        g[:, :, 0:2] = BOX_WEIGHT * pm * 2 * dxy * sxy * (1 - sxy)
        g[:, :, 2:4] = BOX_WEIGHT * pm * 2 * dwh

        # clamping cuts the gradient for the clamped logits (tw, th are never clamped)
        clamp_mask = live.copy()
        clamp_mask[:, :, 2:4] = True
        g = np.where(clamp_mask, g, 0.0)
        grads.append(g.reshape(raw.shape) / normalize)

    value = np.array(total_loss / normalize)
    if not np.isfinite(value):
        raise FloatingPointError("non-finite detection loss")

    def backward(up):
        for raw, g in zip(raw_heads, grads):
            if raw.requires_grad:
                raw.accumulate(up * g)

    return _result(value, tuple(raw_heads), backward)


# ------------------------------------------------------------------ decode / NMS


def decode(raw_heads, cfg: DetectorConfig, score_thresh: float = 0.05, max_per_class: int = 400):
    """Per image, every (anchor cell, class) scoring at least ``score_thresh``.

    At most ``max_per_class`` candidates per class survive, best first, so NMS
    stays cheap on untrained models.
    """
    anchors, K, size = cfg.anchors, cfg.num_classes, cfg.image_size
    n = raw_heads[0].shape[0]
    cols_all = [[] for _ in range(n)]
    for s, raw in enumerate(raw_heads):
        data = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
        A = anchors.count(s)
        r = split_head(data, A, K)
        grid_h, grid_w = r.shape[3], r.shape[4]
        z = np.clip(r, -LOGIT_CLAMP, LOGIT_CLAMP)
        sig = _sigmoid(z)
        aw = np.array([a[0] for a in anchors.sizes[s]])[None, :, None, None]
        ah = np.array([a[1] for a in anchors.sizes[s]])[None, :, None, None]
        cx = (np.arange(grid_w)[None, None, None, :] + sig[:, :, 0]) / grid_w
        cy = (np.arange(grid_h)[None, None, :, None] + sig[:, :, 1]) / grid_h
        w = aw * np.exp(z[:, :, 2]) / size
        h = ah * np.exp(z[:, :, 3]) / size
        c = np.clip(to_corners(np.stack([cx, cy, w, h], axis=-1)), -0.25, 1.25)
        boxes = np.stack(
            [(c[..., 0] + c[..., 2]) / 2, (c[..., 1] + c[..., 3]) / 2, c[..., 2] - c[..., 0], c[..., 3] - c[..., 1]],
            axis=-1,
        )  # (n, A, h, w, 4)
        scores = sig[:, :, 4][:, :, None] * sig[:, :, 5:]  # (n, A, K, h, w)
        for b in range(n):
            a_i, k_i, y_i, x_i = np.nonzero(scores[b] >= score_thresh)
            bx = boxes[b, a_i, y_i, x_i]
            ok = (bx[:, 2] > 0) & (bx[:, 3] > 0)
            cols_all[b].append((k_i[ok], scores[b, a_i, k_i, y_i, x_i][ok], bx[ok]))

    per_image = []
    for b in range(n):
        k = np.concatenate([t[0] for t in cols_all[b]])
        sc = np.concatenate([t[1] for t in cols_all[b]])
        bx = np.concatenate([t[2] for t in cols_all[b]]).reshape(-1, 4)
        # lexsort: last key is primary -> (class, -score, cy, cx, h, w)
        order = np.lexsort((bx[:, 2], bx[:, 3], bx[:, 0], bx[:, 1], -sc, k))
        dets = []
        taken: dict = {}
        for i in order:
            cls = int(k[i])
            if taken.get(cls, 0) >= max_per_class:
                continue
            taken[cls] = taken.get(cls, 0) + 1
            dets.append(Detection(cls, float(sc[i]), *(float(v) for v in bx[i])))
        per_image.append(dets)
    return per_image


def nms(dets, iou_thresh: float = 0.5):
    """Greedy per-class NMS. Output sorted by (score desc, class, row-major position)."""
    kept = []
    by_class: dict = {}
    for d in dets:
        by_class.setdefault(d.class_id, []).append(d)
    for cls in sorted(by_class):
        group = sorted(by_class[cls], key=Detection.sort_key)
        boxes = np.array([box_of(d) for d in group])
        m = iou_matrix(boxes, boxes)
        alive = np.ones(len(group), dtype=bool)
        for i in range(len(group)):
            if not alive[i]:
                continue
            kept.append(group[i])
            later = np.arange(len(group)) > i
            alive &= ~(later & (m[i] > iou_thresh))
    return sorted(kept, key=Detection.sort_key)


def decode_nms(raw_heads, cfg: DetectorConfig, score_thresh: float = 0.05, iou_thresh: float = 0.5):
    return [nms(d, iou_thresh) for d in decode(raw_heads, cfg, score_thresh)]


# ------------------------------------------------------------------ AP


def clamp_box(b):
    x0, y0, x1, y1 = to_corners(np.asarray(b, dtype=float))
    x0, y0, x1, y1 = (min(max(v, 0.0), 1.0) for v in (x0, y0, x1, y1))
    return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def _safe_iou(a, b) -> float:
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        return 0.0
    return iou(a, b)


@dataclass
class APResult:
    per_class: dict
    mAP: float


def match_detections(dets_per_image, gts_per_image, class_id: int, iou_thresh: float = 0.5):
    """Score-sorted (score, is_tp) pairs for one class, plus the GT count."""
    items = []
    for img, dets in enumerate(dets_per_image):
        for d in dets:
            if d.class_id == class_id and d.score > 0:
                items.append((img, d))
    items.sort(key=lambda t: (-t[1].score, t[0]) + t[1].sort_key()[2:])
    gt_boxes = {
        img: [clamp_box(box_of(g)) for g in gts if g.class_id == class_id]
        for img, gts in enumerate(gts_per_image)
    }
    n_gt = sum(len(v) for v in gt_boxes.values())
    used = {img: [False] * len(v) for img, v in gt_boxes.items()}
    out = []
    for img, d in items:
        box = clamp_box(box_of(d))
        best, best_iou = -1, iou_thresh
        for j, g in enumerate(gt_boxes.get(img, ())):
            if used[img][j]:
                continue
            v = _safe_iou(box, g)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            used[img][best] = True
        out.append((d.score, best >= 0))
    return out, n_gt


def ap_from_matches(matches, n_gt: int) -> float:
    """All-point interpolated area under the precision envelope."""
    if n_gt == 0 or not matches:
        return 0.0
    tp = np.cumsum([m[1] for m in matches], dtype=float)
    fp = np.cumsum([not m[1] for m in matches], dtype=float)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(dets_per_image, gts_per_image, iou_thresh: float = 0.5, classes=None) -> APResult:
    """AP@iou_thresh per class; mAP is the mean over classes that appear in the GT."""
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truth must cover the same images")
    if classes is None:
        classes = sorted({g.class_id for gts in gts_per_image for g in gts})
    per_class = {}
    for c in classes:
        matches, n_gt = match_detections(dets_per_image, gts_per_image, c, iou_thresh)
        per_class[c] = ap_from_matches(matches, n_gt)
    present = [c for c in classes if any(g.class_id == c for gts in gts_per_image for g in gts)]
    mAP = float(np.mean([per_class[c] for c in present])) if present else 0.0
    return APResult(per_class, mAP)


def write_detections_tsv(path, dets_per_image, image_ids=None):
    lines = []
    for i, dets in enumerate(dets_per_image):
        img = image_ids[i] if image_ids is not None else i
        for d in dets:
            lines.append(
                f"{img}\t{d.class_id}\t{d.score:.9g}\t{d.cx:.9g}\t{d.cy:.9g}\t{d.w:.9g}\t{d.h:.9g}"
            )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("image_id\tclass_id\tscore\tcx\tcy\tw\th\n")
        fh.write("".join(line + "\n" for line in lines))
