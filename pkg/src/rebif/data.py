"""Synthetic shapes benchmark: squares, disks and triangles on a flat background."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detector import GroundTruthBox, iou
from .tensor import Tensor, make_rng

SUPERSAMPLE = 4
NOISE_SIGMA = 0.02
MIN_SIDE, MAX_SIDE = 6.0, 40.0


@dataclass
class SyntheticSample:
    image: Tensor  # (1, 1, size, size), values in [0, 1]
    boxes: list
    seed: int
    index: int


def _coverage(kind: int, x0: float, y0: float, side: float, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Fraction of each pixel covered by the shape, by SUPERSAMPLE^2 point sampling."""
    sub = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    py = (ys[:, None] + sub[None, :]).reshape(-1)
    px = (xs[:, None] + sub[None, :]).reshape(-1)
    Y, X = np.meshgrid(py, px, indexing="ij")
    if kind == 0:  # square
        inside = (X >= x0) & (X <= x0 + side) & (Y >= y0) & (Y <= y0 + side)
    elif kind == 1:  # disk
        r = side / 2
        inside = (X - x0 - r) ** 2 + (Y - y0 - r) ** 2 <= r * r
    else:  # upright isosceles triangle, apex at top centre
        t = (Y - y0) / side
        half = t * side / 2
        inside = (t >= 0) & (t <= 1) & (np.abs(X - x0 - side / 2) <= half)
    cov = inside.reshape(len(ys), SUPERSAMPLE, len(xs), SUPERSAMPLE).mean(axis=(1, 3))
    return cov


def gen_sample(seed: int, index: int, size: int = 64, max_objects: int = 5) -> SyntheticSample:
    rng = make_rng(seed, "sample", index)
    background = rng.uniform(0.05, 0.35)
    img = np.full((size, size), background)
    n_obj = int(rng.integers(1, max_objects + 1))
    placed: list = []
    for _ in range(n_obj):
        kind = int(rng.integers(0, 3))
        for _attempt in range(20):
            side = rng.uniform(MIN_SIDE, MAX_SIDE)
            x0 = rng.uniform(0, size - side)
            y0 = rng.uniform(0, size - side)
            box = ((x0 + side / 2) / size, (y0 + side / 2) / size, side / size, side / size)
            if all(iou(box, (b.cx, b.cy, b.w, b.h)) <= 0.1 for b in placed):
                break
        else:
            continue
        level = rng.uniform(0.6, 0.95)
        r0, r1 = int(np.floor(y0)), min(size, int(np.ceil(y0 + side)) + 1)
        c0, c1 = int(np.floor(x0)), min(size, int(np.ceil(x0 + side)) + 1)
        cov = _coverage(kind, x0, y0, side, np.arange(r0, r1), np.arange(c0, c1))
        patch = img[r0:r1, c0:c1]
        img[r0:r1, c0:c1] = patch * (1 - cov) + level * cov
        placed.append(GroundTruthBox(kind, *box))
    img = np.clip(img + rng.normal(0.0, NOISE_SIGMA, img.shape), 0.0, 1.0)
    return SyntheticSample(Tensor(img[None, None]), placed, seed, index)


def gen_synthetic_dataset(n_images: int, seed: int, size: int = 64, start: int = 0) -> list:
    """Samples ``start .. start + n_images - 1`` of the stream keyed by ``seed``."""
    if n_images < 1:
        raise ValueError("n_images must be at least 1")
    return [gen_sample(seed, i, size) for i in range(start, start + n_images)]


def train_test_split(n_train: int, n_test: int, seed: int, size: int = 64):
    """Disjoint by construction: test samples continue the index stream after train."""
    train = gen_synthetic_dataset(n_train, seed, size)
    test = gen_synthetic_dataset(n_test, seed, size, start=n_train)
    return train, test


# ------------------------------------------------------------------ disk I/O


def write_pgm(path, image: np.ndarray) -> None:
    a = np.asarray(image)
    if a.ndim != 2:
        raise ValueError("PGM images are 2-D")
    q = np.clip(np.rint(a * 255), 0, 255).astype(np.uint8)
    header = f"P5\n{q.shape[1]} {q.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + q.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(raw[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w).astype(np.float64) / 255.0


def write_labels(path, boxes) -> None:
    lines = [f"{b.class_id} {b.cx!r} {b.cy!r} {b.w!r} {b.h!r}" for b in boxes]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_labels(path) -> list:
    boxes = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{n}: expected 'class_id cx cy w h'")
        boxes.append(GroundTruthBox(int(parts[0]), *(float(p) for p in parts[1:])))
    return boxes


def save_dataset(samples, directory, prefix: str = "img") -> list:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for s in samples:
        stem = f"{prefix}{s.index:06d}"
        write_pgm(d / f"{stem}.pgm", s.image.data[0, 0])
        write_labels(d / f"{stem}.txt", s.boxes)
        names.append(stem)
    return names


def load_dataset(directory, prefix: str = "img") -> list:
    d = Path(directory)
    out = []
    for pgm in sorted(d.glob(f"{prefix}*.pgm")):
        index = int(pgm.stem[len(prefix):])
        img = read_pgm(pgm)
        out.append(SyntheticSample(Tensor(img[None, None]), read_labels(pgm.with_suffix(".txt")), -1, index))
    return out
