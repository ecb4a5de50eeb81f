"""Flat ``key = value`` run configuration with typed views and a resolved manifest."""

from __future__ import annotations

import os
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .experiments import Benchmark, TrainConfig
from .modules import VARIANTS, PyramidConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{key}{where}: {message}")
        self.key = key
        self.line = line


def _int_tuple(text: str) -> tuple:
    items = tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    if not items:
        raise ValueError("empty list")
    return items


@dataclass(frozen=True)
class Key:
    name: str
    parse: object
    default: object
    doc: str
    check: object = None  # returns an error message or None


def _range(lo, hi):
    return lambda v: None if lo <= v <= hi else f"must be in [{lo},{hi}], got {v}"


def _positive(v):
    return None if v > 0 else f"must be > 0, got {v}"


def _non_negative(v):
    return None if v >= 0 else f"must be >= 0, got {v}"


def _unit(v):
    return None if 0 <= v <= 1 else f"must be in [0,1], got {v}"


def _variant(v):
    return None if v in VARIANTS else f"must be one of {', '.join(VARIANTS)}"


def _scales(vs):
    return None if all(2 <= v <= 5 for v in vs) else f"scale counts must be in [2,5], got {list(vs)}"


def _default_out():
    return os.environ.get("REBIF_OUT", "out")


KEYS = (
    Key("pyramid.num_scales", int, 3, "number of pyramid scales", _range(2, 5)),
    Key("pyramid.variant", str, "recore+bfm", "plain-fpn | recore | bfm | recore+bfm", _variant),
    Key("pyramid.base_width", int, 32, "channel width of the stride-8 scale", _positive),
    Key("pyramid.deepest_stride", int, 32, "stride of the deepest scale", _positive),
    Key("pyramid.slope", float, 0.1, "leaky ReLU negative slope", _non_negative),
    Key("data.image_size", int, 64, "square image side in pixels", _positive),
    Key("data.n_train", int, 2000, "training images", _positive),
    Key("data.n_test", int, 500, "held-out images", _positive),
    Key("data.seed", int, 7, "dataset seed", _non_negative),
    Key("train.iterations", int, 3000, "SGD iterations", _positive),
    Key("train.batch_size", int, 8, "images per batch", _positive),
    Key("train.lr", float, 0.01, "learning rate", _positive),
    Key("train.momentum", float, 0.9, "SGD momentum", _unit),
    Key("train.seed", int, 0, "parameter init and batch order seed", _non_negative),
    Key("train.grad_clip", float, 10.0, "global gradient-norm bound, 0 disables", _non_negative),
    Key("eval.score_thresh", float, 0.05, "minimum detection score", _unit),
    Key("eval.nms_iou", float, 0.5, "NMS suppression IoU", _unit),
    Key("eval.ap_iou", float, 0.5, "IoU for a true positive", _unit),
    Key("shift.trials", int, 1000, "random grids in the shift study", _positive),
    Key("shift.seed", int, 0, "shift study seed", _non_negative),
    Key("sweep.scales", _int_tuple, (2, 3, 4, 5), "scale counts in the sweep", _scales),
    Key("sweep.seeds", _int_tuple, (0, 1, 2), "training seeds per sweep cell"),
    Key("sweep.workers", int, 1, "parallel training processes", _positive),
    Key("ablation.seeds", _int_tuple, (0, 1, 2), "training seeds per ablation variant"),
    Key("gradcheck.seed", int, 0, "gradient suite seed", _non_negative),
    Key("paths.out", str, None, "output directory (default: $REBIF_OUT or ./out)"),
    Key("paths.data", str, "", "dataset directory written by gen-data; empty means regenerate in memory"),
    Key("paths.checkpoint", str, "", "checkpoint file; empty means <out>/checkpoint.txt"),
)
KEY_INDEX = {k.name: k for k in KEYS}


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    values: dict
    sources: dict  # key -> "default" | "file" | "override"

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def out_dir(self) -> Path:
        return Path(self.values["paths.out"])

    @property
    def checkpoint_path(self) -> Path:
        p = self.values["paths.checkpoint"]
        return Path(p) if p else self.out_dir / "checkpoint.txt"

    def pyramid(self, num_scales: int | None = None, variant: str | None = None) -> PyramidConfig:
        v = self.values
        return PyramidConfig.make(
            num_scales or v["pyramid.num_scales"],
            v["pyramid.base_width"],
            v["pyramid.deepest_stride"],
            variant or v["pyramid.variant"],
            v["pyramid.slope"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            v["train.iterations"], v["train.batch_size"], v["train.lr"], v["train.momentum"],
            v["train.seed"], v["pyramid.variant"], v["pyramid.num_scales"], v["train.grad_clip"],
        )

    def benchmark(self) -> Benchmark:
        v = self.values
        return Benchmark(v["data.n_train"], v["data.n_test"], v["data.seed"], v["data.image_size"],
                         v["pyramid.base_width"], v["pyramid.deepest_stride"])

    def manifest(self, command: str, now: datetime | None = None) -> str:
        """Every resolved key with its source; the timestamp sits alone in a header comment."""
        stamp = (now or datetime.now(timezone.utc)).isoformat(timespec="seconds")
        lines = [f"# command = {command}", f"# written_at = {stamp}"]
        for k in KEYS:
            lines.append(f"{k.name} = {_format(self.values[k.name])}  # {self.sources[k.name]}")
        return "\n".join(lines) + "\n"


def _split(raw: str, key_hint: str, line: int | None):
    if "=" not in raw:
        raise ConfigError(key_hint, "expected 'key = value'", line)
    key, value = raw.split("=", 1)
    return key.strip(), value.strip()


def _coerce(key: str, text: str, line: int | None):
    entry = KEY_INDEX.get(key)
    if entry is None:
        raise ConfigError(key, "unknown key", line)
    try:
        value = entry.parse(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {getattr(entry.parse, '__name__', 'value')}", line) from None
    if entry.check is not None:
        problem = entry.check(value)
        if problem:
            raise ConfigError(key, problem, line)
    return value


def parse_config(file=None, overrides=()) -> RunConfig:
    """Defaults, then ``file`` lines, then ``key=value`` overrides (last wins).

    Errors name the key and, for file entries, the 1-based line number.
    """
    values = {k.name: k.default for k in KEYS}
    sources = {k.name: "default" for k in KEYS}
    if file is not None:
        text = Path(file).read_text(encoding="utf-8")
        for n, raw in enumerate(text.splitlines(), start=1):
            body = raw.split("#", 1)[0].strip()
            if not body:
                continue
            key, value = _split(body, body, n)
            values[key] = _coerce(key, value, n)
            sources[key] = "file"
    for item in overrides:
        key, value = _split(item, item, None)
        values[key] = _coerce(key, value, None)
        sources[key] = "override"
    if values["paths.out"] is None:
        values["paths.out"] = _default_out()
    missing = [k.name for k in KEYS if values[k.name] is None]
    if missing:
        raise ConfigError(missing[0], "required key has no value")
    return RunConfig(values, sources)
