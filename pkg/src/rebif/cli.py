"""``rebif`` command line: parse config, dispatch one command, write TSV reports and a manifest."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import checks
from .config import ConfigError, RunConfig, parse_config
from .data import load_dataset, save_dataset, train_test_split
from .detector import CLASS_NAMES, DetectorConfig, init_detector, write_detections_tsv
from .experiments import (
    ablation,
    evaluate_detections,
    predict,
    scale_sweep,
    shift_experiment,
    train,
)
from .modules import CheckpointError, count_macs_params, load_checkpoint

COMMANDS = ("gen-data", "shift-report", "train", "eval", "sweep", "ablation", "flops", "grad-check", "selftest")


class CommandFailed(RuntimeError):
    """An embedded assertion did not hold; reports were still written."""


def _write(out: Path, name: str, text: str) -> Path:
    path = out / name
    path.write_text(text, encoding="utf-8")
    return path


def _datasets(cfg: RunConfig):
    if cfg["paths.data"]:
        root = Path(cfg["paths.data"])
        train_set, test_set = load_dataset(root / "train"), load_dataset(root / "test")
        if not train_set or not test_set:
            raise FileNotFoundError(f"no dataset under {root}; run gen-data first")
        return train_set, test_set
    return train_test_split(cfg["data.n_train"], cfg["data.n_test"], cfg["data.seed"], cfg["data.image_size"])


def _detector_config(cfg: RunConfig) -> DetectorConfig:
    return DetectorConfig(cfg.pyramid(), image_size=cfg["data.image_size"])


def cmd_gen_data(cfg: RunConfig, out: Path) -> str:
    root = Path(cfg["paths.data"]) if cfg["paths.data"] else out / "data"
    train_set, test_set = train_test_split(cfg["data.n_train"], cfg["data.n_test"], cfg["data.seed"],
                                           cfg["data.image_size"])
    lines = ["split\timages\tboxes\t" + "\t".join(CLASS_NAMES)]
    for split, samples in (("train", train_set), ("test", test_set)):
        save_dataset(samples, root / split)
        counts = [sum(b.class_id == c for s in samples for b in s.boxes) for c in range(len(CLASS_NAMES))]
        lines.append(f"{split}\t{len(samples)}\t{sum(counts)}\t" + "\t".join(map(str, counts)))
    _write(out, "data_summary.tsv", "\n".join(lines) + "\n")
    return f"wrote {len(train_set)} + {len(test_set)} images to {root}"


def cmd_shift_report(cfg: RunConfig, out: Path) -> str:
    report = shift_experiment(cfg["shift.seed"], cfg["shift.trials"])
    _write(out, "shift_report.tsv", report.tsv())
    mp, avg = report.stat("maxpool2").mean_l2, report.stat("bfm-average").mean_l2
    if not avg < mp:
        raise CommandFailed(f"bfm-average mean L2 change {avg:.6g} is not below maxpool2 {mp:.6g}")
    return f"maxpool2 mean L2 {mp:.6g}, bfm-average {avg:.6g}"


def cmd_train(cfg: RunConfig, out: Path) -> str:
    train_set, _ = _datasets(cfg)
    det_cfg = _detector_config(cfg)
    tcfg = cfg.train_config()
    params = init_detector(det_cfg, tcfg.seed)
    ckpt = cfg.checkpoint_path
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log = train(train_set, tcfg, params, det_cfg, checkpoint=ckpt)
    _write(out, "losses.tsv", log.losses_tsv())
    return f"final loss {log.losses[-1]:.6g}; checkpoint {ckpt}"


def cmd_eval(cfg: RunConfig, out: Path) -> str:
    _, test_set = _datasets(cfg)
    det_cfg = _detector_config(cfg)
    params = init_detector(det_cfg, cfg["train.seed"])
    load_checkpoint(cfg.checkpoint_path, params.named())
    dets = predict(test_set, params, det_cfg, score_thresh=cfg["eval.score_thresh"], nms_iou=cfg["eval.nms_iou"])
    ev = evaluate_detections(dets, [s.boxes for s in test_set], det_cfg, cfg["eval.ap_iou"])
    lines = ["metric\tvalue", f"mAP\t{ev['mAP']:.9g}"]
    lines += [f"ap_{CLASS_NAMES[c]}\t{ap:.9g}" for c, ap in sorted(ev["per_class"].items())]
    lines += [f"ap_{name}\t{ap:.9g}" for name, ap in ev["per_size"].items()]
    _write(out, "eval.tsv", "\n".join(lines) + "\n")
    write_detections_tsv(out / "detections.tsv", dets, [s.index for s in test_set])
    return f"mAP@{cfg['eval.ap_iou']:g} {ev['mAP']:.4f}"


def cmd_sweep(cfg: RunConfig, out: Path) -> str:
    report = scale_sweep(cfg.benchmark(), cfg.train_config(), cfg["sweep.scales"], cfg["sweep.seeds"],
                         workers=cfg["sweep.workers"])
    _write(out, "sweep.tsv", report.tsv())
    _write(out, "sweep_summary.tsv", report.summary_tsv())
    if report.flags:
        raise CommandFailed("; ".join(report.flags))
    return f"{len(report.results)} runs"


def cmd_ablation(cfg: RunConfig, out: Path) -> str:
    report = ablation(cfg.benchmark(), cfg.train_config(), cfg["ablation.seeds"], workers=cfg["sweep.workers"])
    _write(out, "ablation.tsv", report.tsv())
    _write(out, "ablation_summary.tsv", report.summary_tsv())
    med = report.medians()
    return " ".join(f"{v}={m:.4f}" for v, m in med.items())


def flops_table(cfg: RunConfig) -> str:
    lines = ["variant\tnum_scales\tparams\tmacs\tflops"]
    size = cfg["data.image_size"]
    for s in cfg["sweep.scales"]:
        det_cfg = DetectorConfig(cfg.pyramid(num_scales=s), image_size=size)
        cost = count_macs_params(init_detector(det_cfg, 0).named(), det_cfg.pyramid, (size, size))
        lines.append(f"{det_cfg.pyramid.variant}\t{s}\t{cost.params}\t{cost.macs}\t{cost.flops}")
    return "\n".join(lines) + "\n"


def cmd_flops(cfg: RunConfig, out: Path) -> str:
    text = flops_table(cfg)
    _write(out, "flops.tsv", text)
    macs = [int(line.split("\t")[3]) for line in text.splitlines()[1:]]
    scales = list(cfg["sweep.scales"])
    if scales == sorted(set(scales)) and any(b <= a for a, b in zip(macs, macs[1:])):
        raise CommandFailed(f"MACs not strictly increasing with scale count: {macs}")
    return f"{len(macs)} rows"


def cmd_grad_check(cfg: RunConfig, out: Path) -> str:
    results = checks.gradient_suite(cfg["gradcheck.seed"])
    lines = ["check\tmax_rel_error\ttolerance\tstatus"]
    lines += [f"{r.name}\t{r.value:.3e}\t{r.tolerance:g}\t{'PASS' if r.passed else 'FAIL'}" for r in results]
    _write(out, "grad_check.tsv", "\n".join(lines) + "\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CommandFailed("gradient check failed: " + ",".join(failed))
    return f"{len(results)} checks passed"


def cmd_selftest(cfg: RunConfig, out: Path) -> str:
    results = checks.selftest_fixtures(cfg["gradcheck.seed"])
    lines = ["fixture\tstatus\tdetail"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name}\t{status}\t{r.detail}")
        print(f"{status} {r.name}")
    _write(out, "selftest.tsv", "\n".join(lines) + "\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CommandFailed("fixtures failed: " + ",".join(failed))
    return f"{len(results)} fixtures passed"


HANDLERS = {
    "gen-data": cmd_gen_data,
    "shift-report": cmd_shift_report,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablation": cmd_ablation,
    "flops": cmd_flops,
    "grad-check": cmd_grad_check,
    "selftest": cmd_selftest,
}


def dispatch(command: str, cfg: RunConfig) -> str:
    """Run one command; the manifest is written before any report so a crash still leaves it."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    _write(out, f"manifest.{command}.txt", cfg.manifest(command))
    return HANDLERS[command](cfg, out)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("argv", message)


def _fail(kind: str, message: str, code: int = 1) -> int:
    print(json.dumps({"status": "error", "kind": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = _Parser(prog="rebif", description="Residual bi-fusion pyramid experiments.")
    parser.add_argument("command", help=" | ".join(COMMANDS))
    parser.add_argument("--config", "-c", help="key = value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key; repeatable")
    try:
        args = parser.parse_args(argv)
        if args.command not in COMMANDS:
            return _fail("usage", f"unknown command {args.command!r}; expected one of {', '.join(COMMANDS)}", 2)
        cfg = parse_config(args.config, args.overrides)
    except ConfigError as e:
        return _fail("config", str(e), 2)
    except OSError as e:
        return _fail("io", str(e), 2)
    try:
        summary = dispatch(args.command, cfg)
    except CommandFailed as e:
        return _fail("check", str(e))
    except (CheckpointError, ValueError) as e:
        return _fail("invalid", str(e))
    except OSError as e:
        return _fail("io", str(e))
    print(json.dumps({"status": "ok", "command": args.command, "summary": summary}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
