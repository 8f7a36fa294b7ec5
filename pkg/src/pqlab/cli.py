"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 invalid input (config, dataset or
model file), 3 a run or report whose acceptance checks failed.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .attack import build_attack_datasets, intuitive_joint_train, stamp_trigger
from .config import ConfigError, ExperimentConfig, load_config
from .data import IDXFormatError
from .defenses import asr_eligible, nc_scan, strip_evaluate
from .io import ModelFormatError, load_model, save_model
from .nn import Adam, Model, accuracy, build_model, train_clean
from .pipeline import (JOINT_HEADER, Evaluator, _write_csv, calibration_sources, load_datasets, load_summary,
                       run_pipeline)
from .quant import QuantizedModel, quantize_model, quantize_model_drq

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_FAILED = 0, 1, 2, 3

log = logging.getLogger("pqlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _model_path(p: str) -> Path:
    path = Path(p)
    if not path.exists() and path.suffix != ".pqm" and path.with_suffix(".pqm").exists():
        return path.with_suffix(".pqm")
    return path


def _load(p: str):
    path = _model_path(p)
    if not path.is_file():
        raise FileNotFoundError(f"model {path} does not exist")
    return load_model(path)


def _config_for(args, model_path: str | None = None) -> ExperimentConfig:
    """Explicit --config, else the snapshot next to the model."""
    if getattr(args, "config", None):
        return load_config(args.config)
    if model_path is not None:
        snap = _model_path(model_path).parent / "config.json"
        if snap.is_file():
            return load_config(snap)
    raise ConfigError("no --config given and no config.json next to the model")


def _out_dir(args, default: Path) -> Path:
    out = Path(args.out) if args.out else default
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---- subcommands --------------------------------------------------------------------

def cmd_train_clean(args) -> int:
    cfg = load_config(args.config)
    train, test = load_datasets(cfg)
    m = build_model(cfg.architecture, train.images.shape[1:], train.num_classes, seed=cfg.seed)
    train_clean(m, train.images, train.labels, cfg.clean_epochs, optimizer=Adam(m.parameters(), lr=cfg.clean_lr),
                seed=cfg.seed)
    out = _out_dir(args, Path(cfg.output or "run"))
    cfg.save(out / "config.json")
    save_model(m, out / "m_cl.pqm")
    print(json.dumps({"model": str(out / "m_cl.pqm"), "cda": accuracy(m, test.images, test.labels)}))
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = load_config(args.config)
    summary = run_pipeline(cfg, args.out)
    print(json.dumps({"out": str(Path(args.out or cfg.output or "run")), "metrics": summary.metrics,
                      "failures": summary.failures}, indent=2))
    return EXIT_FAILED if summary.failures else EXIT_OK


def cmd_quantize(args) -> int:
    model = _load(args.model)
    if not isinstance(model, Model):
        raise ConfigError("quantize expects a float model")
    cfg = _config_for(args, args.model)
    profile = args.profile or cfg.quantization.profile
    train, test = load_datasets(cfg)
    data = build_attack_datasets(train, cfg.trigger, cfg.attack)
    calib = calibration_sources(data, test, cfg.seed)[args.calibration]
    qm = quantize_model(model, calib, profile)
    out = Path(args.out) if args.out else _model_path(args.model).with_name(_model_path(args.model).stem + "_q.pqm")
    save_model(qm, out)
    print(json.dumps({"model": str(out), "profile": profile, "calibration": args.calibration}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load(args.model)
    cfg = _config_for(args, args.model)
    _, test = load_datasets(cfg)
    ev = Evaluator(test, cfg.trigger, None, cfg.quantization.profile, "drq")
    if args.mode == "drq":
        if not isinstance(model, Model):
            raise ConfigError("dynamic-range evaluation needs the float model")
        model = quantize_model_drq(model, cfg.quantization.profile)
    result = {"model": str(_model_path(args.model)), "mode": args.mode or ("int8" if isinstance(model, QuantizedModel)
                                                                           else "float"), **ev.scores(model)}
    print(json.dumps(result))
    return EXIT_OK


def _clean_split(cfg: ExperimentConfig, seed: int):
    _, test = load_datasets(cfg)
    order = np.random.default_rng(seed + 13).permutation(len(test))
    half = len(order) // 2
    return test, order[:half], order[half:]


def cmd_defend_strip(args) -> int:
    model = _load(args.model)
    cfg = _config_for(args, args.model)
    d = cfg.defenses
    test, probe_idx, pool_idx = _clean_split(cfg, cfg.seed)
    elig = probe_idx[asr_eligible(test.labels[probe_idx], cfg.trigger)][:d.strip_probe]
    res = strip_evaluate(model, test.images[probe_idx[:d.strip_probe]], stamp_trigger(test.images[elig], cfg.trigger),
                         test.images[pool_idx], d.strip_n, d.strip_alpha, percentile=args.percentile, seed=cfg.seed)
    out = _out_dir(args, _model_path(args.model).parent / f"strip_{_model_path(args.model).stem}")
    res.write_csv(out / "strip.csv")
    (out / "strip.json").write_text(json.dumps(res.summary(), indent=2) + "\n")
    print(json.dumps(res.summary()))
    return EXIT_OK


def cmd_defend_nc(args) -> int:
    model = _load(args.model)
    cfg = _config_for(args, args.model)
    d = cfg.defenses
    test, _, pool_idx = _clean_split(cfg, cfg.seed)
    if args.classes == "all":
        classes = None
    else:
        try:
            classes = [int(c) for c in args.classes.split(",")]
        except ValueError:
            raise UsageError(f"--classes must be 'all' or a comma-separated list, got {args.classes!r}")
    res = nc_scan(model, test.images[pool_idx][:d.nc_clean], classes=classes,
                  budget=args.budget if args.budget is not None else d.nc_budget, seed=cfg.seed)
    out = _out_dir(args, _model_path(args.model).parent / f"nc_{_model_path(args.model).stem}")
    path = res.write(out)
    print(json.dumps({"report": str(path), "max_anomaly_index": res.to_json()["max_anomaly_index"],
                      "flagged": res.flagged, "smallest_l1_class": res.smallest_class}))
    return EXIT_OK


def cmd_joint_baseline(args) -> int:
    cfg = load_config(args.config)
    train, test = load_datasets(cfg)
    data = build_attack_datasets(train, cfg.trigger, cfg.attack)
    if args.clean:
        model = _load(args.clean)
    else:
        model = build_model(cfg.architecture, train.images.shape[1:], train.num_classes, seed=cfg.seed)
        train_clean(model, train.images, train.labels, cfg.clean_epochs,
                    optimizer=Adam(model.parameters(), lr=cfg.clean_lr), seed=cfg.seed)
    ev = Evaluator(test, cfg.trigger, data.calibration, cfg.attack.profile, "fiq")
    epochs = args.epochs or cfg.attack.epochs_stage1 + cfg.attack.epochs_stage2
    _, curves = intuitive_joint_train(model, data, cfg.attack, epochs, evaluate=ev)
    out = _out_dir(args, Path(cfg.output or "run"))
    rows = [{"epoch": r["epoch"], "cda_fp": r["cda_fp"], "asr_fp": r["asr_fp"], "cda_int8": r["cda_q"],
             "asr_int8": r["asr_q"]} for r in curves]
    path = _write_csv(out / "joint_curves.csv", JOINT_HEADER, rows)
    print(json.dumps({"curves": str(path), "final": rows[-1] if rows else None}))
    return EXIT_OK


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{100 * v:6.2f}%"
    return str(v)


def render_report(directory) -> tuple[str, bool]:
    """Human-readable text of a run's persisted summary; also writes plot-ready CSVs under report/."""
    directory = Path(directory)
    s = load_summary(directory)
    missing = [a for a in s.artifacts if not (directory / a).exists()]
    lines = [f"run: {directory}", f"task: {s.config.get('task')}", ""]
    lines.append(f"{'model':<8}{'CDA':>10}{'ASR':>10}")
    for tag in ("m_cl", "m_bd", "m_rm", "q_cl", "q_bd", "q_rm"):
        if tag in s.metrics:
            m = s.metrics[tag]
            name = tag.replace("q_", "~") if tag.startswith("q_") else tag
            lines.append(f"{name:<8}{_fmt(m['cda']):>10}{_fmt(m['asr']):>10}"
                         + (f"   fidelity {_fmt(m['fidelity'])}" if "fidelity" in m else ""))
    if s.calibration:
        lines += ["", "calibration sweep (quantized M_rm ASR):"]
        lines += [f"  {k:<10}{_fmt(v['asr'])}" for k, v in s.calibration.items()]
    if s.drq:
        lines += ["", "dynamic-range quantization:"]
        lines += [f"  {k:<10} CDA {_fmt(v['cda'])}  ASR {_fmt(v['asr'])}" for k, v in s.drq.items()]
    for key, val in sorted(s.defenses.items()):
        if key.startswith("strip"):
            lines.append(f"\n{key}: boundary {val['boundary']:.4f}  separation {_fmt(val['separation'])}  "
                         f"FRR {_fmt(val['frr'])}")
        else:
            lines.append(f"\n{key}: max anomaly {val['max_anomaly_index']}  smallest-l1 class "
                         f"{val['smallest_l1_class']}  flagged {val['flagged']}")
    if s.joint:
        lines += ["", f"joint baseline ({s.joint['epochs']} epochs): final int8 ASR {_fmt(s.joint['final_asr_int8'])}"
                  f" vs two-stage {_fmt(s.joint['two_stage_final_asr_q'])}"]
    lines += ["", "audit:"] + [f"  {'PASS' if v else 'FAIL'}  {k}" for k, v in s.audit.items()]
    lines += ["", "acceptance:"] + [f"  {'PASS' if v else 'FAIL'}  {k}" for k, v in s.acceptance.items()]
    for f in s.failures:
        lines.append(f"FAILED stage {f['stage']}: {f['error']}")
    for a in missing:
        lines.append(f"MISSING artifact {a}")
    if s.times:
        lines += ["", "wall clock: " + ", ".join(f"{k} {v:.1f}s" for k, v in s.times.items())]

    rep = directory / "report"
    rep.mkdir(exist_ok=True)
    _entropy_histograms(directory, rep)
    _training_curves(directory, rep)
    if (directory / "frac_hist.csv").exists():
        (rep / "fractional_hist.csv").write_text((directory / "frac_hist.csv").read_text())
    text = "\n".join(lines) + "\n"
    (rep / "report.txt").write_text(text)
    ok = s.ok and not missing and bool(s.acceptance)
    return text, ok


def _entropy_histograms(directory: Path, rep: Path) -> None:
    files = sorted(directory.glob("strip_*.csv"))
    if not files:
        return
    series = {}
    for f in files:
        rows = _read_csv(f)
        for flag, name in (("0", "clean"), ("1", "trigger")):
            series[f"{f.stem}_{name}"] = np.array([float(r["entropy"]) for r in rows if r["is_trigger"] == flag])
    hi = max((v.max() for v in series.values() if len(v)), default=1.0)
    bins = np.linspace(0, max(hi, 1e-6), 31)
    with (rep / "entropy_hist.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi"] + list(series))
        counts = {k: np.histogram(v, bins=bins)[0] for k, v in series.items()}
        for i in range(len(bins) - 1):
            w.writerow([f"{bins[i]:.6g}", f"{bins[i + 1]:.6g}"] + [int(c[i]) for c in counts.values()])


def _training_curves(directory: Path, rep: Path) -> None:
    if (directory / "metrics.csv").exists():
        (rep / "training_curves.csv").write_text((directory / "metrics.csv").read_text())
    if (directory / "joint_curves.csv").exists():
        (rep / "joint_curves.csv").write_text((directory / "joint_curves.csv").read_text())


def cmd_report(args) -> int:
    text, ok = render_report(args.dir)
    sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_FAILED


# ---- plumbing ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pqlab", description="Quantization-conditioned backdoor experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("train-clean", cmd_train_clean, "train the clean baseline")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out")

    sp = add("attack", cmd_attack, "full pipeline: clean, two-stage attack, quantization, metrics, defenses")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out")

    sp = add("quantize", cmd_quantize, "full-integer quantization of a float model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--config")
    sp.add_argument("--profile", choices=["tflite_127", "torch_128"])
    sp.add_argument("--calibration", choices=["same", "similar", "different"], default="same")
    sp.add_argument("--out")

    sp = add("eval", cmd_eval, "CDA and ASR of a saved model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--config")
    sp.add_argument("--mode", choices=["drq"])

    sp = add("defend-strip", cmd_defend_strip, "STRIP entropy test")
    sp.add_argument("--model", required=True)
    sp.add_argument("--config")
    sp.add_argument("--percentile", type=float, default=1.0)
    sp.add_argument("--out")

    sp = add("defend-nc", cmd_defend_nc, "Neural Cleanse trigger reverse-engineering")
    sp.add_argument("--model", required=True)
    sp.add_argument("--config")
    sp.add_argument("--classes", default="all")
    sp.add_argument("--budget", type=int)
    sp.add_argument("--out")

    sp = add("joint-baseline", cmd_joint_baseline, "single-stage joint-loss baseline curves")
    sp.add_argument("--config", required=True)
    sp.add_argument("--clean", help="start from this clean model instead of training one")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out")

    sp = add("report", cmd_report, "render a run directory's summary")
    sp.add_argument("dir")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, FileNotFoundError, ModelFormatError, IDXFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
