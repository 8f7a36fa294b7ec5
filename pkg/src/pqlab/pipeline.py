"""End-to-end run: clean training, two-stage attack, quantization, metrics, defenses.

A run owns one output directory::

    config.json            snapshot sufficient to rerun
    m_cl.pqm m_bd.pqm m_rm.pqm            float models
    m_cl_q.pqm m_bd_q.pqm m_rm_q.pqm      full-integer models
    metrics.csv            per-epoch curves of both stages
    calibration.csv        quantized M_rm under three calibration sources
    frac_hist.csv          fractional-part histograms of AM(theta)
    strip_fp.csv strip_q.csv              STRIP entropies
    nc_fp/ nc_q/           Neural Cleanse reports and masks
    joint_curves.csv       single-stage joint baseline (when enabled)
    summary.json           RunSummary

A failing stage is recorded in the summary and every later stage is skipped.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import (AttackDatasets, build_attack_datasets, fractional_distance, intuitive_joint_train,
                     preservation_violations, stage1_train, stage2_finetune, stamp_trigger)
from .config import ExperimentConfig
from .data import LabeledImages, elastic_deform, load_idx_dataset, load_mnist, resize_to, synth_dataset
from .defenses import asr_eligible, metric_asr, metric_cda, nc_scan, strip_evaluate, trigger_fidelity
from .io import save_model
from .nn import Adam, Model, build_model, train_clean
from .quant import PROFILES, quantize_model, quantize_model_drq, quantize_weights, weight_params

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "cda_fp", "asr_fp", "cda_q", "asr_q", "l1", "l2", "l3", "l4"]
JOINT_HEADER = ["epoch", "cda_fp", "asr_fp", "cda_int8", "asr_int8"]
HIST_BINS = np.linspace(0.0, 0.5, 11)

# desk-scale targets checked by the summary's acceptance block
TARGETS = {
    "cl_cda_min": 0.97,
    "bd_asr_min": 0.99,
    "rm_asr_max": 0.02,
    "rm_cda_drop_max": 0.015,
    "q_rm_asr_min": 0.90,
    "q_rm_cda_drop_max": 0.02,
    "strip_q_separation_min": 0.90,
    "strip_fp_separation_max": 0.15,
    "nc_anomaly_max": 2.0,
    "fidelity_min": 0.90,
    "strip_source_specific_max": 0.50,
}


@dataclass
class RunSummary:
    config: dict
    metrics: dict = field(default_factory=dict)
    audit: dict = field(default_factory=dict)
    defenses: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)
    drq: dict = field(default_factory=dict)
    joint: dict = field(default_factory=dict)
    acceptance: dict = field(default_factory=dict)
    times: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures and all(self.audit.values()) and all(self.acceptance.values())

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, data: dict) -> "RunSummary":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})

    def write(self, directory) -> Path:
        path = Path(directory) / "summary.json"
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return path


def load_summary(directory) -> RunSummary:
    path = Path(directory) / "summary.json"
    if not path.is_file():
        raise FileNotFoundError(f"{path} does not exist")
    return RunSummary.from_json(json.loads(path.read_text()))


# ---- datasets ----------------------------------------------------------------------

def load_datasets(cfg: ExperimentConfig) -> tuple[LabeledImages, LabeledImages]:
    d = cfg.dataset
    if d.source == "synth":
        n_train = d.train_size or 2000
        n_test = d.test_size or 500
        full = synth_dataset(d.classes, n_train + n_test, dim=d.dim, seed=d.seed,
                             trigger_size=cfg.trigger.size)
        return full.subset(slice(0, n_train)), full.subset(slice(n_train, None))
    if d.source == "idx":
        base = Path(d.path)
        train = load_idx_dataset(base / "train-images-idx3-ubyte", base / "train-labels-idx1-ubyte")
        test = load_idx_dataset(base / "t10k-images-idx3-ubyte", base / "t10k-labels-idx1-ubyte")
        train = train.subset(slice(0, d.train_size))
        return train, test.subset(slice(0, d.test_size))
    return load_mnist(d.path, d.train_size, d.test_size)


def calibration_sources(data: AttackDatasets, test: LabeledImages, seed: int = 0) -> dict[str, np.ndarray]:
    """Same-distribution, deformed (similar) and foreign (different) calibration sets of equal size."""
    n = len(data.calibration)
    shape = data.calibration.shape[1:]
    rng = np.random.default_rng(seed + 7)
    similar = elastic_deform(test.images[rng.choice(len(test), n, replace=False)], seed=seed)
    foreign = synth_dataset(4, n, dim=16, seed=seed + 11, trigger_size=1, channels=shape[2]).images
    if foreign.shape[1:] == shape:
        # a synthetic task calibrated with synthetic data would not be foreign
        foreign = resize_to(load_mnist()[1].images[:n], shape[0])
    else:
        foreign = resize_to(foreign, shape[0])
    return {"same": data.calibration, "similar": similar, "different": foreign.astype(np.float32)}


# ---- evaluation -------------------------------------------------------------------

class Evaluator:
    """CDA/ASR of a float model and of its quantized deployment under one calibration set."""

    def __init__(self, test: LabeledImages, spec, calibration: np.ndarray, profile: str, mode: str):
        self.test, self.spec, self.calibration = test, spec, calibration
        self.profile, self.mode = profile, mode

    def quantize(self, model: Model, calibration=None):
        if self.mode == "drq":
            return quantize_model_drq(model, self.profile)
        return quantize_model(model, self.calibration if calibration is None else calibration, self.profile)

    def scores(self, model) -> dict:
        out = {"cda": metric_cda(model, self.test), "asr": metric_asr(model, self.test, self.spec)}
        if self.spec.source_class is not None:
            out["fidelity"] = trigger_fidelity(model, self.test, self.spec)
        return out

    def __call__(self, model: Model) -> dict:
        fp, q = self.scores(model), self.scores(self.quantize(model))
        return {"cda_fp": fp["cda"], "asr_fp": fp["asr"], "cda_q": q["cda"], "asr_q": q["asr"]}


def fractional_histogram(model: Model, profile: str) -> np.ndarray:
    qmin, qmax = PROFILES[profile][:2]
    fr = np.concatenate([fractional_distance(w, weight_params(w, qmin, qmax)).ravel()
                         for w in model.weights.values()])
    counts, _ = np.histogram(np.minimum(fr, 0.5), bins=HIST_BINS)
    return counts


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else (f"{r[k]:.6g}" if isinstance(r[k], float) else r[k]))
                        for k in header})
    return path


# ---- the run ----------------------------------------------------------------------

class _Run:
    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg, self.out = cfg, out
        self.summary = RunSummary(config=cfg.to_dict())
        self.failed = False

    def artifact(self, path: Path) -> Path:
        rel = str(path.relative_to(self.out))
        if rel not in self.summary.artifacts:
            self.summary.artifacts.append(rel)
        return path

    def stage(self, name: str, fn, *args):
        if self.failed:
            log.info("skipping %s after an earlier failure", name)
            self.summary.skipped.append(name)
            return None
        t0 = time.perf_counter()
        try:
            result = fn(*args)
        except Exception as exc:  # recorded, later stages skipped
            log.exception("stage %s failed", name)
            self.summary.failures.append({"stage": name, "error": f"{type(exc).__name__}: {exc}"})
            self.failed = True
            result = None
        self.summary.times[name] = round(time.perf_counter() - t0, 3)
        return result


def run_pipeline(cfg: ExperimentConfig, out_dir=None, clean_model: Model | None = None) -> RunSummary:
    """Execute every stage of ``cfg`` into ``out_dir``; ``clean_model`` skips clean training."""
    cfg.validate()
    out = Path(out_dir or cfg.output or "run")
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, out)
    s = run.summary
    run.artifact(cfg.save(out / "config.json"))
    a = cfg.attack
    spec = cfg.trigger
    state: dict = {}

    def prepare():
        train, test = load_datasets(cfg)
        spec.validate(train.images.shape[1:3], train.num_classes)
        data = build_attack_datasets(train, spec, a)
        ev = Evaluator(test, spec, data.calibration, a.profile, cfg.quantization.mode)
        state.update(train=train, test=test, data=data, ev=ev)

    def clean():
        train = state["train"]
        if clean_model is not None:
            if clean_model.input_shape != train.images.shape[1:]:
                raise ValueError(f"clean model expects {clean_model.input_shape}, data is {train.images.shape[1:]}")
            state["m_cl"] = clean_model.copy()
            run.artifact(save_model(clean_model, out / "m_cl.pqm"))
            return
        m = build_model(cfg.architecture, train.images.shape[1:], train.num_classes, seed=cfg.seed)
        train_clean(m, train.images, train.labels, cfg.clean_epochs, optimizer=Adam(m.parameters(), lr=cfg.clean_lr),
                    seed=cfg.seed)
        state["m_cl"] = m
        run.artifact(save_model(m, out / "m_cl.pqm"))

    rows: list[dict] = []

    def attack():
        ev = state["ev"]
        base = ev(state["m_cl"])
        rows.append({"epoch": 0, **base})
        hist1: list = []
        m_bd = stage1_train(state["m_cl"].copy(), state["data"], a, evaluate=ev, history=hist1)
        for r in hist1:
            rows.append({**r})
        run.artifact(save_model(m_bd, out / "m_bd.pqm"))
        state["m_bd"] = m_bd
        hist2: list = []
        audit: list = []
        m_rm, snap = stage2_finetune(m_bd, state["data"], a, evaluate=ev, history=hist2, audit=audit)
        for r in hist2:
            rows.append({**r, "epoch": r["epoch"] + len(hist1)})
        run.artifact(save_model(m_rm, out / "m_rm.pqm"))
        state.update(m_rm=m_rm, snap=snap, audit=audit)
        run.artifact(_write_csv(out / "metrics.csv", METRICS_HEADER, rows))

    def quantize_and_score():
        ev, snap = state["ev"], state["snap"]
        qmin, qmax = PROFILES[a.profile][:2]
        for tag in ("cl", "bd", "rm"):
            m = state[f"m_{tag}"]
            qm = quantize_model(m, state["data"].calibration, a.profile)
            run.artifact(save_model(qm, out / f"m_{tag}_q.pqm"))
            deployed = ev.quantize(m)
            state[f"q_{tag}"] = deployed
            s.metrics[f"m_{tag}"] = ev.scores(m)
            s.metrics[f"q_{tag}"] = ev.scores(deployed)
        m_rm = state["m_rm"]
        same_ints = all(np.array_equal(quantize_weights(w, qmin, qmax)[0], snap.q_bd[k]) for k, w in m_rm.weights.items())
        same_scales = all(weight_params(w, qmin, qmax).scale == snap.s_bd[k].scale for k, w in m_rm.weights.items())
        s.metrics["preservation"] = {"steps": len(state["audit"]), "violations": int(sum(state["audit"])),
                                     "int8_weights_equal": same_ints, "scales_equal": same_scales}
        if a.use_pgd:
            # only the projected attack promises bit-exact preservation
            s.audit = {"preservation_violations_zero": sum(state["audit"]) == 0,
                       "int8_weights_equal": same_ints, "scales_equal": same_scales,
                       "final_violations_zero": preservation_violations(m_rm.weights, snap.q_bd, snap.s_bd,
                                                                        a.profile) == 0}

    def histograms():
        hist = {tag: fractional_histogram(state[f"m_{tag}"], a.profile) for tag in ("cl", "bd", "rm")}
        hrows = [{"bin_lo": f"{lo:.2f}", "bin_hi": f"{hi:.2f}", **{t: int(h[i]) for t, h in hist.items()}}
                 for i, (lo, hi) in enumerate(zip(HIST_BINS[:-1], HIST_BINS[1:]))]
        run.artifact(_write_csv(out / "frac_hist.csv", ["bin_lo", "bin_hi", "cl", "bd", "rm"], hrows))
        near = {t: float(h[0] / h.sum()) for t, h in hist.items()}
        s.metrics["frac_below_0.05"] = near

    def calibration_sweep():
        ev, data = state["ev"], state["data"]
        crow = []
        for name, calib in calibration_sources(data, state["test"], cfg.seed).items():
            qm = quantize_model(state["m_rm"], calib, a.profile)
            sc = ev.scores(qm)
            s.calibration[name] = sc
            crow.append({"calibration": name, **sc})
        run.artifact(_write_csv(out / "calibration.csv", ["calibration", "cda", "asr"], crow))

    def drq():
        ev = state["ev"]
        for tag in ("cl", "rm"):
            s.drq[f"m_{tag}"] = ev.scores(quantize_model_drq(state[f"m_{tag}"], a.profile))

    def defenses():
        d, test = cfg.defenses, state["test"]
        rng = np.random.default_rng(cfg.seed + 13)
        order = rng.permutation(len(test))
        half = len(order) // 2
        probe_idx, pool_idx = order[:half], order[half:]
        pool = test.images[pool_idx]
        clean_probe = test.images[probe_idx[:d.strip_probe]]
        elig = probe_idx[asr_eligible(test.labels[probe_idx], spec)][:d.strip_probe]
        triggered = stamp_trigger(test.images[elig], spec)
        for tag, model in (("fp", state["m_rm"]), ("q", state["q_rm"])):
            if d.strip:
                res = strip_evaluate(model, clean_probe, triggered, pool, d.strip_n, d.strip_alpha, seed=cfg.seed)
                run.artifact(res.write_csv(out / f"strip_{tag}.csv"))
                s.defenses[f"strip_{tag}"] = res.summary()
            if d.nc:
                if cfg.quantization.mode == "drq" and tag == "q":
                    continue
                ncres = nc_scan(model, pool[:d.nc_clean], budget=d.nc_budget, seed=cfg.seed)
                report = ncres.write(out / f"nc_{tag}")
                run.artifact(report)
                for t in ncres.triggers:
                    run.artifact(out / f"nc_{tag}" / f"mask_class{t.target}.pgm")
                s.defenses[f"nc_{tag}"] = {k: v for k, v in ncres.to_json().items()
                                           if k in ("max_anomaly_index", "smallest_l1_class", "flagged",
                                                    "l1_norms", "anomaly_index")}

    def joint():
        ev = state["ev"]
        epochs = a.epochs_stage1 + a.epochs_stage2
        _, curves = intuitive_joint_train(state["m_cl"].copy(), state["data"], a, epochs, evaluate=ev)
        jrows = [{"epoch": r["epoch"], "cda_fp": r["cda_fp"], "asr_fp": r["asr_fp"],
                  "cda_int8": r["cda_q"], "asr_int8": r["asr_q"]} for r in curves]
        run.artifact(_write_csv(out / "joint_curves.csv", JOINT_HEADER, jrows))
        stage2_q = [r["asr_q"] for r in rows if r.get("l3") is not None]
        s.joint = {
            "epochs": epochs,
            "final_asr_int8": jrows[-1]["asr_int8"] if jrows else None,
            "final_cda_int8": jrows[-1]["cda_int8"] if jrows else None,
            "asr_int8_std": float(np.std([r["asr_int8"] for r in jrows])) if jrows else None,
            "two_stage_final_asr_q": s.metrics["q_rm"]["asr"],
            "two_stage_asr_q_std": float(np.std(stage2_q)) if stage2_q else None,
        }

    run.stage("prepare", prepare)
    run.stage("train_clean", clean)
    run.stage("attack", attack)
    run.stage("quantize", quantize_and_score)
    run.stage("histograms", histograms)
    if cfg.defenses.calibration_sweep and cfg.quantization.mode == "fiq":
        run.stage("calibration_sweep", calibration_sweep)
    run.stage("drq", drq)
    if cfg.defenses.strip or cfg.defenses.nc:
        run.stage("defenses", defenses)
    if cfg.defenses.joint_baseline:
        run.stage("joint_baseline", joint)
    if not run.failed:
        s.acceptance = acceptance_checks(s, spec.source_class is not None)
    run.artifact(s.write(out))
    return s


def acceptance_checks(s: RunSummary, source_specific: bool) -> dict:
    """Desk-scale pass/fail booleans computed from the persisted metrics only."""
    t = TARGETS
    m = s.metrics
    out = {
        "clean_cda": m["m_cl"]["cda"] >= t["cl_cda_min"],
        "rm_cda_close": m["m_cl"]["cda"] - m["m_rm"]["cda"] <= t["rm_cda_drop_max"],
        "q_rm_cda_close": m["q_cl"]["cda"] - m["q_rm"]["cda"] <= t["q_rm_cda_drop_max"],
        "q_rm_asr": m["q_rm"]["asr"] >= t["q_rm_asr_min"],
    }
    if not source_specific:
        out["bd_asr"] = m["m_bd"]["asr"] >= t["bd_asr_min"]
        out["rm_asr"] = m["m_rm"]["asr"] <= t["rm_asr_max"]
        for name, sc in s.calibration.items():
            out[f"calibration_{name}"] = sc["asr"] >= t["q_rm_asr_min"]
        if "m_rm" in s.drq:
            out["drq_asr"] = s.drq["m_rm"]["asr"] >= t["q_rm_asr_min"]
        if "strip_q" in s.defenses:
            out["strip_q_separates"] = s.defenses["strip_q"]["separation"] >= t["strip_q_separation_min"]
            out["strip_fp_overlaps"] = s.defenses["strip_fp"]["separation"] <= t["strip_fp_separation_max"]
        if "nc_fp" in s.defenses:
            out["nc_fp_clean"] = _num(s.defenses["nc_fp"]["max_anomaly_index"]) < t["nc_anomaly_max"]
        if "nc_q" in s.defenses:
            out["nc_q_target_smallest"] = s.defenses["nc_q"]["smallest_l1_class"] == s.config["trigger"]["target_class"]
    else:
        out["q_rm_fidelity"] = m["q_rm"]["fidelity"] >= t["fidelity_min"]
        if "strip_q" in s.defenses:
            out["strip_q_fails"] = s.defenses["strip_q"]["separation"] < t["strip_source_specific_max"]
        if "nc_q" in s.defenses:
            out["nc_q_fails"] = _num(s.defenses["nc_q"]["max_anomaly_index"]) < t["nc_anomaly_max"]
    return out


def _num(v) -> float:
    # infinities are persisted as strings
    return float(v)
