"""Acceptance criteria 1-11, each at its stated tolerance.

Criteria 5-11 share two reference runs of the shipped MNIST configs (one
source-agnostic, one source-specific, same clean model). They take tens of
minutes on one core; the per-criterion verdicts are printed in the terminal
summary.
"""
import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

from pqlab import tensor as T
from pqlab.attack import (AttackConfig, TriggerSpec, build_attack_datasets, loss_l1, loss_l2, loss_l3, loss_l4,
                          stage1_train, stage2_finetune, stamp_trigger)
from pqlab.config import load_config
from pqlab.data import synth_dataset
from pqlab.io import load_model
from pqlab.nn import Conv2D, Dense, Flatten, MaxPool, Model, ReLU, apply_layer, build_model, train_clean
from pqlab.pipeline import run_pipeline
from pqlab.quant import (QuantParams, emulated_forward, integer_forward, quantize_model, quantize_weights,
                         weight_params)
from pqlab.tensor import Tensor, grad_check

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# ---- 1: gradient suite ---------------------------------------------------------------

def _layer_errors(seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    x = rng.normal(size=(2, 6, 6, 2))
    for layer in (Conv2D("c", 3, kernel=3, padding="same"), Conv2D("c", 2, kernel=2, padding="valid", stride=2)):
        m = Model.build([layer], (6, 6, 2), seed=seed, dtype=np.float64)
        k, b = m.weights["c/kernel"].data, m.biases["c/bias"].data
        probe = rng.normal(size=m(x).shape)
        worst = max(worst, grad_check(
            lambda t: T.mul(apply_layer(layer, t, {"c/kernel": Tensor(k)}, {"c/bias": Tensor(b)}), probe).sum(), x))
        worst = max(worst, grad_check(
            lambda t: T.mul(apply_layer(layer, Tensor(x), {"c/kernel": t}, {"c/bias": Tensor(b)}), probe).sum(), k))
        worst = max(worst, grad_check(
            lambda t: T.mul(apply_layer(layer, Tensor(x), {"c/kernel": Tensor(k)}, {"c/bias": t}), probe).sum(), b))
    xd = rng.normal(size=(3, 5))
    w, b = rng.normal(size=(5, 4)), rng.normal(size=4)
    probe = rng.normal(size=(3, 4))
    dense = Dense("d", 4)
    worst = max(worst, grad_check(lambda t: T.mul(apply_layer(dense, t, {"d/kernel": Tensor(w)}, {"d/bias": Tensor(b)}),
                                                  probe).sum(), xd))
    worst = max(worst, grad_check(lambda t: T.mul(apply_layer(dense, Tensor(xd), {"d/kernel": t}, {"d/bias": Tensor(b)}),
                                                  probe).sum(), w))
    # keep ReLU inputs and max-pool windows away from ties
    xr = rng.normal(size=(2, 4, 4, 1))
    xr[np.abs(xr) < 1e-3] = 0.5
    probe = rng.normal(size=xr.shape)
    worst = max(worst, grad_check(lambda t: T.mul(apply_layer(ReLU(), t, {}, {}), probe).sum(), xr))
    xp = rng.permutation(32).reshape(2, 4, 4, 1).astype(np.float64) / 7.0
    probe = rng.normal(size=(2, 2, 2, 1))
    worst = max(worst, grad_check(lambda t: T.mul(apply_layer(MaxPool(), t, {}, {}), probe).sum(), xp))
    probe = rng.normal(size=(2, 16))
    worst = max(worst, grad_check(lambda t: T.mul(apply_layer(Flatten(), t, {}, {}), probe).sum(), xr))
    return worst


def _loss_errors(seed: int) -> float:
    rng = np.random.default_rng(seed)
    m = Model.build([Flatten(), Dense("fc1", 6), ReLU(), Dense("fc2", 3)], (3, 3, 1), seed=seed, dtype=np.float64)
    x, y = rng.random((4, 3, 3, 1)), rng.integers(0, 3, 4)
    xa, ya = stamp_trigger(rng.random((2, 3, 3, 1)), TriggerSpec(size=1)), np.zeros(2, dtype=int)
    w0 = m.weights["fc1/kernel"].data.copy()

    def with_kernel(t, loss):
        m.weights["fc1/kernel"] = t
        try:
            return loss(m, x, y, xa, ya)
        finally:
            m.weights["fc1/kernel"] = Tensor(w0)
    worst = max(grad_check(lambda t: with_kernel(t, loss_l1), w0), grad_check(lambda t: with_kernel(t, loss_l3), w0))

    w = rng.normal(size=40)
    p = weight_params(w)
    am = w / p.scale
    frac = np.abs(am - np.round(am))
    gap = max(1e-4, 2e-5 / p.scale)
    keep = (frac > gap) & (frac < 0.5 - gap)
    worst = max(worst, grad_check(lambda t: loss_l2({"w": t}, {"w": p}), w, mask=keep))

    q_bd, pb = quantize_weights(w + rng.normal(0, 0.05, 40))
    with T.precision(np.float64):
        t = Tensor(w.copy(), requires_grad=True)
        loss_l4({"w": t}, {"w": q_bd}, {"w": pb}).backward()
    am0 = w / pb.scale
    offset = np.where(am0 >= 0, np.floor(am0 + 0.5), np.ceil(am0 - 0.5)) - am0

    def surrogate(v):
        return np.mean((np.clip(v / pb.scale + offset, -127, 127) - q_bd) ** 2)
    numeric = np.array([(surrogate(w + e) - surrogate(w - e)) / 2e-6 for e in np.eye(40) * 1e-6])
    err = np.abs(t.grad - numeric) / np.maximum(1, np.maximum(np.abs(t.grad), np.abs(numeric)))
    return max(worst, float(err.max()))


def test_criterion_01_gradient_suite(criterion):
    def run():
        return max(_layer_errors(s) for s in range(20)), max(_loss_errors(s) for s in range(20))
    (layers, losses), secs = _timed(run)
    ok = layers < 1e-5 and losses < 1e-4 and secs < 120
    criterion(1, ok, f"layers {layers:.2e} (<1e-5), losses {losses:.2e} (<1e-4), {secs:.1f}s (<120s)")
    assert ok


# ---- 2: quantizer properties ------------------------------------------------------------

def test_criterion_02_quantizer_properties(criterion):
    def run():
        rng = np.random.default_rng(2)
        v = rng.normal(0, 3, 100_000)
        q, p = quantize_weights(v)
        round_trip = bool(np.all(np.abs(p.dequantize(q) - v) <= p.scale / 2 * (1 + 1e-12)))
        order = np.argsort(v)
        monotone = bool(np.all(np.diff(q[order].astype(int)) >= 0))
        q2, p2 = quantize_weights(v.copy())
        deterministic = q.tobytes() == q2.tobytes() and p == p2
        # two weights in the same rounding cell collapse to one integer
        cells = rng.integers(-126, 127, 2000)
        a = cells + rng.uniform(-0.49, 0.49, 2000)
        b = cells + rng.uniform(-0.49, 0.49, 2000)
        qa, _ = quantize_weights(a, params=QuantParams(1.0, 0))
        qb, _ = quantize_weights(b, params=QuantParams(1.0, 0))
        collide = bool(np.array_equal(qa, qb) and np.array_equal(qa, cells))
        pair, _ = quantize_weights(np.array([10.8, 11.2]), params=QuantParams(1.0, 0))
        return round_trip, monotone, deterministic, collide and list(pair) == [11, 11]
    checks, secs = _timed(run)
    ok = all(checks) and secs < 60
    names = ("round-trip", "monotone", "deterministic", "collision")
    criterion(2, ok, ", ".join(f"{n} {'ok' if c else 'BROKEN'}" for n, c in zip(names, checks)) + f", {secs:.1f}s")
    assert ok


# ---- 3: emulator oracle ---------------------------------------------------------------

def test_criterion_03_emulator_oracle(criterion):
    models = [
        build_model("tiny-cnn", (8, 8, 1), 3, seed=31),
        build_model("tiny-mlp", (6, 6, 1), 4, seed=32),
        build_model("mini-cnn", (8, 8, 2), 5, seed=33),
        Model.build([Conv2D("c", 3, kernel=3, padding="valid", stride=2), ReLU(), Flatten(), Dense("d", 3)],
                    (9, 9, 1), seed=34),
        Model.build([Conv2D("a", 4), MaxPool(), Conv2D("b", 2, kernel=2), ReLU(), Flatten(), Dense("d", 6),
                     Dense("e", 2)], (6, 6, 1), seed=35),
    ]

    def run():
        mismatches = 0
        for i, m in enumerate(models):
            rng = np.random.default_rng(300 + i)
            for b in m.biases.values():
                b.data[...] = rng.normal(0, 0.1, b.shape)
            qm = quantize_model(m, rng.random((40,) + m.input_shape).astype(np.float32))
            x = rng.random((100,) + m.input_shape).astype(np.float32)
            _, tr_i = integer_forward(qm, x)
            with T.no_grad():
                _, tr_e = emulated_forward(qm, x, return_trace=True)
            mismatches += sum(int(np.count_nonzero(a != e.data.astype(np.int64))) for a, e in zip(tr_i, tr_e))
            mismatches += abs(len(tr_i) - len(tr_e))
        return mismatches
    bad, secs = _timed(run)
    ok = bad == 0 and secs < 120
    criterion(3, ok, f"{bad} differing trace elements over 5 models x 100 inputs, {secs:.1f}s")
    assert ok


# ---- 4: preservation invariant -----------------------------------------------------------

def test_criterion_04_preservation(criterion):
    def run():
        d = synth_dataset(4, 1200, dim=16, seed=4)
        cfg = AttackConfig(poison_count=100, cover_count=100, epochs_stage1=2, epochs_stage2=4, seed=4,
                           early_stop_asr=0.0, max_cda_drop=1.0)
        data = build_attack_datasets(d, TriggerSpec(target_class=0), cfg)
        m = build_model("mini-cnn", (16, 16, 1), 4, seed=4)
        train_clean(m, d.images, d.labels, epochs=2)
        stage1_train(m, data, cfg)
        audit: list = []
        rm, snap = stage2_finetune(m, data, cfg, audit=audit)
        moved = sum(float(np.abs(rm.weights[k].data - m.weights[k].data).max()) > 0 for k in rm.weights)
        return audit, moved
    (audit, moved), secs = _timed(run)
    ok = len(audit) > 0 and sum(audit) == 0 and moved > 0 and secs < 600
    criterion(4, ok, f"{sum(audit)} violations over {len(audit)} optimizer steps, {secs:.1f}s")
    assert ok


# ---- reference runs ---------------------------------------------------------------------

@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    cfg = load_config(CONFIGS / "mnist_desk.json")
    out = tmp_path_factory.mktemp("mnist_desk")
    summary, secs = _timed(lambda: run_pipeline(cfg, out))
    assert not summary.failures, summary.failures
    return summary, out, secs


@pytest.fixture(scope="session")
def source_run(desk_run, tmp_path_factory):
    _, desk_out, _ = desk_run
    cfg = load_config(CONFIGS / "mnist_source_specific.json")
    out = tmp_path_factory.mktemp("mnist_source")
    summary, secs = _timed(lambda: run_pipeline(cfg, out, clean_model=load_model(desk_out / "m_cl.pqm")))
    assert not summary.failures, summary.failures
    return summary, out, secs


def _pct(v):
    return f"{100 * v:.2f}%"


def test_criterion_05_end_to_end(desk_run, criterion):
    s, _, _ = desk_run
    m, t = s.metrics, s.times
    secs = t["train_clean"] + t["attack"] + t["quantize"]
    checks = {
        "M_cl CDA >= 97%": m["m_cl"]["cda"] >= 0.97,
        "M_bd ASR >= 99%": m["m_bd"]["asr"] >= 0.99,
        "M_rm ASR <= 2%": m["m_rm"]["asr"] <= 0.02,
        "M_rm CDA within 1.5%": m["m_cl"]["cda"] - m["m_rm"]["cda"] <= 0.015,
        "~M_rm ASR >= 90%": m["q_rm"]["asr"] >= 0.90,
        "~M_rm CDA within 2%": m["q_cl"]["cda"] - m["q_rm"]["cda"] <= 0.02,
        "runtime < 45 min": secs < 45 * 60,
    }
    ok = all(checks.values())
    criterion(5, ok, f"CDA cl {_pct(m['m_cl']['cda'])} rm {_pct(m['m_rm']['cda'])} ~cl {_pct(m['q_cl']['cda'])} "
                     f"~rm {_pct(m['q_rm']['cda'])}; ASR bd {_pct(m['m_bd']['asr'])} rm {_pct(m['m_rm']['asr'])} "
                     f"~rm {_pct(m['q_rm']['asr'])}; {secs / 60:.1f} min"
                     + "".join(f"; FAILED {k}" for k, v in checks.items() if not v))
    assert ok


def test_criterion_06_calibration(desk_run, criterion):
    s, _, _ = desk_run
    asr = {k: v["asr"] for k, v in s.calibration.items()}
    ok = set(asr) == {"same", "similar", "different"} and min(asr.values()) >= 0.90 \
        and s.times["calibration_sweep"] < 300
    criterion(6, ok, ", ".join(f"{k} {_pct(v)}" for k, v in asr.items()) + f", {s.times['calibration_sweep']:.1f}s")
    assert ok


def test_criterion_07_drq(desk_run, criterion):
    s, _, _ = desk_run
    asr = s.drq["m_rm"]["asr"]
    ok = asr >= 0.90 and s.times["drq"] < 300
    criterion(7, ok, f"DRQ ASR {_pct(asr)} (CDA {_pct(s.drq['m_rm']['cda'])}), {s.times['drq']:.1f}s")
    assert ok


def test_criterion_08_strip(desk_run, criterion):
    s, _, _ = desk_run
    q, fp = s.defenses["strip_q"]["separation"], s.defenses["strip_fp"]["separation"]
    ok = q >= 0.90 and fp <= 0.15
    criterion(8, ok, f"trigger inputs below the 1st-percentile boundary: ~M_rm {_pct(q)} (>=90%), "
                     f"M_rm {_pct(fp)} (<=15%)")
    assert ok


def test_criterion_09_neural_cleanse(desk_run, criterion):
    s, _, _ = desk_run
    target = s.config["trigger"]["target_class"]
    fp, q = s.defenses["nc_fp"], s.defenses["nc_q"]
    fp_max, q_max = float(fp["max_anomaly_index"]), float(q["max_anomaly_index"])
    ok = fp_max < 2 and q["smallest_l1_class"] == target and s.times["defenses"] < 20 * 60
    soft = "flagged" if q_max > 2 else "not flagged (soft check)"
    criterion(9, ok, f"M_rm max anomaly {fp_max:.2f} (<2); ~M_rm smallest-l1 class {q['smallest_l1_class']} "
                     f"(target {target}), anomaly {q_max:.2f} {soft}")
    assert ok


def test_criterion_10_source_specific(source_run, criterion):
    s, _, secs = source_run
    m = s.metrics["q_rm"]
    strip = s.defenses["strip_q"]["separation"]
    nc = float(s.defenses["nc_q"]["max_anomaly_index"])
    checks = {
        "source ASR >= 90%": m["asr"] >= 0.90,
        "non-source fidelity >= 90%": m["fidelity"] >= 0.90,
        "STRIP separation < 50%": strip < 0.50,
        "NC max anomaly < 2": nc < 2,
        "runtime < 45 min": secs < 45 * 60,
    }
    ok = all(checks.values())
    criterion(10, ok, f"~M_rm source ASR {_pct(m['asr'])}, fidelity {_pct(m['fidelity'])}, STRIP {_pct(strip)}, "
                      f"NC {nc:.2f}, M_rm ASR {_pct(s.metrics['m_rm']['asr'])}, {secs / 60:.1f} min"
                      + "".join(f"; FAILED {k}" for k, v in checks.items() if not v))
    assert ok


def test_criterion_11_joint_baseline(desk_run, criterion):
    s, out, _ = desk_run
    with (out / "joint_curves.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "cda_fp", "asr_fp", "cda_int8", "asr_int8"]
    assert len(rows) == s.joint["epochs"]
    joint, two = s.joint["final_asr_int8"], s.joint["two_stage_final_asr_q"]
    # report-only: the comparison is printed, the exported curves are what is gated
    criterion(11, two > joint, f"two-stage final int8 ASR {_pct(two)} vs joint {_pct(joint)} over "
                               f"{s.joint['epochs']} epochs; int8 ASR std joint {s.joint['asr_int8_std']:.3f} vs "
                               f"two-stage {s.joint['two_stage_asr_q_std']:.3f} (report-only)")
