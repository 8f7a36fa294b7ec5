"""Clean/backdoor metrics and two input- and model-level backdoor detectors.

STRIP blends a suspect input with clean images and looks at prediction
entropy: a trigger that dominates the prediction keeps entropy low.
Neural Cleanse reverse-engineers, per class, the smallest mask-and-pattern
that flips clean inputs to that class; an unusually small mask flags a
backdoor target (one-sided MAD anomaly index).
"""
from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attack import TriggerSpec, stamp_trigger
from .data import LabeledImages
from .nn import Adam, Model, cross_entropy, predict_logits
from .quant import DynamicRangeModel, QuantizedModel, emulated_forward, predict_quantized
from .tensor import Tensor

log = logging.getLogger(__name__)

MAD_CONSISTENCY = 1.4826
ANOMALY_THRESHOLD = 2.0


def logits_of(model, X: np.ndarray) -> np.ndarray:
    """Batched logits of a float, full-integer or dynamic-range model."""
    if isinstance(model, Model):
        return predict_logits(model, X)
    if isinstance(model, (QuantizedModel, DynamicRangeModel)):
        return predict_quantized(model, X)
    raise TypeError(f"cannot evaluate {type(model).__name__}")


def predict(model, X: np.ndarray) -> np.ndarray:
    return logits_of(model, X).argmax(axis=1)


# ---- metrics --------------------------------------------------------------------

def metric_cda(model, test: LabeledImages) -> float:
    if len(test) == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict(model, test.images) == test.labels))


def asr_eligible(labels: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Boolean mask of samples that count towards ASR.

    Samples already of the target class are excluded; in source-specific mode
    only source-class samples count.
    """
    labels = np.asarray(labels)
    keep = labels != spec.target_class
    if spec.source_class is not None:
        keep &= labels == spec.source_class
    return keep


def metric_asr(model, test: LabeledImages, spec: TriggerSpec) -> float:
    keep = asr_eligible(test.labels, spec)
    if not keep.any():
        raise ValueError("no eligible samples for attack success rate")
    stamped = stamp_trigger(test.images[keep], spec)
    return float(np.mean(predict(model, stamped) == spec.target_class))


def trigger_fidelity(model, test: LabeledImages, spec: TriggerSpec) -> float:
    """Accuracy on stamped non-source, non-target samples (source-specific attacks)."""
    if spec.source_class is None:
        raise ValueError("fidelity is only defined for source-specific triggers")
    keep = (test.labels != spec.source_class) & (test.labels != spec.target_class)
    stamped = stamp_trigger(test.images[keep], spec)
    return float(np.mean(predict(model, stamped) == test.labels[keep]))


# ---- STRIP --------------------------------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _entropy(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=1)


def strip_entropies(model, inputs: np.ndarray, pool: np.ndarray, n: int = 20, alpha: float = 0.5,
                    seed: int = 0) -> np.ndarray:
    """Mean Shannon entropy (nats) of predictions on ``n`` blends of each input with distinct pool images."""
    inputs, pool = np.asarray(inputs), np.asarray(pool)
    if len(pool) < n:
        raise ValueError(f"pool of {len(pool)} images is smaller than {n} replicas")
    rng = np.random.default_rng(seed)
    out = np.empty(len(inputs))
    chunk = max(1, 500 // n)
    for start in range(0, len(inputs), chunk):
        xs = inputs[start:start + chunk]
        picks = np.stack([rng.choice(len(pool), n, replace=False) for _ in range(len(xs))])
        blends = alpha * xs[:, None] + (1 - alpha) * pool[picks]
        blends = blends.reshape((-1,) + inputs.shape[1:]).astype(inputs.dtype)
        ent = _entropy(_softmax(logits_of(model, blends)))
        out[start:start + len(xs)] = ent.reshape(len(xs), n).mean(axis=1)
    return out


def strip_score(model, x: np.ndarray, pool: np.ndarray, n: int = 20, alpha: float = 0.5, seed: int = 0) -> float:
    return float(strip_entropies(model, np.asarray(x)[None], pool, n, alpha, seed)[0])


@dataclass
class StripResult:
    clean_entropies: np.ndarray
    trigger_entropies: np.ndarray
    boundary: float
    percentile: float

    @property
    def frr(self) -> float:
        """Clean inputs wrongly rejected (entropy below the boundary)."""
        return float(np.mean(self.clean_entropies < self.boundary))

    @property
    def far(self) -> float:
        """Trigger inputs wrongly accepted (entropy at or above the boundary)."""
        return float(np.mean(self.trigger_entropies >= self.boundary))

    @property
    def separation(self) -> float:
        return 1.0 - self.far

    def summary(self) -> dict:
        return {"boundary": self.boundary, "percentile": self.percentile, "frr": self.frr, "far": self.far,
                "separation": self.separation,
                "clean_mean": float(self.clean_entropies.mean()), "trigger_mean": float(self.trigger_entropies.mean())}

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["input_id", "is_trigger", "entropy"])
            for i, e in enumerate(self.clean_entropies):
                w.writerow([i, 0, f"{e:.8g}"])
            off = len(self.clean_entropies)
            for i, e in enumerate(self.trigger_entropies):
                w.writerow([off + i, 1, f"{e:.8g}"])
        return path


def strip_evaluate(model, clean_inputs, trigger_inputs, pool, n: int = 20, alpha: float = 0.5,
                   percentile: float = 1.0, seed: int = 0) -> StripResult:
    """Score clean and trigger inputs; the boundary is a low percentile of the clean entropies."""
    clean = strip_entropies(model, clean_inputs, pool, n, alpha, seed)
    trig = strip_entropies(model, trigger_inputs, pool, n, alpha, seed + 1)
    return StripResult(clean, trig, float(np.percentile(clean, percentile)), percentile)


# ---- Neural Cleanse -------------------------------------------------------------------

def dequantized_model(qm: QuantizedModel) -> Model:
    """Float surrogate of a full-integer model: weights and biases at their dequantized values."""
    weights, biases = {}, {}
    for i, layer in enumerate(qm.layers):
        if layer.kind not in ("dense", "conv2d"):
            continue
        wname, bname = f"{layer.name}/kernel", f"{layer.name}/bias"
        weights[wname] = Tensor(qm.weight_params[wname].dequantize(qm.weights[wname]).astype(np.float32))
        biases[bname] = Tensor((qm.biases[bname] * qm.bias_scale(i)).astype(np.float32))
    return Model(qm.layers, qm.input_shape, weights, biases, qm.architecture_id)


@dataclass
class ReversedTrigger:
    target: int
    mask: np.ndarray  # H x W in [0, 1]
    pattern: np.ndarray  # H x W x C in [0, 1]
    l1: float
    success: float
    failed: bool
    iterations: int


def _squash(raw: Tensor) -> Tensor:
    return T.mul(T.add(T.tanh(raw), 1.0), 0.5)


def nc_reverse_trigger(model, target: int, clean: np.ndarray, budget: int = 500, lr: float = 0.1,
                       beta: float = 1e-3, batch_size: int = 32, seed: int = 0, check_every: int = 10,
                       probe_size: int = 128, surrogate: bool = False) -> ReversedTrigger:
    """Search for the smallest mask (and its pattern) that sends clean inputs to ``target``.

    Minimises CE(f((1-m)*x + m*p), target) + beta * |m|_1 with m, p squashed into
    [0, 1] via tanh. Every ``check_every`` iterations the attack success on a
    fixed probe batch adapts beta (doubled at >= 99 %, halved below 90 %) and the
    smallest-l1 mask reaching 99 % is kept. Quantized models are differentiated
    through the straight-through emulator, or through their dequantized float
    surrogate when ``surrogate`` is set.
    """
    clean = np.asarray(clean)
    if len(clean) == 0:
        raise ValueError("empty clean set")
    h, w, c = clean.shape[1:]
    if isinstance(model, QuantizedModel):
        if surrogate:
            fm = dequantized_model(model)
            forward = fm.forward
        else:
            def forward(x):
                return emulated_forward(model, x)
    elif isinstance(model, Model):
        forward = model.forward
    else:
        raise TypeError(f"cannot differentiate {type(model).__name__}")

    rng = np.random.default_rng(seed)
    dtype = np.float64 if isinstance(model, QuantizedModel) and not surrogate else np.float32
    mask_raw = Tensor(np.zeros((h, w, 1), dtype=dtype), requires_grad=True)
    pattern_raw = Tensor(np.zeros((h, w, c), dtype=dtype), requires_grad=True)
    opt = Adam({"mask": mask_raw, "pattern": pattern_raw}, lr=lr, beta1=0.5, beta2=0.9)
    probe = clean[rng.choice(len(clean), min(probe_size, len(clean)), replace=False)]
    labels = np.full(batch_size, target)

    def current():
        m = (np.tanh(mask_raw.data) + 1) / 2
        p = (np.tanh(pattern_raw.data) + 1) / 2
        return m, p

    def success_of(m, p):
        stamped = ((1 - m) * probe + m * p).astype(probe.dtype)
        return float(np.mean(predict(model, stamped) == target))

    best = None
    m0, p0 = current()
    last_success = success_of(m0, p0) if budget == 0 else 0.0
    it = 0
    for it in range(1, budget + 1):
        idx = rng.choice(len(clean), batch_size, replace=len(clean) < batch_size)
        x = Tensor(clean[idx].astype(dtype))
        opt.zero_grad()
        m = _squash(mask_raw)
        p = _squash(pattern_raw)
        stamped = T.add(T.mul(T.sub(1.0, m), x), T.mul(m, p))
        loss = T.add(cross_entropy(forward(stamped), labels), T.mul(T.reduce("sum", m), beta))
        loss.backward()
        opt.step()
        if it % check_every == 0 or it == budget:
            m_np, p_np = current()
            last_success = success_of(m_np, p_np)
            l1 = float(m_np.sum())
            if last_success >= 0.99:
                if best is None or l1 < best.l1:
                    best = ReversedTrigger(target, m_np[..., 0].copy(), p_np.copy(), l1, last_success, False, it)
                beta *= 2
            elif last_success < 0.90:
                beta /= 2
    if best is not None:
        best.iterations = it
        return best
    m_np, p_np = current()
    return ReversedTrigger(target, m_np[..., 0].copy(), p_np.copy(), float(m_np.sum()), last_success, True, it)


def anomaly_index(l1_norms) -> np.ndarray:
    """One-sided MAD outlier score: only norms below the median score above zero."""
    x = np.asarray(l1_norms, dtype=np.float64)
    if len(x) < 3:
        raise ValueError("need at least three classes")
    med = np.median(x)
    dev = np.abs(x - med)
    mad = np.median(dev)
    below = x < med
    if mad == 0:
        return np.where(below, np.inf, 0.0)
    return np.where(below, dev / (MAD_CONSISTENCY * mad), 0.0)


@dataclass
class NCResult:
    triggers: list[ReversedTrigger]
    anomaly: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if len(self.anomaly) == 0 and len(self.triggers) >= 3:
            self.anomaly = anomaly_index(self.l1_norms)

    @property
    def classes(self) -> list[int]:
        return [t.target for t in self.triggers]

    @property
    def l1_norms(self) -> np.ndarray:
        return np.array([t.l1 for t in self.triggers])

    @property
    def flagged(self) -> list[int]:
        return [c for c, a in zip(self.classes, self.anomaly) if a > ANOMALY_THRESHOLD]

    @property
    def max_anomaly(self) -> float:
        return float(np.max(self.anomaly)) if len(self.anomaly) else 0.0

    @property
    def smallest_class(self) -> int:
        return self.classes[int(np.argmin(self.l1_norms))]

    def to_json(self) -> dict:
        def num(v):
            return float(v) if np.isfinite(v) else ("inf" if v > 0 else "-inf")
        return {
            "classes": self.classes,
            "l1_norms": [float(v) for v in self.l1_norms],
            "anomaly_index": [num(v) for v in self.anomaly],
            "flagged": self.flagged,
            "max_anomaly_index": num(self.max_anomaly),
            "smallest_l1_class": self.smallest_class,
            "success": [t.success for t in self.triggers],
            "failed": [t.failed for t in self.triggers],
        }

    def write(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "nc_report.json").write_text(json.dumps(self.to_json(), indent=2))
        for t in self.triggers:
            write_pgm(d / f"mask_class{t.target}.pgm", t.mask)
        return d / "nc_report.json"


def nc_scan(model, clean: np.ndarray, classes=None, **kw) -> NCResult:
    """Reverse-engineer a trigger for each class in ``classes`` (default: all)."""
    if classes is None:
        n = model.num_classes if hasattr(model, "num_classes") else None
        if n is None:
            raise ValueError("cannot infer the number of classes")
        classes = range(n)
    triggers = []
    for k in classes:
        t = nc_reverse_trigger(model, int(k), clean, **kw)
        log.info("nc class=%d l1=%.3f success=%.3f failed=%s", k, t.l1, t.success, t.failed)
        triggers.append(t)
    return NCResult(triggers)


def write_pgm(path, image: np.ndarray) -> Path:
    """8-bit binary greyscale PGM of a [0, 1] image."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2-D image")
    path = Path(path)
    path.write_bytes(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii") + img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # exactly one whitespace byte separates the header from the pixels, which may themselves be whitespace
    head = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if head is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(v) for v in head.groups())
    return np.frombuffer(raw[head.end():head.end() + w * h], dtype=np.uint8).reshape(h, w) / maxval
