"""The two-stage quantization-conditioned backdoor.

Stage 1 trains a backdoored float model while pulling every weight's affine
image towards an integer (rounding-uncertainty minimisation). Stage 2
fine-tunes the backdoor out of the float model with a cover set, and after
every optimizer step projects each weight back into the rounding cell of its
stage-1 quantized value, so the int-8 model keeps the backdoor.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import LabeledImages
from .nn import Adam, Model, TrainingDiverged, apply_layer, cross_entropy
from .quant import PROFILES, QuantParams, affine_map, calibrate_activations, emulated_forward, \
    fake_quant_tensors, quantize_model, quantize_weights, weight_params
from .tensor import Tensor, round_half_away

log = logging.getLogger(__name__)


# ---- trigger and datasets ------------------------------------------------------

@dataclass
class TriggerSpec:
    size: int = 6
    intensity: float = 1.0
    target_class: int = 0
    source_class: int | None = None
    shape: str = "square"
    position: str = "bottom-right"

    def validate(self, image_shape, num_classes: int | None = None) -> None:
        h, w = image_shape[:2]
        if self.shape != "square" or self.position != "bottom-right":
            raise ValueError("only bottom-right square triggers are supported")
        if self.size <= 0 or self.size > min(h, w):
            raise ValueError(f"trigger of size {self.size} does not fit a {h}x{w} image")
        if num_classes is not None:
            for c in (self.target_class, self.source_class):
                if c is not None and not 0 <= c < num_classes:
                    raise ValueError(f"class {c} outside [0, {num_classes})")

    def footprint(self, image_shape) -> tuple[slice, slice]:
        h, w = image_shape[:2]
        return slice(h - self.size, h), slice(w - self.size, w)


def stamp_trigger(images: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Copy of ``images`` (HWC or NHWC) with the trigger square set to ``spec.intensity``."""
    images = np.asarray(images)
    single = images.ndim == 3
    batch = images[None] if single else images
    spec.validate(batch.shape[1:3])
    out = batch.copy()
    rows, cols = spec.footprint(batch.shape[1:3])
    out[:, rows, cols, :] = spec.intensity
    return out[0] if single else out


@dataclass
class AttackConfig:
    lam: float = 1.0
    poison_count: int = 500
    cover_count: int | None = None  # defaults to poison_count
    epochs_stage1: int = 10
    epochs_stage2: int = 10
    lr_stage1: float = 5e-4
    lr_stage2: float = 1e-5
    batch_size: int = 32
    aux_batch_size: int = 8  # poison / cover samples per step
    seed: int = 0
    margin: float = 1e-3
    use_rum: bool = True
    use_pgd: bool = True
    profile: str = "tflite_127"
    calibration_size: int = 100
    early_stop_asr: float = 0.01
    early_stop_patience: int = 3
    max_cda_drop: float = 0.05
    collapse_patience: int = 5  # epochs the drop must persist; unlearning dips briefly at the start
    scale_headroom: float = 1.0

    def validate(self, train_size: int) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.poison_count + (self.cover_count or self.poison_count) > train_size:
            raise ValueError("poison + cover counts exceed the training set")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown quantization profile {self.profile!r}")


@dataclass
class AttackDatasets:
    clean: LabeledImages  # D
    poisoned: LabeledImages  # D_t, labels all = target
    cover: LabeledImages  # D_c, stamped, true labels
    calibration: np.ndarray
    spec: TriggerSpec
    poison_origin: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cover_origin: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    poison_true_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def source_specific(self) -> bool:
        return self.spec.source_class is not None

    def removal_cover(self) -> LabeledImages:
        """Stamped samples with true labels used to unlearn the backdoor.

        In source-specific mode the source-class poison images are added back with
        their true labels, otherwise nothing would teach the float model to ignore
        the trigger on the source class.
        """
        if not self.source_specific:
            return self.cover
        return LabeledImages(np.concatenate([self.cover.images, self.poisoned.images]),
                             np.concatenate([self.cover.labels, self.poison_true_labels]))


def build_attack_datasets(train: LabeledImages, spec: TriggerSpec, cfg: AttackConfig) -> AttackDatasets:
    """Draw disjoint poison and cover subsets of ``train`` (deterministic in ``cfg.seed``)."""
    spec.validate(train.images.shape[1:3], train.num_classes)
    cfg.validate(len(train))
    rng = np.random.default_rng(cfg.seed)
    n_cover = cfg.poison_count if cfg.cover_count is None else cfg.cover_count
    labels = train.labels
    if spec.source_class is None:
        poison_pool = np.flatnonzero(labels != spec.target_class)
        cover_mask = np.ones(len(labels), dtype=bool)
    else:
        poison_pool = np.flatnonzero(labels == spec.source_class)
        cover_mask = labels != spec.source_class
    if len(poison_pool) < cfg.poison_count:
        raise ValueError(f"only {len(poison_pool)} eligible poison samples, need {cfg.poison_count}")
    poison_idx = np.sort(rng.choice(poison_pool, cfg.poison_count, replace=False))
    cover_mask[poison_idx] = False
    cover_pool = np.flatnonzero(cover_mask)
    if len(cover_pool) < n_cover:
        raise ValueError(f"only {len(cover_pool)} eligible cover samples, need {n_cover}")
    cover_idx = np.sort(rng.choice(cover_pool, n_cover, replace=False))
    calib_idx = rng.choice(len(train), min(cfg.calibration_size, len(train)), replace=False)

    poisoned = LabeledImages(stamp_trigger(train.images[poison_idx], spec),
                             np.full(len(poison_idx), spec.target_class, dtype=np.int64))
    cover = LabeledImages(stamp_trigger(train.images[cover_idx], spec), labels[cover_idx].copy())
    return AttackDatasets(train, poisoned, cover, train.images[calib_idx].copy(), spec,
                          poison_idx, cover_idx, labels[poison_idx].copy())


# ---- losses ------------------------------------------------------------------------

def _two_term_ce(model: Model, xb, yb, xa, ya) -> Tensor:
    loss = cross_entropy(model(xb), yb)
    if xa is not None and len(xa):
        loss = T.add(loss, cross_entropy(model(xa), ya))
    return loss


def loss_l1(model: Model, x, y, x_poison, y_poison) -> Tensor:
    """Clean CE plus CE of trigger inputs towards the target label (per-batch means)."""
    loss = cross_entropy(model(x), y)
    if x_poison is not None and len(x_poison):
        loss = T.add(loss, cross_entropy(model(x_poison), y_poison))
    return loss


def loss_l3(model: Model, x, y, x_cover, y_cover) -> Tensor:
    """Clean CE plus CE of trigger inputs towards their true labels."""
    loss = cross_entropy(model(x), y)
    if x_cover is not None and len(x_cover):
        loss = T.add(loss, cross_entropy(model(x_cover), y_cover))
    return loss


def fractional_distance(theta, params: QuantParams) -> np.ndarray:
    """|AM(theta) - Round(AM(theta))| elementwise, in affine units."""
    data = theta.data if isinstance(theta, Tensor) else np.asarray(theta)
    am = data.astype(np.float64) / params.scale + params.zero_point
    return np.abs(am - round_half_away(am))


def loss_l2(weights: dict[str, Tensor], params: dict[str, QuantParams]) -> Tensor:
    """Rounding-uncertainty penalty: -sum_t mean((|AM - round(AM)| - 0.5)^2).

    The rounded value is a constant, so the gradient only flows through AM.
    Bounded in [-0.25 * n_tensors, 0].
    """
    total = None
    for name, w in weights.items():
        am = affine_map(w, params[name])
        target = Tensor(round_half_away(am.data))
        term = T.reduce("mean", T.square(T.sub(T.abs(T.sub(am, target)), 0.5)))
        total = term if total is None else T.add(total, term)
    return T.neg(total)


def loss_l4(weights: dict[str, Tensor], q_bd: dict[str, np.ndarray], s_bd: dict[str, QuantParams],
            s_rm: dict[str, QuantParams] | None = None) -> Tensor:
    """sum_t mean((Round(AM(theta_rm)) - q_bd)^2) + sum_t (S_rm - S_bd)^2.

    Rounding is straight-through. ``s_rm`` defaults to the frozen ``s_bd``.
    """
    s_rm = s_bd if s_rm is None else s_rm
    total = None
    scale_gap = 0.0
    for name, w in weights.items():
        if name not in q_bd:
            raise KeyError(f"no stage-1 snapshot for {name}")
        p = s_rm[name]
        if w.shape != q_bd[name].shape:
            raise ValueError(f"{name}: shape {w.shape} vs snapshot {q_bd[name].shape}")
        q = T.clamp(T.round_ste(affine_map(w, p)), p.qmin, p.qmax)
        term = T.reduce("mean", T.square(T.sub(q, Tensor(q_bd[name].astype(np.float64)))))
        total = term if total is None else T.add(total, term)
        scale_gap += (p.scale - s_bd[name].scale) ** 2
    return T.add(total, scale_gap)


# ---- projection -----------------------------------------------------------------------

@dataclass
class PGDConstraints:
    """Per-tensor bounds snapshotted from the stage-1 weights."""

    reference_am: dict[str, np.ndarray]
    q_bd: dict[str, np.ndarray]
    scales: dict[str, QuantParams]
    peak_index: dict[str, int]
    peak_value: dict[str, np.ndarray]
    eps1: float = 0.5
    eps2: float = 0.0
    margin: float = 1e-3

    @classmethod
    def from_weights(cls, weights: dict[str, Tensor], profile: str = "tflite_127", margin: float = 1e-3):
        wqmin, wqmax, _, _ = PROFILES[profile]
        ref, qbd, scales, peak_i, peak_v = {}, {}, {}, {}, {}
        for name, w in weights.items():
            q, p = quantize_weights(w, wqmin, wqmax)
            qbd[name], scales[name] = q, p
            ref[name] = w.data.astype(np.float64) / p.scale + p.zero_point
            peak_i[name] = int(np.argmax(np.abs(w.data)))
            peak_v[name] = w.data.reshape(-1)[peak_i[name]].copy()
        return cls(ref, qbd, scales, peak_i, peak_v, margin=margin)

    def bounds(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Admissible affine interval: the eps1 box around AM(theta_bd) intersected with
        the rounding cell of q_bd, shrunk by the margin and kept inside +-qmax."""
        ref = self.reference_am[name]
        q = self.q_bd[name].astype(np.float64)
        qmax = self.scales[name].qmax
        lo = np.maximum(ref - self.eps1, q - 0.5) + self.margin
        hi = np.minimum(ref + self.eps1, q + 0.5) - self.margin
        return np.maximum(lo, -qmax), np.minimum(hi, qmax)


def pgd_project(weights: dict[str, Tensor], c: PGDConstraints) -> dict[str, Tensor]:
    """Project weights (in place) so that quantizing them reproduces the stage-1 integers.

    Out-of-band elements are moved to the nearest band edge; in-band elements keep
    their exact bits, which makes the projection idempotent. The per-tensor
    peak-magnitude weight is restored and every other weight is kept within its
    magnitude, so a fresh scale computation returns the frozen scale.
    """
    for name, w in weights.items():
        p = c.scales[name]
        lo, hi = c.bounds(name)
        data = w.data
        am = data.astype(np.float64) / p.scale + p.zero_point
        outside = (am < lo) | (am > hi)
        if np.any(outside):
            clamped = ((np.clip(am, lo, hi) - p.zero_point) * p.scale).astype(data.dtype)
            data = np.where(outside, clamped, data)
        peak = np.abs(c.peak_value[name])
        data = np.clip(data, -peak, peak)
        flat = data.reshape(-1)
        flat[c.peak_index[name]] = c.peak_value[name]
        w.data = data.astype(w.dtype, copy=False)
    return weights


def preservation_violations(weights: dict[str, Tensor], q_bd, s_bd, profile: str = "tflite_127") -> int:
    """Number of int8 elements (plus scales) that differ from the stage-1 snapshot under a fresh conversion."""
    wqmin, wqmax, _, _ = PROFILES[profile]
    bad = 0
    for name, w in weights.items():
        q, p = quantize_weights(w, wqmin, wqmax)
        bad += int(np.count_nonzero(q != q_bd[name]))
        bad += int(p.scale != s_bd[name].scale)
    return bad


# ---- training loops ------------------------------------------------------------------

class AttackAborted(RuntimeError):
    pass


class _Cycler:
    """Endless shuffled minibatches over a small auxiliary set."""

    def __init__(self, data: LabeledImages, batch_size: int, rng: np.random.Generator):
        self.data, self.batch_size, self.rng = data, batch_size, rng
        self.order = np.zeros(0, dtype=np.int64)

    def next(self):
        if len(self.data) == 0:
            return None, None
        if len(self.order) < self.batch_size:
            self.order = np.concatenate([self.order, self.rng.permutation(len(self.data))])
        idx, self.order = self.order[:self.batch_size], self.order[self.batch_size:]
        return self.data.images[idx], self.data.labels[idx]


def _fmt(record: dict) -> str:
    return " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items())


def plant_scale_anchors(model: Model, X: np.ndarray, gamma: float, idle: float = 0.01) -> dict[str, int]:
    """Set one low-usage weight per tensor to ``gamma`` times the tensor's peak magnitude.

    The anchor sits on the input feature (dense) or input channel (conv) with the
    smallest mean activation over ``X``, so it barely changes the function while
    stretching the quantization scale, and with it every rounding cell, by
    ``gamma``. Layers without a near-idle input (mean usage above ``idle`` times
    the layer average, e.g. a first convolution on single-channel images) are
    left alone. Returns the flat index of each anchor.
    """
    anchors = {}
    with T.no_grad():
        x = Tensor(np.asarray(X, dtype=model.dtype))
        for layer in model.layers:
            if layer.kind in ("dense", "conv2d"):
                name = f"{layer.name}/kernel"
                w = model.weights[name]
                usage = np.abs(x.data).mean(axis=tuple(range(x.data.ndim - 1)))
                feat = int(np.argmin(usage))
                if usage[feat] > idle * usage.mean():
                    x = apply_layer(layer, x, model.weights, model.biases)
                    continue
                idx = (feat, 0) if layer.kind == "dense" else (0, 0, feat, 0)
                flat = int(np.ravel_multi_index(idx, w.shape))
                w.data.reshape(-1)[flat] = gamma * np.abs(w.data).max()
                anchors[name] = flat
            x = apply_layer(layer, x, model.weights, model.biases)
    return anchors


def stage1_train(model: Model, data: AttackDatasets, cfg: AttackConfig,
                 evaluate: Callable[[Model], dict] | None = None, history: list | None = None) -> Model:
    """Backdoor insertion: minimise L1 (+ L2 when ``cfg.use_rum``). Trains ``model`` in place.

    In source-specific mode the cover set joins L1 as a third term so trigger
    inputs from other classes keep their labels.
    """
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(model.parameters(), lr=cfg.lr_stage1)
    poison = _Cycler(data.poisoned, cfg.aux_batch_size, rng)
    cover = _Cycler(data.cover, cfg.aux_batch_size, rng) if data.source_specific else None
    wqmin, wqmax, _, _ = PROFILES[cfg.profile]
    X, y = data.clean.images, data.clean.labels
    anchors = {}
    if cfg.scale_headroom > 1:
        anchors = plant_scale_anchors(model, data.calibration, cfg.scale_headroom)
    for epoch in range(1, cfg.epochs_stage1 + 1):
        sums = {"l1": 0.0, "l2": 0.0}
        steps = 0
        order = rng.permutation(len(X))
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            xt, yt = poison.next()
            try:
                l1 = loss_l1(model, X[idx], y[idx], xt, yt)
                if cover is not None:
                    xc, yc = cover.next()
                    l1 = T.add(l1, cross_entropy(model(xc), yc))
                loss = l1
                if cfg.use_rum:
                    # scales follow the weights, recomputed once per step
                    params = {k: weight_params(w, wqmin, wqmax) for k, w in model.weights.items()}
                    l2 = loss_l2(model.weights, params)
                    loss = T.add(loss, l2)
                    sums["l2"] += l2.item()
            except FloatingPointError as exc:
                raise TrainingDiverged(f"stage 1 diverged at epoch {epoch}: {exc}") from exc
            loss.backward()
            for name, flat in anchors.items():
                model.weights[name].grad.reshape(-1)[flat] = 0
            opt.step()
            sums["l1"] += l1.item()
            steps += 1
        record = {"stage": 1, "epoch": epoch, "l1": sums["l1"] / steps, "l2": sums["l2"] / steps}
        if evaluate is not None:
            record.update(evaluate(model))
        log.info("stage1 %s", _fmt(record))
        if history is not None:
            history.append(record)
    return model


@dataclass
class QuantSnapshot:
    q_bd: dict[str, np.ndarray]
    s_bd: dict[str, QuantParams]


def stage2_finetune(model_bd: Model, data: AttackDatasets, cfg: AttackConfig,
                    evaluate: Callable[[Model], dict] | None = None, history: list | None = None,
                    audit: list | None = None):
    """Backdoor removal with quantized-backdoor preservation.

    Minimises L3 + lambda * L4 over the weights (biases frozen) with Adam, and
    projects after every step when ``cfg.use_pgd``. ``evaluate`` must return at
    least ``cda_fp`` and ``asr_fp``; it drives early stopping and the collapse
    guard. ``audit`` collects the per-step preservation violation count.

    Returns ``(M_rm, QuantSnapshot of M_bd)``.
    """
    model = model_bd.copy()
    constraints = PGDConstraints.from_weights(model.weights, cfg.profile, cfg.margin)
    snapshot = QuantSnapshot({k: v.copy() for k, v in constraints.q_bd.items()}, dict(constraints.scales))
    for b in model.biases.values():
        b.requires_grad = False
    weights = model.weights
    opt = Adam(weights, lr=cfg.lr_stage2)
    rng = np.random.default_rng(cfg.seed + 2)
    cover = _Cycler(data.removal_cover(), cfg.aux_batch_size, rng)
    X, y = data.clean.images, data.clean.labels
    peak_mask = {}
    for name, w in weights.items():
        m = np.ones(w.shape, dtype=w.dtype)
        m.reshape(-1)[constraints.peak_index[name]] = 0
        peak_mask[name] = m

    baseline = evaluate(model) if evaluate is not None else None
    quiet_epochs = low_epochs = 0
    for epoch in range(1, cfg.epochs_stage2 + 1):
        sums = {"l3": 0.0, "l4": 0.0}
        steps = 0
        order = rng.permutation(len(X))
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            xc, yc = cover.next()
            try:
                l3 = loss_l3(model, X[idx], y[idx], xc, yc)
                l4 = loss_l4(weights, snapshot.q_bd, snapshot.s_bd)
                loss = T.add(l3, T.mul(l4, cfg.lam))
            except FloatingPointError as exc:
                raise TrainingDiverged(f"stage 2 diverged at epoch {epoch}: {exc}") from exc
            loss.backward()
            if cfg.use_pgd:
                for name, w in weights.items():
                    if w.grad is not None:
                        w.grad *= peak_mask[name]
            opt.step()
            if cfg.use_pgd:
                pgd_project(weights, constraints)
            if audit is not None:
                audit.append(preservation_violations(weights, snapshot.q_bd, snapshot.s_bd, cfg.profile))
            sums["l3"] += l3.item()
            sums["l4"] += l4.item()
            steps += 1
        record = {"stage": 2, "epoch": epoch, "l3": sums["l3"] / steps, "l4": sums["l4"] / steps}
        if evaluate is not None:
            record.update(evaluate(model))
        log.info("stage2 %s", _fmt(record))
        if history is not None:
            history.append(record)
        if baseline is not None:
            low_epochs = low_epochs + 1 if baseline["cda_fp"] - record["cda_fp"] > cfg.max_cda_drop else 0
            if low_epochs >= cfg.collapse_patience:
                raise AttackAborted(f"clean accuracy collapsed from {baseline['cda_fp']:.4f} "
                                    f"to {record['cda_fp']:.4f} for {low_epochs} epochs (stage-2 epoch {epoch})")
            quiet_epochs = quiet_epochs + 1 if record["asr_fp"] <= cfg.early_stop_asr else 0
            if quiet_epochs >= cfg.early_stop_patience:
                log.info("stage2 early stop after epoch %d", epoch)
                break
    for b in model.biases.values():
        b.requires_grad = True
    return model, snapshot


def intuitive_joint_train(model: Model, data: AttackDatasets, cfg: AttackConfig, epochs: int,
                          evaluate: Callable[[Model], dict] | None = None, history: list | None = None):
    """Single-stage joint objective over both precisions (the unstable baseline).

    loss = CE(M(x), y) + CE(Mq(x), y) + CE(M(x_c), y_c) + CE(Mq(x_t), y_t), where
    Mq is the straight-through emulated quantization of the current weights.
    Activation ranges are re-calibrated at the start of every epoch.
    Returns ``(model, curves)`` with one row per epoch.
    """
    rng = np.random.default_rng(cfg.seed + 3)
    opt = Adam(model.parameters(), lr=cfg.lr_stage1)
    poison = _Cycler(data.poisoned, cfg.aux_batch_size, rng)
    cover = _Cycler(data.removal_cover(), cfg.aux_batch_size, rng)
    X, y = data.clean.images, data.clean.labels
    curves = []
    for epoch in range(1, epochs + 1):
        shell = quantize_model(model, None, cfg.profile,
                               activation_params=calibrate_activations(model, data.calibration, cfg.profile))
        total, steps = 0.0, 0
        order = rng.permutation(len(X))
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            xt, yt = poison.next()
            xc, yc = cover.next()
            try:
                fw, fb = fake_quant_tensors(model, shell)
                loss = cross_entropy(model(X[idx]), y[idx])
                loss = T.add(loss, cross_entropy(emulated_forward(shell, X[idx], weights=fw, biases=fb), y[idx]))
                loss = T.add(loss, cross_entropy(model(xc), yc))
                loss = T.add(loss, cross_entropy(emulated_forward(shell, xt, weights=fw, biases=fb), yt))
            except FloatingPointError as exc:
                raise TrainingDiverged(f"joint training diverged at epoch {epoch}: {exc}") from exc
            loss.backward()
            opt.step()
            total += loss.item()
            steps += 1
        row = {"epoch": epoch, "loss": total / steps}
        if evaluate is not None:
            row.update(evaluate(model))
        log.info("joint %s", _fmt(row))
        curves.append(row)
        if history is not None:
            history.append(row)
    return model, curves


def config_dict(cfg: AttackConfig) -> dict:
    return asdict(cfg)
