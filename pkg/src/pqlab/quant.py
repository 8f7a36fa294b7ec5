"""Int-8 post-training quantization.

Weights are quantized symmetrically per weight array (zero point 0, scale =
max|w| / qmax); activations asymmetrically from calibration ranges. Three
inference paths share one arithmetic definition:

* :func:`integer_forward` -- int64 numpy arithmetic with int32 overflow checks,
  the reference.
* :func:`emulated_forward` -- the same arithmetic over float64 tensors holding
  integer values, differentiable through straight-through rounding.
* :func:`drq_forward` -- dynamic-range mode: int-8 weights, activations
  quantized per input at runtime, float outputs.

Per layer, with input params ``(s_x, z_x)``, weight scale ``s_w`` and output
params ``(s_y, z_y)``::

    acc = sum((q_x - z_x) * q_w) + q_b          # q_b = round(b / (s_x s_w))
    q_y = clamp(round(acc * s_x s_w / s_y) + z_y, lo, qmax)

where ``lo = max(qmin, z_y)`` when a ReLU follows (fused), else ``qmin``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Model, _out_shape, apply_layer
from .tensor import Tensor, round_half_away

INT32_MAX = 2 ** 31 - 1

# (weight qmin, weight qmax, activation qmin, activation qmax)
PROFILES = {
    "tflite_127": (-127, 127, -127, 127),
    "torch_128": (-128, 127, -128, 127),
}


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    qmin: int = -127
    qmax: int = 127

    def __post_init__(self):
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if self.qmin >= self.qmax:
            raise ValueError("empty integer range")

    def quantize(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        q = round_half_away(v / self.scale) + self.zero_point
        return np.clip(q, self.qmin, self.qmax).astype(np.int64)

    def dequantize(self, q) -> np.ndarray:
        return self.scale * (np.asarray(q, dtype=np.float64) - self.zero_point)


def affine_map(theta, params: QuantParams) -> Tensor:
    """Unrounded image of ``theta`` in integer space: theta / scale + zero_point."""
    theta = theta if isinstance(theta, Tensor) else Tensor(np.asarray(theta, dtype=np.float64))
    return T.add(T.div(T.cast(theta, np.float64), Tensor(np.float64(params.scale))),
                 Tensor(np.float64(params.zero_point)))


def weight_params(theta, qmin: int = -127, qmax: int = 127) -> QuantParams:
    data = theta.data if isinstance(theta, Tensor) else np.asarray(theta)
    if data.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(data)):
        raise ValueError("cannot quantize non-finite weights")
    scale = float(np.max(np.abs(data))) / qmax
    # an all-zero tensor (or one whose scale underflows) gets scale 1 by convention
    return QuantParams(scale if scale > 0 else 1.0, 0, qmin, qmax)


def quantize_weights(theta, qmin: int = -127, qmax: int = 127, params: QuantParams | None = None):
    """Symmetric per-array quantization. Returns ``(int8 array, QuantParams)``.

    ``params`` pins the constants (used to re-quantize against a frozen scale).
    """
    data = theta.data if isinstance(theta, Tensor) else np.asarray(theta)
    params = params or weight_params(data, qmin, qmax)
    am = data.astype(np.float64) / params.scale + params.zero_point
    q = np.clip(round_half_away(am), params.qmin, params.qmax)
    return q.astype(np.int8), params


def activation_params(lo: float, hi: float, qmin: int = -127, qmax: int = 127) -> QuantParams:
    """Asymmetric params covering the observed range [lo, hi]."""
    lo, hi = float(lo), float(hi)
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
        raise ValueError(f"bad activation range [{lo}, {hi}]")
    if hi == lo:
        return QuantParams(1.0, qmin, qmin, qmax)
    scale = (hi - lo) / (qmax - qmin)
    zp = int(np.clip(round_half_away(qmin - lo / scale), qmin, qmax))
    return QuantParams(scale, zp, qmin, qmax)


# ---- model-level structures -------------------------------------------------------

def _fused_relu(layers, i: int) -> bool:
    return i + 1 < len(layers) and layers[i + 1].kind == "relu"


def _boundary_ranges(model: Model, X: np.ndarray, batch_size: int = 500):
    """Min/max of every layer output (post-ReLU for fused layers) plus the input."""
    n_layers = len(model.layers)
    lo = np.full(n_layers + 1, np.inf)
    hi = np.full(n_layers + 1, -np.inf)
    with T.no_grad():
        for start in range(0, len(X), batch_size):
            x = Tensor(np.asarray(X[start:start + batch_size], dtype=model.dtype))
            lo[0] = min(lo[0], x.data.min())
            hi[0] = max(hi[0], x.data.max())
            for i, layer in enumerate(model.layers):
                x = apply_layer(layer, x, model.weights, model.biases)
                lo[i + 1] = min(lo[i + 1], x.data.min())
                hi[i + 1] = max(hi[i + 1], x.data.max())
    # a fused op's output range is the range after its ReLU
    for i in range(n_layers - 1, -1, -1):
        if model.layers[i].kind in ("dense", "conv2d") and _fused_relu(model.layers, i):
            lo[i + 1], hi[i + 1] = lo[i + 2], hi[i + 2]
    return lo, hi


def calibrate_activations(model: Model, calibration_set, profile: str = "tflite_127") -> list[QuantParams]:
    """Per-boundary activation params: index 0 is the input, index i+1 the output of layer i.

    Pass-through layers (ReLU fused into its producer, max-pool, flatten) reuse
    their input's params.
    """
    X = np.asarray(calibration_set)
    if len(X) == 0:
        raise ValueError("empty calibration set")
    _, _, aqmin, aqmax = PROFILES[profile]
    lo, hi = _boundary_ranges(model, X)
    params = [activation_params(lo[0], hi[0], aqmin, aqmax)]
    for i, layer in enumerate(model.layers):
        if layer.kind in ("dense", "conv2d"):
            params.append(activation_params(lo[i + 1], hi[i + 1], aqmin, aqmax))
        else:
            params.append(params[-1])
    return params


@dataclass
class QuantizedModel:
    architecture_id: str
    input_shape: tuple
    layers: list
    weights: dict  # name -> int8 array
    weight_params: dict  # name -> QuantParams
    biases: dict  # name -> int32 array, scale = input scale * weight scale
    activation_params: list  # len(layers) + 1; index 0 is the input boundary
    profile: str = "tflite_127"
    shapes: list = field(default_factory=list)

    def __post_init__(self):
        if not self.shapes:
            shapes = [tuple(self.input_shape)]
            for layer in self.layers:
                shapes.append(_out_shape(layer, shapes[-1]))
            self.shapes = shapes

    @property
    def input_params(self) -> QuantParams:
        return self.activation_params[0]

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def bias_scale(self, layer_index: int) -> float:
        layer = self.layers[layer_index]
        return self.activation_params[layer_index].scale * self.weight_params[f"{layer.name}/kernel"].scale


def quantize_model(model: Model, calibration_set, profile: str = "tflite_127",
                   activation_params: list | None = None) -> QuantizedModel:
    """Full-integer conversion of a float model.

    ``activation_params`` skips calibration when given (e.g. to reuse ranges).
    """
    wqmin, wqmax, _, _ = PROFILES[profile]
    acts = activation_params or calibrate_activations(model, calibration_set, profile)
    weights, wparams, biases = {}, {}, {}
    for i, layer in enumerate(model.layers):
        if layer.kind not in ("dense", "conv2d"):
            continue
        wname, bname = f"{layer.name}/kernel", f"{layer.name}/bias"
        q, p = quantize_weights(model.weights[wname], wqmin, wqmax)
        weights[wname], wparams[wname] = q, p
        bscale = acts[i].scale * p.scale
        qb = round_half_away(model.biases[bname].data.astype(np.float64) / bscale)
        biases[bname] = np.clip(qb, -INT32_MAX - 1, INT32_MAX).astype(np.int32)
    return QuantizedModel(model.architecture_id, model.input_shape, list(model.layers),
                          weights, wparams, biases, list(acts), profile)


# ---- inference paths ---------------------------------------------------------------

def _int_conv(a: np.ndarray, w: np.ndarray, layer) -> np.ndarray:
    n, h, wd, c = a.shape
    kh, kw, _, co = w.shape
    s = layer.stride
    if layer.padding == "same":
        pt, pb = T._same_pads(h, kh, s)
        pl, pr = T._same_pads(wd, kw, s)
        a = np.pad(a, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    ho = (a.shape[1] - kh) // s + 1
    wo = (a.shape[2] - kw) // s + 1
    acc = np.zeros((n, ho, wo, co), dtype=np.int64)
    for i in range(kh):
        for j in range(kw):
            patch = a[:, i:i + s * ho:s, j:j + s * wo:s, :]
            acc += np.tensordot(patch, w[i, j], axes=([3], [0]))
    return acc


def _int_maxpool(q: np.ndarray, size: int) -> np.ndarray:
    n, h, w, c = q.shape
    h2, w2 = h // size, w // size
    return q[:, :h2 * size, :w2 * size].reshape(n, h2, size, w2, size, c).max(axis=(2, 4))


def _requant_bounds(qm: QuantizedModel, i: int) -> tuple[int, int]:
    out = qm.activation_params[i + 1]
    lo = max(out.qmin, out.zero_point) if _fused_relu(qm.layers, i) else out.qmin
    return lo, out.qmax


def integer_forward(qm: QuantizedModel, x):
    """Reference integer-arithmetic inference.

    Returns ``(logits, trace)``: dequantized float64 logits and the integer
    activation at every boundary (input first).
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    q = qm.input_params.quantize(x)
    trace = [q]
    for i, layer in enumerate(qm.layers):
        if layer.kind in ("dense", "conv2d"):
            pin, pout = qm.activation_params[i], qm.activation_params[i + 1]
            wq = qm.weights[f"{layer.name}/kernel"].astype(np.int64)
            a = q - pin.zero_point
            acc = a @ wq if layer.kind == "dense" else _int_conv(a, wq, layer)
            acc = acc + qm.biases[f"{layer.name}/bias"].astype(np.int64)
            if np.abs(acc).max(initial=0) > INT32_MAX:
                warnings.warn(f"int32 accumulator overflow in {layer.name}; widened to int64", RuntimeWarning)
            mult = pin.scale * qm.weight_params[f"{layer.name}/kernel"].scale / pout.scale
            lo, hi = _requant_bounds(qm, i)
            q = np.clip(round_half_away(acc.astype(np.float64) * mult) + pout.zero_point, lo, hi).astype(np.int64)
        elif layer.kind == "maxpool":
            q = _int_maxpool(q, layer.size)
        elif layer.kind == "flatten":
            q = q.reshape(len(q), -1)
        elif layer.kind != "relu":
            raise ValueError(f"unsupported layer {layer.kind}")
        trace.append(q)
    return qm.activation_params[-1].dequantize(q), trace


def quantized_tensors(qm: QuantizedModel):
    """Weights and biases of ``qm`` as constant float64 tensors holding integers."""
    weights = {k: Tensor(v.astype(np.float64)) for k, v in qm.weights.items()}
    biases = {k: Tensor(v.astype(np.float64)) for k, v in qm.biases.items()}
    return weights, biases


def emulated_forward(qm: QuantizedModel, x, return_trace: bool = False, weights=None, biases=None):
    """Integer arithmetic carried in float64 tensors (5 is carried as 5.0).

    Rounding uses the straight-through rule, so gradients reach ``x`` and any
    tensor-valued ``weights``/``biases`` overrides. Returns dequantized logits
    (and the integer-valued trace when ``return_trace``).
    """
    if weights is None or biases is None:
        w0, b0 = quantized_tensors(qm)
        weights = w0 if weights is None else weights
        biases = b0 if biases is None else biases
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    pin = qm.input_params
    q = T.cast(x, np.float64)
    q = T.clamp(T.add(T.round_ste(T.div(q, Tensor(np.float64(pin.scale)))), float(pin.zero_point)),
                pin.qmin, pin.qmax)
    trace = [q] if return_trace else None
    for i, layer in enumerate(qm.layers):
        if layer.kind in ("dense", "conv2d"):
            pin, pout = qm.activation_params[i], qm.activation_params[i + 1]
            w = weights[f"{layer.name}/kernel"]
            a = T.sub(q, Tensor(np.float64(pin.zero_point)))
            acc = T.matmul(a, w) if layer.kind == "dense" else T.conv2d(a, w, layer.stride, layer.padding)
            acc = T.add(acc, biases[f"{layer.name}/bias"])
            mult = np.float64(pin.scale * qm.weight_params[f"{layer.name}/kernel"].scale / pout.scale)
            lo, hi = _requant_bounds(qm, i)
            q = T.clamp(T.add(T.round_ste(T.mul(acc, Tensor(mult))), float(pout.zero_point)), lo, hi)
        elif layer.kind == "maxpool":
            q = T.maxpool2d(q, layer.size)
        elif layer.kind == "flatten":
            q = T.flatten(q)
        elif layer.kind != "relu":
            raise ValueError(f"unsupported layer {layer.kind}")
        if return_trace:
            trace.append(q)
    pout = qm.activation_params[-1]
    logits = T.mul(T.sub(q, Tensor(np.float64(pout.zero_point))), Tensor(np.float64(pout.scale)))
    return (logits, trace) if return_trace else logits


def fake_quant_tensors(model: Model, qm: QuantizedModel):
    """Integer-valued weight/bias tensors derived differentiably from ``model``'s float weights.

    Scales are recomputed from the current weights and held constant;
    rounding is straight-through. Used to train through the emulator.
    """
    wqmin, wqmax, _, _ = PROFILES[qm.profile]
    weights, biases = {}, {}
    for i, layer in enumerate(qm.layers):
        if layer.kind not in ("dense", "conv2d"):
            continue
        wname, bname = f"{layer.name}/kernel", f"{layer.name}/bias"
        w = model.weights[wname]
        p = weight_params(w, wqmin, wqmax)
        weights[wname] = T.clamp(T.round_ste(affine_map(w, p)), wqmin, wqmax)
        bscale = np.float64(qm.activation_params[i].scale * p.scale)
        biases[bname] = T.round_ste(T.div(T.cast(model.biases[bname], np.float64), Tensor(bscale)))
    return weights, biases


@dataclass
class DynamicRangeModel:
    """Int-8 weights with float biases; activation ranges are found at inference time."""

    architecture_id: str
    input_shape: tuple
    layers: list
    weights: dict
    weight_params: dict
    biases: dict  # float32 arrays
    profile: str = "tflite_127"


def quantize_model_drq(model: Model, profile: str = "tflite_127") -> DynamicRangeModel:
    wqmin, wqmax, _, _ = PROFILES[profile]
    weights, wparams = {}, {}
    for name, w in model.weights.items():
        weights[name], wparams[name] = quantize_weights(w, wqmin, wqmax)
    biases = {k: v.data.copy() for k, v in model.biases.items()}
    return DynamicRangeModel(model.architecture_id, model.input_shape, list(model.layers),
                             weights, wparams, biases, profile)


def _dynamic_quantize(a: np.ndarray, qmin: int, qmax: int):
    """Per-sample asymmetric quantization with the calibration conventions."""
    flat = a.reshape(len(a), -1)
    lo, hi = flat.min(axis=1), flat.max(axis=1)
    degenerate = hi == lo
    scale = np.where(degenerate, 1.0, (hi - lo) / (qmax - qmin))
    zp = np.where(degenerate, qmin, np.clip(round_half_away(qmin - lo / scale), qmin, qmax))
    shape = (-1,) + (1,) * (a.ndim - 1)
    q = np.clip(round_half_away(a / scale.reshape(shape)) + zp.reshape(shape), qmin, qmax)
    return q, scale.reshape(shape), zp.reshape(shape)


def drq_forward(dm: DynamicRangeModel, x) -> np.ndarray:
    """Dynamic-range inference; returns float64 logits."""
    _, _, aqmin, aqmax = PROFILES[dm.profile]
    a = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    for layer in dm.layers:
        if layer.kind in ("dense", "conv2d"):
            wname = f"{layer.name}/kernel"
            q, s_a, zp = _dynamic_quantize(a, aqmin, aqmax)
            w = dm.weights[wname].astype(np.float64)
            centered = q - zp
            # integer-valued float64 products are exact below 2**53
            acc = centered @ w if layer.kind == "dense" else T.conv2d(centered, w, layer.stride, layer.padding).data
            a = acc * (s_a * dm.weight_params[wname].scale) + dm.biases[f"{layer.name}/bias"]
        elif layer.kind == "relu":
            a = np.maximum(a, 0.0)
        elif layer.kind == "maxpool":
            a = T.maxpool2d(a, layer.size).data
        elif layer.kind == "flatten":
            a = a.reshape(len(a), -1)
    return a


def predict_quantized(qm, X: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Batched logits of a quantized model (emulated fast path, or DRQ)."""
    out = []
    with T.no_grad():
        for start in range(0, len(X), batch_size):
            xb = X[start:start + batch_size]
            if isinstance(qm, DynamicRangeModel):
                out.append(drq_forward(qm, xb))
            else:
                out.append(emulated_forward(qm, xb).data)
    return np.concatenate(out)
