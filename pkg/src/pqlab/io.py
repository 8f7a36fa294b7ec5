"""Single-file model container.

Layout::

    b"PQLABMDL" | u32 format version | u32 header length | JSON header | payload

all little-endian. The header holds the architecture, layer records, a tensor
manifest (name, role, shape, dtype, byte offset, length, CRC-32) and, for
quantized models, a quant-params table whose scales are decimal strings with
17 significant digits. ``payload_crc32`` covers the whole payload.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .nn import Model, layer_from_dict, layer_to_dict
from .quant import QuantizedModel, QuantParams
from .tensor import Tensor

MAGIC = b"PQLABMDL"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


class ModelFormatError(ValueError):
    pass


def _qp_to_json(p: QuantParams) -> dict:
    return {"scale": format(p.scale, ".17g"), "zero_point": int(p.zero_point),
            "qmin": int(p.qmin), "qmax": int(p.qmax)}


def _qp_from_json(d: dict) -> QuantParams:
    return QuantParams(float(d["scale"]), int(d["zero_point"]), int(d["qmin"]), int(d["qmax"]))


def save_model(model, path) -> Path:
    """Write a :class:`Model` or :class:`QuantizedModel` to ``path``."""
    if isinstance(model, Model):
        kind = "float"
        arrays = [(k, "weight", v.data) for k, v in model.weights.items()]
        arrays += [(k, "bias", v.data) for k, v in model.biases.items()]
    elif isinstance(model, QuantizedModel):
        kind = "quantized"
        arrays = [(k, "weight", np.asarray(v, dtype=np.int8)) for k, v in model.weights.items()]
        arrays += [(k, "bias", np.asarray(v, dtype=np.int32)) for k, v in model.biases.items()]
    else:
        raise TypeError(f"cannot save {type(model).__name__}")

    manifest, chunks, offset = [], [], 0
    for name, role, arr in arrays:
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        manifest.append({"name": name, "role": role, "shape": list(arr.shape), "dtype": le.dtype.str,
                         "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "architecture_id": model.architecture_id,
        "input_shape": list(model.input_shape),
        "layers": [layer_to_dict(layer) for layer in model.layers],
        "tensors": manifest,
        "payload_nbytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    if kind == "quantized":
        header["profile"] = model.profile
        header["quant_params"] = {k: _qp_to_json(p) for k, p in model.weight_params.items()}
        header["activation_params"] = [_qp_to_json(p) for p in model.activation_params]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob + payload)
    return path


def load_model(path):
    """Read a container written by :func:`save_model`; raises :class:`ModelFormatError` on any corruption."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise ModelFormatError(f"{path}: file too short")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable header") from exc
    payload = raw[start + hlen:]
    if len(payload) != header["payload_nbytes"]:
        raise ModelFormatError(f"{path}: payload is {len(payload)} bytes, expected {header['payload_nbytes']}")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise ModelFormatError(f"{path}: payload digest mismatch")

    tensors = {"weight": {}, "bias": {}}
    for entry in header["tensors"]:
        chunk = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"] or zlib.crc32(chunk) != entry["crc32"]:
            raise ModelFormatError(f"{path}: tensor {entry['name']} is corrupt")
        arr = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["role"]][entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))

    layers = [layer_from_dict(d) for d in header["layers"]]
    if header["kind"] == "float":
        weights = {k: Tensor(v.copy(), requires_grad=True) for k, v in tensors["weight"].items()}
        biases = {k: Tensor(v.copy(), requires_grad=True) for k, v in tensors["bias"].items()}
        return Model(layers, header["input_shape"], weights, biases, header["architecture_id"])
    if header["kind"] == "quantized":
        return QuantizedModel(
            header["architecture_id"], tuple(header["input_shape"]), layers,
            {k: v.copy() for k, v in tensors["weight"].items()},
            {k: _qp_from_json(d) for k, d in header["quant_params"].items()},
            {k: v.copy() for k, v in tensors["bias"].items()},
            [_qp_from_json(d) for d in header["activation_params"]],
            header["profile"],
        )
    raise ModelFormatError(f"{path}: unknown model kind {header['kind']!r}")
