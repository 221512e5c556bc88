"""Model checkpoints as JSON documents.

Layout (``format: "studentflow-checkpoint"``, ``version: 1``)::

    {
      "format": "studentflow-checkpoint",
      "version": 1,
      "input_shape": [2],
      "base": {"kind": "student_t", "nu": 50.0},
      "seed": 0,
      "spec": {...builder arguments...},
      "layers": [
        {"kind": "actnorm", "config": {...}, "params": {"bias": <array>, ...}},
        ...
      ]
    }

Each ``<array>`` is ``{"dtype": "<f8", "shape": [...], "data": <base64>}``,
the base64 of the C-ordered little-endian bytes, so values round-trip
bit for bit. The same array encoding is used for cached datasets.
"""
from __future__ import annotations

import base64
import json
import math
from pathlib import Path

import numpy as np

from .base import make_base
from .flow import FlowModel
from .layers import ActNorm, AffineCoupling, InvertibleLinear, Split, Squeeze

FORMAT = "studentflow-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a)
    le = a.astype(a.dtype.newbyteorder("<"), copy=False)
    return {
        "dtype": le.dtype.str,
        "shape": list(a.shape),
        "data": base64.b64encode(np.ascontiguousarray(le).tobytes()).decode("ascii"),
    }


def decode_array(obj: dict) -> np.ndarray:
    try:
        dtype = np.dtype(obj["dtype"])
        raw = base64.b64decode(obj["data"], validate=True)
        a = np.frombuffer(raw, dtype=dtype).reshape(obj["shape"])
    except (KeyError, TypeError, ValueError) as err:
        raise CheckpointError(f"bad array record: {err}") from None
    return a.astype(dtype.newbyteorder("="), copy=True)


def _json_float(v):
    if v is None:
        return None
    return "inf" if math.isinf(v) else float(v)


def model_to_dict(model: FlowModel) -> dict:
    layers = []
    for layer in model.layers:
        layers.append({
            "kind": layer.kind,
            "config": layer.config(),
            "params": {k: encode_array(v) for k, v in layer.params.items()},
        })
    spec = dict(model.spec)
    if "nu" in spec:
        spec["nu"] = _json_float(spec["nu"])
    return {
        "format": FORMAT,
        "version": VERSION,
        "input_shape": list(model.input_shape),
        "base": {"kind": model.base.kind, "nu": _json_float(model.base.nu)},
        "seed": model.seed,
        "spec": spec,
        "layers": layers,
    }


def _make_layer(rec: dict):
    kind, cfg = rec["kind"], rec.get("config", {})
    if kind == "actnorm":
        layer = ActNorm(cfg["channels"], cfg.get("initialized", False))
    elif kind == "invertible_linear":
        layer = InvertibleLinear(cfg["channels"])
        layer.perm = np.asarray(cfg["perm"], dtype=int)
    elif kind == "affine_coupling":
        layer = AffineCoupling(tuple(cfg["shape"]), cfg["parity"], cfg["hidden"], cfg["activation"])
    elif kind == "squeeze":
        layer = Squeeze()
    elif kind == "split":
        layer = Split()
    else:
        raise CheckpointError(f"unknown layer kind {kind!r}")
    params = rec.get("params", {})
    if set(params) != set(layer.params):
        raise CheckpointError(f"{kind}: expected params {sorted(layer.params)}, got {sorted(params)}")
    for name, enc in params.items():
        arr = decode_array(enc)
        if arr.shape != layer.params[name].shape:
            raise CheckpointError(f"{kind}.{name}: shape {arr.shape} != {layer.params[name].shape}")
        layer.params[name][...] = arr
    return layer


def model_from_dict(doc: dict) -> FlowModel:
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"not a {FORMAT} document")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')}")
    shape = tuple(doc["input_shape"])
    nu = doc["base"].get("nu")
    base = make_base(doc["base"]["kind"], int(np.prod(shape)), None if nu is None else float(nu))
    model = FlowModel([_make_layer(r) for r in doc["layers"]], base, shape)
    model.seed = doc.get("seed")
    spec = dict(doc.get("spec", {}))
    if isinstance(spec.get("nu"), str):
        spec["nu"] = float(spec["nu"])
    model.spec = spec
    return model


def save_model(model: FlowModel, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n")
    return path


def load_model(path) -> FlowModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise CheckpointError(f"{path}: invalid JSON at char {err.pos}: {err.msg}") from None
    return model_from_dict(doc)
