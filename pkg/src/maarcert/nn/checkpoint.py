"""Portable text checkpoints.

JSON document with layer kinds, shapes, row-major parameters written as
shortest round-trip decimal literals, freeze flags and the seed. Writing a
loaded checkpoint reproduces the original bytes.
"""
from __future__ import annotations

import json
import os

import numpy as np

from ..errors import CheckpointError, FormatError
from .network import Conv, Dense, LayeredNetwork, ReLU

FORMAT = "maarcert-network/1"


def _array(a: np.ndarray) -> dict:
    if not np.all(np.isfinite(a)):
        raise FormatError("refusing to serialise non-finite parameters")
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _unarray(d: dict) -> np.ndarray:
    shape = tuple(int(s) for s in d["shape"])
    data = np.asarray(d["data"], dtype=np.float64)
    if data.size != int(np.prod(shape)):
        raise FormatError(f"array data length {data.size} does not match shape {shape}")
    return data.reshape(shape)


def network_to_dict(net: LayeredNetwork, meta: dict | None = None) -> dict:
    layers = []
    for layer in net.layers:
        entry = {"kind": layer.kind, "frozen": bool(layer.frozen)}
        if layer.kind == "dense":
            entry["weight"] = _array(layer.weight)
            entry["bias"] = _array(layer.bias)
        elif layer.kind == "conv":
            entry["stride"] = int(layer.stride)
            entry["padding"] = int(layer.padding)
            entry["weight"] = _array(layer.kernel)
            entry["bias"] = _array(layer.bias)
        layers.append(entry)
    return {
        "format": FORMAT,
        "seed": net.seed,
        "input_shape": list(net.input_shape),
        "layers": layers,
        "meta": meta or {},
    }


def network_from_dict(doc: dict) -> LayeredNetwork:
    if doc.get("format") != FORMAT:
        raise FormatError(f"unsupported checkpoint format {doc.get('format')!r}")
    layers = []
    for entry in doc["layers"]:
        kind = entry["kind"]
        if kind == "dense":
            layer = Dense(_unarray(entry["weight"]), _unarray(entry["bias"]), frozen=entry["frozen"])
        elif kind == "conv":
            layer = Conv(
                _unarray(entry["weight"]),
                _unarray(entry["bias"]),
                stride=entry["stride"],
                padding=entry["padding"],
                frozen=entry["frozen"],
            )
        elif kind == "relu":
            layer = ReLU(frozen=entry["frozen"])
        else:
            raise FormatError(f"unknown layer kind {kind!r}")
        layers.append(layer)
    return LayeredNetwork(layers, tuple(doc["input_shape"]), seed=doc.get("seed"))


def dumps(net: LayeredNetwork, meta: dict | None = None) -> str:
    return json.dumps(network_to_dict(net, meta), indent=1, sort_keys=True) + "\n"


def loads(text: str) -> LayeredNetwork:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint is not valid JSON: {exc}") from exc
    return network_from_dict(doc)


def load_meta(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh).get("meta", {})


def save(net: LayeredNetwork, path, meta: dict | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(net, meta))


def load(path) -> LayeredNetwork:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
