"""Binary model files.

Layout (all integers little-endian)::

    b"CSKN"                      magic
    uint32                       format version (1)
    uint32                       byte length N of the descriptor
    N bytes                      UTF-8 JSON descriptor: architecture plus metadata
    float64[...]                 tensors, little-endian, C order

Tensor order: for each layer in depth order, the first frequency bank
(``omega`` or ``filters``), the second bank when the layer has one, then the
phase vector; finally the readout ``W`` of shape ``(d_L, K)``. Shapes are
implied by the architecture.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .features import (ConvLayerParams, ConvSpec, DenseLayerParams, DenseSpec, NetworkArchitecture,
                       Variant)
from .training import ModelState

MAGIC = b"CSKN"
VERSION = 1


class ModelFormatError(ValueError):
    pass


def arch_to_dict(arch: NetworkArchitecture) -> dict:
    layers = []
    for s in arch.layers:
        if isinstance(s, ConvSpec):
            layers.append({"type": "conv", "out_channels": s.out_channels, "filter_size": list(s.filter_size)})
        else:
            layers.append({"type": "dense", "width": s.width})
    return {"input_shape": list(arch.input_shape), "layers": layers,
            "variant": arch.variant.value, "output_dim": arch.output_dim}


def arch_from_dict(d: dict) -> NetworkArchitecture:
    layers = []
    for s in d["layers"]:
        if s["type"] == "conv":
            layers.append(ConvSpec(s["out_channels"], tuple(s["filter_size"])))
        elif s["type"] == "dense":
            layers.append(DenseSpec(s["width"]))
        else:
            raise ModelFormatError(f"unknown layer type {s['type']!r}")
    return NetworkArchitecture(tuple(d["input_shape"]), tuple(layers), Variant(d["variant"]), d["output_dim"])


def _layer_tensors(p):
    if isinstance(p, ConvLayerParams):
        banks = [p.filters, p.filters_prime]
    else:
        banks = [p.omega, p.omega_prime]
    return [b for b in banks if b is not None] + [p.phase]


def save_model(path, state: ModelState, meta: dict | None = None) -> None:
    desc = {"arch": arch_to_dict(state.arch), "step_count": state.step_count, "meta": meta or {}}
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        for p in state.layer_params:
            for t in _layer_tensors(p):
                f.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(state.W, dtype="<f8").tobytes())


def load_model(path) -> tuple[ModelState, dict]:
    """Returns ``(state, meta)``; rejects unknown magic or version and trailing bytes."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ModelFormatError("not a CSKN model file")
    if len(data) < 12:
        raise ModelFormatError("truncated header")
    version, n = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    desc = json.loads(data[12:12 + n].decode("utf-8"))
    arch = arch_from_dict(desc["arch"])
    pos = 12 + n

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape)) * 8
        if pos + size > len(data):
            raise ModelFormatError("truncated tensor payload")
        a = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += size
        return a

    act = arch.variant.activation
    params = []
    for spec, fan_in in zip(arch.layers, arch.layer_input_dims()):
        if isinstance(spec, ConvSpec):
            shape = (fan_in, spec.out_channels, *spec.filter_size)
            width, cls = spec.out_channels, ConvLayerParams
        else:
            shape = (fan_in, spec.width)
            width, cls = spec.width, DenseLayerParams
        w = take(shape)
        w2 = None if act == "relu" else take(shape)
        params.append(cls(w, w2, take((width,)), activation=act, tied=arch.variant.tied))
    W = take((arch.feature_dim, arch.output_dim))
    if pos != len(data):
        raise ModelFormatError("trailing bytes after tensors")
    return ModelState(arch, params, W, step_count=desc.get("step_count", 0)), desc.get("meta", {})
