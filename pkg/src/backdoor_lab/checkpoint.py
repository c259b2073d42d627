"""Binary model checkpoints.

Layout (all integers unsigned little-endian)::

    "ULRL" | u32 version | u32 layer count | u32 C, H, W (input shape)
    per layer: u8 kind tag | u32 extents (count fixed by kind) | f32 params

Dense and Conv2d carry two extents ``(in, out)``; ReLU, MaxPool2d and Flatten
carry none. Parameters follow in ``layer.params`` order, row-major.
"""

import struct

import numpy as np

from . import nn
from .errors import InputError

__all__ = ["model_to_bytes", "model_from_bytes", "save_model", "load_model"]

MAGIC = b"ULRL"
VERSION = 1
_N_EXTENTS = {nn.Dense.tag: 2, nn.Conv2d.tag: 2, nn.ReLU.tag: 0,
              nn.MaxPool2d.tag: 0, nn.Flatten.tag: 0}


def model_to_bytes(model):
    if model.input_shape is None:
        raise InputError("model has no input shape; cannot serialise")
    out = [MAGIC, struct.pack("<5I", VERSION, len(model.layers), *model.input_shape)]
    for layer in model.layers:
        out.append(struct.pack("<B", layer.tag))
        out.append(struct.pack(f"<{len(layer.extents)}I", *layer.extents))
        for p in layer.params:
            out.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(out)


def _build_layer(tag, extents):
    cls = nn.LAYER_KINDS[tag]
    return cls(*extents) if extents else cls()


def model_from_bytes(buf):
    if buf[:4] != MAGIC:
        raise InputError("not a checkpoint file (bad magic)")
    if len(buf) < 24:
        raise InputError("truncated checkpoint header")
    version, n_layers, c, h, w = struct.unpack_from("<5I", buf, 4)
    if version != VERSION:
        raise InputError(f"unsupported checkpoint version {version}")
    off = 24
    layers = []
    try:
        for _ in range(n_layers):
            (tag,) = struct.unpack_from("<B", buf, off)
            off += 1
            if tag not in _N_EXTENTS:
                raise InputError(f"unknown layer tag {tag}")
            k = _N_EXTENTS[tag]
            extents = struct.unpack_from(f"<{k}I", buf, off)
            off += 4 * k
            layer = _build_layer(tag, extents)
            values = []
            for p in layer.params:
                arr = np.frombuffer(buf, dtype="<f4", count=p.size, offset=off)
                values.append(arr.reshape(p.shape).astype(np.float32))
                off += 4 * p.size
            if values:
                layer.params = values
            layers.append(layer)
    except InputError:
        raise
    except (struct.error, ValueError) as exc:
        raise InputError(f"truncated checkpoint: {exc}") from None
    if off != len(buf):
        raise InputError("trailing bytes in checkpoint file")
    return nn.Model(layers, input_shape=(c, h, w))


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
