"""Self-describing model checkpoints.

Layout, all integers little-endian::

    b"UAVC" | u32 version | u32 header length | JSON header | tensor payloads

The JSON header holds the model config, the seed and one entry per tensor
(``name``, ``shape``, ``dtype``, ``nbytes``) in payload order. Keys are
sorted so identical models serialise to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import _Reader
from .errors import FormatError, ShapeError
from .model import UAVM, ModelConfig, UAVMParams, parameter_shapes
from .tensor import Tensor

MAGIC = b"UAVC"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def dumps_checkpoint(model: UAVM) -> bytes:
    entries, payloads = [], []
    for name, t in model.params.named().items():
        dtype = np.dtype(t.data.dtype).name
        if dtype not in _DTYPES:
            raise FormatError(f"tensor {name} has unsupported dtype {dtype}")
        raw = np.ascontiguousarray(t.data, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(t.data.shape), "dtype": dtype, "nbytes": len(raw)})
        payloads.append(raw)
    header = json.dumps(
        {"config": model.config.to_dict(), "seed": int(model.seed), "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + b"".join(payloads)


def save_checkpoint(model: UAVM, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps_checkpoint(model))
    return path


def loads_checkpoint(data: bytes) -> UAVM:
    """Parse and validate a checkpoint.

    Truncation and non-finite payloads raise :class:`FormatError` with the byte
    offset; tensors whose shape disagrees with the stored config raise
    :class:`ShapeError`.
    """
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes, not a UAVC checkpoint", 0)
    version, hlen = r.unpack("<II", "header prefix")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    try:
        header = json.loads(r.take(hlen, "JSON header").decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        seed = int(header["seed"])
        entries = header["tensors"]
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"malformed checkpoint header: {e}", 12) from None
    expected = {f"{g}/{n}": tuple(s) for g, shapes in parameter_shapes(config).items() for n, s in shapes.items()}
    groups: dict = {"theta_a": {}, "theta_v": {}, "theta_s": {}}
    for e in entries:
        name, shape, dtype = e["name"], tuple(e["shape"]), e["dtype"]
        if name not in expected:
            raise ShapeError(f"checkpoint tensor {name} is not part of the configured model")
        if shape != expected[name]:
            raise ShapeError(f"tensor {name}: stored shape {shape} does not match configured shape {expected[name]}")
        if dtype not in _DTYPES:
            raise FormatError(f"tensor {name}: unsupported dtype {dtype}", r.pos)
        at = r.pos
        arr = np.frombuffer(r.take(int(e["nbytes"]), f"payload of {name}"), dtype=_DTYPES[dtype])
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"tensor {name}: payload holds {arr.size} values, shape {shape} needs {int(np.prod(shape))}")
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"non-finite value in payload of {name}", at)
        group, leaf = name.split("/", 1)
        arr = arr.reshape(shape).astype(dtype)
        groups[group][leaf] = Tensor(arr, requires_grad=True, dtype=arr.dtype, name=name)
    missing = sorted(set(expected) - {e["name"] for e in entries})
    if missing:
        raise ShapeError(f"checkpoint lacks tensors: {', '.join(missing[:5])}")
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last tensor", r.pos)
    return UAVM(config, UAVMParams(**groups), seed)


def load_checkpoint(path) -> UAVM:
    return loads_checkpoint(Path(path).read_bytes())
