"""MOGD1 checkpoint container.

Layout (all integers little-endian):

    b"MOGD1"  u32 version  u32 meta_len  meta (UTF-8 JSON)
    u32 n_segments
    per segment:  u16 name_len  name  u32 n_tensors
      per tensor: u16 name_len  name  u32 ndim  u32 dims[ndim]  f64 data[prod(dims)]

Tensor data is stored row-major as float64 whatever the working precision.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig

MAGIC = b"MOGD1"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _write_str(buf, s):
    b = s.encode("utf-8")
    buf.write(struct.pack("<H", len(b)))
    buf.write(b)


def _read_str(buf):
    (n,) = struct.unpack("<H", _read(buf, 2))
    return _read(buf, n).decode("utf-8")


def _read(buf, n):
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError("checkpoint truncated")
    return b


def encode_segment(named_arrays) -> bytes:
    buf = io.BytesIO()
    named_arrays = list(named_arrays)
    buf.write(struct.pack("<I", len(named_arrays)))
    for name, arr in named_arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        _write_str(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def segment_bytes(module) -> bytes:
    return encode_segment((n, p.data) for n, p in module.named_parameters())


def write_container(path, meta: dict, segments: dict):
    buf = io.BytesIO()
    buf.write(MAGIC)
    m = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<II", VERSION, len(m)))
    buf.write(m)
    buf.write(struct.pack("<I", len(segments)))
    for name, named_arrays in segments.items():
        _write_str(buf, name)
        buf.write(encode_segment(named_arrays))
    Path(path).write_bytes(buf.getvalue())


def read_container(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {path}")
    buf = io.BytesIO(path.read_bytes())
    if _read(buf, 5) != MAGIC:
        raise CheckpointError(f"{path} is not a MOGD1 checkpoint")
    version, mlen = struct.unpack("<II", _read(buf, 8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(_read(buf, mlen).decode("utf-8"))
    (nseg,) = struct.unpack("<I", _read(buf, 4))
    segments = {}
    for _ in range(nseg):
        seg = _read_str(buf)
        (nt,) = struct.unpack("<I", _read(buf, 4))
        arrays = {}
        for _ in range(nt):
            name = _read_str(buf)
            (ndim,) = struct.unpack("<I", _read(buf, 4))
            shape = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(_read(buf, 8 * count), dtype="<f8").reshape(shape).copy()
        segments[seg] = arrays
    return meta, segments


def save_model(path, model, meta=None, extra_segments=None):
    meta = dict(meta or {})
    meta.update(config=model.cfg.to_dict(), dtype=np.dtype(model.dtype).name, seed=model.seed,
                rsa=model.rsa is not None, amg=model.amg is not None)
    segs = {name: [(n, p.data) for n, p in mod.named_parameters()]
            for name, mod in model.segments().items()}
    segs.update(extra_segments or {})
    write_container(path, meta, segs)


def load_model(path):
    """Rebuild a MoGenModel; returns (model, meta, segments)."""
    from .model import MoGenModel

    meta, segments = read_container(path)
    cfg = ModelConfig.from_dict(meta["config"])
    model = MoGenModel(cfg, seed=meta.get("seed", 0), rsa=meta["rsa"], amg=meta["amg"],
                       dtype=np.dtype(meta["dtype"]))
    for seg, mod in model.segments().items():
        stored = segments.get(seg)
        if stored is None:
            raise CheckpointError(f"checkpoint lacks segment {seg!r}")
        for name, p in mod.named_parameters():
            if name not in stored:
                raise CheckpointError(f"segment {seg!r} lacks tensor {name!r}")
            if stored[name].shape != p.data.shape:
                raise CheckpointError(f"{seg}.{name}: shape {stored[name].shape} != {p.data.shape}")
            p.data = stored[name].astype(model.dtype)
    return model, meta, segments
