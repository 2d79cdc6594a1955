"""Binary checkpoint serialization for model graphs.

Layout (all integers little-endian):

    8 bytes   magic "GPDCKPT\\0"
    u32       format version
    u32       metadata byte length, then UTF-8 "key=value\\n" lines
    u32       tensor count
    per tensor:
        u16   name byte length, then UTF-8 name
        u8    ndim, then ndim x u32 dims
        u64   payload byte length, then float64 little-endian values
    u32       CRC-32 over everything above

The checksum is validated against the whole payload before any tensor is
interpreted, and loads reproduce every tensor bit-exactly.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib

import numpy as np

from .errors import CheckpointError
from .expand import DualBNState, ExpandedBlock, ExpansionPlan, expand_model
from .model import BNParams, ConvWeight, ModelGraph, WEIGHT_KINDS, build_student

MAGIC = b"GPDCKPT\x00"
VERSION = 1


def _named_tensors(m: ModelGraph):
    """Every persisted array: trainable leaves plus statistics buffers."""
    for i, prm in enumerate(m.params):
        name = f"layer{i}"
        if prm is None:
            continue
        if isinstance(prm, ConvWeight):
            yield f"{name}.kernel", prm.kernel.data
            if prm.bias is not None:
                yield f"{name}.bias", prm.bias.data
        elif isinstance(prm, BNParams):
            yield f"{name}.gamma", prm.gamma.data
            yield f"{name}.beta", prm.beta.data
            yield f"{name}.running_mean", prm.running_mean
            yield f"{name}.running_var", prm.running_var
        elif isinstance(prm, DualBNState):
            yield f"{name}.gamma", prm.gamma.data
            yield f"{name}.beta", prm.beta.data
            yield f"{name}.teacher_mean", prm.teacher_mean
            yield f"{name}.teacher_var", prm.teacher_var
            yield f"{name}.student_mean", prm.student_mean
            yield f"{name}.student_var", prm.student_var
        elif isinstance(prm, ExpandedBlock):
            for m_idx, stack in enumerate(prm.branches):
                for j, cw in enumerate(stack):
                    yield f"{name}.branch{m_idx}.conv{j}.kernel", cw.kernel.data
                    if cw.bias is not None:
                        yield f"{name}.branch{m_idx}.conv{j}.bias", cw.bias.data
            for m_idx, s in enumerate(prm.scales):
                yield f"{name}.scale{m_idx}", s.data


def _metadata(m: ModelGraph) -> dict:
    return {
        "arch": m.arch,
        "input_shape": "x".join(str(d) for d in m.input_shape),
        "classes": str(m.classes),
        "ratio": str(m.ratio),
        "branches": str(m.branches),
        "ir_mode": m.ir_mode,
        "epsilon": repr(m.epsilon),
        "seed": str(m.seed),
    }


def save(m: ModelGraph, path: str) -> None:
    """Serialize a model; the file is written atomically (temp + rename)."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta = "".join(f"{k}={v}\n" for k, v in _metadata(m).items()).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)

    tensors = list(_named_tensors(m))
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)

    blob = b"".join(parts)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path: str) -> ModelGraph:
    """Read and validate a checkpoint, rebuilding the full model graph."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"file too short to be a checkpoint ({len(blob)} bytes)")
    body, trailer = blob[:-4], blob[-4:]
    (stored_crc,) = struct.unpack("<I", trailer)
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")

    r = _Reader(body)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"bad magic at offset 0, not a checkpoint: {path}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")

    (meta_len,) = r.unpack("<I")
    meta = {}
    for line in r.take(meta_len).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value

    tensors = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        arr = np.frombuffer(r.take(nbytes), dtype="<f8").reshape(shape)
        tensors[name] = np.ascontiguousarray(arr)
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after tensor table")

    return _rebuild(meta, tensors)


def _rebuild(meta: dict, tensors: dict) -> ModelGraph:
    try:
        input_shape = tuple(int(d) for d in meta["input_shape"].split("x"))
        m = build_student(meta["arch"], input_shape, int(meta["classes"]), seed=int(meta["seed"]))
        ratio, branches = int(meta["ratio"]), int(meta["branches"])
        if ratio * branches > 1:
            plan = ExpansionPlan(ratio=ratio, branches=branches,
                                 epsilon=float(meta["epsilon"]),
                                 ir_mode=meta["ir_mode"], seed=int(meta["seed"]))
            m = expand_model(m, plan)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"invalid checkpoint metadata: {exc}") from exc

    expected = dict(_named_tensors(m))
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))[:3]
        extra = sorted(set(tensors) - set(expected))[:3]
        raise CheckpointError(f"tensor table mismatch (missing {missing}, extra {extra})")
    for name, arr in expected.items():
        if tensors[name].shape != arr.shape:
            raise CheckpointError(
                f"tensor '{name}' has shape {tensors[name].shape}, expected {arr.shape}"
            )
        arr[:] = tensors[name]
    return m
