"""Versioned binary checkpoints.

Layout (little-endian):
    b"IAR1" | u32 version | u32 n | n bytes of sorted-key JSON config
    | u32 tensor count | per tensor: u16 name length, name, u8 ndim, u32 dims, f64 data
    | u32 CRC32 of everything before it

Anchors live in the JSON config as Python float reprs, which round-trip exactly, so a
loaded model rebuilds the same Nystrom factor and frequency ladder bit for bit.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .armodel import DiffusionSchedule, GeoARModel, GuidanceConfig, ModelConfig
from .georope import DTYPE, GeoRoPEConfig

MAGIC = b"IAR1"
VERSION = 1


class CheckpointError(ValueError):
    """Bad magic, unsupported version, truncation or checksum mismatch."""


@dataclass
class Checkpoint:
    model: GeoARModel
    schedule: DiffusionSchedule
    guidance: GuidanceConfig


def _config_doc(model: GeoARModel, schedule: DiffusionSchedule, guidance: GuidanceConfig) -> dict:
    geo = asdict(model.geo)
    geo["anchors"] = [list(a) for a in model.geo.anchors]
    cfg = asdict(model.cfg)
    cfg["elements"], cfg["class_ids"] = list(cfg["elements"]), list(cfg["class_ids"])
    return {"geo": geo, "model": cfg, "schedule": asdict(schedule), "guidance": asdict(guidance)}


def save_checkpoint(
    model: GeoARModel, schedule: DiffusionSchedule | None = None, guidance: GuidanceConfig | None = None
) -> bytes:
    schedule = schedule or DiffusionSchedule()
    guidance = guidance or GuidanceConfig()
    doc = json.dumps(_config_doc(model, schedule, guidance), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(doc)), doc]
    params = list(model.named_parameters())
    parts.append(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode()
        data = p.detach().to(DTYPE).contiguous().numpy()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(data: bytes) -> Checkpoint:
    data = bytes(data)
    if len(data) < len(MAGIC) + 12:
        raise CheckpointError("checkpoint is truncated")
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch (corrupted or truncated checkpoint)")

    r = _Reader(body)
    r.take(8)
    (n,) = r.unpack("<I")
    try:
        doc = json.loads(r.take(n))
        geo_doc = dict(doc["geo"])
        geo_doc["anchors"] = tuple(tuple(a) for a in geo_doc["anchors"])
        geo = GeoRoPEConfig(**geo_doc)
        cfg = ModelConfig(**doc["model"])
        schedule = DiffusionSchedule(**doc["schedule"])
        guidance = GuidanceConfig(**doc["guidance"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid checkpoint config: {exc}") from exc

    model = GeoARModel(geo, cfg)
    params = dict(model.named_parameters())
    (count,) = r.unpack("<I")
    if count != len(params):
        raise CheckpointError(f"expected {len(params)} tensors, found {count}")
    with torch.no_grad():
        for expected in params:
            (ln,) = r.unpack("<H")
            name = r.take(ln).decode()
            if name != expected:
                raise CheckpointError(f"tensor {name!r} out of order (expected {expected!r})")
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I")
            if tuple(shape) != tuple(params[name].shape):
                raise CheckpointError(f"shape mismatch for {name}")
            raw = r.take(8 * int(np.prod(shape, dtype=np.int64)))
            params[name].copy_(torch.from_numpy(np.frombuffer(raw, dtype="<f8").reshape(shape).copy()))
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensors")
    return Checkpoint(model, schedule, guidance)


def write_checkpoint(path, model, schedule=None, guidance=None) -> None:
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(model, schedule, guidance))


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())
