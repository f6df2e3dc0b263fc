"""Versioned binary checkpoint container.

Layout (all little-endian):
  magic ``COEV`` | version u32 | config block (u32 length + utf8 key=value
  lines) | parameter records | template records | optimizer records |
  step u64 | crc32 u32 over everything before it.

A record is: name (u32 length + utf8), rank u32, extents u32 each, raw
float64 data. Records are sorted by name inside each section, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .body import BodyTemplate
from .config import RunConfig, dump_config, parse_config_text
from .errors import IntegrityError

MAGIC = b"COEV"
VERSION = 1

_TEMPLATE_ARRAYS = ("parents", "rest_joints", "template_vertices", "skin_weights",
                    "shape_dirs", "expr_dirs", "faces", "face_regions",
                    "mask_face", "mask_lhand", "mask_rhand")


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    template: BodyTemplate
    optim: dict[str, np.ndarray]   # m/<name>, v/<name>
    step: int
    version: int = VERSION


def _write_record(buf: bytearray, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype=np.float64)
    nb = name.encode("utf-8")
    buf += struct.pack("<I", len(nb))
    buf += nb
    buf += struct.pack("<I", data.ndim)
    for ext in data.shape:
        buf += struct.pack("<I", ext)
    buf += data.tobytes()


def _write_section(buf: bytearray, records: dict[str, np.ndarray]) -> None:
    buf += struct.pack("<I", len(records))
    for name in sorted(records):
        _write_record(buf, name, records[name])


def _template_records(template: BodyTemplate) -> dict[str, np.ndarray]:
    return {
        "parents": template.parents.astype(np.float64),
        "rest_joints": template.rest_joints,
        "template_vertices": template.template_vertices,
        "skin_weights": template.skin_weights,
        "shape_dirs": template.shape_dirs,
        "expr_dirs": template.expr_dirs,
        "faces": template.faces.astype(np.float64),
        "face_regions": template.face_regions.astype(np.float64),
        "mask_face": template.part_vertex_masks["face"].astype(np.float64),
        "mask_lhand": template.part_vertex_masks["lhand"].astype(np.float64),
        "mask_rhand": template.part_vertex_masks["rhand"].astype(np.float64),
    }


def _template_from_records(rec: dict[str, np.ndarray]) -> BodyTemplate:
    missing = [k for k in _TEMPLATE_ARRAYS if k not in rec]
    if missing:
        raise IntegrityError(f"template block missing arrays: {missing}")
    return BodyTemplate(
        parents=rec["parents"].astype(np.int64),
        rest_joints=rec["rest_joints"],
        template_vertices=rec["template_vertices"],
        skin_weights=rec["skin_weights"],
        shape_dirs=rec["shape_dirs"],
        expr_dirs=rec["expr_dirs"],
        faces=rec["faces"].astype(np.int64),
        face_regions=rec["face_regions"].astype(np.int64),
        part_vertex_masks={
            "face": rec["mask_face"].astype(bool),
            "lhand": rec["mask_lhand"].astype(bool),
            "rhand": rec["mask_rhand"].astype(bool),
        },
    )


def serialize(ckpt: Checkpoint) -> bytes:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", ckpt.version)
    cfg = dump_config(ckpt.config).encode("utf-8")
    buf += struct.pack("<I", len(cfg))
    buf += cfg
    _write_section(buf, ckpt.params)
    _write_section(buf, _template_records(ckpt.template))
    _write_section(buf, ckpt.optim)
    buf += struct.pack("<Q", ckpt.step)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    return bytes(buf)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IntegrityError(
                f"truncated checkpoint: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def record(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u32()
        if rank > 16:
            raise IntegrityError(f"implausible tensor rank {rank} at offset {self.pos}")
        shape = tuple(self.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).copy()
        return name, arr

    def section(self) -> dict[str, np.ndarray]:
        return dict(self.record() for _ in range(self.u32()))


def deserialize(data: bytes) -> Checkpoint:
    if len(data) < 12:
        raise IntegrityError(f"checkpoint too short ({len(data)} bytes)")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise IntegrityError(
            f"checksum mismatch over {len(data) - 4} payload bytes")
    reader = _Reader(data[:-4])
    if reader.take(4) != MAGIC:
        raise IntegrityError("bad magic bytes: not a checkpoint file")
    version = reader.u32()
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version} "
                             f"(this build reads version {VERSION})")
    config = parse_config_text(reader.take(reader.u32()).decode("utf-8"))
    params = reader.section()
    template = _template_from_records(reader.section())
    optim = reader.section()
    step = reader.u64()
    if reader.pos != len(reader.data):
        raise IntegrityError(f"{len(reader.data) - reader.pos} trailing bytes "
                             f"after offset {reader.pos}")
    return Checkpoint(config=config, params=params, template=template,
                      optim=optim, step=step, version=version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IntegrityError(f"cannot read checkpoint: {exc}") from exc
    return deserialize(data)
