"""Binary split/checkpoint formats, the dataset manifest, and JSON reports.

Split file (little-endian)::

    b"CTTPDS01" | u32 record_count | u32 H | u32 W
    per record: u32 tool_id | u32 grasp_id | f32 y, z, theta, depth
                | f32[3*H*W] gel | f32[H*W] membrane

Checkpoint file (little-endian)::

    b"CTTPCK01" | u32 tensor_count
    per tensor: u16 name_len | utf-8 name | u8 ndim | u32 dims[ndim] | f32 payload
    u64 checksum = sum of all payload bytes mod 2**64
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPLIT_MAGIC = b"CTTPDS01"
CKPT_MAGIC = b"CTTPCK01"
SPLIT_HEADER = 20
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


def _record_dtype(h: int, w: int) -> np.dtype:
    return np.dtype([
        ("tool_id", "<u4"), ("grasp_id", "<u4"), ("pose", "<f4", (4,)),
        ("gel", "<f4", (3, h, w)), ("membrane", "<f4", (1, h, w)),
    ])


@dataclass
class SplitData:
    """Column-wise container for a split: one row per paired record."""

    tool_ids: np.ndarray   # (n,) uint32
    grasp_ids: np.ndarray  # (n,) uint32
    poses: np.ndarray      # (n, 4) float32: y, z, theta, depth
    gel: np.ndarray        # (n, 3, H, W) float32
    membrane: np.ndarray   # (n, 1, H, W) float32

    def __len__(self):
        return len(self.tool_ids)

    @property
    def hw(self):
        return self.gel.shape[2], self.gel.shape[3]

    def frames(self, sensor: str) -> np.ndarray:
        if sensor == "gel":
            return self.gel
        if sensor == "membrane":
            return self.membrane
        raise ValueError(f"unknown sensor {sensor!r}")

    @classmethod
    def empty(cls, h=32, w=32):
        return cls(np.zeros(0, np.uint32), np.zeros(0, np.uint32), np.zeros((0, 4), np.float32),
                   np.zeros((0, 3, h, w), np.float32), np.zeros((0, 1, h, w), np.float32))

    @classmethod
    def from_records(cls, records):
        if not records:
            return cls.empty()
        shapes = {r.gel.data.shape[1:] for r in records} | {r.membrane.data.shape[1:] for r in records}
        if len(shapes) != 1:
            raise ValueError(f"records are not homogeneous in H, W: {sorted(shapes)}")
        return cls(
            np.array([r.grasp.tool_id for r in records], dtype=np.uint32),
            np.array([r.grasp.grasp_id for r in records], dtype=np.uint32),
            np.array([[r.grasp.y, r.grasp.z, r.grasp.theta, r.grasp.depth] for r in records], dtype=np.float32),
            np.stack([r.gel.data for r in records]).astype(np.float32),
            np.stack([r.membrane.data for r in records]).astype(np.float32),
        )

    def subset(self, idx):
        return SplitData(self.tool_ids[idx], self.grasp_ids[idx], self.poses[idx],
                         self.gel[idx], self.membrane[idx])


def split_to_bytes(split: SplitData) -> bytes:
    n = len(split)
    h, w = split.hw
    rec = np.zeros(n, dtype=_record_dtype(h, w))
    rec["tool_id"] = split.tool_ids
    rec["grasp_id"] = split.grasp_ids
    rec["pose"] = split.poses
    rec["gel"] = split.gel
    rec["membrane"] = split.membrane
    return SPLIT_MAGIC + struct.pack("<III", n, h, w) + rec.tobytes()


def split_from_bytes(buf: bytes) -> SplitData:
    if len(buf) < SPLIT_HEADER:
        raise TruncatedFileError(f"split file truncated: {len(buf)} bytes is shorter than the header")
    if buf[:8] != SPLIT_MAGIC:
        raise BadMagicError(f"bad magic {buf[:8]!r}, expected {SPLIT_MAGIC!r}")
    n, h, w = struct.unpack_from("<III", buf, 8)
    dt = _record_dtype(h, w)
    expected = SPLIT_HEADER + n * dt.itemsize
    if len(buf) < expected:
        raise TruncatedFileError(f"split file truncated: {len(buf)} bytes, header implies {expected}")
    if len(buf) > expected:
        raise CountMismatchError(f"split file has {len(buf) - expected} trailing bytes beyond {n} records")
    rec = np.frombuffer(buf, dtype=dt, count=n, offset=SPLIT_HEADER)
    return SplitData(rec["tool_id"].astype(np.uint32), rec["grasp_id"].astype(np.uint32),
                     rec["pose"].astype(np.float32), rec["gel"].astype(np.float32),
                     rec["membrane"].astype(np.float32))


def write_split(path, split: SplitData):
    atomic_write_bytes(path, split_to_bytes(split))


def read_split(path, expected_count: int | None = None) -> SplitData:
    split = split_from_bytes(Path(path).read_bytes())
    if expected_count is not None and len(split) != expected_count:
        raise CountMismatchError(f"{path}: header count {len(split)} != manifest count {expected_count}")
    return split


def read_split_header(path):
    with open(path, "rb") as fh:
        head = fh.read(SPLIT_HEADER)
    if len(head) < SPLIT_HEADER:
        raise TruncatedFileError(f"{path}: truncated header")
    if head[:8] != SPLIT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {head[:8]!r}")
    return struct.unpack_from("<III", head, 8)


# ----------------------------------------------------------------- checkpoints

def checkpoint_to_bytes(tensors: dict) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    checksum = 0
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr), dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} cannot be encoded")
        payload = np.ascontiguousarray(arr).tobytes()
        checksum += int(np.frombuffer(payload, dtype=np.uint8).sum(dtype=np.uint64))
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), payload]
    parts.append(struct.pack("<Q", checksum % 2**64))
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> dict:
    if len(buf) < 12:
        raise TruncatedFileError("checkpoint truncated")
    if buf[:8] != CKPT_MAGIC:
        raise BadMagicError(f"bad magic {buf[:8]!r}, expected {CKPT_MAGIC!r}")
    (count,) = struct.unpack_from("<I", buf, 8)
    off = 12
    out = {}
    checksum = 0
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = 4 * math.prod(dims)
            if off + size > len(buf):
                raise TruncatedFileError(f"checkpoint truncated inside tensor {name!r}")
            payload = buf[off:off + size]
            off += size
            checksum += int(np.frombuffer(payload, dtype=np.uint8).sum(dtype=np.uint64))
            if name in out:
                raise FormatError(f"duplicate tensor name {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        (stored,) = struct.unpack_from("<Q", buf, off)
    except struct.error as exc:
        raise TruncatedFileError(f"checkpoint truncated: {exc}") from None
    if off + 8 != len(buf):
        raise CountMismatchError(f"checkpoint has {len(buf) - off - 8} trailing bytes")
    if stored != checksum % 2**64:
        raise ChecksumError(f"checkpoint checksum mismatch: stored {stored}, computed {checksum % 2**64}")
    return out


def save_checkpoint(tensors: dict, path):
    if len(set(tensors)) != len(tensors):
        raise FormatError("duplicate tensor names")
    atomic_write_bytes(path, checkpoint_to_bytes(tensors))


def load_checkpoint(path) -> dict:
    return checkpoint_from_bytes(Path(path).read_bytes())


# ----------------------------------------------------------------- manifest

def split_filename(name: str) -> str:
    return f"{name}.bin"


def write_dataset(out_dir, splits: dict, cfg) -> dict:
    from . import sensorsim

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split_table = []
    h = w = sensorsim.FRAME_SIZE
    for name, split in splits.items():
        fname = split_filename(name)
        write_split(out / fname, split)
        split_table.append({"name": name, "file": fname, "count": len(split)})
        if len(split):
            h, w = split.hw
    params = sensorsim.sensor_parameters()
    params["noise_std"] = {"gel": cfg.noise_std, "membrane": cfg.noise_std}
    manifest = {
        "version": FORMAT_VERSION,
        "seed": cfg.seed,
        "image_size": [h, w],
        "tools": [{"id": t.id, "name": t.name, "sdf": t.sdf_spec,
                   "heldout": t.id in cfg.heldout_tools} for t in sensorsim.TOOLS],
        "splits": split_table,
        "sensor": params,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {data_dir}")
    manifest = json.loads(path.read_text())
    for entry in manifest["splits"]:
        fpath = Path(data_dir) / entry["file"]
        if not fpath.exists():
            raise FileNotFoundError(f"manifest references missing split file {fpath}")
        n, _, _ = read_split_header(fpath)
        if n != entry["count"]:
            raise CountMismatchError(f"{fpath}: header count {n} != manifest count {entry['count']}")
    return manifest


def load_dataset(data_dir, names=None) -> dict:
    manifest = read_manifest(data_dir)
    out = {}
    for entry in manifest["splits"]:
        if names is None or entry["name"] in names:
            out[entry["name"]] = read_split(Path(data_dir) / entry["file"], entry["count"])
    missing = set(names or ()) - set(out)
    if missing:
        raise FileNotFoundError(f"dataset {data_dir} lacks splits: {sorted(missing)}")
    return out


# ----------------------------------------------------------------- reports

def summarize(values) -> dict:
    """Arithmetic mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std(ddof=0))}


def class_entry(method, regime, correct: int, total: int, **extra) -> dict:
    return {"task": "class", "method": method, **regime, "top1": correct / total,
            "correct": int(correct), "total": int(total), **extra}


def pose_entry(method, regime, errors, tol_mm=3.0, tol_deg=5.0, **extra) -> dict:
    """``errors``: (n, 3) signed errors in (mm, mm, deg)."""
    e = np.asarray(errors, dtype=np.float64)
    trans_ok = (np.abs(e[:, 0]) <= tol_mm) & (np.abs(e[:, 1]) <= tol_mm)
    return {"task": "pose", "method": method, **regime,
            "y": summarize(e[:, 0]), "z": summarize(e[:, 1]), "theta": summarize(e[:, 2]),
            "within_3mm": float(trans_ok.mean()),
            "within_5deg": float((np.abs(e[:, 2]) <= tol_deg).mean()),
            "n": int(len(e)), **extra}


def emit_report(results: list, meta: dict | None = None) -> dict:
    """Bundle result entries into a report dict (``std`` is population std)."""
    if not results:
        raise ValueError("emit_report: empty result set")
    for r in results:
        if "task" not in r:
            raise ValueError(f"result entry without a task: {r}")
    return {"schema": "cttp-report/1", "std": "population", **(meta or {}), "results": results}


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def ensure_empty_dir(path, force: bool):
    p = Path(path)
    if p.exists() and any(p.iterdir()) and not force:
        raise FileExistsError(f"{p} exists and is not empty (use --force)")
    p.mkdir(parents=True, exist_ok=True)
    return p


def atomic_write_bytes(path, data: bytes):
    """Write via a sibling temp file so readers never see a partial file."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
