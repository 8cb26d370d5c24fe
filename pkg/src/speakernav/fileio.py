"""Dataset, world and checkpoint files.

Checkpoint layout (all integers little-endian)::

    b"SNAVCKPT" | u32 version | u64 header length | header (UTF-8 JSON)
    | parameter payload: each array as little-endian f64 in header order
    | 32-byte SHA-256 of everything before it

The header carries the model kind, config, ordered vocabulary, parameter
names/shapes and provenance (seeds, config hash, payload content hash).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .errors import CorruptCheckpointError, IncompatibleCheckpointError, ValidationError

MAGIC = b"SNAVCKPT"
FORMAT_VERSION = 1
RECORD_FIELDS = ("id", "graph_id", "trajectory", "instruction", "segments", "sub_paths",
                 "pseudo", "features_ref")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:12]


def atomic_write(path, data) -> Path:
    """Write bytes or text via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


# ---------------------------------------------------------------- JSONL

def write_jsonl(path, records: Iterable[dict]) -> Path:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    return atomic_write(path, text)


def read_jsonl(path, required: Sequence[str] = ()) -> List[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            missing = [f for f in required if f not in rec]
            if missing:
                raise ValidationError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            out.append(rec)
    return out


def read_records(path) -> List[dict]:
    return read_jsonl(path, RECORD_FIELDS)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, kind: str, config: dict, vocab: Sequence[str],
                    params: Dict[str, np.ndarray], provenance: dict) -> Path:
    names = list(params)
    payload = b"".join(np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names)
    header = {
        "kind": kind,
        "config": config,
        "vocab": list(vocab),
        "params": [{"name": n, "shape": list(np.shape(params[n]))} for n in names],
        "provenance": dict(provenance, content_hash=hashlib.sha256(payload).hexdigest()),
    }
    hbytes = canonical_json(header).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + payload
    return atomic_write(path, body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> dict:
    blob = Path(path).read_bytes()
    fixed = len(MAGIC) + 12
    if len(blob) < fixed + 32 or not blob.startswith(MAGIC):
        raise CorruptCheckpointError(f"{path}: not a checkpoint or truncated")
    version, hlen = struct.unpack("<IQ", blob[len(MAGIC):fixed])
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or modified)")
    try:
        header = json.loads(body[fixed:fixed + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc
    offset = fixed + hlen
    arrays = {}
    for spec in header["params"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(body):
            raise CorruptCheckpointError(f"{path}: payload shorter than header declares")
        arrays[spec["name"]] = np.frombuffer(body[offset:end], dtype="<f8").astype(np.float64) \
            .reshape(spec["shape"])
        offset = end
    if offset != len(body):
        raise CorruptCheckpointError(f"{path}: trailing bytes after payload")
    header["arrays"] = arrays
    return header
