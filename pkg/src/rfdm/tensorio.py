"""Bit-exact on-disk formats: VTENSOR1 tensors, JSONL manifests, checkpoints.

VTENSOR1 layout (all little-endian)::

    b"VTENSOR1" | u32 rank | rank x u32 dims | prod(dims) x f32 payload
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

MAGIC = b"VTENSOR1"
_U32 = struct.Struct("<I")
_MAX_DIM = 2**32 - 1


class FormatError(ValueError):
    """Malformed VTENSOR1 data; ``offset`` is the byte position of the problem."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


def encode_tensor(tensor) -> bytes:
    arr = np.asarray(tensor)
    if arr.ndim < 1:
        raise ValueError("rank must be >= 1")
    arr = arr.astype("<f4", copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to write non-finite values")
    if any(d > _MAX_DIM for d in arr.shape):
        raise ValueError("dimension does not fit in u32")
    header = MAGIC + _U32.pack(arr.ndim) + b"".join(_U32.pack(d) for d in arr.shape)
    return header + np.ascontiguousarray(arr).tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic, expected VTENSOR1", 0)
    off = len(MAGIC)
    if len(buf) < off + 4:
        raise FormatError("truncated header: missing rank", off)
    (rank,) = _U32.unpack_from(buf, off)
    off += 4
    if rank < 1:
        raise FormatError("rank must be >= 1", off - 4)
    if len(buf) < off + 4 * rank:
        raise FormatError(f"truncated header: expected {rank} dims", off)
    dims = [_U32.unpack_from(buf, off + 4 * i)[0] for i in range(rank)]
    off += 4 * rank
    count = 1
    for d in dims:
        count *= d
    if count * 4 > 2**62:
        raise FormatError(f"dims {dims} overflow payload size", len(MAGIC) + 4)
    need = count * 4
    have = len(buf) - off
    if have < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {have}", off + have)
    if have > need:
        raise FormatError(f"trailing bytes after payload ({have - need})", off + need)
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, tensor) -> None:
    atomic_write_bytes(path, encode_tensor(tensor))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# --- manifests -------------------------------------------------------------

MANIFEST_KEYS = ("id", "input_path", "target_path", "flow_path", "prompt", "meta")


def dump_record(record: dict) -> str:
    missing = [k for k in MANIFEST_KEYS if k not in record]
    if missing:
        raise ValueError(f"manifest record missing keys {missing}")
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_manifest(path, records: Iterable[dict]) -> None:
    text = "".join(dump_record(r) + "\n" for r in records)
    atomic_write_bytes(path, text.encode("utf-8"))


def read_manifest(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def validate_manifest(path, prompt_check: Callable[[list], None] | None = None) -> list[str]:
    """Return a list of problems (empty when the manifest is valid)."""
    path = Path(path)
    root = path.parent
    problems = []
    for i, rec in enumerate(read_manifest(path)):
        rid = rec.get("id", f"<line {i}>")
        for key in ("input_path", "target_path", "flow_path"):
            p = root / rec.get(key, "")
            try:
                read_tensor(p)
            except (OSError, FormatError) as e:
                problems.append(f"{rid}: {key}: {e}")
        if prompt_check is not None:
            try:
                prompt_check(rec.get("prompt"))
            except ValueError as e:
                problems.append(f"{rid}: prompt: {e}")
    return problems


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(ckpt_dir, params: dict, moments: dict, state: dict) -> None:
    """Write a checkpoint directory.

    ``params`` maps names to arrays; ``moments`` maps a moment name (e.g. ``exp_avg``)
    to a ``{param name: array}`` dict; ``state`` is JSON-serializable (step, rng, hash).
    """
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for name, arr in params.items():
        write_tensor(ckpt_dir / "params" / f"{name}.vt", arr)
    for moment, group in moments.items():
        for name, arr in group.items():
            write_tensor(ckpt_dir / moment / f"{name}.vt", arr)
    index = {"params": sorted(params), "moments": {m: sorted(g) for m, g in moments.items()}}
    atomic_write_bytes(ckpt_dir / "index.json", _canonical_json(index))
    atomic_write_bytes(ckpt_dir / "state.json", _canonical_json(state))


def load_checkpoint(ckpt_dir):
    ckpt_dir = Path(ckpt_dir)
    if not (ckpt_dir / "index.json").is_file():
        raise FileNotFoundError(f"no checkpoint at {ckpt_dir}")
    index = json.loads((ckpt_dir / "index.json").read_text())
    params = {n: read_tensor(ckpt_dir / "params" / f"{n}.vt") for n in index["params"]}
    moments = {
        m: {n: read_tensor(ckpt_dir / m / f"{n}.vt") for n in names}
        for m, names in index["moments"].items()
    }
    state = json.loads((ckpt_dir / "state.json").read_text())
    return params, moments, state


def _canonical_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode("utf-8")
