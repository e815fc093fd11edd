"""Versioned binary checkpoint: magic, JSON config/state blob, then named
little-endian f64 tables for parameters and both optimizer moments."""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError

CHECKPOINT_MAGIC = b"TADC"
CHECKPOINT_VERSION = 1


def _pack_table(table: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(table))]
    for name in sorted(table):
        # asarray, not ascontiguousarray: the latter would promote 0-dim
        # entries to shape (1,), and tobytes copies in C order anyway
        arr = np.asarray(table[name], dtype="<f8")
        name_b = name.encode("utf-8")
        out.append(struct.pack("<H", len(name_b)))
        out.append(name_b)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(
                f"{self.path}: truncated while reading {what} at byte "
                f"{self.pos} (need {n}, have {len(self.blob) - self.pos})"
            )
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def _read_table(r: _Reader, what: str) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I", f"{what} count")
    table = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", f"{what} name length")
        name = r.take(name_len, f"{what} name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"{what} ndim")
        shape = r.unpack(f"<{ndim}I", f"{what} shape") if ndim else ()
        n_elem = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = r.take(8 * n_elem, f"{what} payload for {name!r}")
        table[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    return table


def save_checkpoint(path: str, config: dict, state: dict,
                    params: dict[str, np.ndarray],
                    adam_m: dict[str, np.ndarray],
                    adam_v: dict[str, np.ndarray]) -> None:
    blob = json.dumps({"config": config, "state": state},
                      sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(_pack_table(params))
        fh.write(_pack_table(adam_m))
        fh.write(_pack_table(adam_v))


def load_checkpoint(path: str) -> tuple[dict, dict, dict, dict, dict]:
    """Returns (config, state, params, adam_m, adam_v)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"checkpoint {path}: {exc}") from exc
    r = _Reader(blob, path)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise DataError(
            f"{path}: bad magic {magic!r} at byte 0 (expected "
            f"{CHECKPOINT_MAGIC!r})"
        )
    (version,) = r.unpack("<H", "version")
    if version != CHECKPOINT_VERSION:
        raise DataError(
            f"{path}: unsupported checkpoint version {version} at byte 4"
        )
    (json_len,) = r.unpack("<I", "config length")
    try:
        doc = json.loads(r.take(json_len, "config blob").decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt config blob ({exc})") from exc
    params = _read_table(r, "parameter")
    adam_m = _read_table(r, "first-moment")
    adam_v = _read_table(r, "second-moment")
    if r.pos != len(blob):
        raise DataError(
            f"{path}: {len(blob) - r.pos} trailing bytes at offset {r.pos}"
        )
    return doc.get("config", {}), doc.get("state", {}), params, adam_m, adam_v
