"""Binary containers for checkpoints and textual feature files.

Checkpoint layout::

    b"XDRCKPT1" | uint64 header length | JSON header | raw array blocks

The header lists every block (name, dtype, shape) in file order together with
the model kind, the echoed configuration and the seed. Arrays are stored
little-endian, row-major. JSON is written with sorted keys so identical state
produces identical bytes.

Feature file layout::

    b"XDRFEAT1" | (uint64 rows, uint64 cols, float32 data) for E, then for F
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"XDRCKPT1"
FEAT_MAGIC = b"XDRFEAT1"


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def save_checkpoint(path, kind: str, arrays: dict, config: dict, seed, meta=None) -> None:
    blocks = []
    payload = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blocks.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape)})
        payload.append(le.tobytes(order="C"))
    header = {
        "kind": kind,
        "config": config,
        "seed": seed,
        "blocks": blocks,
        "meta": meta or {},
    }
    hbytes = dumps_json(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(header, arrays)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    pos = 16 + hlen
    arrays = {}
    for b in header["blocks"]:
        dt = np.dtype(b["dtype"])
        n = int(np.prod(b["shape"], dtype=np.int64)) * dt.itemsize
        if pos + n > len(data):
            raise FormatError(f"truncated block {b['name']!r} in {path}")
        arr = np.frombuffer(data, dtype=dt, count=n // dt.itemsize, offset=pos)
        arrays[b["name"]] = arr.reshape(b["shape"]).astype(dt.newbyteorder("="))
        pos += n
    return header, arrays


def write_features(path, E: np.ndarray, F: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        for X in (E, F):
            X = np.ascontiguousarray(X, dtype="<f4")
            fh.write(struct.pack("<QQ", *X.shape))
            fh.write(X.tobytes())


def read_features(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != FEAT_MAGIC:
        raise FormatError(f"{path} is not a feature file")
    pos = 8
    out = []
    for _ in range(2):
        if pos + 16 > len(data):
            raise FormatError(f"truncated feature file {path}")
        rows, cols = struct.unpack_from("<QQ", data, pos)
        pos += 16
        n = rows * cols
        if pos + 4 * n > len(data):
            raise FormatError(f"truncated feature file {path}")
        X = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(rows, cols)
        out.append(X.astype(np.float32))
        pos += 4 * n
    return out[0], out[1]
