"""Checkpoint files: a JSON header followed by MLP snapshots and raw arrays.

Layout (little-endian)::

    4 bytes   magic b"MMCK"
    uint32    header length H
    H bytes   UTF-8 JSON: {"meta": {...}, "entries": [{"name", "type", ["shape"]}, ...]}
    then, per entry in order:
      type "mlp":   one diffcore MLP snapshot (see metricmm.diffcore)
      type "array": float64 values, row-major, of the given shape
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from metricmm.diffcore import MlpParams, read_mlp, write_mlp
from metricmm.errors import ConfigurationError

_MAGIC = b"MMCK"


def save_checkpoint(path, meta: dict, mlps: dict[str, MlpParams], arrays: dict[str, np.ndarray] | None = None) -> None:
    """Write atomically (temp file + rename)."""
    arrays = arrays or {}
    entries = [{"name": k, "type": "mlp"} for k in mlps]
    entries += [{"name": k, "type": "array", "shape": list(np.shape(v))} for k, v in arrays.items()]
    header = json.dumps({"meta": meta, "entries": entries}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for k in mlps:
        write_mlp(buf, mlps[k])
    for k, v in arrays.items():
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict[str, MlpParams], dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ConfigurationError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode())
        mlps, arrays = {}, {}
        for e in header["entries"]:
            if e["type"] == "mlp":
                mlps[e["name"]] = read_mlp(fh)
            else:
                shape = tuple(e["shape"])
                count = int(np.prod(shape)) if shape else 1
                arrays[e["name"]] = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    return header["meta"], mlps, arrays


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())
