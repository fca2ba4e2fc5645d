"""Self-describing binary checkpoint container.

Layout::

    b"ISACCKPT"                    magic
    uint32 LE                      format version
    uint64 LE                      header length in bytes
    header                         UTF-8 JSON, sorted keys
    payload                        float64 LE arrays, concatenated in header order

The header carries a ``metadata`` object (free-form, JSON-serializable) and
an ``arrays`` list of ``{"path", "shape", "offset"}`` records; offsets count
float64 elements from the start of the payload. Writing the same content
always yields the same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ISACCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, arrays: dict[str, np.ndarray], metadata: dict) -> None:
    records = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        records.append({"path": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"version": FORMAT_VERSION, "metadata": metadata, "arrays": records},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack_from("<IQ", raw, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + header_len].decode("utf-8"))
    payload = np.frombuffer(raw, dtype="<f8", offset=start + header_len)
    arrays = {}
    for rec in header["arrays"]:
        size = int(np.prod(rec["shape"], dtype=np.int64))
        arrays[rec["path"]] = payload[rec["offset"]:rec["offset"] + size].reshape(rec["shape"]).astype(np.float64)
    return arrays, header["metadata"]
