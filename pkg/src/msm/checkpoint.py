"""Checkpoint container: a JSON manifest plus one raw little-endian blob.

Round trips are bit-exact. The manifest records name, shape, dtype and byte
offset for every array; the blob is their concatenation in manifest order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "arrays.bin"
FORMAT_VERSION = 1


def save_arrays(dir_path, arrays, meta=None):
    """Write ``{name: ndarray}`` to ``dir_path`` (created if missing)."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({
            "name": name,
            "shape": list(a.shape),
            "dtype": le.dtype.str,
            "offset": offset,
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT_VERSION, "meta": meta or {}, "arrays": entries}
    (dir_path / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (dir_path / BLOB_NAME).write_bytes(b"".join(chunks))


def load_arrays(dir_path):
    """Read back ``(arrays, meta)``; arrays are fresh native-order copies."""
    dir_path = Path(dir_path)
    manifest_path = dir_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    blob = (dir_path / BLOB_NAME).read_bytes()
    arrays = {}
    for entry in manifest["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        flat = np.frombuffer(blob, dtype=dt, count=count, offset=start)
        arrays[entry["name"]] = flat.reshape(entry["shape"]).astype(dt.newbyteorder("="), copy=True)
    return arrays, manifest.get("meta", {})
