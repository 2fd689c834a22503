"""Flat binary tensor archive with a JSON manifest.

``save(stem, tensors, meta)`` writes ``stem.bin`` (raw little-endian tensor
bytes, concatenated in name order) and ``stem.json``::

    {"format": "ddwm-tensors/1", "meta": {...},
     "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...]}

Output is byte-for-byte deterministic for identical inputs.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT = "ddwm-tensors/1"


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".bin", ".json"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".bin"), stem.with_suffix(".json")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def save(stem, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    bin_path, json_path = _paths(stem)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    digest = hashlib.sha256()
    with open(bin_path, "wb") as fh:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = arr.tobytes()
            fh.write(raw)
            digest.update(raw)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format": FORMAT, "meta": meta or {}, "tensors": entries, "sha256": digest.hexdigest()}
    json_path.write_text(canonical_json(manifest))
    return json_path


def load(stem) -> tuple[dict[str, np.ndarray], dict]:
    bin_path, json_path = _paths(stem)
    manifest = json.loads(json_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{json_path} is not a {FORMAT} manifest")
    raw = bin_path.read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        chunk = raw[e["offset"] : e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return tensors, manifest["meta"]
