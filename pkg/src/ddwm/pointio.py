"""Point clouds and rays as little-endian float32 records with a JSON sidecar.

* cloud: ``stem.bin`` holds ``(x, y, z)`` triples; ``stem.json`` holds
  ``{"format", "count", "extents": {"lo", "hi"}, "meta"}``.
* rays: records ``(ox, oy, oz, dx, dy, dz, gt_depth)`` with the same sidecar.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .archive import canonical_json

CLOUD_FORMAT = "ddwm-cloud/1"
RAYS_FORMAT = "ddwm-rays/1"
_F32 = np.dtype("<f4")


def _stem(stem) -> Path:
    stem = Path(stem)
    return stem.with_suffix("") if stem.suffix in (".bin", ".json") else stem


def _write(stem, records: np.ndarray, fmt: str, extents, meta) -> Path:
    stem = _stem(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    rec = np.ascontiguousarray(records, dtype=_F32)
    stem.with_suffix(".bin").write_bytes(rec.tobytes())
    sidecar = {"format": fmt, "count": int(rec.shape[0]), "extents": extents, "meta": meta or {}}
    path = stem.with_suffix(".json")
    path.write_text(canonical_json(sidecar))
    return path


def _read(stem, fmt: str, width: int):
    stem = _stem(stem)
    sidecar = json.loads(stem.with_suffix(".json").read_text())
    if sidecar.get("format") != fmt:
        raise ValueError(f"{stem}.json is not a {fmt} sidecar")
    rec = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype=_F32).reshape(-1, width)
    if rec.shape[0] != sidecar["count"]:
        raise ValueError(f"{stem}.bin holds {rec.shape[0]} records, sidecar says {sidecar['count']}")
    return rec.astype(np.float64), sidecar


def _extents(points: np.ndarray) -> dict:
    if len(points) == 0:
        return {"lo": None, "hi": None}
    return {"lo": points.min(0).tolist(), "hi": points.max(0).tolist()}


def write_cloud(stem, points, meta: dict | None = None) -> Path:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return _write(stem, p, CLOUD_FORMAT, _extents(p.astype(_F32).astype(np.float64)), meta)


def read_cloud(stem):
    rec, sidecar = _read(stem, CLOUD_FORMAT, 3)
    return rec, sidecar


def write_rays(stem, origins, directions, gt_depth, meta: dict | None = None) -> Path:
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt_depth, dtype=np.float64).reshape(-1, 1)
    rec = np.concatenate([o, d, g], axis=1)
    return _write(stem, rec, RAYS_FORMAT, _extents(o.astype(_F32).astype(np.float64)), meta)


def read_rays(stem):
    """Directions are renormalized in float64 (float32 storage breaks the unit-norm tolerance)."""
    rec, sidecar = _read(stem, RAYS_FORMAT, 7)
    d = rec[:, 3:6]
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    return rec[:, :3], d, rec[:, 6], sidecar
