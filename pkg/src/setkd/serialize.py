"""Checkpoint and dataset files.

Files are uncompressed NumPy ``.npz`` archives (a zip of ``.npy`` members).
Every member is stored little-endian as ``<f8`` or ``<i8``. Two reserved
members carry the layout version and free-form metadata:

``__format__``
    ``<i8`` array ``[FORMAT_VERSION]``.
``__meta__``
    UTF-8 JSON object stored as a ``uint8`` array.

Checkpoints hold one member per parameter under its parameter name.
Datasets hold ``grids`` (n, G, G, C), ``labels`` (total objects,),
``boxes`` (total objects, 4) and ``offsets`` (n + 1,), where scene ``i``
owns rows ``offsets[i]:offsets[i + 1]``; the generation seed is in the
metadata.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .toy.scenes import Dataset, Scene

FORMAT_VERSION = 1
_RESERVED = ("__format__", "__meta__")


class FormatError(ValueError):
    pass


def _little_endian(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        return a.astype("<f8")
    if a.dtype.kind in "iub":
        return a.astype("<i8")
    raise FormatError(f"unsupported dtype {a.dtype}")


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    bad = [k for k in tensors if k in _RESERVED]
    if bad:
        raise FormatError(f"reserved tensor names {bad}")
    members = {k: _little_endian(v) for k, v in tensors.items()}
    members["__format__"] = np.array([FORMAT_VERSION], dtype="<i8")
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    members["__meta__"] = np.frombuffer(blob, dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **members)
    return path


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        if "__format__" not in z.files:
            raise FormatError(f"{path}: missing format version")
        version = int(z["__format__"][0])
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
        meta = json.loads(z["__meta__"].tobytes().decode()) if "__meta__" in z.files else {}
        tensors = {k: np.array(z[k]) for k in z.files if k not in _RESERVED}
    return tensors, meta


def save_params(path, params: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    return save_tensors(path, params, {"kind": "params", **(meta or {})})


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "params":
        raise FormatError(f"{path} is not a parameter checkpoint")
    return {k: v.astype(np.float64) for k, v in tensors.items()}, meta


def save_dataset(path, ds: Dataset) -> Path:
    offsets = np.cumsum([0] + [len(s.labels) for s in ds.scenes])
    labels = np.concatenate([s.labels for s in ds.scenes]) if ds.scenes else np.zeros(0, np.int64)
    boxes = np.concatenate([s.boxes for s in ds.scenes]) if ds.scenes else np.zeros((0, 4))
    return save_tensors(
        path,
        {"grids": ds.grids, "labels": labels, "boxes": boxes, "offsets": offsets},
        {"kind": "dataset", "seed": int(ds.seed)},
    )


def load_dataset(path) -> Dataset:
    t, meta = load_tensors(path)
    if meta.get("kind") != "dataset":
        raise FormatError(f"{path} is not a dataset file")
    off = t["offsets"]
    scenes = [Scene(t["labels"][a:b], t["boxes"][a:b]) for a, b in zip(off[:-1], off[1:])]
    return Dataset(scenes, t["grids"], int(meta["seed"]))
