"""Flat little-endian binary arrays with a JSON manifest.

Every array is written as its own file of raw row-major values; the manifest
records name, dtype and shape so the files can be read back without numpy's
own container formats.
"""

import json
import os
from pathlib import Path

import numpy as np

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def write_array(path, arr):
    arr = np.ascontiguousarray(arr)
    name = arr.dtype.name
    if name not in _DTYPES:
        raise TypeError(f"unsupported dtype {arr.dtype} for {path}")
    Path(path).write_bytes(arr.astype(_DTYPES[name], copy=False).tobytes(order="C"))
    return {"dtype": name, "shape": list(arr.shape)}


def read_array(path, dtype, shape):
    raw = Path(path).read_bytes()
    arr = np.frombuffer(raw, dtype=_DTYPES[dtype]).astype(dtype)
    return arr.reshape(shape)


def write_json(path, obj):
    """Write JSON deterministically (sorted keys, fixed separators) via a temp file."""
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    os.replace(tmp, path)


def save_params(state, directory, meta=None):
    """Save a name -> tensor mapping as one flat file per entry plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, value in state.items():
        arr = value.detach().cpu().numpy() if hasattr(value, "detach") else np.asarray(value)
        fname = name.replace("/", "_") + ".bin"
        entries[name] = {"file": fname, **write_array(directory / fname, arr)}
    write_json(directory / "manifest.json", {"meta": meta or {}, "params": entries})


def load_params(directory):
    """Inverse of :func:`save_params`; returns ``(state, meta)`` with torch tensors."""
    import torch

    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    state = {}
    for name, entry in manifest["params"].items():
        arr = read_array(directory / entry["file"], entry["dtype"], entry["shape"])
        state[name] = torch.from_numpy(arr.copy())
    return state, manifest["meta"]
