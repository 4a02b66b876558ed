"""Checkpoint container.

A checkpoint is a numpy ``.npz`` archive. Every record is a little-endian
float64 array stored row-major under its parameter name; optimizer state is
stored under ``<name>::<slot>``. A ``__meta__`` entry holds a UTF-8 JSON
document with the format version, the model architecture block and any
caller metadata (step counter, RNG state).
"""
from __future__ import annotations

import io
import json
import os
from pathlib import Path

import numpy as np

from .params import ParameterStore

FORMAT_VERSION = 1
_SEP = "::"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | os.PathLike, store: ParameterStore, meta: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    int_state: dict[str, dict[str, int]] = {}
    for p in store:
        arrays[p.name] = np.ascontiguousarray(p.data, dtype="<f8")
        for slot, val in p.state.items():
            if isinstance(val, np.ndarray):
                arrays[p.name + _SEP + slot] = np.ascontiguousarray(val, dtype="<f8")
            else:
                int_state.setdefault(p.name, {})[slot] = int(val)
    header = {
        "format_version": FORMAT_VERSION,
        "parameters": [{"name": p.name, "shape": list(p.data.shape), "group": p.group,
                        "decay": p.decay} for p in store],
        "int_state": int_state,
        "meta": meta or {},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z:
            raise CheckpointError(f"{path}: missing __meta__ header")
        header = json.loads(bytes(z["__meta__"]).decode("utf-8"))
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    return header, arrays


def load_into(store: ParameterStore, path: str | os.PathLike) -> dict:
    """Restore values and optimizer state into ``store``; returns caller metadata."""
    header, arrays = read_checkpoint(path)
    names = [rec["name"] for rec in header["parameters"]]
    if set(names) != set(store.params):
        missing = set(store.params) ^ set(names)
        raise CheckpointError(f"{path}: parameter set mismatch ({sorted(missing)[:5]})")
    for p in store:
        val = arrays[p.name]
        if val.shape != p.data.shape:
            raise CheckpointError(f"{path}: shape mismatch for {p.name}: {val.shape} vs {p.data.shape}")
        p.data = val.astype(np.float64)
        p.state = {}
        prefix = p.name + _SEP
        for key, arr in arrays.items():
            if key.startswith(prefix):
                p.state[key[len(prefix):]] = arr.astype(np.float64)
        p.state.update(header["int_state"].get(p.name, {}))
    return header["meta"]
