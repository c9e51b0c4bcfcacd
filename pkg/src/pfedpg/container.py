"""Versioned binary container for named arrays (``.npz`` with a JSON header entry)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "pfedpg-tensors"
VERSION = 1
_HEADER = "__header__"


class ContainerError(ValueError):
    pass


def save_tensors(path, arrays: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    if _HEADER in arrays:
        raise ContainerError(f"array name {_HEADER!r} is reserved")
    header = {
        "format": FORMAT,
        "version": VERSION,
        "meta": meta or {},
        "shapes": {k: list(np.shape(v)) for k, v in arrays.items()},
    }
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload[_HEADER] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, **payload)
    except OSError as exc:
        raise OSError(f"cannot write tensor container {path}: {exc}") from exc
    return path


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            if _HEADER not in npz.files:
                raise ContainerError(f"{path}: missing header")
            header = json.loads(npz[_HEADER].tobytes().decode())
            arrays = {k: npz[k] for k in npz.files if k != _HEADER}
    except OSError as exc:
        raise OSError(f"cannot read tensor container {path}: {exc}") from exc
    if header.get("format") != FORMAT:
        raise ContainerError(f"{path}: not a {FORMAT} file")
    if header.get("version") != VERSION:
        raise ContainerError(f"{path}: unsupported version {header.get('version')}")
    for k, shape in header["shapes"].items():
        if list(arrays[k].shape) != shape:
            raise ContainerError(f"{path}: array {k} has shape {arrays[k].shape}, header says {shape}")
    return arrays, header["meta"]
