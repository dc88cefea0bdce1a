"""Flat-binary array serialization with a JSON shape manifest.

Arrays are concatenated as little-endian float64 in manifest order, so the
pair of files is portable and byte-stable for identical inputs.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import InputError


def save_arrays(named: dict[str, np.ndarray], bin_path: str | Path,
                json_path: str | Path, meta: dict | None = None) -> None:
    entries = []
    offset = 0
    chunks = []
    for name, arr in named.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.size
    manifest = {"dtype": "<f8", "arrays": entries, "meta": meta or {}}
    with open(bin_path, "wb") as f:
        f.write(b"".join(chunks))
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_arrays(bin_path: str | Path, json_path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(json_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("dtype") != "<f8":
        raise InputError(f"unsupported dtype {manifest.get('dtype')!r}")
    raw = np.fromfile(bin_path, dtype="<f8")
    named: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        if start + size > raw.size:
            raise InputError(f"array {entry['name']!r} runs past end of binary")
        named[entry["name"]] = raw[start:start + size].reshape(entry["shape"]).copy()
    return named, manifest.get("meta", {})
