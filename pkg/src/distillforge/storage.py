"""Manifest + raw little-endian binary tensor storage.

Used for model checkpoints (``manifest.json`` + ``weights.bin``), optimizer
state, feature dumps and the optional dataset cache (``manifest.json`` +
``data.bin``).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

FORMAT_VERSION = 1

_DTYPES = {
    "float32": (torch.float32, np.dtype("<f4")),
    "float64": (torch.float64, np.dtype("<f8")),
    "int64": (torch.int64, np.dtype("<i8")),
    "uint8": (torch.uint8, np.dtype("u1")),
}
_TORCH_NAMES = {v[0]: k for k, v in _DTYPES.items()}


def dtype_name(t: torch.Tensor) -> str:
    try:
        return _TORCH_NAMES[t.dtype]
    except KeyError:
        raise TypeError(f"unsupported dtype {t.dtype}") from None


def write_tensors(
    directory: str | Path,
    tensors: Iterable[tuple[dict, torch.Tensor]],
    header: dict | None = None,
    data_name: str = "data.bin",
    entries_key: str = "entries",
) -> Path:
    """Write ``(metadata, tensor)`` items in order; metadata gains shape/dtype/offset/byte_length."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(directory / data_name, "wb") as fh:
        for meta, tensor in tensors:
            name = dtype_name(tensor)
            arr = tensor.detach().cpu().contiguous().numpy().astype(_DTYPES[name][1], copy=False)
            raw = arr.tobytes(order="C")
            fh.write(raw)
            entries.append({**meta, "shape": list(arr.shape), "dtype": name, "offset": offset, "byte_length": len(raw)})
            offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, **(header or {}), entries_key: entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def read_tensors(
    directory: str | Path, data_name: str = "data.bin", entries_key: str = "entries"
) -> tuple[dict, list[tuple[dict, torch.Tensor]]]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported format_version {manifest.get('format_version')!r} in {directory}")
    blob = (directory / data_name).read_bytes()
    out = []
    for e in manifest[entries_key]:
        _, np_dtype = _DTYPES[e["dtype"]]
        chunk = blob[e["offset"] : e["offset"] + e["byte_length"]]
        if len(chunk) != e["byte_length"]:
            raise ValueError(f"truncated data for entry {e.get('name')!r} in {directory}")
        arr = np.frombuffer(chunk, dtype=np_dtype).reshape(e["shape"]).copy()
        out.append((e, torch.from_numpy(arr)))
    return manifest, out
