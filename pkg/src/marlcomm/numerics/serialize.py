"""Parameter files: flat little-endian float64 blob plus a JSON manifest.

Layout of one parameter directory::

    <dir>/
        manifest.json   {"dtype": "<f8", "parameters": [{name, shape, offset, nbytes}],
                         "metadata": {...}}
        params.bin      concatenated arrays, row-major, in manifest order

Round trips are bit-exact.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
PARAMS_NAME = "params.bin"
DTYPE = "<f8"


def save_params(
    params: Mapping[str, np.ndarray],
    directory: Path,
    metadata: Mapping[str, Any] | None = None,
) -> Path:
    """Write *params* into *directory* and return the manifest path."""
    directory.mkdir(parents=True, exist_ok=True)
    entries: list[dict[str, Any]] = []
    chunks: list[bytes] = []
    offset = 0
    for name, value in params.items():
        raw = np.ascontiguousarray(value, dtype=DTYPE).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(np.shape(value)),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)

    (directory / PARAMS_NAME).write_bytes(b"".join(chunks))
    manifest = {
        "dtype": DTYPE,
        "parameters": entries,
        "metadata": dict(metadata or {}),
    }
    manifest_path = directory / MANIFEST_NAME
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
    logger.debug(
        "Wrote %d parameter arrays (%d bytes) to %s", len(entries), offset, directory
    )
    return manifest_path


def load_params(directory: Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a directory written by :func:`save_params`.

    Returns
    -------
    tuple
        ``(params, metadata)``.

    Raises
    ------
    FileNotFoundError
        If the manifest or blob is missing.
    ValueError
        If the manifest does not describe the blob.
    """
    with open(directory / MANIFEST_NAME) as f:
        manifest = json.load(f)
    if manifest.get("dtype") != DTYPE:
        raise ValueError(f"Unsupported parameter dtype {manifest.get('dtype')!r}")
    raw = (directory / PARAMS_NAME).read_bytes()

    params: dict[str, np.ndarray] = {}
    for entry in manifest["parameters"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if nbytes != 8 * count or offset + nbytes > len(raw):
            raise ValueError(
                f"Manifest entry {entry['name']!r} "
                f"does not fit {directory / PARAMS_NAME}"
            )
        values = np.frombuffer(raw, dtype=DTYPE, count=count, offset=offset)
        params[entry["name"]] = values.astype(np.float64).reshape(shape)
    return params, manifest.get("metadata", {})
