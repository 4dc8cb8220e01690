"""Parameter checkpoint container.

One checkpoint file is a numpy .npz archive holding float64 arrays keyed
by parameter-path strings plus a JSON manifest under a reserved key.  The
format round-trips bit-exactly and refuses files written by a newer,
incompatible layout version.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_MANIFEST_KEY = "__manifest__"


def save_params(path, params: dict[str, np.ndarray], manifest: dict | None = None) -> None:
    """Write named arrays plus a manifest; parent directories are created."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if _MANIFEST_KEY in params:
        raise ValueError(f"parameter name {_MANIFEST_KEY!r} is reserved")
    meta = dict(manifest or {})
    meta["format_version"] = FORMAT_VERSION
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    arrays[_MANIFEST_KEY] = np.array(json.dumps(meta, sort_keys=True))
    np.savez(path, **arrays)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (params, manifest); raises on unknown format versions."""
    with np.load(path, allow_pickle=False) as archive:
        manifest = json.loads(str(archive[_MANIFEST_KEY]))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"checkpoint {path} has format_version {manifest.get('format_version')}, "
                f"expected {FORMAT_VERSION}")
        params = {k: archive[k] for k in archive.files if k != _MANIFEST_KEY}
    return params, manifest
