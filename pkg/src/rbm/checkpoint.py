"""Versioned parameter container (numpy ``.npz``) with a JSON metadata block."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = "rbm-checkpoint/1"
_FORMAT_KEY = "__format__"
_META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    for name in params:
        if name.startswith("__"):
            raise CheckpointError(f"reserved parameter name {name!r}")
    arrays = {name: np.asarray(v, dtype=np.float64) for name, v in params.items()}
    arrays[_FORMAT_KEY] = np.array(FORMAT_VERSION)
    arrays[_META_KEY] = np.array(json.dumps(meta or {}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            if _FORMAT_KEY not in z.files:
                raise CheckpointError(f"{path}: missing format header")
            version = str(z[_FORMAT_KEY])
            if version != FORMAT_VERSION:
                raise CheckpointError(f"{path}: unsupported format {version!r}")
            meta = json.loads(str(z[_META_KEY]))
            params = {k: z[k].copy() for k in z.files if not k.startswith("__")}
    except (OSError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    return params, meta


def params_digest(params: dict[str, np.ndarray]) -> str:
    """SHA-256 over sorted names, shapes and raw float64 bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
