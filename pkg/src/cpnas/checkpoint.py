"""Versioned checkpoint container: named arrays plus a JSON metadata record.

Files are ``.npz`` archives written atomically (temporary file then rename).
Generator state is stored through ``rng_state`` / ``restore_rng`` so a resumed
run continues the same random stream.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

CHECKPOINT_FORMAT = "cpnas-checkpoint"
CHECKPOINT_VERSION = 1
_META_KEY = "__meta__"


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    if _META_KEY in arrays:
        raise CheckpointError(f"array name {_META_KEY!r} is reserved")
    record = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **meta}
    blob = np.frombuffer(json.dumps(record, sort_keys=True).encode(), dtype=np.uint8)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **{_META_KEY: blob}, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        if _META_KEY not in z.files:
            raise CheckpointError(f"{path}: missing metadata record")
        meta = json.loads(z[_META_KEY].tobytes().decode())
        arrays = {k: z[k] for k in z.files if k != _META_KEY}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {meta.get('version')}")
    return arrays, meta


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


def prefixed(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in arrays.items()}


def unprefixed(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    head = prefix + "/"
    return {k[len(head) :]: v for k, v in arrays.items() if k.startswith(head)}
