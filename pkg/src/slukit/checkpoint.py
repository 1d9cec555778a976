"""Self-describing checkpoint container: named tensors plus JSON metadata.

A checkpoint is a single ``.npz`` holding the parameter arrays under their
state-dict names and one reserved ``__meta__`` entry with UTF-8 JSON
(format version, config, vocabulary, training metadata). The npy payload
fixes dtype and endianness, so save -> load round trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
_META_KEY = "__meta__"


class CheckpointError(Exception):
    pass


def save_container(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    if _META_KEY in tensors:
        raise CheckpointError(f"{_META_KEY} is a reserved entry name")
    meta = dict(meta)
    meta["format_version"] = FORMAT_VERSION
    payload = {k: np.ascontiguousarray(v) for k, v in tensors.items()}
    payload[_META_KEY] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such checkpoint: {path}")
    with np.load(path) as data:
        if _META_KEY not in data:
            raise CheckpointError(f"{path} is not a slukit checkpoint (missing meta)")
        meta = json.loads(bytes(data[_META_KEY]).decode("utf-8"))
        tensors = {k: data[k] for k in data.files if k != _META_KEY}
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r}")
    return tensors, meta


def state_dict_to_arrays(state: dict[str, torch.Tensor]) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in state.items()}


def arrays_to_state_dict(arrays: dict[str, np.ndarray]) -> dict[str, torch.Tensor]:
    return {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
