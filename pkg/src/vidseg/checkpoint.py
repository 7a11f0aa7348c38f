"""Checkpoint persistence: named float64 tensor table + training metadata.

Round-trips are bitwise: tensors are serialized as little-endian float64
with shapes in the JSON header.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .fileio import CHECKPOINT_MAGIC, FileFormatError, read_container, write_container


def save_checkpoint(path, stage: str, params: dict[str, Tensor], meta: dict) -> None:
    payload = bytearray()
    table = {}
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        table[name] = {"shape": list(arr.shape), "offset": len(payload), "nbytes": arr.nbytes}
        payload.extend(arr.tobytes())
    header = {"kind": "checkpoint", "stage": stage, "meta": meta, "tensors": table}
    write_container(path, CHECKPOINT_MAGIC, header, bytes(payload))


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray], dict]:
    header, payload = read_container(path, CHECKPOINT_MAGIC)
    try:
        stage = header["stage"]
        meta = header["meta"]
        table = {}
        for name, entry in header["tensors"].items():
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(
                payload, dtype="<f8", count=count, offset=entry["offset"]
            ).reshape(shape)
            table[name] = arr.astype(np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise FileFormatError(path, 0, f"invalid checkpoint: {e}") from e
    return stage, table, meta
