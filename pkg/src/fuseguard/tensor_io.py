# Copyright (c) 2025 Francis Bain
# SPDX-License-Identifier: Apache-2.0

"""FGT1 tensor container used for checkpoints and dataset storage.

Layout: magic ``b"FGT1"``, little-endian u32 rank, ``rank`` u32 dimensions,
then the row-major payload as little-endian f32.
"""

import logging
from pathlib import Path
from typing import Union

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"FGT1"
_U32 = np.dtype("<u4")
_F32 = np.dtype("<f4")

ArrayOrTensor = Union[np.ndarray, Tensor]


def encode(value: ArrayOrTensor) -> bytes:
    """Serialize an array or tensor into FGT1 bytes."""
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    header = np.array([arr.ndim, *arr.shape], dtype=_U32)
    return MAGIC + header.tobytes() + np.ascontiguousarray(arr, dtype=_F32).tobytes()


def decode(blob: bytes, *, source: str = "<bytes>") -> np.ndarray:
    """Parse FGT1 bytes into a float32 array."""
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError("Not an FGT1 tensor file (bad magic bytes)", path=source)
    rank = int(np.frombuffer(blob, dtype=_U32, count=1, offset=4)[0])
    dims_end = 8 + 4 * rank
    if len(blob) < dims_end:
        raise CheckpointError("Truncated FGT1 header", path=source, context={"rank": rank})
    dims = tuple(int(d) for d in np.frombuffer(blob, dtype=_U32, count=rank, offset=8))
    count = int(np.prod(dims)) if dims else 1
    if len(blob) != dims_end + 4 * count:
        raise CheckpointError(
            "FGT1 payload size does not match its header",
            path=source,
            context={"dims": list(dims), "payload_bytes": len(blob) - dims_end},
        )
    payload = np.frombuffer(blob, dtype=_F32, count=count, offset=dims_end)
    return payload.astype(np.float32).reshape(dims)


def save_tensor(path: Path, value: ArrayOrTensor) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_bytes(encode(value))
    except OSError as e:
        raise CheckpointError(f"Failed to write tensor file: {e}", path=str(path)) from e


def load_array(path: Path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read tensor file: {path}", path=str(path)) from e
    return decode(blob, source=str(path))


def load_tensor(path: Path, *, requires_grad: bool = False) -> Tensor:
    return Tensor(load_array(path), requires_grad=requires_grad)
