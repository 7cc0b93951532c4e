"""Binary tensor blocks: ``shape: d0,d1,...\\n`` followed by little-endian float32."""

from __future__ import annotations

from typing import BinaryIO

import numpy as np

from .errors import FormatError

_F32 = np.dtype("<f4")


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=_F32)
    if array.ndim == 0:
        array = array.reshape(1)
    fh.write(("shape: " + ",".join(str(n) for n in array.shape) + "\n").encode("utf-8"))
    fh.write(array.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    line = fh.readline(4096)
    if not line:
        raise FormatError("tensor block: unexpected end of file before header")
    try:
        text = line.decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("tensor block: header is not UTF-8") from None
    if not text.startswith("shape: ") or not text.endswith("\n"):
        raise FormatError(f"tensor block: malformed header {text[:40]!r}")
    try:
        shape = tuple(int(tok) for tok in text[7:-1].split(","))
    except ValueError:
        raise FormatError(f"tensor block: bad shape field {text[7:-1]!r}") from None
    if not shape or any(n <= 0 for n in shape):
        raise FormatError(f"tensor block: shape must be positive, got {shape}")
    count = int(np.prod(shape))
    raw = fh.read(count * 4)
    if len(raw) != count * 4:
        raise FormatError(f"tensor block: expected {count * 4} payload bytes for shape {shape}, got {len(raw)}")
    return np.frombuffer(raw, dtype=_F32).reshape(shape).astype(np.float32)
