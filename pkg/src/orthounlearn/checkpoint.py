"""Binary model checkpoints.

Layout, all little-endian::

    b"OUNL" | u32 version | u32 n_layers | n_layers x (u32 in, u32 out)
    | u32 n_classes | u64 n_params | n_params x f64
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np

from orthounlearn.errors import IngestionError
from orthounlearn.nn_core import ModelParams

logger = logging.getLogger(__name__)

MAGIC = b"OUNL"
VERSION = 1


def encode_checkpoint(model: ModelParams) -> bytes:
    """Serialize a model to the checkpoint layout."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(model.shapes))]
    parts.extend(struct.pack("<II", in_dim, out_dim) for in_dim, out_dim in model.shapes)
    parts.append(struct.pack("<IQ", model.n_classes, model.size))
    parts.append(model.flat.astype("<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: ModelParams, path: Path) -> Path:
    """Write a checkpoint, replacing any existing file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model))
    logger.debug("saved %d parameters to %s", model.size, path)
    return path


def decode_checkpoint(data: bytes) -> ModelParams:
    """Parse checkpoint bytes.

    Raises:
        IngestionError: On a bad magic, unknown version or inconsistent sizes.
    """
    if data[:4] != MAGIC:
        raise IngestionError(f"expected {MAGIC!r}, got {data[:4]!r}", "checkpoint.magic")
    try:
        version, n_layers = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise IngestionError(f"unsupported version {version}", "checkpoint.version")
        offset = 12
        shapes = []
        for _ in range(n_layers):
            shapes.append(struct.unpack_from("<II", data, offset))
            offset += 8
        n_classes, n_params = struct.unpack_from("<IQ", data, offset)
        offset += 12
    except struct.error as e:
        raise IngestionError(f"truncated header: {e}", "checkpoint.header") from e

    if not shapes or shapes[-1][1] != n_classes:
        raise IngestionError(f"class count {n_classes} does not match layers", "checkpoint.n_classes")
    expected = sum(i * o + o for i, o in shapes)
    if n_params != expected:
        raise IngestionError(
            f"{n_params} parameters, layer shapes need {expected}", "checkpoint.n_params"
        )
    if len(data) - offset != 8 * n_params:
        raise IngestionError(
            f"expected {8 * n_params} data bytes, found {len(data) - offset}", "checkpoint.data"
        )
    flat = np.frombuffer(data, dtype="<f8", count=n_params, offset=offset).astype(np.float64)
    return ModelParams(flat=flat, shapes=tuple(shapes))


def load_checkpoint(path: Path) -> ModelParams:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    try:
        data = path.read_bytes()
    except OSError as e:
        raise IngestionError(f"cannot read {path}: {e}", "checkpoint") from e
    return decode_checkpoint(data)
