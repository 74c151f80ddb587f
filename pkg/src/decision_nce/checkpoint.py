"""Binary container for named float64 arrays plus a JSON metadata header.

Layout: magic (8 bytes) | version (u32 LE) | header length (u64 LE) |
header (UTF-8 JSON with kind, metadata and the name/shape of every array) |
array values as little-endian float64, in header order.
"""

import json
import logging
import math
import struct
from pathlib import Path
from typing import Any

import numpy as np

from decision_nce.errors import CheckpointFormatError

logger = logging.getLogger(__name__)

MAGIC = b"DNCECKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_arrays(
    path: str | Path,
    kind: str,
    metadata: dict[str, Any],
    arrays: list[tuple[str, np.ndarray]],
) -> None:
    header = {
        "kind": kind,
        "metadata": metadata,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(encoded)))
        fh.write(encoded)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    logger.debug("Saved %s checkpoint with %d arrays to %s", kind, len(arrays), path)


def load_arrays(path: str | Path) -> tuple[str, dict[str, Any], list[tuple[str, np.ndarray]]]:
    name = str(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PREFIX.size:
        raise CheckpointFormatError(name, "truncated before the header")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointFormatError(name, "not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointFormatError(name, f"unsupported version {version}, expected {VERSION}")
    body = _PREFIX.size + header_len
    if len(blob) < body:
        raise CheckpointFormatError(name, "truncated inside the header")
    try:
        header = json.loads(blob[_PREFIX.size:body].decode("utf-8"))
        entries = header["arrays"]
        kind = header["kind"]
        metadata = header["metadata"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointFormatError(name, f"corrupt header: {e}") from None

    sizes = []
    for entry in entries:
        shape = entry.get("shape")
        if not isinstance(shape, list) or not all(isinstance(d, int) and d > 0 for d in shape):
            raise CheckpointFormatError(name, f"inconsistent shape for {entry.get('name')!r}: {shape}")
        sizes.append(math.prod(shape))
    expected = body + 8 * sum(sizes)
    if len(blob) < expected:
        raise CheckpointFormatError(name, f"truncated: {len(blob)} bytes, expected {expected}")
    if len(blob) > expected:
        raise CheckpointFormatError(name, f"{len(blob) - expected} trailing bytes after the arrays")

    values = np.frombuffer(blob, dtype="<f8", offset=body).astype(np.float64)
    arrays, offset = [], 0
    for entry, size in zip(entries, sizes):
        arrays.append((entry["name"], values[offset:offset + size].reshape(entry["shape"])))
        offset += size
    return kind, metadata, arrays
