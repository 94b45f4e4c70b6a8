"""
Binary trajectory snapshots.

Each record is the time (float64), the node count n (uint64) and n complex
samples stored as little-endian float64 pairs. A JSON sidecar next to the
binary file carries grid and parameter metadata.
"""
import json
import logging
import os
from typing import Any, Dict, List, Tuple

import numpy as np

from trajectory.utils.errors import GridMismatchError
from trajectory.utils.grid_space import Field, Grid

logger = logging.getLogger(__name__)

_HEADER = np.dtype([("t", "<f8"), ("n", "<u8")])


def encode_record(t: float, field: Field) -> bytes:
    """
    Encode one snapshot.

    Args:
        t: sample time
        field: snapshot of u(t)

    Returns:
        Bytes of the record
    """
    header = np.array([(t, field.grid.n)], dtype=_HEADER)
    samples = field.values.astype("<c16")
    return header.tobytes() + samples.tobytes()


def decode_records(data: bytes, grid: Grid) -> List[Tuple[float, Field]]:
    """
    Decode concatenated snapshot records.

    Args:
        data: bytes read from a snapshot file
        grid: grid the samples belong to

    Returns:
        List of (time, field) pairs in file order
    """
    records = []
    offset = 0
    while offset < len(data):
        header = np.frombuffer(data, dtype=_HEADER, count=1, offset=offset)[0]
        offset += _HEADER.itemsize
        n = int(header["n"])
        if n != grid.n:
            raise GridMismatchError(f"snapshot has n = {n}, grid expects {grid.n}")
        samples = np.frombuffer(data, dtype="<c16", count=n, offset=offset)
        offset += 16 * n
        records.append((float(header["t"]), Field(grid, samples)))
    return records


def sidecar_path(path: str) -> str:
    return path + ".json"


def write_snapshot(path: str, t: float, field: Field, metadata: Dict[str, Any]):
    """Append a record to `path` and (re)write its JSON sidecar."""
    with open(path, "ab") as handle:
        handle.write(encode_record(t, field))
    sidecar = {"half_width": field.grid.half_width, "n": field.grid.n, **metadata}
    with open(sidecar_path(path), "w") as handle:
        json.dump(sidecar, handle, indent=2, sort_keys=True)
    logger.debug(f"snapshot t={t:.6g} appended to {path}")


def read_snapshot(path: str) -> Tuple[List[Tuple[float, Field]], Dict[str, Any]]:
    """Read every record of a snapshot file together with its sidecar metadata."""
    with open(sidecar_path(path)) as handle:
        metadata = json.load(handle)
    grid = Grid(metadata["half_width"], metadata["n"])
    with open(path, "rb") as handle:
        data = handle.read()
    return decode_records(data, grid), metadata


def remove_snapshot(path: str):
    for candidate in (path, sidecar_path(path)):
        if os.path.exists(candidate):
            os.remove(candidate)
