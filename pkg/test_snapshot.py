"""
Tests for binary snapshots and their JSON sidecar.
"""
import os

import numpy as np
import pytest

from trajectory.utils.errors import GridMismatchError
from trajectory.utils.grid_space import Field, Grid
from trajectory.utils.snapshot import (
    decode_records,
    encode_record,
    read_snapshot,
    remove_snapshot,
    sidecar_path,
    write_snapshot,
)


def test_record_layout(grid, u0):
    data = encode_record(1.5, u0)
    assert len(data) == 16 + 16 * grid.n
    assert np.frombuffer(data[:8], dtype="<f8")[0] == 1.5
    assert np.frombuffer(data[8:16], dtype="<u8")[0] == grid.n


def test_snapshots_append_in_order(tmp_path, grid, u0):
    path = str(tmp_path / "run.snap")
    write_snapshot(path, 0.0, u0, {"seed": 3})
    write_snapshot(path, 0.5, u0 * 2.0, {"seed": 3, "step": 100})
    records, metadata = read_snapshot(path)
    assert [t for t, _ in records] == [0.0, 0.5]
    np.testing.assert_array_equal(records[0][1].values, u0.values)
    np.testing.assert_array_equal(records[1][1].values, 2.0 * u0.values)
    assert metadata == {"half_width": 10.0, "n": grid.n, "seed": 3, "step": 100}


def test_decode_rejects_other_grid(u0):
    data = encode_record(0.0, u0)
    with pytest.raises(GridMismatchError):
        decode_records(data, Grid(10.0, 64))


def test_remove_snapshot(tmp_path, u0):
    path = str(tmp_path / "gone.snap")
    write_snapshot(path, 0.0, u0, {})
    remove_snapshot(path)
    assert not os.path.exists(path)
    assert not os.path.exists(sidecar_path(path))
    remove_snapshot(path)


def test_zero_field_snapshot(tmp_path, grid):
    path = str(tmp_path / "zero.snap")
    write_snapshot(path, 2.0, Field.zeros(grid), {})
    records, _ = read_snapshot(path)
    assert records[0][0] == 2.0
    assert not np.any(records[0][1].values)
