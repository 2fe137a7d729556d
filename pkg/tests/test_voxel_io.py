import json

import numpy as np
import pytest

from src.engine.voxel_core import VoxelGrid
from src.engine.voxel_io import decode_voxels, encode_voxels, read_voxels, write_voxels


def test_binary_grid_uses_run_length_payload():
    values = np.zeros((2, 2, 2))
    values[1, 1, 1] = 1.0
    blob = encode_voxels(VoxelGrid(values, binary_flag=True))
    head, payload = blob.split(b"\n", 1)
    assert json.loads(head) == {"binary_flag": True, "edge_voxels": 2, "encoding": "rle"}
    # two runs of (uint8 value, uint32 length)
    assert payload == bytes([0, 7, 0, 0, 0, 1, 1, 0, 0, 0])


def test_binary_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    grid = VoxelGrid((rng.random((6, 6, 6)) > 0.6).astype(float), binary_flag=True)
    path = write_voxels(tmp_path / "sub" / "unit.vox", grid)
    back = read_voxels(path)
    assert back.binary_flag
    np.testing.assert_array_equal(back.occupancy, grid.occupancy)


def test_continuous_grid_stored_as_float32():
    grid = VoxelGrid(np.linspace(0.0, 1.0, 27).reshape(3, 3, 3))
    blob = encode_voxels(grid)
    head, payload = blob.split(b"\n", 1)
    assert json.loads(head)["encoding"] == "raw"
    assert len(payload) == 27 * 4
    back = decode_voxels(blob)
    assert not back.binary_flag
    np.testing.assert_allclose(back.occupancy, grid.occupancy, atol=1e-7)


def test_raw_values_clipped_into_unit_range():
    header = json.dumps({"binary_flag": False, "edge_voxels": 1, "encoding": "raw"}).encode()
    blob = header + b"\n" + np.array([1.0000001], dtype="<f4").tobytes()
    assert decode_voxels(blob).occupancy[0, 0, 0] == 1.0


def test_malformed_files_rejected():
    with pytest.raises(ValueError):
        decode_voxels(b'{"edge_voxels": 2}')
    header = json.dumps({"binary_flag": True, "edge_voxels": 2, "encoding": "rle"}).encode()
    with pytest.raises(ValueError):
        decode_voxels(header + b"\n" + bytes([1, 3, 0, 0, 0]))
    header = json.dumps({"binary_flag": True, "edge_voxels": 2, "encoding": "zip"}).encode()
    with pytest.raises(ValueError):
        decode_voxels(header + b"\n")
