from __future__ import annotations

import numpy as np
import pytest

from voxdiff.grids import SceneSpec, VisibilityMask, VoxelGrid, compute_visibility, generate_scene
from voxdiff.io import (load_checkpoint, read_grid, read_json, read_mask, save_checkpoint,
                        write_grid, write_json, write_mask)


def test_grid_round_trip(tmp_path):
    grid = generate_scene(SceneSpec(), 12)
    path = tmp_path / "scene.voxg"
    write_grid(path, grid)
    back = read_grid(path)
    assert np.array_equal(back.labels, grid.labels)
    assert back.num_classes == grid.num_classes
    assert back.voxel_size == pytest.approx(grid.voxel_size, rel=1e-6)  # f32 storage
    assert back.dims == grid.dims


def test_grid_write_is_byte_identical(tmp_path):
    grid = generate_scene(SceneSpec(), 3)
    p1, p2 = tmp_path / "a.voxg", tmp_path / "b.voxg"
    write_grid(p1, grid)
    write_grid(p2, grid)
    assert p1.read_bytes() == p2.read_bytes()


def test_grid_header_layout(tmp_path):
    labels = np.arange(8, dtype=np.uint8).reshape(2, 2, 2) % 6
    path = tmp_path / "g.voxg"
    write_grid(path, VoxelGrid(labels, 0.5, 6))
    raw = path.read_bytes()
    assert raw[:4] == b"VOXG"
    assert len(raw) == 24 + 8  # header + one byte per voxel
    assert raw[24:] == labels.tobytes(order="C")  # z varies fastest


def test_grid_read_errors(tmp_path):
    path = tmp_path / "bad.voxg"
    path.write_bytes(b"VOX")
    with pytest.raises(ValueError, match="truncated"):
        read_grid(path)
    grid = VoxelGrid(np.zeros((2, 2, 2), dtype=np.uint8), 1.0, 6)
    write_grid(path, grid)
    raw = bytearray(path.read_bytes())
    path.write_bytes(bytes(raw[:-1]))
    with pytest.raises(ValueError, match="label bytes"):
        read_grid(path)
    raw[0:4] = b"JUNK"
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="magic"):
        read_grid(path)
    raw[0:4] = b"VOXG"
    raw[4] = 99  # version field
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="version"):
        read_grid(path)


def test_mask_round_trip(tmp_path):
    spec = SceneSpec()
    grid = generate_scene(spec, 4)
    mask = compute_visibility(grid, spec.sensor, spec.max_range)
    path = tmp_path / "scene.voxm"
    write_mask(path, mask)
    back = read_mask(path)
    assert np.array_equal(back.flags, mask.flags)


def test_mask_rejects_grid_files(tmp_path):
    path = tmp_path / "g.voxg"
    write_grid(path, VoxelGrid(np.zeros((2, 2, 2), dtype=np.uint8), 1.0, 6))
    with pytest.raises(ValueError, match="2 classes"):
        read_mask(path)


def test_json_round_trip_and_sorted_keys(tmp_path):
    payload = {"zebra": 1, "apple": [1, 2, 3], "nested": {"b": 2.5, "a": None}}
    path = tmp_path / "out.json"
    write_json(path, payload)
    assert read_json(path) == payload
    text = path.read_text()
    assert text.index('"apple"') < text.index('"nested"') < text.index('"zebra"')
    other = tmp_path / "other.json"
    write_json(other, {"nested": {"a": None, "b": 2.5}, "apple": [1, 2, 3], "zebra": 1})
    assert other.read_bytes() == path.read_bytes()


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "net.weight": rng.normal(size=(4, 3, 2)).astype(np.float32),
        "net.bias": rng.normal(size=(4,)).astype(np.float32),
        "opt.step": np.array(17.0, dtype=np.float32),
    }
    config = {"lr": 3e-4, "steps": 100}
    meta = {"kind": "baseline"}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, tensors, config, seed=42, meta=meta)
    back, header = load_checkpoint(path)
    assert set(back) == set(tensors)
    for name in tensors:
        assert back[name].dtype == np.float32
        assert np.array_equal(back[name], tensors[name])
    assert header["config"] == config
    assert header["seed"] == 42
    assert header["meta"] == meta


def test_checkpoint_write_is_byte_identical(tmp_path):
    tensors = {"a": np.ones((3, 3), dtype=np.float32), "b": np.zeros(5, dtype=np.float32)}
    p1, p2 = tmp_path / "1.ckpt", tmp_path / "2.ckpt"
    save_checkpoint(p1, tensors, {"x": 1}, seed=0)
    save_checkpoint(p2, dict(reversed(tensors.items())), {"x": 1}, seed=0)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"OC")
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)
    save_checkpoint(path, {"w": np.ones(4, dtype=np.float32)}, {}, seed=0)
    raw = bytearray(path.read_bytes())
    path.write_bytes(bytes(raw[:-8]))
    with pytest.raises(ValueError, match="truncated tensor"):
        load_checkpoint(path)
    raw[0:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)
