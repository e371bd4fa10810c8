#!/usr/bin/env python3
"""Synthetic scene generation and the LSEQ dataset format."""
import hashlib
import struct

import numpy as np
import pytest

from tctr.errors import ConfigError, FormatError, GenerationError
from tctr.pillars import wrap_angle
from tctr.synthlidar import (
    SceneConfig, dataset_bytes, generate_dataset, generate_sequence, parse_dataset, points_in_box,
    read_dataset, sequence_seed, write_dataset,
)

SMALL = SceneConfig(objects=(1, 2), point_density=5.0, clutter_points=10, frames=3)


def test_generation_is_deterministic():
    a = generate_sequence(SMALL, 5)
    b = generate_sequence(SMALL, 5)
    c = generate_sequence(SMALL, 6)
    assert dataset_bytes([a]) == dataset_bytes([b])
    assert dataset_bytes([a]) != dataset_bytes([c])
    assert sequence_seed(1, 0) == sequence_seed(1, 0)
    assert sequence_seed(1, 0) != sequence_seed(1, 1)


def test_dataset_seeds_each_sequence_independently():
    pair = generate_dataset(SMALL, 2, seed=9)
    assert dataset_bytes([pair[1]]) == dataset_bytes([generate_sequence(SMALL, sequence_seed(9, 1))])


def test_a_thousand_seeds_give_a_thousand_scenes():
    digests = {hashlib.sha256(dataset_bytes([generate_sequence(SMALL, seed)])).hexdigest() for seed in range(1000)}
    assert len(digests) == 1000


def test_empty_scene():
    seq = generate_sequence(SceneConfig(objects=(0, 0), clutter_points=0, frames=3), 1)
    assert len(seq.frames) == 3
    assert seq.target_index == 1
    for frame in seq.frames:
        assert frame.points.shape == (0, 4)
        assert frame.gt_boxes == []


def test_object_points_lie_in_their_boxes():
    cfg = SceneConfig(objects=(2, 3), clutter_points=0, frames=3, point_density=20.0)
    for seed in range(3):
        seq = generate_sequence(cfg, seed)
        for frame in seq.frames:
            assert frame.points.shape[0] > 0
            inside = np.zeros(frame.points.shape[0], dtype=bool)
            for box in frame.gt_boxes:
                inside |= points_in_box(frame.points, box, inflate=cfg.noise_sigma + 1e-4)
            assert inside.all()
            assert np.all((frame.points[:, 3] >= 0) & (frame.points[:, 3] <= 1))


def test_tracks_move_rigidly():
    cfg = SceneConfig(objects=(2, 2), frames=5, speed=(0.1, 0.3), clutter_points=0)
    seq = generate_sequence(cfg, 11)
    boxes = np.stack([f.boxes_array() for f in seq.frames])  # [T × objects × 7]
    steps = np.diff(boxes, axis=0)
    assert np.allclose(steps[:, :, :2], steps[0, :, :2], atol=1e-9)
    assert np.allclose(steps[:, :, 2:6], 0.0)
    yaw_steps = wrap_angle(steps[:, :, 6])
    assert np.allclose(yaw_steps, yaw_steps[0], atol=1e-9)
    assert np.all(np.abs(yaw_steps) <= cfg.yaw_rate + 1e-12)


def test_clutter_sits_on_the_ground_in_range():
    cfg = SceneConfig(objects=(0, 0), clutter_points=200, frames=1)
    pts = generate_sequence(cfg, 2).target.points
    assert pts.shape == (200, 4)
    assert np.all(np.abs(pts[:, :2]) <= 6.4 + 1e-5)
    assert np.all(np.abs(pts[:, 2] - cfg.ground_z) <= cfg.noise_sigma + 1e-6)


def test_occlusion_dropout_spares_the_target():
    cfg = SceneConfig(objects=(1, 2), clutter_points=0, frames=3, occlusion_dropout=1.0)
    seq = generate_sequence(cfg, 4)
    assert seq.frames[0].points.shape[0] == 0
    assert seq.frames[2].points.shape[0] == 0
    assert seq.target.points.shape[0] > 0
    assert len(seq.frames[0].gt_boxes) == len(seq.target.gt_boxes)


def test_impossible_placement_raises():
    cramped = SceneConfig(x_range=(-2.0, 2.0), y_range=(-2.0, 2.0), objects=(3, 3), class_probs=(1.0, 0.0))
    with pytest.raises(GenerationError):
        generate_sequence(cramped, 0)


def test_scene_validation():
    with pytest.raises(ConfigError):
        SceneConfig(class_probs=(1.0,)).validate()
    with pytest.raises(ConfigError):
        SceneConfig(objects=(3, 1)).validate()
    with pytest.raises(ConfigError):
        SceneConfig(occlusion_dropout=1.5).validate()


# -------------------- LSEQ --------------------

def test_empty_dataset_is_header_only():
    data = dataset_bytes([])
    assert len(data) == 12
    assert data[:4] == b"LSEQ"
    assert parse_dataset(data) == []


def test_dataset_round_trip(tmp_path):
    samples = generate_dataset(SMALL, 2, seed=1)
    path = write_dataset(tmp_path / "train.lseq", samples)
    loaded = read_dataset(path)
    assert len(loaded) == 2
    assert dataset_bytes(loaded) == path.read_bytes()
    for a, b in zip(samples, loaded):
        assert a.target_index == b.target_index
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa.points, fb.points)
            assert np.allclose(fa.boxes_array(), fb.boxes_array(), atol=1e-5)
            assert [g.class_id for g in fa.gt_boxes] == [g.class_id for g in fb.gt_boxes]


def test_dataset_format_errors():
    data = dataset_bytes(generate_dataset(SMALL, 1, seed=2))
    with pytest.raises(FormatError) as exc:
        parse_dataset(b"LSEX" + data[4:])
    assert exc.value.offset == 0
    with pytest.raises(FormatError):
        parse_dataset(data[:-2])
    with pytest.raises(FormatError):
        parse_dataset(data + b"\0\0\0\0")
    bad_target = b"LSEQ" + struct.pack("<IIII", 1, 1, 2, 5)
    with pytest.raises(FormatError):
        parse_dataset(bad_target)


if __name__ == "__main__":
    test_generation_is_deterministic()
    test_empty_scene()
    test_empty_dataset_is_header_only()
    print("Synthetic Lidar tests passed.")
