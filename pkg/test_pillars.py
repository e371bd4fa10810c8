#!/usr/bin/env python3
"""Voxelization, the pillar feature network and sequence augmentation."""
import math

import numpy as np
import pytest

from tctr.errors import ConfigError, ContractError
from tctr.params import ParamStore, make_rng
from tctr.pillars import (
    GridConfig, GtBox, PointFrame, SequenceAugmentation, SequenceSample, apply_augmentation,
    augment_sequence, AugmentConfig, init_pfn, pfn_forward, pillar_point_features, voxelize,
    wrap_angle,
)
from tctr.synthlidar import points_in_box

GRID = GridConfig()


def frame_of(points, boxes=()):
    return PointFrame(np.asarray(points, dtype=np.float32).reshape(-1, 4), list(boxes))


def build_sequence(n_frames=3):
    rng = np.random.default_rng(0)
    frames = []
    for t in range(n_frames):
        pts = np.concatenate([rng.uniform(-6, 6, (40, 2)), rng.uniform(-2, 1, (40, 1)), rng.uniform(0, 1, (40, 1))], axis=1)
        frames.append(frame_of(pts, [GtBox(1.0 + 0.1 * t, -2.0, -1.0, 4.0, 2.0, 1.5, 0.3, 0)]))
    return SequenceSample(frames, n_frames // 2)


def test_voxelize_cell_index_and_range():
    frame = frame_of([[0.1, -6.3, 0.0, 0.5], [0.0, 0.0, 9.0, 0.5], [7.0, 0.0, 0.0, 0.5]])
    ps = voxelize(frame, GRID, make_rng(0))
    assert len(ps) == 1
    assert ps.cols.tolist() == [32]
    assert ps.rows.tolist() == [0]


def test_voxelize_caps_points_per_pillar_deterministically():
    pts = np.tile([[0.05, 0.05, 0.0, 0.2]], (50, 1))
    pts[:, 3] = np.linspace(0.0, 1.0, 50)
    a = voxelize(frame_of(pts), GRID, make_rng(4))
    b = voxelize(frame_of(pts), GRID, make_rng(4))
    assert a.counts.tolist() == [20]
    assert np.array_equal(a.points, b.points)


def test_voxelize_caps_pillar_count():
    grid = GridConfig(max_pillars=5)
    xs = np.linspace(-6.3, 6.3, 30)
    pts = np.stack([xs, np.zeros(30), np.zeros(30), np.zeros(30)], axis=1)
    ps = voxelize(frame_of(pts), grid, make_rng(0))
    assert len(ps) == 5
    linear_idx = ps.rows * grid.W0 + ps.cols
    assert linear_idx.tolist() == sorted(linear_idx.tolist())


def test_empty_frame_gives_zero_pseudo_image():
    params = ParamStore(0)
    init_pfn(params, 8)
    ps = voxelize(frame_of(np.zeros((0, 4))), GRID, make_rng(0))
    image = pfn_forward(ps, params, GRID)
    assert image.dims == (8, GRID.H0, GRID.W0)
    assert np.all(image.data == 0.0)


def test_single_point_pillar_has_zero_mean_offsets():
    ps = voxelize(frame_of([[1.23, -0.47, 0.3, 0.9]]), GRID, make_rng(0))
    feats, mask = pillar_point_features(ps, GRID)
    assert mask.sum() == 1
    assert np.all(feats[0, 0, 4:7] == 0.0)
    # padded slots stay zero
    assert np.all(feats[0, 1:] == 0.0)


def test_duplicated_point_leaves_single_point_pillar_feature_unchanged():
    params = ParamStore(0)
    init_pfn(params, 8)
    point = [[0.33, 0.71, -0.5, 0.4]]
    once = pfn_forward(voxelize(frame_of(point), GRID, make_rng(0)), params, GRID)
    twice = pfn_forward(voxelize(frame_of(point * 2), GRID, make_rng(0)), params, GRID)
    assert np.array_equal(once.data, twice.data)


def test_pfn_is_point_order_invariant():
    params = ParamStore(1)
    init_pfn(params, 6)
    pts = np.random.default_rng(2).uniform(-3, 3, (60, 4)).astype(np.float32)
    perm = np.random.default_rng(3).permutation(60)
    a = pfn_forward(voxelize(frame_of(pts), GRID, make_rng(0)), params, GRID)
    b = pfn_forward(voxelize(frame_of(pts[perm]), GRID, make_rng(0)), params, GRID)
    assert np.allclose(a.data, b.data, atol=1e-6)


def test_grid_validation():
    assert GRID.validate().W0 == 64
    with pytest.raises(ConfigError):
        GridConfig(x_range=(-6.4, 6.4), pillar_size=(0.3, 0.2)).validate()
    with pytest.raises(ConfigError):
        GridConfig(x_range=(-6.0, 6.0), pillar_size=(0.2, 0.2)).validate()


def test_window_selection():
    seq = build_sequence(5)
    assert [id(f) for f in seq.window(3)] == [id(f) for f in seq.frames[1:4]]
    assert seq.window(1)[0] is seq.target
    with pytest.raises(ConfigError):
        seq.window(2)
    with pytest.raises(ContractError):
        seq.window(7)


def test_wrap_angle():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)


def test_identity_augmentation():
    seq = build_sequence()
    out = apply_augmentation(seq, SequenceAugmentation())
    for a, b in zip(seq.frames, out.frames):
        assert np.allclose(a.points, b.points)
        assert np.allclose(a.boxes_array(), b.boxes_array())


def test_flip_x_twice_is_identity():
    seq = build_sequence()
    flip = SequenceAugmentation(flip_x=True)
    out = apply_augmentation(apply_augmentation(seq, flip), flip)
    for a, b in zip(seq.frames, out.frames):
        assert np.allclose(a.points, b.points)
        assert np.allclose(a.boxes_array(), b.boxes_array(), atol=1e-9)


@pytest.mark.parametrize("aug", [
    SequenceAugmentation(angle=0.3),
    SequenceAugmentation(flip_x=True, angle=-0.2, scale=1.04),
    SequenceAugmentation(flip_y=True, angle=0.35, scale=0.96),
    SequenceAugmentation(flip_x=True, flip_y=True, angle=0.1),
])
def test_augmented_points_stay_inside_their_box(aug):
    box = GtBox(2.0, 1.0, -1.0, 4.0, 1.6, 1.4, 0.7, 0)
    rng = np.random.default_rng(5)
    local = rng.uniform(-0.45, 0.45, (200, 3)) * [box.l, box.w, box.h]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    pts = np.zeros((200, 4))
    pts[:, 0] = box.x + c * local[:, 0] - s * local[:, 1]
    pts[:, 1] = box.y + s * local[:, 0] + c * local[:, 1]
    pts[:, 2] = box.z + local[:, 2]
    seq = SequenceSample([frame_of(pts, [box])], 0)
    out = apply_augmentation(seq, aug).target
    assert points_in_box(out.points, out.gt_boxes[0], inflate=1e-4).all()


def test_augment_sequence_applies_one_transform_to_every_frame():
    seq = build_sequence()
    out = augment_sequence(seq, AugmentConfig(), make_rng(7))
    moved = [f.boxes_array()[0] - g.boxes_array()[0] for f, g in zip(out.frames, seq.frames)]
    # same yaw change in every frame
    dyaw = [wrap_angle(m[6]) for m in moved]
    assert np.allclose(dyaw, dyaw[0], atol=1e-9)
    disabled = augment_sequence(seq, AugmentConfig(enabled=False), make_rng(7))
    assert np.allclose(disabled.target.points, seq.target.points)


if __name__ == "__main__":
    test_voxelize_cell_index_and_range()
    test_single_point_pillar_has_zero_mean_offsets()
    test_flip_x_twice_is_identity()
    print("Pillar tests passed.")
