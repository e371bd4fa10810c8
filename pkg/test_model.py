#!/usr/bin/env python3
"""The assembled detector: temporal modes, fusion variants, anchors and checkpoints."""
import numpy as np
import pytest

from conftest import tiny_config
from tctr.errors import CheckpointLoadError, ConfigError
from tctr.gradcheck import check_gradients
from tctr.model import ANCHOR_STATS, Detector, ModelConfig, anchor_stats_for
from tctr.numerics import CHECK_DTYPE
from tctr.params import make_rng, save_checkpoint
from tctr.pillars import PointFrame, voxelize
from tctr.refine import FUSION_MODES

# 16×16 grid, 2×2 features, two refinement stages: 8×8 cells × 4 anchors
TINY_ANCHORS = 8 * 8 * 4


def build_detector(seed=0, **overrides):
    cfg = tiny_config(**overrides)
    return Detector(ModelConfig.from_run_config(cfg), cfg.scene().class_stats(), seed=seed)


def window_pillars(detector, seq, seed=0):
    return detector.voxelize_window(detector.window(seq), make_rng(seed))


def dense_frame(seed=0):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.uniform(-6, 6, (300, 2)), rng.uniform(-1.8, 0, 300), rng.uniform(0, 1, 300)])
    return PointFrame(pts)


@pytest.mark.parametrize("temporal", ["tctr", "concat", "none"])
def test_forward_shapes_for_every_temporal_mode(temporal, tiny_samples):
    det = build_detector(model__temporal=temporal)
    assert det.cfg.window == (1 if temporal == "none" else 3)
    out = det.forward(window_pillars(det, tiny_samples[0]))
    assert out.cls.dims == (TINY_ANCHORS, 2)
    assert out.reg.dims == (TINY_ANCHORS, 7)
    assert out.dir.dims == (TINY_ANCHORS, 2)
    assert len(det.anchors) == TINY_ANCHORS


@pytest.mark.parametrize("fusion", FUSION_MODES)
def test_forward_for_every_fusion_mode(fusion, tiny_samples):
    det = build_detector(model__fusion=fusion)
    out = det.forward(window_pillars(det, tiny_samples[0]))
    assert out.cls.dims == (TINY_ANCHORS, 2)
    has_transformer = fusion != "x_only"
    assert ("tctr.enc.proj.w" in det.params) == has_transformer
    assert ("refine.stage0.gate.w" in det.params) == has_transformer
    assert ("fuse.w" in det.params) == (fusion == "concat")


@pytest.mark.parametrize("variant", ["t_encoder", "c_encoder"])
def test_forward_for_encoder_variants(variant, tiny_samples):
    det = build_detector(tctr__variant=variant)
    assert det.forward(window_pillars(det, tiny_samples[0])).cls.dims == (TINY_ANCHORS, 2)


def test_ungated_refinement_has_no_gate_params():
    det = build_detector(refine__gated=False)
    assert "refine.stage0.gate.w" not in det.params
    assert "tctr.enc.proj.w" in det.params


@pytest.mark.parametrize("temporal", ["tctr", "concat"])
def test_context_frames_reach_the_output(temporal, tiny_samples):
    det = build_detector(model__temporal=temporal)
    pillars = window_pillars(det, tiny_samples[0])
    base = det.forward(pillars).cls.data
    pillars[0] = voxelize(dense_frame(), det.cfg.grid, make_rng(1))
    assert not np.array_equal(det.forward(pillars).cls.data, base)


def test_target_only_ignores_context(tiny_samples):
    seq = tiny_samples[0]
    det = build_detector(model__temporal="none")
    frames = det.window(seq)
    assert len(frames) == 1 and frames[0] is seq.target


def test_initialization_is_seeded(tiny_samples):
    a, b, c = build_detector(0), build_detector(0), build_detector(1)
    pillars = window_pillars(a, tiny_samples[0])
    assert np.array_equal(a.forward(pillars).cls.data, b.forward(pillars).cls.data)
    assert not np.array_equal(a.forward(pillars).cls.data, c.forward(pillars).cls.data)


def test_checkpoint_reload_reproduces_outputs(tmp_path, tiny_samples):
    det = build_detector(3)
    path = save_checkpoint(tmp_path / "model.tckp", det.params)
    loaded = Detector.from_checkpoint(det.cfg, path)
    pillars = window_pillars(det, tiny_samples[1])
    assert np.array_equal(det.forward(pillars).cls.data, loaded.forward(pillars).cls.data)
    assert np.array_equal(det.anchors.boxes, loaded.anchors.boxes)
    assert not loaded.params.is_trainable(ANCHOR_STATS)


def test_checkpoint_for_another_architecture_is_rejected(tmp_path):
    path = save_checkpoint(tmp_path / "model.tckp", build_detector().params)
    other = ModelConfig.from_run_config(tiny_config(tctr__C2=8))
    with pytest.raises(CheckpointLoadError) as exc:
        Detector.from_checkpoint(other, path)
    assert "tctr.enc.proj.w" in exc.value.names


def test_anchor_stats_rows_must_match_classes():
    cfg = tiny_config()
    with pytest.raises(ConfigError):
        Detector(ModelConfig.from_run_config(cfg), np.ones((3, 4)))


def test_anchor_stats_from_training_data(tiny_samples):
    cfg = tiny_config()
    stats = anchor_stats_for(tiny_samples, cfg)
    assert stats.shape == (2, 4)
    boxes = [b for s in tiny_samples for f in s.frames for b in f.gt_boxes]
    for c in (0, 1):
        mine = [b for b in boxes if b.class_id == c]
        if mine:
            assert stats[c, 0] == pytest.approx(np.mean([b.l for b in mine]))
            assert stats[c, 3] == pytest.approx(np.mean([b.z for b in mine]))
        else:
            assert np.allclose(stats[c], cfg.scene().class_stats()[c])
    configured = tiny_config(head__anchor_stats=[[4.0, 2.0, 1.5, -1.0], [0.8, 0.8, 1.7, -0.9]])
    assert anchor_stats_for(tiny_samples, configured)[1].tolist() == [0.8, 0.8, 1.7, -0.9]
    assert np.allclose(anchor_stats_for([], cfg), cfg.scene().class_stats())


def test_head_gradients_match_finite_differences(tiny_samples):
    det = build_detector(2)
    params = det.params.astype(CHECK_DTYPE)
    det64 = det.with_params(params)
    sample = det64.prepare(tiny_samples[0], make_rng(0))
    report = check_gradients(lambda p: det64.loss(sample).total, params, h=1e-5, samples_per_param=4,
                             tolerance=1e-4, names=params.with_prefix("head."))
    assert len(report.checks) == 6
    assert report.passed, report.format_table()


def test_detect_returns_sorted_bounded_detections(tiny_samples):
    det = build_detector(0, head__score_threshold=0.0, head__max_detections=7)
    dets = det.detect(tiny_samples[0])
    assert 0 < len(dets) <= 7
    assert np.all(np.diff(dets.scores) <= 0)
    assert set(dets.class_ids.tolist()) <= {0, 1}


if __name__ == "__main__":
    test_anchor_stats_rows_must_match_classes()
    test_ungated_refinement_has_no_gate_params()
    print("Model tests passed.")
