"""Shared fixtures: a tiny run configuration that keeps every test on a 16×16 grid."""
import pytest

from tctr.config import RunConfig
from tctr.synthlidar import generate_dataset

# 16×16 pillars of 0.8 m, three pools down to 2×2 features, two refinement stages back up to 8×8.
TINY = {
    "grid.pillar_size": [0.8, 0.8],
    "grid.max_points_per_pillar": 8,
    "grid.max_pillars": 256,
    "pfn.channels": 8,
    "backbone.stem_channels": 8,
    "backbone.block_channels": [8, 8, 8, 8],
    "backbone.pool_after": [True, True, True, False],
    "backbone.out_channels": 8,
    "tctr.C2": 4,
    "tctr.C3": 8,
    "tctr.encoder_blocks": 1,
    "tctr.decoder_blocks": 1,
    "tctr.heads": 2,
    "tctr.d_k": 4,
    "tctr.ffn_hidden": 8,
    "refine.channels": 8,
    "scene.frames": 3,
    "scene.objects": [1, 2],
    "scene.point_density": 5.0,
    "scene.clutter_points": 10,
    "train.steps": 2,
    "train.batch_size": 2,
    "data.train_sequences": 2,
    "data.eval_sequences": 2,
    "gradcheck.samples_per_param": 2,
    "ablate.seeds": [0],
    "ablate.frames": [1, 3],
    "render.width": 64,
    "render.height": 64,
}


def tiny_config(**overrides) -> RunConfig:
    """TINY plus dotted-key overrides given with '__' in place of '.'."""
    cfg = RunConfig(TINY)
    cfg.update({k.replace("__", "."): v for k, v in overrides.items()})
    return cfg


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return tiny_config()


@pytest.fixture
def tiny_samples(tiny_cfg):
    return generate_dataset(tiny_cfg.scene(), 2, seed=3)
