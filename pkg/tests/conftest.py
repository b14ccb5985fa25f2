"""
Test configuration and fixtures for the crowd-adapt test suite.

Provides small architectures, synthetic scenes, on-disk datasets and trained
checkpoints shared across the service and CLI tests.
"""

import os
import sys

import numpy as np
import pytest
import torch

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cache_manager import density_cache
from config import ArchConfig, LossWeights, TrainConfig
from services.data_service import (CrowdImage, CrowdMask, HeadPoints, MaskProvenance, SceneAttributes,
                                   SourceSample, TargetSample, save_dataset)
from services.network_service import init_params
from services.scene_generator import SceneConfig, generate_datasets, generate_synthetic_scene
from services.training_service import train

SCENE_SIZE = 128


@pytest.fixture
def tiny_arch():
    """Fixture providing the smallest trainable architecture (ReLU variant)."""
    return ArchConfig.tiny(smooth=False)


@pytest.fixture
def smooth_arch():
    """Fixture providing the smooth tiny architecture used by gradient checks."""
    return ArchConfig.tiny(smooth=True)


@pytest.fixture
def tiny_model(tiny_arch):
    """Fixture providing seeded float32 networks."""
    return init_params(tiny_arch, seed=0)


@pytest.fixture
def train_config(tiny_arch):
    """Fixture providing a fast SE+FD configuration."""
    return TrainConfig(batch_size=2, crop=(SCENE_SIZE, SCENE_SIZE), lr_main=1e-4, lr_disc=1e-4,
                       weights=LossWeights(), iters=3, seed=0, arch=tiny_arch,
                       checkpoint_every=2, log_every=1).validate()


@pytest.fixture(scope='session')
def synthetic_splits():
    """Fixture providing generated source/target/test splits at 128 x 128."""
    return generate_datasets(4, 4, seed=0, n_test=2, height=SCENE_SIZE, width=SCENE_SIZE)


@pytest.fixture
def source_dataset(synthetic_splits):
    return synthetic_splits['source']


@pytest.fixture
def target_dataset(synthetic_splits):
    return synthetic_splits['target']


@pytest.fixture
def test_dataset(synthetic_splits):
    return synthetic_splits['test']


@pytest.fixture
def scene_pair():
    """Fixture providing one rendered scene in both domains."""
    cfg = SceneConfig(SCENE_SIZE, SCENE_SIZE, 6, SceneAttributes('mid', 'plain', 0.6))
    return generate_synthetic_scene(cfg, seed=7, sample_id='pair')


@pytest.fixture
def make_source_sample():
    """Fixture factory for hand-built source samples."""
    def _make(sample_id='s', height=32, width=32, heads=((10.0, 12.0),), attributes=None):
        pixels = np.full((height, width, 3), 0.5)
        mask = np.zeros((height, width), dtype=np.uint8)
        for r, c in heads:
            mask[int(r), int(c)] = 1
        return SourceSample(sample_id, CrowdImage(pixels), HeadPoints(np.array(heads, dtype=float)),
                            CrowdMask(mask, MaskProvenance.EXACT), attributes or SceneAttributes())
    return _make


@pytest.fixture
def make_target_sample():
    """Fixture factory for hand-built target samples."""
    def _make(sample_id='t', height=32, width=32, heads=None):
        pixels = np.full((height, width, 3), 0.3)
        mask = np.zeros((height, width), dtype=np.uint8)
        held_out = HeadPoints(np.array(heads, dtype=float)) if heads is not None else None
        return TargetSample(sample_id, CrowdImage(pixels), CrowdMask(mask, MaskProvenance.DETECTION_RECTANGLES),
                            held_out)
    return _make


@pytest.fixture(scope='session')
def dataset_root(tmp_path_factory, synthetic_splits):
    """Fixture providing the generated splits written to disk."""
    root = tmp_path_factory.mktemp('data')
    for name, dataset in synthetic_splits.items():
        save_dataset(dataset, root / name)
    return root


@pytest.fixture(scope='session')
def trained_run(tmp_path_factory, synthetic_splits):
    """Fixture providing a short SE+FD run (checkpoint, log and final state)."""
    cfg = TrainConfig(batch_size=2, crop=(SCENE_SIZE, SCENE_SIZE), iters=2, seed=0,
                      arch=ArchConfig.tiny(smooth=False), checkpoint_every=1, log_every=1).validate()
    out = tmp_path_factory.mktemp('run')
    return train(cfg, synthetic_splits['source'], synthetic_splits['target'], out)


@pytest.fixture(autouse=True)
def clear_density_cache():
    """Automatically reset the shared density cache between tests."""
    density_cache.clear()
    yield
    density_cache.clear()


@pytest.fixture(autouse=True)
def single_thread_torch():
    """Keep CPU kernels on one thread so repeated runs are bit-identical."""
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(threads)
