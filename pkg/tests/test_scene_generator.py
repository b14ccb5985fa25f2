"""
Unit tests for synthetic two-domain scene generation.
"""

import numpy as np
import pytest

from config import Config
from exceptions import ConfigurationError
from services.data_service import DatasetKind, MaskProvenance, SceneAttributes
from services.scene_generator import SceneConfig, generate_datasets, generate_synthetic_scene


@pytest.mark.unit
class TestSyntheticScene:
    """Test single-scene rendering."""

    def test_same_seed_is_bit_identical(self):
        cfg = SceneConfig(64, 64, 5)
        a_src, a_tgt = generate_synthetic_scene(cfg, seed=4)
        b_src, b_tgt = generate_synthetic_scene(cfg, seed=4)
        np.testing.assert_array_equal(a_src.image.pixels, b_src.image.pixels)
        np.testing.assert_array_equal(a_tgt.image.pixels, b_tgt.image.pixels)
        np.testing.assert_array_equal(a_src.heads.points, b_src.heads.points)

    def test_different_seeds_differ(self):
        cfg = SceneConfig(64, 64, 5)
        a, _ = generate_synthetic_scene(cfg, seed=1)
        b, _ = generate_synthetic_scene(cfg, seed=2)
        assert not np.array_equal(a.image.pixels, b.image.pixels)

    def test_heads_and_masks(self, scene_pair):
        source, target = scene_pair
        assert len(source.heads) == 6
        np.testing.assert_array_equal(source.heads.points, target.held_out_heads.points)
        assert source.mask.provenance is MaskProvenance.EXACT
        assert target.mask.provenance is MaskProvenance.DETECTION_RECTANGLES
        # rectangles cover every silhouette pixel
        assert np.all(target.mask.mask[source.mask.mask == 1] == 1)
        assert target.mask.mask.sum() >= source.mask.mask.sum()

    def test_layout_shared_between_domains(self, scene_pair):
        source, target = scene_pair
        assert source.image.pixels.shape == target.image.pixels.shape == (128, 128, 3)
        assert not np.array_equal(source.image.pixels, target.image.pixels)

    def test_images_on_eight_bit_grid(self, scene_pair):
        source, _ = scene_pair
        scaled = source.image.pixels * 255.0
        np.testing.assert_allclose(scaled, np.rint(scaled), atol=1e-9)

    def test_empty_scene(self):
        cfg = SceneConfig(32, 32, 0, SceneAttributes("low", "plain", 0.4))
        source, target = generate_synthetic_scene(cfg, seed=0)
        assert len(source.heads) == 0
        assert not source.mask.mask.any()
        assert not target.mask.mask.any()
        # plain source background is flat, target background is textured
        assert source.image.pixels[..., 0].std() < 1e-12
        assert target.image.pixels[..., 0].std() > 0.01

    def test_target_is_darker(self):
        cfg = SceneConfig(64, 64, 0, SceneAttributes("low", "plain", 0.6))
        source, target = generate_synthetic_scene(cfg, seed=5)
        assert target.attributes.brightness == pytest.approx(0.6 + Config.TARGET_BRIGHTNESS_SHIFT)
        assert target.attributes.background_style == "textured"
        assert target.image.pixels.mean() < source.image.pixels.mean()

    @pytest.mark.parametrize("cfg", [
        SceneConfig(60, 64, 3),
        SceneConfig(8, 8, 1),
        SceneConfig(64, 64, -1),
    ])
    def test_invalid_config(self, cfg):
        with pytest.raises(ConfigurationError):
            generate_synthetic_scene(cfg, seed=0)


@pytest.mark.unit
class TestGenerateDatasets:
    """Test split generation."""

    def test_split_kinds_and_labels(self, synthetic_splits):
        assert set(synthetic_splits) == {"source", "target", "test"}
        assert synthetic_splits["source"].kind is DatasetKind.SOURCE
        assert synthetic_splits["target"].kind is DatasetKind.TARGET
        assert all(s.held_out_heads is None for s in synthetic_splits["target"].samples)
        assert all(s.held_out_heads is not None for s in synthetic_splits["test"].samples)
        assert synthetic_splits["source"].ids() == ["source_0000", "source_0001", "source_0002", "source_0003"]

    def test_person_counts_follow_density_level(self, synthetic_splits):
        for sample in synthetic_splits["source"].samples:
            lo, hi = Config.DENSITY_LEVEL_COUNTS[sample.attributes.density_level]
            assert lo <= len(sample.heads) <= hi

    def test_no_test_split_by_default(self):
        splits = generate_datasets(1, 1, seed=0, height=32, width=32)
        assert set(splits) == {"source", "target"}

    def test_levels_restrict_counts(self):
        splits = generate_datasets(3, 0, seed=2, height=64, width=64, levels=("low",))
        assert all(s.attributes.density_level == "low" for s in splits["source"].samples)
        assert splits["target"].N == 0

    def test_deterministic(self):
        a = generate_datasets(2, 2, seed=9, height=32, width=32)
        b = generate_datasets(2, 2, seed=9, height=32, width=32)
        for x, y in zip(a["target"].samples, b["target"].samples):
            np.testing.assert_array_equal(x.image.pixels, y.image.pixels)

    @pytest.mark.parametrize("kwargs", [
        {"n_source": -1, "n_target": 1},
        {"n_source": 1, "n_target": 1, "levels": ("huge",)},
        {"n_source": 1, "n_target": 1, "brightness_range": (0.8, 0.2)},
    ])
    def test_invalid_arguments(self, kwargs):
        with pytest.raises(ConfigurationError):
            generate_datasets(seed=0, height=32, width=32, **kwargs)
