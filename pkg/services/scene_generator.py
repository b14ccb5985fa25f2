"""
Synthetic two-domain crowd scenes.

People are anti-aliased ellipses. The source variant has a plain background and exact
silhouette masks; the target variant reuses the layout on a textured, brightness-shifted
background and gets one bounding rectangle per person as its mask.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from config import Config
from exceptions import ConfigurationError
from services.data_service import (DENSITY_LEVELS, CrowdImage, CrowdMask, Dataset, DatasetKind,
                                   HeadPoints, MaskProvenance, SceneAttributes, SourceSample,
                                   TargetSample)

logger = logging.getLogger(__name__)

# rng stream tags
_LAYOUT, _TARGET_TEXTURE, _SOURCE_TEXTURE = 0, 1, 2
_SPLIT_TAGS = {"source": 10, "target": 11, "test": 12}


@dataclass(frozen=True)
class SceneConfig:
    height: int = Config.DEFAULT_SCENE_SIZE[0]
    width: int = Config.DEFAULT_SCENE_SIZE[1]
    n_people: int = 10
    attributes: SceneAttributes = field(default_factory=SceneAttributes)

    def validate(self) -> "SceneConfig":
        if self.n_people < 0:
            raise ConfigurationError(f"n_people must be >= 0, got {self.n_people}",
                                     config_key="n_people", value=self.n_people)
        for name in ("height", "width"):
            value = getattr(self, name)
            if value < Config.MIN_IMAGE_SIZE or value % Config.FEATURE_STRIDE:
                raise ConfigurationError(f"{name} must be a multiple of {Config.FEATURE_STRIDE} "
                                         f"and >= {Config.MIN_IMAGE_SIZE}, got {value}",
                                         config_key=name, value=value)
        return self


@dataclass
class _Blob:
    top: int
    left: int
    alpha: np.ndarray
    silhouette: np.ndarray
    colour: np.ndarray
    head: Tuple[float, float]


def _draw_blob(rng: np.random.Generator, height: int, width: int, colour: np.ndarray) -> _Blob:
    lo, hi = Config.RADIUS_RANGE
    rx = rng.uniform(lo, hi)
    ry = rng.uniform(rx, hi)
    r0 = rng.uniform(ry, height - ry)
    c0 = rng.uniform(rx, width - rx)

    top, bottom = int(np.floor(r0 - ry)), int(np.ceil(r0 + ry))
    left, right = int(np.floor(c0 - rx)), int(np.ceil(c0 + rx))
    top, left = max(top, 0), max(left, 0)
    bottom, right = min(bottom, height), min(right, width)
    rr = np.arange(top, bottom)[:, None] + 0.5
    cc = np.arange(left, right)[None, :] + 0.5
    q = ((rr - r0) / ry) ** 2 + ((cc - c0) / rx) ** 2
    # one-pixel soft edge around the silhouette
    alpha = np.clip((1.0 - np.sqrt(q)) * min(rx, ry) + 0.5, 0.0, 1.0)
    return _Blob(top, left, alpha, q <= 1.0, colour, (r0 - ry, c0))


def _value_noise(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    cell = Config.NOISE_CELL
    coarse = rng.random((height // cell + 3, width // cell + 3))
    fine = ndimage.zoom(coarse, cell, order=3, mode="nearest")
    return fine[:height, :width] - 0.5


def _background(rng: Optional[np.random.Generator], height: int, width: int, level: float,
                textured: bool) -> np.ndarray:
    tint = np.array([1.0, 0.97, 0.93])
    base = np.full((height, width, 3), level) * tint
    if textured:
        noise = _value_noise(rng, height, width)
        base = base + 0.35 * noise[..., None] * np.array([1.0, 0.8, 0.6])
    return base


def _composite(background: np.ndarray, blobs: Sequence[_Blob], shift: float) -> np.ndarray:
    img = background.copy()
    for blob in blobs:
        h, w = blob.alpha.shape
        region = img[blob.top:blob.top + h, blob.left:blob.left + w]
        a = blob.alpha[..., None]
        colour = np.clip(blob.colour + shift, 0.0, 1.0)
        img[blob.top:blob.top + h, blob.left:blob.left + w] = region * (1.0 - a) + colour * a
    return np.clip(img, 0.0, 1.0)


def _masks(blobs: Sequence[_Blob], height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    exact = np.zeros((height, width), dtype=np.uint8)
    rect = np.zeros((height, width), dtype=np.uint8)
    for blob in blobs:
        rows, cols = np.nonzero(blob.silhouette)
        rows, cols = rows + blob.top, cols + blob.left
        exact[rows, cols] = 1
        rect[rows.min():rows.max() + 1, cols.min():cols.max() + 1] = 1
    return exact, rect


def generate_synthetic_scene(cfg: SceneConfig, seed: int,
                             sample_id: str = "scene") -> Tuple[SourceSample, TargetSample]:
    """
    Render one scene in both domains.

    Args:
        cfg: Scene size, person count and source attributes
        seed: Seed; equal seeds give bit-identical outputs
        sample_id: Identifier given to both samples

    Returns:
        (source sample, target sample); the target carries the heads as held-out labels

    Raises:
        ConfigurationError: If dims are not multiples of 8 or n_people < 0
    """
    cfg.validate()
    height, width = cfg.height, cfg.width
    attrs = cfg.attributes
    layout_rng = np.random.default_rng([seed, _LAYOUT])

    person_level = attrs.brightness - 0.4 if attrs.brightness > 0.5 else attrs.brightness + 0.4
    blobs: List[_Blob] = []
    for _ in range(cfg.n_people):
        colour = np.clip(person_level + layout_rng.uniform(-0.1, 0.1, size=3), 0.0, 1.0)
        blobs.append(_draw_blob(layout_rng, height, width, colour))
    heads = HeadPoints(np.array([b.head for b in blobs], dtype=np.float64).reshape(-1, 2))
    exact, rect = _masks(blobs, height, width)

    source_textured = attrs.background_style == "textured"
    source_bg = _background(np.random.default_rng([seed, _SOURCE_TEXTURE]) if source_textured else None,
                            height, width, attrs.brightness, source_textured)
    source_img = CrowdImage(_composite(source_bg, blobs, 0.0)).quantized()

    shift = Config.TARGET_BRIGHTNESS_SHIFT
    target_level = float(np.clip(attrs.brightness + shift, 0.0, 1.0))
    target_bg = _background(np.random.default_rng([seed, _TARGET_TEXTURE]), height, width,
                            target_level, True)
    target_img = CrowdImage(_composite(target_bg, blobs, shift)).quantized()
    target_attrs = SceneAttributes(attrs.density_level, "textured", target_level)

    source = SourceSample(sample_id, source_img, heads, CrowdMask(exact, MaskProvenance.EXACT), attrs)
    target = TargetSample(sample_id, target_img, CrowdMask(rect, MaskProvenance.DETECTION_RECTANGLES),
                          heads, target_attrs)
    return source, target


def _scene_seed(seed: int, tag: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, tag, index]).generate_state(1)[0])


def _scene_config(rng: np.random.Generator, height: int, width: int, levels: Sequence[str],
                  brightness_range: Tuple[float, float], background_style: str) -> SceneConfig:
    level = levels[int(rng.integers(len(levels)))]
    lo, hi = Config.DENSITY_LEVEL_COUNTS[level]
    brightness = float(rng.uniform(*brightness_range))
    return SceneConfig(height, width, int(rng.integers(lo, hi + 1)),
                       SceneAttributes(level, background_style, brightness))


def generate_datasets(n_source: int, n_target: int, seed: int, n_test: int = 0,
                      height: int = Config.DEFAULT_SCENE_SIZE[0], width: int = Config.DEFAULT_SCENE_SIZE[1],
                      levels: Sequence[str] = DENSITY_LEVELS,
                      brightness_range: Tuple[float, float] = (0.3, 0.8)) -> Dict[str, Dataset]:
    """
    Generate the source, target and optional held-out test splits.

    Source scenes keep their exact masks and heads; training target scenes keep only
    rectangular masks; test scenes are target-style with held-out heads.

    Returns:
        Mapping with keys 'source', 'target' and (if n_test > 0) 'test'
    """
    if min(n_source, n_target, n_test) < 0:
        raise ConfigurationError("Dataset sizes must be >= 0", config_key="n_source",
                                 value=[n_source, n_target, n_test])
    bad = [lv for lv in levels if lv not in DENSITY_LEVELS]
    if bad or not levels:
        raise ConfigurationError(f"Unknown density levels {bad}", config_key="levels", value=list(levels))
    lo, hi = brightness_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ConfigurationError("brightness range must satisfy 0 <= min <= max <= 1",
                                 config_key="brightness", value=[lo, hi])

    splits: Dict[str, Dataset] = {}
    for split, count in (("source", n_source), ("target", n_target), ("test", n_test)):
        if split == "test" and count == 0:
            continue
        tag = _SPLIT_TAGS[split]
        samples = []
        for k in range(count):
            scene_seed = _scene_seed(seed, tag, k)
            cfg = _scene_config(np.random.default_rng(scene_seed), height, width, levels,
                                brightness_range, "plain")
            src, tgt = generate_synthetic_scene(cfg, scene_seed, sample_id=f"{split}_{k:04d}")
            if split == "source":
                samples.append(src)
            elif split == "target":
                samples.append(tgt.without_heads())
            else:
                samples.append(tgt)
        kind = DatasetKind.SOURCE if split == "source" else DatasetKind.TARGET
        splits[split] = Dataset(kind, tuple(samples), name=split)
        logger.info(f"Generated {split} split with {count} scenes")
    return splits
