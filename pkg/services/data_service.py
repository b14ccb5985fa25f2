"""
Dataset types, on-disk layout, scene-regularization filtering and paired cropping.

A dataset directory looks like::

    <root>/images/<id>.png   8-bit RGB
    <root>/masks/<id>.png    8-bit single channel, 0 or 255
    <root>/heads/<id>.json   [[row, col], ...] (source; optional for target)
    <root>/meta.json         {"kind", "ids", "attributes": {id: {...}}}
"""
import logging
import operator
import re
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

from config import Config
from exceptions import ConfigurationError, DataValidationError, FileProcessingError
from services.density_service import gaussian_density_map
from utils import ensure_dir, read_json, write_json
from validation import (log_validation_error, require_crop, require_head_points,
                        validate_image_array, validate_mask_array)

logger = logging.getLogger(__name__)

DENSITY_LEVELS = ("low", "mid", "high")
BACKGROUND_STYLES = ("plain", "textured")


class DatasetKind(str, Enum):
    SOURCE = "source"
    TARGET = "target"


class MaskProvenance(str, Enum):
    EXACT = "exact"
    DETECTION_RECTANGLES = "detection_rectangles"


@dataclass(frozen=True)
class SceneAttributes:
    """Desk-scale proxy for scenario, weather and time-of-day attributes."""
    density_level: str = "mid"
    background_style: str = "plain"
    brightness: float = 0.5

    def __post_init__(self):
        if self.density_level not in DENSITY_LEVELS:
            raise DataValidationError(f"density_level must be one of {DENSITY_LEVELS}",
                                      field="density_level", value=self.density_level)
        if self.background_style not in BACKGROUND_STYLES:
            raise DataValidationError(f"background_style must be one of {BACKGROUND_STYLES}",
                                      field="background_style", value=self.background_style)
        if not 0.0 <= float(self.brightness) <= 1.0:
            raise DataValidationError("brightness must lie in [0, 1]", field="brightness",
                                      value=self.brightness)

    def to_dict(self) -> dict:
        return {"density_level": self.density_level,
                "background_style": self.background_style,
                "brightness": float(self.brightness)}

    @classmethod
    def from_dict(cls, data: dict) -> "SceneAttributes":
        return cls(**data)


@dataclass(frozen=True, eq=False)
class CrowdImage:
    """RGB image with float values in [0, 1], stored H x W x 3."""
    pixels: np.ndarray

    def __post_init__(self):
        is_valid, error = validate_image_array(self.pixels)
        if not is_valid:
            raise DataValidationError(error, field="image")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_uint8(cls, array: np.ndarray) -> "CrowdImage":
        return cls(np.asarray(array, dtype=np.uint8).astype(np.float64) / 255.0)

    def to_uint8(self) -> np.ndarray:
        return np.rint(self.pixels * 255.0).astype(np.uint8)

    def quantized(self) -> "CrowdImage":
        """Snap values onto the 8-bit grid so PNG storage is lossless."""
        return CrowdImage.from_uint8(self.to_uint8())


@dataclass(frozen=True, eq=False)
class CrowdMask:
    mask: np.ndarray
    provenance: MaskProvenance

    def __post_init__(self):
        if self.mask.ndim != 2 or not np.all((self.mask == 0) | (self.mask == 1)):
            raise DataValidationError("Mask must be a 2-D array of 0/1 values", field="mask")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.mask.shape


@dataclass(frozen=True, eq=False)
class HeadPoints:
    """Head annotations as an N x 2 array of (row, col) in pixel units."""
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def to_list(self) -> List[List[float]]:
        return [[float(r), float(c)] for r, c in self.points]


def _check_alignment(sample_id: str, image: CrowdImage, mask: CrowdMask) -> None:
    is_valid, error = validate_mask_array(mask.mask, image.height, image.width)
    if not is_valid:
        log_validation_error("mask", error, {"sample_id": sample_id})
        raise DataValidationError(f"{sample_id}: {error}", field="mask", value=sample_id)


@dataclass(frozen=True, eq=False)
class SourceSample:
    sample_id: str
    image: CrowdImage
    heads: HeadPoints
    mask: CrowdMask
    attributes: SceneAttributes = field(default_factory=SceneAttributes)

    def __post_init__(self):
        _check_alignment(self.sample_id, self.image, self.mask)
        require_head_points(self.heads.points, self.image.height, self.image.width, source=self.sample_id)


@dataclass(frozen=True, eq=False)
class TargetSample:
    """Target-domain image with a coarse mask; heads are held out for evaluation only."""
    sample_id: str
    image: CrowdImage
    mask: CrowdMask
    held_out_heads: Optional[HeadPoints] = None
    attributes: Optional[SceneAttributes] = None

    def __post_init__(self):
        _check_alignment(self.sample_id, self.image, self.mask)
        if self.held_out_heads is not None:
            require_head_points(self.held_out_heads.points, self.image.height, self.image.width,
                                source=self.sample_id)

    def without_heads(self) -> "TargetSample":
        return replace(self, held_out_heads=None)


Sample = Union[SourceSample, TargetSample]


@dataclass(frozen=True)
class Dataset:
    kind: DatasetKind
    samples: Tuple[Sample, ...] = ()
    name: str = ""

    def __post_init__(self):
        kind = DatasetKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "samples", tuple(self.samples))
        expected = SourceSample if kind is DatasetKind.SOURCE else TargetSample
        for sample in self.samples:
            if not isinstance(sample, expected):
                raise DataValidationError(f"Sample {getattr(sample, 'sample_id', '?')} does not match "
                                          f"dataset kind '{kind.value}'", field="kind", value=kind.value)

    @property
    def N(self) -> int:
        return len(self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    def ids(self) -> List[str]:
        return [s.sample_id for s in self.samples]


# Scene regularization -----------------------------------------------------------------

_OPERATORS: Dict[str, Callable[[Any, Any], bool]] = {
    "==": operator.eq, "!=": operator.ne, "<": operator.lt, "<=": operator.le,
    ">": operator.gt, ">=": operator.ge, "in": lambda a, b: a in b,
}
_ENUM_VALUES = {"density_level": DENSITY_LEVELS, "background_style": BACKGROUND_STYLES}
_NUMERIC_ATTRIBUTES = ("brightness",)
_PREDICATE_RE = re.compile(r"^\s*(\w+)\s*(==|!=|<=|>=|<|>|in)\s*(.+?)\s*$")


@dataclass(frozen=True)
class AttributePredicate:
    """Comparison of one SceneAttributes field against a constant."""
    attribute: str
    op: str
    value: Any

    def __post_init__(self):
        names = [f.name for f in fields(SceneAttributes)]
        if self.attribute not in names:
            raise ConfigurationError(f"Unknown scene attribute '{self.attribute}'",
                                     config_key="scene_filter", value=self.attribute)
        if self.op not in _OPERATORS:
            raise ConfigurationError(f"Unsupported operator '{self.op}'", config_key="scene_filter",
                                     value=self.op)
        if self.op == "in" and not isinstance(self.value, (tuple, list, frozenset, set)):
            raise ConfigurationError(f"'in' needs a collection of values, got {self.value!r}",
                                     config_key="scene_filter", value=self.value)
        values = tuple(self.value) if self.op == "in" else (self.value,)
        if self.attribute in _NUMERIC_ATTRIBUTES:
            bad = [v for v in values if isinstance(v, bool) or not isinstance(v, (int, float))]
            if bad:
                raise ConfigurationError(f"'{self.attribute}' compares against numbers, got {bad}",
                                         config_key="scene_filter", value=bad)
        allowed = _ENUM_VALUES.get(self.attribute)
        if allowed is not None:
            bad = [v for v in values if v not in allowed]
            if bad:
                raise ConfigurationError(f"Value(s) {bad} outside declared set {allowed} "
                                         f"for '{self.attribute}'", config_key="scene_filter", value=bad)
            if self.op not in ("==", "!=", "in"):
                raise ConfigurationError(f"Operator '{self.op}' is not defined for '{self.attribute}'",
                                         config_key="scene_filter", value=self.op)

    def __call__(self, attributes: SceneAttributes) -> bool:
        return bool(_OPERATORS[self.op](getattr(attributes, self.attribute), self.value))

    @classmethod
    def parse(cls, text: str) -> "AttributePredicate":
        """Parse expressions such as ``brightness > 0.5`` or ``density_level in low,mid``."""
        match = _PREDICATE_RE.match(text)
        if not match:
            raise ConfigurationError(f"Cannot parse scene filter {text!r}", config_key="scene_filter",
                                     value=text)
        name, op, raw = match.groups()
        if op == "in":
            items = tuple(v.strip().strip("'\"") for v in raw.split(",") if v.strip())
        else:
            items = (raw.strip("'\""),)
        if name in _NUMERIC_ATTRIBUTES:
            try:
                items = tuple(float(v) for v in items)
            except ValueError:
                raise ConfigurationError(f"{name} needs numbers, got {raw!r}",
                                         config_key="scene_filter", value=raw)
        return cls(name, op, items if op == "in" else items[0])


def scene_regularization_filter(dataset: Dataset,
                                predicate: Callable[[SceneAttributes], bool]) -> Dataset:
    """
    Keep the samples whose scene attributes satisfy ``predicate``.

    Args:
        dataset: Source-kind dataset
        predicate: AttributePredicate or any callable over SceneAttributes

    Returns:
        New Dataset holding the accepted samples in their original order
    """
    if dataset.kind is not DatasetKind.SOURCE:
        raise ConfigurationError("Scene regularization applies to source datasets only",
                                 config_key="scene_filter", value=dataset.kind.value)
    kept = tuple(s for s in dataset.samples if predicate(s.attributes))
    logger.info(f"Scene regularization kept {len(kept)}/{dataset.N} samples")
    return Dataset(dataset.kind, kept, name=dataset.name)


# Cropping ---------------------------------------------------------------------------

def crop_window(height: int, width: int, crop_h: int, crop_w: int, seed: int) -> Tuple[int, int]:
    """Top-left corner of the random crop drawn for ``seed``."""
    require_crop(crop_h, crop_w, height, width)
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, height - crop_h + 1))
    left = int(rng.integers(0, width - crop_w + 1))
    return top, left


def _crop_points(heads: HeadPoints, top: int, left: int, crop_h: int, crop_w: int) -> HeadPoints:
    pts = heads.points - np.array([top, left], dtype=np.float64)
    inside = (pts[:, 0] >= 0) & (pts[:, 0] < crop_h) & (pts[:, 1] >= 0) & (pts[:, 1] < crop_w)
    return HeadPoints(pts[inside])


def crop_sample(sample: Sample, top: int, left: int, crop_h: int, crop_w: int) -> Sample:
    """Crop image and mask at the given offset; heads are translated and out-of-window points dropped."""
    require_crop(crop_h, crop_w, sample.image.height, sample.image.width)
    if top < 0 or left < 0 or top + crop_h > sample.image.height or left + crop_w > sample.image.width:
        raise ConfigurationError(f"Crop window at ({top}, {left}) leaves the image",
                                 config_key="crop", value=[top, left])
    rows, cols = slice(top, top + crop_h), slice(left, left + crop_w)
    image = CrowdImage(sample.image.pixels[rows, cols])
    mask = CrowdMask(sample.mask.mask[rows, cols], sample.mask.provenance)
    if isinstance(sample, SourceSample):
        return replace(sample, image=image, mask=mask,
                       heads=_crop_points(sample.heads, top, left, crop_h, crop_w))
    heads = sample.held_out_heads
    if heads is not None:
        heads = _crop_points(heads, top, left, crop_h, crop_w)
    return replace(sample, image=image, mask=mask, held_out_heads=heads)


def random_crop_pair(sample: Sample, crop_h: int, crop_w: int, seed: int) -> Sample:
    """
    Crop image, mask and annotations with one shared random offset.

    Raises:
        ShapeError: If the crop is larger than the image
        ConfigurationError: If crop dims are not positive multiples of 8
    """
    top, left = crop_window(sample.image.height, sample.image.width, crop_h, crop_w, seed)
    return crop_sample(sample, top, left, crop_h, crop_w)


# Batching ---------------------------------------------------------------------------

def _image_tensor(samples: Sequence[Sample], dtype: torch.dtype) -> torch.Tensor:
    arr = np.stack([s.image.pixels.transpose(2, 0, 1) for s in samples])
    return torch.as_tensor(arr, dtype=dtype)


def _mask_tensor(samples: Sequence[Sample], dtype: torch.dtype) -> torch.Tensor:
    arr = np.stack([s.mask.mask[None] for s in samples])
    return torch.as_tensor(arr, dtype=dtype)


def collate_source(samples: Sequence[SourceSample], sigma: float = Config.DEFAULT_SIGMA,
                   dtype: torch.dtype = torch.float32) -> Dict[str, torch.Tensor]:
    """Stack source samples into NCHW tensors: images, density maps and exact masks."""
    density = np.stack([
        gaussian_density_map(s.heads.points, s.image.height, s.image.width, sigma)[None]
        for s in samples
    ])
    return {
        "images": _image_tensor(samples, dtype),
        "density": torch.as_tensor(density, dtype=dtype),
        "masks": _mask_tensor(samples, dtype),
    }


def collate_target(samples: Sequence[TargetSample],
                   dtype: torch.dtype = torch.float32) -> Dict[str, torch.Tensor]:
    """Stack target samples into NCHW tensors: images and coarse masks only."""
    return {"images": _image_tensor(samples, dtype), "masks": _mask_tensor(samples, dtype)}


# Persistence ------------------------------------------------------------------------

def _read_png(path: Path, mode: str) -> np.ndarray:
    if not path.is_file():
        raise FileProcessingError(f"Missing file: {path}", filename=str(path))
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert(mode))
    except (OSError, ValueError) as e:
        raise FileProcessingError(f"Cannot read image {path}: {e}", filename=str(path))


def _read_heads(path: Path) -> HeadPoints:
    data = read_json(path)
    try:
        return HeadPoints(np.asarray(data, dtype=np.float64).reshape(-1, 2))
    except (TypeError, ValueError) as e:
        raise DataValidationError(f"Malformed head annotations in {path}: {e}", field="heads",
                                  value=str(path))


def load_dataset(root: Union[str, Path], kind: Union[str, DatasetKind]) -> Dataset:
    """
    Load and validate a dataset directory.

    Args:
        root: Dataset directory
        kind: 'source' or 'target'

    Returns:
        Dataset in meta.json id order (sorted image names when meta.json is absent)

    Raises:
        FileProcessingError: Missing image, mask or (source) head file
        DataValidationError: Annotation outside image bounds or non-binary mask
    """
    root = Path(root)
    kind = DatasetKind(kind)
    images_dir = root / Config.IMAGES_DIR
    if not images_dir.is_dir():
        raise FileProcessingError(f"Dataset directory lacks {Config.IMAGES_DIR}/: {root}",
                                  filename=str(root))

    meta_path = root / Config.META_FILE
    meta = read_json(meta_path) if meta_path.is_file() else {}
    if meta.get("kind") not in (None, kind.value):
        raise DataValidationError(f"{meta_path} declares kind '{meta['kind']}', expected '{kind.value}'",
                                  field="kind", value=meta.get("kind"))
    ids = meta.get("ids") or sorted(p.stem for p in images_dir.glob("*.png"))
    attributes = meta.get("attributes", {})

    samples: List[Sample] = []
    for sample_id in ids:
        image = CrowdImage.from_uint8(_read_png(images_dir / f"{sample_id}.png", "RGB"))
        mask_path = root / Config.MASKS_DIR / f"{sample_id}.png"
        raw_mask = _read_png(mask_path, "L")
        if not np.all((raw_mask == 0) | (raw_mask == 255)):
            raise DataValidationError(f"Mask {mask_path} must contain only 0 and 255",
                                      field="mask", value=str(mask_path))
        head_path = root / Config.HEADS_DIR / f"{sample_id}.json"
        attrs = SceneAttributes.from_dict(attributes[sample_id]) if sample_id in attributes else None

        if kind is DatasetKind.SOURCE:
            mask = CrowdMask((raw_mask == 255).astype(np.uint8), MaskProvenance.EXACT)
            if not head_path.is_file():
                raise FileProcessingError(f"Missing head annotations: {head_path}", filename=str(head_path))
            samples.append(SourceSample(sample_id, image, _read_heads(head_path), mask,
                                        attrs or SceneAttributes()))
        else:
            mask = CrowdMask((raw_mask == 255).astype(np.uint8), MaskProvenance.DETECTION_RECTANGLES)
            heads = _read_heads(head_path) if head_path.is_file() else None
            samples.append(TargetSample(sample_id, image, mask, heads, attrs))
        logger.debug(f"Loaded {kind.value} sample {sample_id}")

    dataset = Dataset(kind, tuple(samples), name=root.name)
    logger.info(f"Loaded {kind.value} dataset from {root}: N={dataset.N}")
    return dataset


def save_dataset(dataset: Dataset, root: Union[str, Path]) -> List[Path]:
    """
    Write ``dataset`` in the directory layout read by load_dataset.

    Returns:
        List of written file paths
    """
    root = ensure_dir(root)
    for sub in (Config.IMAGES_DIR, Config.MASKS_DIR, Config.HEADS_DIR):
        ensure_dir(root / sub)

    written: List[Path] = []
    attributes: Dict[str, dict] = {}
    for sample in dataset.samples:
        sid = sample.sample_id
        image_path = root / Config.IMAGES_DIR / f"{sid}.png"
        mask_path = root / Config.MASKS_DIR / f"{sid}.png"
        Image.fromarray(sample.image.to_uint8(), mode="RGB").save(image_path)
        Image.fromarray((sample.mask.mask * 255).astype(np.uint8), mode="L").save(mask_path)
        written += [image_path, mask_path]

        heads = sample.heads if isinstance(sample, SourceSample) else sample.held_out_heads
        if heads is not None:
            written.append(write_json(heads.to_list(), root / Config.HEADS_DIR / f"{sid}.json"))
        if sample.attributes is not None:
            attributes[sid] = sample.attributes.to_dict()

    meta = {"kind": dataset.kind.value, "ids": dataset.ids(), "attributes": attributes}
    written.append(write_json(meta, root / Config.META_FILE))
    if dataset.N == 0:
        logger.warning(f"Wrote empty {dataset.kind.value} dataset to {root}")
    else:
        logger.info(f"Wrote {dataset.N} {dataset.kind.value} samples to {root}")
    return written

