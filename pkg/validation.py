"""
Input validation utilities for images, masks, head annotations and geometry.
"""
import logging
from typing import Any, Dict, Tuple

import numpy as np

from config import Config
from exceptions import ConfigurationError, DataValidationError, ShapeError

logger = logging.getLogger(__name__)


def validate_image_array(pixels: np.ndarray) -> Tuple[bool, str]:
    """
    Validate an H x W x 3 image with finite values in [0, 1].

    Returns:
        Tuple of (is_valid, error_message)
    """
    if not isinstance(pixels, np.ndarray) or pixels.ndim != 3 or pixels.shape[2] != 3:
        return False, f"Image must be an H x W x 3 array, got shape {getattr(pixels, 'shape', None)}"
    h, w = pixels.shape[:2]
    if h < Config.MIN_IMAGE_SIZE or w < Config.MIN_IMAGE_SIZE:
        return False, f"Image must be at least {Config.MIN_IMAGE_SIZE}x{Config.MIN_IMAGE_SIZE}, got {h}x{w}"
    if not np.all(np.isfinite(pixels)):
        return False, "Image contains non-finite values"
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        return False, "Image values must lie in [0, 1]"
    return True, ""


def validate_mask_array(mask: np.ndarray, height: int, width: int) -> Tuple[bool, str]:
    """
    Validate a binary H x W mask.

    Returns:
        Tuple of (is_valid, error_message)
    """
    if not isinstance(mask, np.ndarray) or mask.shape != (height, width):
        return False, f"Mask shape {getattr(mask, 'shape', None)} does not match image {height}x{width}"
    if not np.all((mask == 0) | (mask == 1)):
        return False, "Mask values must be exactly 0 or 1"
    return True, ""


def validate_head_points(points: np.ndarray, height: int, width: int) -> Tuple[bool, str]:
    """
    Validate that every (row, col) point lies inside [0, H) x [0, W).

    Returns:
        Tuple of (is_valid, error_message)
    """
    if points.size == 0:
        return True, ""
    if points.ndim != 2 or points.shape[1] != 2:
        return False, f"Head points must be an N x 2 array, got shape {points.shape}"
    if not np.all(np.isfinite(points)):
        return False, "Head points contain non-finite coordinates"
    rows, cols = points[:, 0], points[:, 1]
    outside = (rows < 0) | (rows >= height) | (cols < 0) | (cols >= width)
    if np.any(outside):
        first = points[np.argmax(outside)]
        return False, f"Head point ({first[0]}, {first[1]}) lies outside image bounds {height}x{width}"
    return True, ""


def validate_crop(crop_h: int, crop_w: int, height: int, width: int) -> Tuple[bool, str]:
    """
    Validate a crop window against the image size.

    Returns:
        Tuple of (is_valid, error_message)
    """
    if crop_h <= 0 or crop_w <= 0 or crop_h % Config.FEATURE_STRIDE or crop_w % Config.FEATURE_STRIDE:
        return False, f"Crop {crop_h}x{crop_w} must be positive multiples of {Config.FEATURE_STRIDE}"
    if crop_h > height or crop_w > width:
        return False, f"Crop {crop_h}x{crop_w} is larger than image {height}x{width}"
    return True, ""


def require_head_points(points: np.ndarray, height: int, width: int, source: str = None) -> None:
    """Raise DataValidationError if any head point is out of bounds."""
    is_valid, error = validate_head_points(points, height, width)
    if not is_valid:
        message = f"{source}: {error}" if source else error
        log_validation_error("head_points", message)
        raise DataValidationError(message, field="heads", value=source)


def require_crop(crop_h: int, crop_w: int, height: int, width: int) -> None:
    """Raise ConfigurationError for bad crop sizes and ShapeError for oversized crops."""
    is_valid, error = validate_crop(crop_h, crop_w, height, width)
    if is_valid:
        return
    log_validation_error("crop", error, {"crop": (crop_h, crop_w), "image": (height, width)})
    if crop_h > height or crop_w > width:
        raise ShapeError(error, expected=f"<= {height}x{width}", actual=(crop_h, crop_w))
    raise ConfigurationError(error, config_key="crop", value=[crop_h, crop_w])


def log_validation_error(error_type: str, details: str, context: Dict[str, Any] = None):
    """
    Log validation errors with truncated context.

    Args:
        error_type: Type of validation error
        details: Detailed error message
        context: Extra values to include
    """
    log_data = {
        'error_type': error_type,
        'details': details,
        'context': {k: str(v)[:100] for k, v in (context or {}).items()}
    }

    logger.warning(f"Validation error: {log_data}")
