"""
Gaussian density maps from head annotations, counting, and the binary map container.
"""
import logging
from pathlib import Path
from typing import Any, Union

import numpy as np

from config import Config
from exceptions import ConfigurationError, FileProcessingError
from validation import require_head_points

logger = logging.getLogger(__name__)

HEADER_BYTES = 16


def _as_points(heads: Any) -> np.ndarray:
    points = getattr(heads, "points", heads)
    return np.asarray(points, dtype=np.float64).reshape(-1, 2)


def gaussian_density_map(heads: Any, height: int, width: int, sigma: float = Config.DEFAULT_SIGMA,
                         truncate: float = Config.TRUNCATE) -> np.ndarray:
    """
    Rasterize head points into a density map.

    Each head contributes a Gaussian sampled at pixel centres (i + 0.5, j + 0.5),
    truncated at ``truncate * sigma`` and renormalized so its in-image mass is 1.

    Args:
        heads: HeadPoints or an N x 2 array of (row, col)
        height: Map height
        width: Map width
        sigma: Kernel standard deviation in pixels
        truncate: Window half-width in units of sigma

    Returns:
        float64 array of shape (height, width)

    Raises:
        ConfigurationError: If sigma <= 0
        DataValidationError: If a head lies outside the map
    """
    if not sigma > 0:
        raise ConfigurationError(f"sigma must be > 0, got {sigma}", config_key="sigma", value=sigma)
    points = _as_points(heads)
    require_head_points(points, height, width)

    density = np.zeros((height, width), dtype=np.float64)
    radius = truncate * sigma
    centres_r = np.arange(height) + 0.5
    centres_c = np.arange(width) + 0.5
    for r, c in points:
        rows = np.nonzero(np.abs(centres_r - r) <= radius)[0]
        cols = np.nonzero(np.abs(centres_c - c) <= radius)[0]
        gr = np.exp(-((centres_r[rows] - r) ** 2) / (2.0 * sigma ** 2))
        gc = np.exp(-((centres_c[cols] - c) ** 2) / (2.0 * sigma ** 2))
        kernel = np.outer(gr, gc)
        total = kernel.sum()
        if rows.size == 0 or cols.size == 0 or not total > 0:
            # kernel underflow for tiny sigma
            density[int(r), int(c)] += 1.0
            continue
        density[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] += kernel / total
    return density


def count_from_density(density: Any) -> float:
    """Crowd count: the sum of all map values."""
    if hasattr(density, "detach"):
        density = density.detach().cpu().numpy()
    return float(np.sum(np.asarray(density, dtype=np.float64)))


def save_density_map(density: np.ndarray, path: Union[str, Path]) -> Path:
    """
    Write a map as ``b"DMAP"``, uint32 version, uint32 H, uint32 W (little-endian)
    followed by H*W float32 values in row-major order.
    """
    density = np.asarray(density)
    if density.ndim != 2:
        raise ConfigurationError(f"Density map must be 2-D, got shape {density.shape}")
    height, width = density.shape
    header = Config.DENSITY_MAGIC + np.array([Config.DENSITY_VERSION, height, width], dtype="<u4").tobytes()
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(density.astype("<f4").tobytes(order="C"))
    except OSError as e:
        raise FileProcessingError(f"Cannot write density map {path}: {e}", filename=str(path))
    return path


def load_density_map(path: Union[str, Path]) -> np.ndarray:
    """Read a map written by save_density_map; returns float32 H x W."""
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise FileProcessingError(f"Cannot read density map {path}: {e}", filename=str(path))
    if len(payload) < HEADER_BYTES or payload[:4] != Config.DENSITY_MAGIC:
        raise FileProcessingError(f"Not a density map file: {path}", filename=str(path))
    version, height, width = np.frombuffer(payload[4:HEADER_BYTES], dtype="<u4")
    if version != Config.DENSITY_VERSION:
        raise FileProcessingError(f"Unsupported density map version {version}", filename=str(path))
    expected = HEADER_BYTES + 4 * int(height) * int(width)
    if len(payload) != expected:
        raise FileProcessingError(f"Density map {path} is truncated: {len(payload)} of {expected} bytes",
                                  filename=str(path))
    values = np.frombuffer(payload[HEADER_BYTES:], dtype="<f4").reshape(int(height), int(width))
    return values.astype(np.float32)
