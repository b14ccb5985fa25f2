"""
Report generation service.

Writes evaluation summaries (JSON + per-image CSV), false-colour density PNGs and
image | ground truth | prediction comparison figures.
"""
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from PIL import Image

try:
    import plotly.colors as pcolors
    import plotly.graph_objects as go
    from plotly.subplots import make_subplots
    PLOTLY_AVAILABLE = True
except ImportError:
    PLOTLY_AVAILABLE = False

from config import Config
from exceptions import FileProcessingError
from utils import ensure_dir, write_json

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.json"
PER_IMAGE_FILE = "per_image.csv"
PER_IMAGE_COLUMNS = ["id", "gt_count", "pred_count", "abs_error"]
GRADCHECK_FILE = "gradcheck.csv"
GRADCHECK_COLUMNS = ["check", "max_rel_error", "n_coords", "tolerance", "passed"]
DEFAULT_COLORSCALE = "Viridis"


def _colour_table(colorscale: str) -> np.ndarray:
    """256 x 3 uint8 lookup table sampled from a plotly colour scale."""
    if not PLOTLY_AVAILABLE:
        ramp = np.arange(256, dtype=np.uint8)
        return np.stack([ramp, ramp, ramp], axis=1)
    samples = pcolors.sample_colorscale(colorscale, list(np.linspace(0.0, 1.0, 256)))
    table = [pcolors.unlabel_rgb(c) for c in samples]
    return np.clip(np.rint(np.asarray(table, dtype=np.float64)), 0, 255).astype(np.uint8)


def colourize(density: np.ndarray, vmax: Optional[float] = None,
              colorscale: str = DEFAULT_COLORSCALE) -> np.ndarray:
    """Map a density map to an H x W x 3 uint8 false-colour image."""
    density = np.asarray(density, dtype=np.float64)
    top = float(density.max()) if vmax is None else float(vmax)
    scaled = density / max(top, Config.NORM_FLOOR)
    index = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
    return _colour_table(colorscale)[index]


def density_to_png(density: np.ndarray, path: Union[str, Path], vmax: Optional[float] = None,
                   colorscale: str = DEFAULT_COLORSCALE) -> Path:
    """
    Save a false-colour PNG of a density map.

    Args:
        density: H x W map
        path: Output file
        vmax: Value mapped to the top of the colour scale (default: map maximum)
        colorscale: Any plotly named colour scale
    """
    path = Path(path)
    if not PLOTLY_AVAILABLE:
        logger.warning("Plotly not available; writing a grayscale density PNG")
    try:
        Image.fromarray(colourize(density, vmax, colorscale), mode="RGB").save(path)
    except OSError as e:
        raise FileProcessingError(f"Cannot write {path}: {e}", filename=str(path))
    return path


def write_comparison_figure(image: np.ndarray, gt: np.ndarray, pred: np.ndarray,
                            path: Union[str, Path], title: str = "") -> Optional[Path]:
    """
    Write an image | ground truth | prediction panel.

    Returns:
        The written path, or None when the static image exporter is unavailable
    """
    if not PLOTLY_AVAILABLE:
        logger.warning("Plotly not available; skipping comparison figure")
        return None
    path = Path(path)
    gt_count, pred_count = float(np.sum(gt)), float(np.sum(pred))
    vmax = max(float(np.max(gt)), float(np.max(pred)), Config.NORM_FLOOR)
    try:
        fig = make_subplots(rows=1, cols=3, subplot_titles=(
            "Image", f"Ground truth ({gt_count:.1f})", f"Prediction ({pred_count:.1f})"))
        fig.add_trace(go.Image(z=np.rint(np.asarray(image) * 255).astype(np.uint8)), row=1, col=1)
        for col, values in ((2, gt), (3, pred)):
            fig.add_trace(go.Heatmap(z=np.asarray(values)[::-1], zmin=0.0, zmax=vmax,
                                     colorscale=DEFAULT_COLORSCALE, showscale=(col == 3)), row=1, col=col)
        height, width = np.asarray(gt).shape
        fig.update_layout(title=title, width=3 * max(width, 160) + 120, height=max(height, 160) + 120,
                          plot_bgcolor="white", paper_bgcolor="white", font=dict(size=10))
        fig.update_xaxes(showticklabels=False)
        fig.update_yaxes(showticklabels=False)
        fig.write_image(str(path), format="png")
    except Exception as e:
        logger.warning(f"Failed to export comparison figure {path}: {e}")
        return None
    return path


def _finite_or_none(value: float) -> Optional[float]:
    return float(value) if math.isfinite(value) else None


def write_metrics_report(report: Any, out_dir: Union[str, Path],
                         extra: Optional[Dict[str, Any]] = None) -> List[Path]:
    """
    Write ``metrics.json`` (summary) and ``per_image.csv`` (one row per image).

    Args:
        report: MetricsReport
        out_dir: Output directory
        extra: Additional keys merged into the JSON summary

    Returns:
        Written paths
    """
    out_dir = ensure_dir(out_dir)
    summary = {
        "mae": report.mae,
        "mse": report.mse,
        "psnr": report.psnr,
        "psnr_capped": report.psnr_capped,
        "ssim": _finite_or_none(report.ssim),
        "n_images": report.n_images,
        "software_versions": get_software_versions(),
    }
    summary.update(extra or {})
    metrics_path = write_json(summary, out_dir / METRICS_FILE)

    rows = [{"id": r.sample_id, "gt_count": r.gt_count, "pred_count": r.pred_count,
             "abs_error": abs(r.gt_count - r.pred_count)} for r in report.per_image]
    csv_path = out_dir / PER_IMAGE_FILE
    pd.DataFrame(rows, columns=PER_IMAGE_COLUMNS).to_csv(csv_path, index=False)
    logger.info(f"Wrote metrics report to {out_dir} (MAE={report.mae:.4f}, MSE={report.mse:.4f})")
    return [metrics_path, csv_path]


def write_gradcheck_report(results: List[Any], out_dir: Union[str, Path]) -> Path:
    """Write one CSV row per gradient check result."""
    out_dir = ensure_dir(out_dir)
    rows = [{"check": r.name, "max_rel_error": r.max_rel_error, "n_coords": r.n_coords,
             "tolerance": r.tolerance, "passed": r.passed} for r in results]
    path = out_dir / GRADCHECK_FILE
    pd.DataFrame(rows, columns=GRADCHECK_COLUMNS).to_csv(path, index=False)
    logger.info(f"Wrote {len(rows)} gradient check results to {path}")
    return path


def get_software_versions() -> Dict[str, str]:
    """Get versions of key software packages."""
    versions = {}
    for label, module in (("NumPy", "numpy"), ("SciPy", "scipy"), ("Pandas", "pandas"),
                          ("PyTorch", "torch"), ("Pillow", "PIL"), ("Plotly", "plotly")):
        try:
            versions[label] = str(__import__(module).__version__)
        except (ImportError, AttributeError):
            pass
    return versions
