"""
Counting and density-map quality metrics, full-image prediction and dataset evaluation.

PSNR and SSIM compare maps after dividing both by max(gt), floored at 1e-8, so the
data range is 1.0.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.signal import correlate2d

from cache_manager import density_cache, density_cache_key
from config import Config, EvalConfig
from exceptions import DataValidationError, ShapeError
from services.data_service import Dataset, SourceSample
from services.density_service import count_from_density, gaussian_density_map
from services.report_service import write_comparison_figure
from utils import ensure_dir

logger = logging.getLogger(__name__)

Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass
class ImageResult:
    sample_id: str
    gt_count: float
    pred_count: float
    psnr: float
    ssim: float


@dataclass
class MetricsReport:
    """Dataset-level metrics; ``psnr`` is the mean of per-image values capped at 99 dB."""
    mae: float
    mse: float
    psnr: float
    ssim: float
    n_images: int
    psnr_capped: bool = False
    per_image: List[ImageResult] = field(default_factory=list)


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"Map shapes differ: {pred.shape} vs {gt.shape}", expected=gt.shape, actual=pred.shape)
    return pred, gt


def normalize_pair(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Divide both maps by max(gt), floored at 1e-8."""
    pred, gt = _check_pair(pred, gt)
    scale = max(float(gt.max()) if gt.size else 0.0, Config.NORM_FLOOR)
    return pred / scale, gt / scale


def mae_mse(preds: Sequence[float], gts: Sequence[float]) -> Tuple[float, float]:
    """
    Mean absolute error and root mean squared error of counts.

    Raises:
        DataValidationError: On empty or unequal-length inputs
    """
    preds = np.asarray(preds, dtype=np.float64).ravel()
    gts = np.asarray(gts, dtype=np.float64).ravel()
    if preds.size == 0 or preds.size != gts.size:
        raise DataValidationError(f"Need equal non-empty count lists, got {preds.size} and {gts.size}",
                                  field="counts", value=[preds.size, gts.size])
    diff = preds - gts
    return float(np.mean(np.abs(diff))), float(np.sqrt(np.mean(diff ** 2)))


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB with data range 1; identical maps give inf."""
    p, g = normalize_pair(pred, gt)
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def capped_psnr(value: float) -> Tuple[float, bool]:
    if value >= Config.PSNR_CAP:
        return Config.PSNR_CAP, True
    return value, False


def gaussian_window(size: int = Config.SSIM_WINDOW, sigma: float = Config.SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian weights."""
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """
    Mean structural similarity over all fully contained 11 x 11 Gaussian windows.

    Raises:
        ShapeError: If a map is smaller than the window
    """
    p, g = normalize_pair(pred, gt)
    size = Config.SSIM_WINDOW
    if p.ndim != 2 or min(p.shape) < size:
        raise ShapeError(f"SSIM needs 2-D maps of at least {size}x{size}, got {p.shape}",
                         expected=f">= {size}x{size}", actual=p.shape)
    w = gaussian_window()
    data_range = 1.0
    c1 = (Config.SSIM_K1 * data_range) ** 2
    c2 = (Config.SSIM_K2 * data_range) ** 2

    def local(x: np.ndarray) -> np.ndarray:
        return correlate2d(x, w, mode="valid")

    mu_p, mu_g = local(p), local(g)
    var_p = local(p * p) - mu_p ** 2
    var_g = local(g * g) - mu_g ** 2
    cov = local(p * g) - mu_p * mu_g
    num = (2.0 * mu_p * mu_g + c1) * (2.0 * cov + c2)
    den = (mu_p ** 2 + mu_g ** 2 + c1) * (var_p + var_g + c2)
    return float(np.mean(num / den))


def _model_dtype(model: torch.nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def _tile_starts(length: int, cap: int) -> List[int]:
    return list(range(0, length, cap))


def predict_full_image(model: torch.nn.Module, pixels: np.ndarray,
                       tile_cap: int = Config.DEFAULT_TILE_CAP) -> np.ndarray:
    """
    Predict a density map for a whole image.

    Dims that are not multiples of 8 are reflect-padded and the prediction is
    cropped back. Images larger than ``tile_cap`` are split into non-overlapping
    tiles whose predictions are stitched together.

    Returns:
        float64 H x W density map
    """
    height, width = pixels.shape[:2]
    stride = Config.FEATURE_STRIDE
    pad_h, pad_w = (-height) % stride, (-width) % stride
    padded = np.pad(pixels, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect") if pad_h or pad_w else pixels
    ph, pw = padded.shape[:2]

    model.eval()
    dtype = _model_dtype(model)
    out = np.zeros((ph, pw), dtype=np.float64)
    with torch.no_grad():
        for top in _tile_starts(ph, tile_cap):
            for left in _tile_starts(pw, tile_cap):
                tile = padded[top:top + tile_cap, left:left + tile_cap]
                x = torch.as_tensor(np.ascontiguousarray(tile.transpose(2, 0, 1))[None], dtype=dtype)
                out[top:top + tile.shape[0], left:left + tile.shape[1]] = \
                    model(x)[0, 0].to(torch.float64).cpu().numpy()
    return out[:height, :width]


def _heads_of(sample) -> np.ndarray:
    heads = sample.heads if isinstance(sample, SourceSample) else sample.held_out_heads
    if heads is None:
        raise DataValidationError(f"Sample {sample.sample_id} has no evaluation head points",
                                  field="heads", value=sample.sample_id)
    return heads.points


def _ground_truth(sample_id: str, points: np.ndarray, shape: Tuple[int, int], sigma: float) -> np.ndarray:
    key = density_cache_key(sample_id, sigma, shape, points)
    return density_cache.get_or_set(key, lambda: gaussian_density_map(points, shape[0], shape[1], sigma))


def evaluate(model: Union[torch.nn.Module, Predictor], dataset: Dataset, cfg: EvalConfig = EvalConfig(),
             out_dir: Optional[Union[str, Path]] = None) -> MetricsReport:
    """
    Evaluate a model on a dataset with held-out head points.

    Args:
        model: Network, or any callable mapping H x W x 3 pixels to an H x W map
        dataset: Samples carrying evaluation heads
        cfg: Sigma, tiling cap, worker count and number of figures
        out_dir: Where comparison figures go when ``cfg.n_figures > 0``

    Returns:
        MetricsReport with rows ordered by sample id
    """
    cfg.validate()
    if isinstance(model, torch.nn.Module):
        net = model
        predictor: Predictor = lambda pixels: predict_full_image(net, pixels, cfg.tile_cap)
    else:
        predictor = model
    samples = sorted(dataset.samples, key=lambda s: s.sample_id)
    # resolve labels before any forward pass
    labels = [_heads_of(s) for s in samples]

    def run(index: int) -> Tuple[ImageResult, np.ndarray, np.ndarray]:
        sample = samples[index]
        shape = (sample.image.height, sample.image.width)
        pred = np.asarray(predictor(sample.image.pixels), dtype=np.float64)
        gt = _ground_truth(sample.sample_id, labels[index], shape, cfg.sigma)
        result = ImageResult(sample.sample_id, count_from_density(gt), count_from_density(pred),
                             psnr(pred, gt), ssim(pred, gt))
        logger.debug(f"{sample.sample_id}: gt={result.gt_count:.3f} pred={result.pred_count:.3f}")
        return result, gt, pred

    if cfg.num_workers > 0:
        with ThreadPoolExecutor(max_workers=cfg.num_workers) as pool:
            outputs = list(pool.map(run, range(len(samples))))
    else:
        outputs = [run(i) for i in range(len(samples))]

    rows = [o[0] for o in outputs]
    mae, mse = mae_mse([r.pred_count for r in rows], [r.gt_count for r in rows])
    capped = [capped_psnr(r.psnr) for r in rows]
    report = MetricsReport(
        mae=mae, mse=mse,
        psnr=float(np.mean([c[0] for c in capped])),
        ssim=float(np.mean([r.ssim for r in rows])),
        n_images=len(rows),
        psnr_capped=any(c[1] for c in capped),
        per_image=rows,
    )

    if cfg.n_figures > 0 and out_dir is not None:
        fig_dir = ensure_dir(Path(out_dir) / "figures")
        for sample, (result, gt, pred) in list(zip(samples, outputs))[:cfg.n_figures]:
            write_comparison_figure(sample.image.pixels, gt, pred, fig_dir / f"{sample.sample_id}.png",
                                    title=sample.sample_id)

    logger.info(f"Evaluated {report.n_images} images: MAE={report.mae:.4f} MSE={report.mse:.4f} "
                f"PSNR={report.psnr:.2f} SSIM={report.ssim:.4f}")
    logger.debug(f"Density cache: {density_cache.stats()}")
    return report
