"""
Loss functions: density regression, source and target segmentation (with the
pseudo-label mask filter), adversarial and discriminator terms, and their
weighted combination.

All batch inputs are tensors whose first dimension is the batch.
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Tuple

import torch

from config import Config, LossWeights
from exceptions import NumericalError, ShapeError

logger = logging.getLogger(__name__)

EPS = Config.EPSILON


def _as_batch(x: Any) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)
    if t.dim() == 2:
        t = t.unsqueeze(0)
    return t


def _check_shapes(name: str, a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}",
                         expected=tuple(b.shape), actual=tuple(a.shape))
    if a.shape[0] < 1:
        raise ShapeError(f"{name}: empty batch", expected="N >= 1", actual=tuple(a.shape))


def _per_image_mean(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1).mean(dim=1)


def _bce(prob: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    prob = prob.clamp(EPS, 1.0 - EPS)
    return -(target * torch.log(prob) + (1.0 - target) * torch.log(1.0 - prob))


def density_loss(pred: Any, gt: Any) -> torch.Tensor:
    """(1 / 2N) * sum over the batch of squared per-pixel differences."""
    pred, gt = _as_batch(pred), _as_batch(gt)
    _check_shapes("density_loss", pred, gt)
    return ((pred - gt) ** 2).sum() / (2.0 * pred.shape[0])


def source_seg_loss(z_hat: Any, z: Any) -> torch.Tensor:
    """Binary cross entropy, mean over pixels then over the batch."""
    z_hat, z = _as_batch(z_hat), _as_batch(z)
    _check_shapes("source_seg_loss", z_hat, z)
    return _per_image_mean(_bce(z_hat, z.to(z_hat.dtype))).mean()


def mask_filter(z_hat_t: Any, z_t: Any) -> torch.Tensor:
    """
    z_bar = z_hat * (1 - z) + z.

    Pins the prediction to 1 wherever the pseudo-label is foreground, so those
    pixels carry no gradient.
    """
    z_hat_t = z_hat_t if isinstance(z_hat_t, torch.Tensor) else torch.as_tensor(z_hat_t, dtype=torch.float64)
    z_t = z_t if isinstance(z_t, torch.Tensor) else torch.as_tensor(z_t, dtype=z_hat_t.dtype)
    if z_hat_t.shape != z_t.shape:
        raise ShapeError(f"mask_filter: shape mismatch {tuple(z_hat_t.shape)} vs {tuple(z_t.shape)}",
                         expected=tuple(z_t.shape), actual=tuple(z_hat_t.shape))
    z_t = z_t.to(z_hat_t.dtype)
    return z_hat_t * (1.0 - z_t) + z_t


def target_seg_loss(z_hat_t: Any, z_t: Any) -> torch.Tensor:
    """Cross entropy of the coarse mask against the filtered prediction."""
    z_hat_t, z_t = _as_batch(z_hat_t), _as_batch(z_t)
    _check_shapes("target_seg_loss", z_hat_t, z_t)
    z_bar = mask_filter(z_hat_t, z_t)
    return _per_image_mean(_bce(z_bar, z_t.to(z_bar.dtype))).mean()


def adversarial_loss(p_t: Any) -> torch.Tensor:
    """-sum log p_t over patches, averaged over the batch."""
    p_t = _as_batch(p_t)
    per_image = -torch.log(p_t.clamp(EPS, 1.0 - EPS)).reshape(p_t.shape[0], -1).sum(dim=1)
    return per_image.mean()


def discriminator_loss(p_s: Any, p_t: Any) -> torch.Tensor:
    """Source patches labelled 1, target patches labelled 0."""
    p_s, p_t = _as_batch(p_s), _as_batch(p_t)
    source_term = -torch.log(p_s.clamp(EPS, 1.0 - EPS)).mean()
    target_term = -torch.log(1.0 - p_t.clamp(EPS, 1.0 - EPS)).mean()
    return source_term + target_term


@dataclass
class LossRecord:
    """One iteration's loss values; None marks a term that was not computed."""
    den: float
    seg_s: Optional[float] = None
    seg_t: Optional[float] = None
    adv: Optional[float] = None
    total: Optional[float] = None
    disc: Optional[float] = None

    def to_dict(self) -> Dict[str, Optional[float]]:
        return asdict(self)

    def to_row(self, iteration: int) -> Dict[str, Optional[float]]:
        row: Dict[str, Optional[float]] = {"iter": iteration}
        row.update(self.to_dict())
        return row

    def summary(self) -> str:
        return " ".join(f"{k}={v:.6g}" for k, v in self.to_dict().items() if v is not None)


def _scalar(value: Any) -> Optional[float]:
    if value is None:
        return None
    if isinstance(value, torch.Tensor):
        return float(value.detach().cpu().item())
    return float(value)


def total_loss(den: Any, seg_s: Any = None, seg_t: Any = None, adv: Any = None,
               weights: LossWeights = LossWeights(), disc: Any = None) -> Tuple[Any, LossRecord]:
    """
    L = den + lambda_s * seg_s + lambda_t * seg_t + lambda_d * adv.

    Absent (None) terms contribute nothing. ``disc`` is recorded but never enters L.

    Returns:
        (total, LossRecord); total keeps the autograd graph when inputs are tensors

    Raises:
        NumericalError: If any supplied component is non-finite
    """
    values = {"den": _scalar(den), "seg_s": _scalar(seg_s), "seg_t": _scalar(seg_t),
              "adv": _scalar(adv), "disc": _scalar(disc)}
    bad = [k for k, v in values.items() if v is not None and not math.isfinite(v)]
    if bad:
        record = LossRecord(**values)
        logger.error(f"Non-finite loss component(s) {bad}: {record.to_dict()}")
        raise NumericalError(f"Non-finite loss component: {', '.join(bad)}", component=bad[0],
                             record=record.to_dict())

    total = den
    for term, weight in ((seg_s, weights.lambda_s), (seg_t, weights.lambda_t), (adv, weights.lambda_d)):
        if term is not None:
            total = total + weight * term
    record = LossRecord(total=_scalar(total), **values)
    if not math.isfinite(record.total):
        raise NumericalError("Non-finite total loss", component="total", record=record.to_dict())
    return total, record
