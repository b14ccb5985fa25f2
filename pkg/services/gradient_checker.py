"""
Finite-difference verification of analytic gradients.

All checks run in float64. Networks use the smooth variant of the architecture
(SiLU, average pooling, softplus output) so central differences never straddle a
kink.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from config import ArchConfig, Config, LossWeights
from exceptions import ConfigurationError, NumericalError
from services.loss_service import (adversarial_loss, density_loss, discriminator_loss, source_seg_loss,
                                   target_seg_loss, total_loss)
from services.network_service import CrowdAdaptNet, ParamSet, init_params

logger = logging.getLogger(__name__)

LossFn = Callable[[], torch.Tensor]


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_coords: int
    tolerance: float = Config.GRADCHECK_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _evaluate(loss_fn: LossFn) -> float:
    value = loss_fn()
    value = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not np.isfinite(value):
        raise NumericalError("Gradient check loss returned a non-finite value", component="loss_fn",
                             record={"value": value})
    return value


def gradient_check(loss_fn: LossFn, params: Union[ParamSet, Sequence[torch.Tensor]], n_coords: int,
                   step: float = Config.GRADCHECK_STEP, seed: int = 0,
                   rel_floor: float = Config.NORM_FLOOR) -> float:
    """
    Compare analytic gradients with central differences at sampled coordinates.

    Coordinates are drawn uniformly among those whose analytic gradient magnitude is
    at least 1e-3 of the largest one, so coordinates with vanishing gradients (dead
    ReLU units, saturated sigmoids) are never checked. When every gradient is zero
    all coordinates are eligible.

    Args:
        loss_fn: Zero-argument callable returning a scalar tensor
        params: float64 leaf tensors (or a ParamSet) the loss depends on
        n_coords: Number of coordinates to test
        step: Central-difference step
        seed: Coordinate sampling seed
        rel_floor: Floor of the relative-error denominator

    Returns:
        Maximum relative error |a - n| / max(|a|, |n|, rel_floor)

    Raises:
        ConfigurationError: If step <= 0 or a parameter is not float64
        NumericalError: If the loss is non-finite
    """
    if not step > 0:
        raise ConfigurationError(f"Gradient check step must be > 0, got {step}", config_key="step", value=step)
    tensors = params.tensors() if isinstance(params, ParamSet) else list(params)
    for t in tensors:
        if t.dtype != torch.float64:
            raise ConfigurationError("Gradient checks require float64 parameters", config_key="dtype",
                                     value=str(t.dtype))

    loss = loss_fn()
    _evaluate(lambda: loss)
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g.detach() for t, g in zip(tensors, grads)]

    flat = torch.cat([g.reshape(-1) for g in grads]).abs().numpy()
    if flat.size == 0:
        return 0.0
    threshold = 1e-3 * flat.max()
    candidates = np.nonzero(flat >= threshold)[0] if flat.max() > 0 else np.arange(flat.size)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(candidates, size=min(n_coords, candidates.size), replace=False)

    offsets = np.cumsum([0] + [t.numel() for t in tensors])
    worst = 0.0
    with torch.no_grad():
        for coord in np.sort(chosen):
            ti = int(np.searchsorted(offsets, coord, side="right") - 1)
            idx = int(coord - offsets[ti])
            view = tensors[ti].detach().view(-1)
            original = view[idx].item()
            view[idx] = original + step
            f_plus = _evaluate(loss_fn)
            view[idx] = original - step
            f_minus = _evaluate(loss_fn)
            view[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            analytic = float(grads[ti].reshape(-1)[idx])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), rel_floor)
            worst = max(worst, rel)
    return worst


def _leaf(t: torch.Tensor) -> torch.Tensor:
    return t.detach().clone().requires_grad_(True)


def mask_filter_blocking(trials: int = 100, size: int = 16, seed: int = 0) -> float:
    """
    Largest |d target_seg_loss / d z_hat| over pixels whose pseudo-label is 1.

    Exactly 0.0 when the mask filter blocks foreground gradients.
    """
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(trials):
        z_hat = _leaf(torch.rand((2, 1, size, size), generator=gen, dtype=torch.float64) * 0.98 + 0.01)
        z = (torch.rand((2, 1, size, size), generator=gen, dtype=torch.float64) > 0.5).to(torch.float64)
        (grad,) = torch.autograd.grad(target_seg_loss(z_hat, z), [z_hat])
        worst = max(worst, float(grad[z == 1].abs().max()) if bool((z == 1).any()) else 0.0)
    return worst


def _loss_checks(gen: torch.Generator, n_coords: int, step: float, seed: int) -> List[GradCheckResult]:
    shape = (2, 1, 16, 16)

    def rand(low: float = 0.0, high: float = 1.0, size=shape) -> torch.Tensor:
        return torch.rand(size, generator=gen, dtype=torch.float64) * (high - low) + low

    pred, gt = _leaf(rand(0.0, 0.2)), rand(0.0, 0.2)
    z_hat, z = _leaf(rand(0.05, 0.95)), (rand() > 0.5).to(torch.float64)
    z_hat_t, z_t = _leaf(rand(0.05, 0.95)), (rand() > 0.5).to(torch.float64)
    p_t = _leaf(rand(0.05, 0.95, (2, 1, 2, 2)))
    p_s = _leaf(rand(0.05, 0.95, (2, 1, 2, 2)))

    checks = {
        "density_loss": (lambda: density_loss(pred, gt), [pred]),
        "source_seg_loss": (lambda: source_seg_loss(z_hat, z), [z_hat]),
        "target_seg_loss": (lambda: target_seg_loss(z_hat_t, z_t), [z_hat_t]),
        "adversarial_loss": (lambda: adversarial_loss(p_t), [p_t]),
        "discriminator_loss": (lambda: discriminator_loss(p_s, p_t), [p_s, p_t]),
    }
    return [GradCheckResult(name, gradient_check(loss_fn, params, n_coords, step, seed), n_coords)
            for name, (loss_fn, params) in checks.items()]


def _network_checks(model: CrowdAdaptNet, x_s: torch.Tensor, x_t: torch.Tensor, batch: Dict[str, torch.Tensor],
                    n_coords: int, step: float, seed: int) -> List[GradCheckResult]:
    params = model.param_set()
    with torch.no_grad():
        f_fixed = model.extract_features(x_s).detach()

    checks = {
        "extractor": (lambda: model.extract_features(x_s).sum(), "theta_e"),
        "density_estimator": (lambda: model.predict_density(f_fixed).sum(), "theta_c"),
        "semantic_extractor": (lambda: model.predict_mask(f_fixed).sum(), "theta_s"),
        "discriminator": (lambda: model.discriminate(f_fixed).sum(), "theta_d"),
    }
    results = [GradCheckResult(name, gradient_check(loss_fn, params.tensors(group), n_coords, step, seed), n_coords)
               for name, (loss_fn, group) in checks.items()]

    weights = LossWeights()

    def combined() -> torch.Tensor:
        f_s = model.extract_features(x_s)
        f_t = model.extract_features(x_t)
        total, _ = total_loss(
            density_loss(model.predict_density(f_s), batch["density"]),
            source_seg_loss(model.predict_mask(f_s), batch["masks_s"]),
            target_seg_loss(model.predict_mask(f_t), batch["masks_t"]),
            adversarial_loss(model.discriminate(f_t)),
            weights,
        )
        return total

    results.append(GradCheckResult("combined_loss", gradient_check(combined, params, 4 * n_coords, step, seed),
                                   4 * n_coords))
    return results


def run_gradient_suite(arch: Optional[ArchConfig] = None, seed: int = 0, n_coords: int = 12,
                       step: float = Config.GRADCHECK_STEP, image_size: int = 128) -> List[GradCheckResult]:
    """
    Check every loss against its inputs, every network against its parameters, and the
    combined loss through all four networks.

    Args:
        arch: Architecture (smooth tiny config by default); forced to the smooth variant
        seed: Seed for inputs, initialization and coordinate sampling
        n_coords: Coordinates per check
        step: Central-difference step
        image_size: Square input size; 128 gives 16 x 16 features
    """
    arch = ArchConfig.tiny(smooth=True) if arch is None else ArchConfig.from_dict({**arch.to_dict(), "smooth": True})
    gen = torch.Generator().manual_seed(seed)
    results = _loss_checks(gen, n_coords, step, seed)

    model = init_params(arch, seed, dtype="float64")
    model.train()
    shape = (2, arch.in_channels, image_size, image_size)
    x_s = torch.rand(shape, generator=gen, dtype=torch.float64)
    x_t = torch.rand(shape, generator=gen, dtype=torch.float64)
    map_shape = (2, 1, image_size, image_size)
    batch = {
        "density": torch.rand(map_shape, generator=gen, dtype=torch.float64) * 0.01,
        "masks_s": (torch.rand(map_shape, generator=gen, dtype=torch.float64) > 0.5).to(torch.float64),
        "masks_t": (torch.rand(map_shape, generator=gen, dtype=torch.float64) > 0.5).to(torch.float64),
    }
    results += _network_checks(model, x_s, x_t, batch, n_coords, step, seed)

    blocking = mask_filter_blocking(seed=seed)
    results.append(GradCheckResult("mask_filter_blocking", blocking, 100, tolerance=np.nextafter(0.0, 1.0)))

    for r in results:
        level = logging.INFO if r.passed else logging.ERROR
        logger.log(level, f"gradcheck {r.name}: max rel error {r.max_rel_error:.3e} over {r.n_coords} coords")
    return results
