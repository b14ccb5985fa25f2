"""
Tests for finite-difference gradient verification.
"""

import pytest
import torch

from exceptions import ConfigurationError, NumericalError
from services.gradient_checker import GradCheckResult, gradient_check, mask_filter_blocking, run_gradient_suite


class _WrongSquare(torch.autograd.Function):
    """x ** 2 with a backward pass that is off by a factor of 1.5."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x ** 2

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * 3.0 * x


@pytest.mark.unit
class TestGradientCheck:
    """Test the central-difference comparison itself."""

    def test_correct_gradient_passes(self):
        x = torch.rand(5, dtype=torch.float64, requires_grad=True)
        error = gradient_check(lambda: (x ** 3).sum(), [x], n_coords=5)
        assert error < 1e-6

    def test_wrong_gradient_detected(self):
        x = (torch.rand(5, dtype=torch.float64) + 0.5).requires_grad_(True)
        error = gradient_check(lambda: _WrongSquare.apply(x).sum(), [x], n_coords=5)
        # analytic 3x against numeric 2x
        assert error == pytest.approx(1.0 / 3.0, rel=1e-4)

    def test_requires_float64(self):
        x = torch.rand(3, requires_grad=True)
        with pytest.raises(ConfigurationError):
            gradient_check(lambda: x.sum(), [x], n_coords=1)

    def test_positive_step(self):
        x = torch.rand(3, dtype=torch.float64, requires_grad=True)
        with pytest.raises(ConfigurationError):
            gradient_check(lambda: x.sum(), [x], n_coords=1, step=0.0)

    def test_non_finite_loss(self):
        x = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        with pytest.raises(NumericalError):
            gradient_check(lambda: torch.log(x).sum(), [x], n_coords=1)

    def test_parameters_restored(self):
        x = torch.rand(4, dtype=torch.float64, requires_grad=True)
        original = x.detach().clone()
        gradient_check(lambda: (x ** 2).sum(), [x], n_coords=4)
        assert torch.equal(x.detach(), original)

    def test_skips_coordinates_without_gradient(self):
        theta = torch.ones(10, dtype=torch.float64, requires_grad=True)
        base = theta.detach().clone()
        touched = set()

        def loss_fn():
            touched.update(int(i) for i in torch.nonzero(theta.detach() != base).flatten())
            return (theta[:5] ** 2).sum() + 0.0 * theta[5:].sum()

        assert gradient_check(loss_fn, [theta], n_coords=10) < 1e-8
        assert touched == {0, 1, 2, 3, 4}

    def test_all_zero_gradients_sample_everything(self):
        theta = torch.ones(4, dtype=torch.float64, requires_grad=True)
        base = theta.detach().clone()
        touched = set()

        def loss_fn():
            touched.update(int(i) for i in torch.nonzero(theta.detach() != base).flatten())
            return 0.0 * theta.sum()

        assert gradient_check(loss_fn, [theta], n_coords=4) == 0.0
        assert touched == {0, 1, 2, 3}

    def test_result_pass_flag(self):
        assert GradCheckResult("a", 5e-5, 3).passed
        assert not GradCheckResult("a", 2e-4, 3).passed


@pytest.mark.unit
class TestMaskFilterBlocking:

    def test_foreground_gradient_is_exactly_zero(self):
        assert mask_filter_blocking(trials=20, size=8, seed=1) == 0.0


@pytest.mark.integration
class TestGradientSuite:
    """Test every loss and network gradient on the smooth tiny architecture."""

    @pytest.fixture(scope="class")
    def results(self):
        return {r.name: r for r in run_gradient_suite(seed=0, n_coords=6)}

    def test_covers_every_component(self, results):
        assert set(results) == {
            "density_loss", "source_seg_loss", "target_seg_loss", "adversarial_loss", "discriminator_loss",
            "extractor", "density_estimator", "semantic_extractor", "discriminator", "combined_loss",
            "mask_filter_blocking",
        }

    def test_all_pass(self, results):
        failed = {name: r.max_rel_error for name, r in results.items() if not r.passed}
        assert failed == {}

    def test_mask_filter_blocking_is_exact(self, results):
        assert results["mask_filter_blocking"].max_rel_error == 0.0
