"""
Unit tests for the loss functions against closed-form values.
"""

import math

import numpy as np
import pytest
import torch

from config import Config, LossWeights
from exceptions import NumericalError, ShapeError
from services.loss_service import (LossRecord, adversarial_loss, density_loss, discriminator_loss, mask_filter,
                                   source_seg_loss, target_seg_loss, total_loss)

LN2 = math.log(2.0)


def full(value, shape=(2, 1, 4, 4), requires_grad=False):
    return torch.full(shape, float(value), dtype=torch.float64, requires_grad=requires_grad)


@pytest.mark.unit
class TestDensityLoss:

    def test_half_mean_of_summed_squares(self):
        # 2 images x 16 pixels x 1^2 = 32, halved and averaged over N = 2
        assert float(density_loss(full(0.0), full(1.0))) == pytest.approx(8.0)

    def test_zero_for_identical_maps(self):
        assert float(density_loss(full(0.3), full(0.3))) == 0.0

    def test_two_dimensional_input(self):
        assert float(density_loss(np.zeros((3, 3)), np.ones((3, 3)))) == pytest.approx(4.5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            density_loss(full(0.0, (1, 1, 4, 4)), full(0.0, (1, 1, 4, 5)))


@pytest.mark.unit
class TestSegmentationLosses:
    """Test source and target cross entropy and the mask filter."""

    def test_source_uniform_prediction(self):
        z = (torch.rand(2, 1, 4, 4) > 0.5).to(torch.float64)
        assert float(source_seg_loss(full(0.5), z)) == pytest.approx(LN2)

    def test_source_perfect_prediction_is_near_zero(self):
        z = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
        z[..., :2, :] = 1
        assert float(source_seg_loss(z, z)) < 1e-6

    def test_target_foreground_pixels_carry_no_loss(self):
        # all-foreground pseudo-label: filtered prediction is pinned to 1
        assert float(target_seg_loss(full(0.1), full(1.0))) < 1e-6

    def test_target_background_is_plain_cross_entropy(self):
        assert float(target_seg_loss(full(0.5), full(0.0))) == pytest.approx(LN2)

    def test_target_mixed_label(self):
        z = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
        z[0, 0, 0, 0] = 1
        z_hat = torch.full((1, 1, 2, 2), 0.5, dtype=torch.float64)
        expected = (3 * LN2 - math.log(1.0 - Config.EPSILON)) / 4
        assert float(target_seg_loss(z_hat, z)) == pytest.approx(expected)

    def test_mask_filter_values(self):
        z_hat = torch.tensor([[0.2, 0.7]], dtype=torch.float64)
        z = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        torch.testing.assert_close(mask_filter(z_hat, z), torch.tensor([[1.0, 0.7]], dtype=torch.float64))

    def test_mask_filter_blocks_foreground_gradient(self):
        z_hat = torch.rand(2, 1, 8, 8, dtype=torch.float64).mul(0.9).add(0.05).requires_grad_(True)
        z = (torch.rand(2, 1, 8, 8) > 0.5).to(torch.float64)
        target_seg_loss(z_hat, z).backward()
        assert bool((z_hat.grad[z == 1] == 0).all())
        assert bool((z_hat.grad[z == 0] > 0).all())

    def test_mask_filter_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mask_filter(torch.zeros(2, 2), torch.zeros(2, 3))


@pytest.mark.unit
class TestAdversarialLosses:

    def test_adversarial_sums_patches(self):
        assert float(adversarial_loss(full(0.5, (1, 1, 2, 2)))) == pytest.approx(4 * LN2)

    def test_adversarial_batch_mean(self):
        p = torch.cat([full(0.5, (1, 1, 2, 2)), full(1.0, (1, 1, 2, 2))])
        expected = (4 * LN2 - 4 * math.log(1.0 - Config.EPSILON)) / 2
        assert float(adversarial_loss(p)) == pytest.approx(expected)

    def test_discriminator_at_chance(self):
        assert float(discriminator_loss(full(0.5), full(0.5))) == pytest.approx(2 * LN2)

    def test_discriminator_perfect(self):
        assert float(discriminator_loss(full(1.0), full(0.0))) < 1e-6

    def test_discriminator_finite_at_saturation(self):
        assert math.isfinite(float(discriminator_loss(full(0.0), full(1.0))))


@pytest.mark.unit
class TestTotalLoss:
    """Test weighted combination and non-finite detection."""

    def test_weighted_sum(self):
        total, record = total_loss(torch.tensor(2.0), torch.tensor(1.0), torch.tensor(3.0), torch.tensor(10.0),
                                   LossWeights(0.1, 0.01, 0.001))
        assert float(total) == pytest.approx(2.0 + 0.1 + 0.03 + 0.01)
        assert record.total == pytest.approx(float(total))
        assert record.disc is None

    def test_absent_terms(self):
        total, record = total_loss(torch.tensor(1.5))
        assert float(total) == 1.5
        assert record.to_dict() == {"den": 1.5, "seg_s": None, "seg_t": None, "adv": None,
                                    "total": 1.5, "disc": None}

    def test_disc_recorded_not_added(self):
        total, record = total_loss(torch.tensor(1.0), disc=torch.tensor(5.0))
        assert float(total) == 1.0
        assert record.disc == 5.0

    def test_keeps_graph(self):
        pred = full(0.0, requires_grad=True)
        total, _ = total_loss(density_loss(pred, full(1.0)))
        total.backward()
        assert pred.grad is not None

    @pytest.mark.parametrize("bad", ["den", "seg_s", "seg_t", "adv"])
    def test_non_finite_component(self, bad):
        values = {"den": torch.tensor(1.0), "seg_s": torch.tensor(1.0), "seg_t": torch.tensor(1.0),
                  "adv": torch.tensor(1.0)}
        values[bad] = torch.tensor(float("nan"))
        with pytest.raises(NumericalError) as exc_info:
            total_loss(**values)
        assert exc_info.value.component == bad
        assert math.isnan(exc_info.value.record[bad])

    def test_record_row(self):
        record = LossRecord(den=1.0, seg_s=0.5, total=1.005)
        row = record.to_row(7)
        assert list(row) == Config.LOSS_LOG_COLUMNS
        assert row["iter"] == 7
        assert "seg_t" not in record.summary()
