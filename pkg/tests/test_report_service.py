"""
Unit tests for report generation service.
"""

import numpy as np
import pandas as pd
import pytest
from PIL import Image

from exceptions import FileProcessingError
from services.evaluation_service import ImageResult, MetricsReport
from services.report_service import (PER_IMAGE_COLUMNS, colourize, density_to_png, get_software_versions,
                                     write_comparison_figure, write_metrics_report)
from utils import read_json


@pytest.fixture
def sample_report():
    """Fixture providing a two-image metrics report."""
    rows = [ImageResult("a", 10.0, 12.5, 30.0, 0.8), ImageResult("b", 4.0, 3.0, 25.0, 0.7)]
    return MetricsReport(mae=1.75, mse=1.9, psnr=27.5, ssim=0.75, n_images=2, per_image=rows)


@pytest.mark.unit
class TestReportService:
    """Test report generation functionality."""

    def test_software_versions(self):
        """Test software version collection."""
        versions = get_software_versions()

        assert isinstance(versions, dict)
        for package in ['NumPy', 'SciPy', 'Pandas', 'PyTorch', 'Pillow']:
            assert package in versions
            assert isinstance(versions[package], str)
            assert len(versions[package]) > 0

    def test_metrics_report_files(self, tmp_path, sample_report):
        written = write_metrics_report(sample_report, tmp_path, extra={"mode": "SE+FD"})
        assert [p.name for p in written] == ["metrics.json", "per_image.csv"]

        summary = read_json(tmp_path / "metrics.json")
        assert summary["mae"] == 1.75
        assert summary["mse"] == 1.9
        assert summary["psnr_capped"] is False
        assert summary["n_images"] == 2
        assert summary["mode"] == "SE+FD"
        assert "NumPy" in summary["software_versions"]

        table = pd.read_csv(tmp_path / "per_image.csv")
        assert list(table.columns) == PER_IMAGE_COLUMNS
        assert table["id"].tolist() == ["a", "b"]
        assert table["abs_error"].tolist() == [2.5, 1.0]

    def test_metrics_report_into_file_path(self, tmp_path, sample_report):
        blocker = tmp_path / "taken"
        blocker.write_text("")
        with pytest.raises(FileProcessingError):
            write_metrics_report(sample_report, blocker / "run")


@pytest.mark.unit
class TestDensityImages:
    """Test false-colour rendering of density maps."""

    def test_colourize_shape_and_range(self):
        density = np.linspace(0.0, 1.0, 64).reshape(8, 8)
        rgb = colourize(density)
        assert rgb.shape == (8, 8, 3)
        assert rgb.dtype == np.uint8
        assert not np.array_equal(rgb[0, 0], rgb[-1, -1])

    def test_colourize_zero_map(self):
        rgb = colourize(np.zeros((4, 4)))
        assert (rgb == rgb[0, 0]).all()

    def test_density_png(self, tmp_path):
        path = density_to_png(np.random.default_rng(0).random((20, 30)), tmp_path / "map.png")
        with Image.open(path) as img:
            assert img.size == (30, 20)
            assert img.mode == "RGB"

    def test_comparison_figure_export_failure(self, tmp_path, mocker):
        mocker.patch("plotly.graph_objects.Figure.write_image", side_effect=RuntimeError("no exporter"))
        result = write_comparison_figure(np.zeros((16, 16, 3)), np.zeros((16, 16)), np.zeros((16, 16)),
                                         tmp_path / "fig.png", title="x")
        assert result is None
        assert not (tmp_path / "fig.png").exists()
