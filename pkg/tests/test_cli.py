"""
End-to-end tests for the command-line interface.
"""

import json
import math

import numpy as np
import pandas as pd
import pytest
import torch
from PIL import Image

from app import build_parser, main
from config import Config
from services.density_service import load_density_map
from services.gradient_checker import GradCheckResult
from services.training_service import build_state, save_checkpoint


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    """Fixture providing generated data and a ten-iteration run made through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["--quiet", "gen-data", "--out", str(data), "--n-source", "3", "--n-target", "3",
                 "--n-test", "2", "--height", "128", "--width", "128", "--seed", "1"]) == 0
    run = root / "run"
    code = main(["--quiet", "train", "--source", str(data / "source"), "--target", str(data / "target"),
                 "--out", str(run), "--iters", "10", "--batch-size", "2", "--crop", "128x128",
                 "--arch", "tiny", "--checkpoint-every", "5"])
    assert code == 0
    return {"root": root, "data": data, "run": run,
            "checkpoint": run / Config.CHECKPOINT_DIR / Config.FINAL_CHECKPOINT}


@pytest.mark.integration
class TestCommands:
    """Test each subcommand's artefacts and exit codes."""

    def test_gen_data_layout(self, cli_run):
        data = cli_run["data"]
        for split in ("source", "target", "test"):
            assert (data / split / Config.META_FILE).exists()
        assert len(list((data / "source" / Config.HEADS_DIR).glob("*.json"))) == 3
        assert not list((data / "target" / Config.HEADS_DIR).glob("*.json"))
        assert len(list((data / "test" / Config.HEADS_DIR).glob("*.json"))) == 2

    def test_train_artefacts(self, cli_run):
        run = cli_run["run"]
        assert cli_run["checkpoint"].exists()
        assert (run / Config.CHECKPOINT_DIR / Config.checkpoint_name(5)).exists()
        assert (run / Config.CHECKPOINT_DIR / Config.checkpoint_name(10)).exists()
        log = pd.read_csv(run / Config.LOSS_LOG_FILE)
        assert list(log.columns) == Config.LOSS_LOG_COLUMNS
        assert log["iter"].tolist() == list(range(1, 11))
        assert np.isfinite(log[["den", "seg_s", "seg_t", "adv", "total", "disc"]].to_numpy()).all()

    def test_train_from_config_file(self, cli_run, tmp_path):
        data = cli_run["data"]
        config = tmp_path / "train.ini"
        config.write_text(
            "[train]\niters = 1\nbatch_size = 1\nadapt_enabled = false\n"
            "[arch]\nextractor_widths = 4,4,8\nconvs_per_block = 1,1,1\ndensity_widths = 4,4,4\n"
            "ppm_width = 2\nfuse_width = 4\ndisc_widths = 4,4,4,4\n"
            f"[data]\nsource = {data / 'source'}\nout = {tmp_path / 'out'}\n",
            encoding="utf-8")
        assert main(["--quiet", "train", "--config", str(config)]) == 0
        assert (tmp_path / "out" / Config.CHECKPOINT_DIR / Config.FINAL_CHECKPOINT).exists()

    def test_train_with_scene_filter(self, cli_run, tmp_path):
        data = cli_run["data"]
        code = main(["--quiet", "train", "--source", str(data / "source"), "--no-adapt", "--out", str(tmp_path),
                     "--iters", "1", "--batch-size", "1", "--arch", "tiny", "--scene-filter", "brightness >= 0"])
        assert code == 0

    def test_eval_writes_metrics(self, cli_run, tmp_path):
        code = main(["--quiet", "eval", "--checkpoint", str(cli_run["checkpoint"]),
                     "--data", str(cli_run["data"] / "test"), "--out", str(tmp_path)])
        assert code == 0
        summary = json.loads((tmp_path / "metrics.json").read_text(encoding="utf-8"))
        assert summary["n_images"] == 2
        assert summary["iteration"] == 10
        assert summary["mode"] == "SE+FD"
        for key in ("mae", "mse", "psnr", "ssim"):
            assert math.isfinite(summary[key])
        assert (tmp_path / "per_image.csv").exists()

    def test_eval_from_config_file(self, cli_run, tmp_path):
        config = tmp_path / "eval.ini"
        config.write_text(f"[eval]\nsigma = 2\nn_figures = 0\n[data]\ntest = {cli_run['data'] / 'test'}\n"
                          f"out = {tmp_path / 'eval'}\n", encoding="utf-8")
        code = main(["--quiet", "eval", "--checkpoint", str(cli_run["checkpoint"]), "--config", str(config)])
        assert code == 0
        summary = json.loads((tmp_path / "eval" / "metrics.json").read_text(encoding="utf-8"))
        assert summary["n_images"] == 2

    def test_predict_prints_count(self, cli_run, tmp_path, capsys):
        image = tmp_path / "scene.png"
        Image.fromarray(np.full((100, 120, 3), 128, dtype=np.uint8), mode="RGB").save(image)
        out = tmp_path / "pred"
        code = main(["--quiet", "predict", "--checkpoint", str(cli_run["checkpoint"]), "--image", str(image),
                     "--out", str(out)])
        assert code == 0
        count = float(capsys.readouterr().out.strip())
        density = load_density_map(out / "scene_density.dmap")
        assert density.shape == (100, 120)
        assert count == pytest.approx(float(density.astype(np.float64).sum()), rel=1e-5, abs=1e-5)
        assert (out / "scene_density.png").exists()

    def test_predict_with_zeroed_output_layer(self, train_config, tmp_path, capsys):
        state = build_state(train_config)
        with torch.no_grad():
            state.model.density_head.head.weight.zero_()
            state.model.density_head.head.bias.zero_()
        zeroed = save_checkpoint(state, train_config, tmp_path / "zeroed.pt")
        image = tmp_path / "scene.png"
        pixels = np.random.default_rng(0).integers(0, 256, (64, 80, 3), dtype=np.uint8)
        Image.fromarray(pixels, mode="RGB").save(image)
        code = main(["--quiet", "predict", "--checkpoint", str(zeroed), "--image", str(image),
                     "--out", str(tmp_path / "pred")])
        assert code == 0
        printed = capsys.readouterr().out.strip()
        assert printed == "0.000000"
        assert float(printed) == 0.0
        assert not load_density_map(tmp_path / "pred" / "scene_density.dmap").any()

    def test_predict_output_from_config(self, cli_run, tmp_path, capsys):
        image = tmp_path / "scene.png"
        Image.fromarray(np.full((64, 64, 3), 90, dtype=np.uint8), mode="RGB").save(image)
        config = tmp_path / "predict.ini"
        config.write_text(f"[eval]\ntile_cap = 32\n[data]\nout = {tmp_path / 'pred'}\n", encoding="utf-8")
        code = main(["--quiet", "predict", "--checkpoint", str(cli_run["checkpoint"]), "--image", str(image),
                     "--config", str(config)])
        assert code == 0
        assert math.isfinite(float(capsys.readouterr().out.strip()))
        assert (tmp_path / "pred" / "scene_density.png").exists()

    def test_gradcheck_passes(self, capsys):
        assert main(["--quiet", "gradcheck", "--arch", "tiny", "--n-coords", "2"]) == 0
        assert "combined_loss" in capsys.readouterr().out

    def test_gradcheck_writes_results(self, tmp_path, capsys):
        assert main(["--quiet", "gradcheck", "--n-coords", "2", "--out", str(tmp_path)]) == 0
        table = pd.read_csv(tmp_path / "gradcheck.csv")
        assert list(table.columns) == ["check", "max_rel_error", "n_coords", "tolerance", "passed"]
        assert "combined_loss" in table["check"].tolist()
        assert table["passed"].all()

    def test_gradcheck_arch_from_config(self, tmp_path, capsys):
        config = tmp_path / "arch.ini"
        config.write_text("[train]\nseed = 3\n[arch]\nextractor_widths = 4,4,8\nconvs_per_block = 1,1,1\n"
                          "density_widths = 4,4,4\nppm_width = 2\nfuse_width = 4\ndisc_widths = 4,4,4,4\n"
                          "smooth = true\n", encoding="utf-8")
        assert main(["--quiet", "gradcheck", "--config", str(config), "--n-coords", "2"]) == 0
        assert "extractor" in capsys.readouterr().out


@pytest.mark.integration
class TestExitCodes:
    """Test error-to-exit-code mapping."""

    def test_missing_source(self, tmp_path):
        assert main(["--quiet", "train", "--out", str(tmp_path)]) == 2

    def test_missing_target_when_adapting(self, cli_run, tmp_path):
        assert main(["--quiet", "train", "--source", str(cli_run["data"] / "source"), "--out", str(tmp_path)]) == 2

    def test_bad_crop(self, cli_run, tmp_path):
        code = main(["--quiet", "train", "--source", str(cli_run["data"] / "source"), "--no-adapt",
                     "--out", str(tmp_path), "--crop", "100x100"])
        assert code == 2

    def test_corrupt_checkpoint(self, cli_run, tmp_path):
        broken = tmp_path / "broken.pt"
        broken.write_bytes(b"garbage")
        code = main(["--quiet", "eval", "--checkpoint", str(broken), "--data", str(cli_run["data"] / "test"),
                     "--out", str(tmp_path / "eval")])
        assert code == 4

    def test_missing_image(self, cli_run, tmp_path):
        code = main(["--quiet", "predict", "--checkpoint", str(cli_run["checkpoint"]),
                     "--image", str(tmp_path / "absent.png"), "--out", str(tmp_path)])
        assert code == 2

    def test_gradcheck_failure(self, mocker):
        mocker.patch("app.run_gradient_suite", return_value=[GradCheckResult("extractor", 0.5, 4)])
        assert main(["--quiet", "gradcheck"]) == 3

    def test_unknown_benchmark_mode(self, cli_run, tmp_path):
        code = main(["--quiet", "benchmark", "--data", str(cli_run["data"]), "--out", str(tmp_path),
                     "--modes", "NoAdpt,Magic"])
        assert code == 2

    def test_parser_requires_command(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_eval_without_dataset_path(self, cli_run, tmp_path):
        code = main(["--quiet", "eval", "--checkpoint", str(cli_run["checkpoint"]), "--out", str(tmp_path)])
        assert code == 2
