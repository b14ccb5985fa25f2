"""
The four sub-networks: feature extractor E, density estimator C, semantic
extractor S (pyramid pooling) and patch feature discriminator D.

All modules take NCHW tensors. Features come out at 1/8 of the input resolution.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from config import ArchConfig, Config
from exceptions import CheckpointError, ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

# parameter group -> sub-module attribute
PARAM_GROUPS = {
    "theta_e": "extractor",
    "theta_c": "density_head",
    "theta_s": "semantic_head",
    "theta_d": "discriminator",
}

TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def _act(arch: ArchConfig, leaky: bool = False) -> nn.Module:
    if arch.smooth:
        return nn.SiLU()
    return nn.LeakyReLU(arch.leaky_slope) if leaky else nn.ReLU()


def _conv_block(arch: ArchConfig, in_ch: int, out_ch: int) -> List[nn.Module]:
    layers: List[nn.Module] = [nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)]
    if arch.batch_norm:
        layers.append(nn.BatchNorm2d(out_ch))
    layers.append(_act(arch))
    return layers


class FeatureExtractor(nn.Module):
    """VGG-style front end truncated after the third pooling stage (stride 8)."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        layers: List[nn.Module] = []
        in_ch = arch.in_channels
        for width, n_convs in zip(arch.extractor_widths, arch.convs_per_block):
            for _ in range(n_convs):
                layers += _conv_block(arch, in_ch, width)
                in_ch = width
            layers.append(nn.AvgPool2d(2) if arch.smooth else nn.MaxPool2d(2))
        for width in arch.tail_widths:
            layers += _conv_block(arch, in_ch, width)
            in_ch = width
        self.body = nn.Sequential(*layers)
        self.out_channels = in_ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        height, width = x.shape[-2:]
        if height % Config.FEATURE_STRIDE or width % Config.FEATURE_STRIDE:
            raise ShapeError(f"Input {height}x{width} is not a multiple of {Config.FEATURE_STRIDE}",
                             expected=f"multiples of {Config.FEATURE_STRIDE}", actual=(height, width))
        return self.body(x)


class DensityEstimator(nn.Module):
    """Three (conv 3x3, activation, 2x bilinear upsample) stages and a 1x1 projection."""

    def __init__(self, arch: ArchConfig, in_channels: int):
        super().__init__()
        stages: List[nn.Module] = []
        in_ch = in_channels
        for width in arch.density_widths:
            stages += [
                nn.Conv2d(in_ch, width, kernel_size=3, padding=1),
                _act(arch),
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            ]
            in_ch = width
        self.stages = nn.Sequential(*stages)
        self.head = nn.Conv2d(in_ch, 1, kernel_size=1)
        # ReLU keeps exact zeros; softplus only for finite-difference checks
        self.output_act = nn.Softplus() if arch.smooth else nn.ReLU()

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.output_act(self.head(self.stages(f)))


class SemanticExtractor(nn.Module):
    """Pyramid pooling over bins (1, 2, 3, 6), fused with the input features."""

    def __init__(self, arch: ArchConfig, in_channels: int):
        super().__init__()
        self.bins = tuple(arch.ppm_bins)
        self.branches = nn.ModuleList([
            nn.Sequential(
                nn.AdaptiveAvgPool2d(b),
                nn.Conv2d(in_channels, arch.ppm_width, kernel_size=1),
                _act(arch),
            )
            for b in self.bins
        ])
        fuse: List[nn.Module] = [nn.Conv2d(in_channels + len(self.bins) * arch.ppm_width,
                                           arch.fuse_width, kernel_size=1)]
        if arch.batch_norm:
            fuse.append(nn.BatchNorm2d(arch.fuse_width))
        fuse.append(_act(arch))
        self.fuse = nn.Sequential(*fuse)
        self.classifier = nn.Conv2d(arch.fuse_width, 1, kernel_size=1)

    def forward(self, f: torch.Tensor, out_size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
        fh, fw = f.shape[-2:]
        if min(fh, fw) < Config.MIN_MASK_FEATURE:
            raise ConfigurationError(f"Semantic extractor needs feature maps >= "
                                     f"{Config.MIN_MASK_FEATURE}x{Config.MIN_MASK_FEATURE}, got {fh}x{fw}",
                                     config_key="crop", value=[fh, fw])
        pyramid = [f]
        for branch in self.branches:
            pyramid.append(F.interpolate(branch(f), size=(fh, fw), mode="bilinear", align_corners=False))
        logits = self.classifier(self.fuse(torch.cat(pyramid, dim=1)))
        prob = torch.sigmoid(logits)
        if out_size is None:
            out_size = (fh * Config.FEATURE_STRIDE, fw * Config.FEATURE_STRIDE)
        prob = F.interpolate(prob, size=out_size, mode="bilinear", align_corners=False)
        return prob.clamp(Config.EPSILON, 1.0 - Config.EPSILON)


class FeatureDiscriminator(nn.Module):
    """Patch classifier over features: four stride-2 4x4 convs, then 1x1 + sigmoid."""

    def __init__(self, arch: ArchConfig, in_channels: int):
        super().__init__()
        layers: List[nn.Module] = []
        in_ch = in_channels
        for width in arch.disc_widths:
            layers += [nn.Conv2d(in_ch, width, kernel_size=4, stride=2, padding=1), _act(arch, leaky=True)]
            in_ch = width
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(in_ch, 1, kernel_size=1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        fh, fw = f.shape[-2:]
        if min(fh, fw) < Config.MIN_DISC_FEATURE:
            raise ConfigurationError(f"Discriminator needs feature maps >= "
                                     f"{Config.MIN_DISC_FEATURE}x{Config.MIN_DISC_FEATURE}, got {fh}x{fw}",
                                     config_key="crop", value=[fh, fw])
        p = torch.sigmoid(self.head(self.body(f)))
        return p.clamp(Config.EPSILON, 1.0 - Config.EPSILON)


@dataclass
class ParamSet:
    """Live parameter groups θ_e, θ_c, θ_s, θ_d as (name, shape, tensor) lists."""
    groups: Dict[str, List[Tuple[str, Tuple[int, ...], torch.Tensor]]]

    def count(self, group: Optional[str] = None) -> int:
        names = [group] if group else list(self.groups)
        return sum(int(t.numel()) for g in names for _, _, t in self.groups[g])

    def tensors(self, *groups: str) -> List[torch.Tensor]:
        names = groups or tuple(self.groups)
        return [t for g in names for _, _, t in self.groups[g]]

    def snapshot(self) -> Dict[str, Dict[str, torch.Tensor]]:
        """Detached copies, for bit-exact before/after comparisons."""
        return {g: {name: t.detach().clone() for name, _, t in items} for g, items in self.groups.items()}

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.tensors())


class CrowdAdaptNet(nn.Module):
    """Container of the four sub-networks sharing one architecture config."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        arch.validate()
        self.arch = arch
        self.extractor = FeatureExtractor(arch)
        c_f = self.extractor.out_channels
        self.density_head = DensityEstimator(arch, c_f)
        self.semantic_head = SemanticExtractor(arch, c_f)
        self.discriminator = FeatureDiscriminator(arch, c_f)

    def group(self, name: str) -> nn.Module:
        return getattr(self, PARAM_GROUPS[name])

    def param_set(self) -> ParamSet:
        return ParamSet({
            g: [(name, tuple(p.shape), p) for name, p in self.group(g).named_parameters()]
            for g in PARAM_GROUPS
        })

    def extract_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.extractor(x)

    def predict_density(self, f: torch.Tensor) -> torch.Tensor:
        return self.density_head(f)

    def predict_mask(self, f: torch.Tensor, out_size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
        return self.semantic_head(f, out_size)

    def discriminate(self, f: torch.Tensor) -> torch.Tensor:
        return self.discriminator(f)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.predict_density(self.extract_features(x))


def _reset_parameters(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def init_params(arch: ArchConfig, seed: int, pretrained_path: Optional[Union[str, Path]] = None,
                dtype: Union[str, torch.dtype] = "float32") -> CrowdAdaptNet:
    """
    Build the four sub-networks with deterministic fan-in scaled initialization.

    The global torch RNG is left untouched. ``model.param_set()`` exposes the
    resulting θ_e, θ_c, θ_s, θ_d groups.

    Args:
        arch: Architecture widths
        seed: Initialization seed
        pretrained_path: Optional named-tensor file with extractor weights
        dtype: 'float32', 'float64' or a torch dtype

    Raises:
        ConfigurationError: On invalid widths
        CheckpointError: If the pretrained file is malformed
    """
    arch.validate()
    torch_dtype = TORCH_DTYPES.get(dtype, dtype) if isinstance(dtype, str) else dtype
    if torch_dtype not in TORCH_DTYPES.values():
        raise ConfigurationError(f"Unsupported dtype {dtype}", config_key="dtype", value=str(dtype))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = CrowdAdaptNet(arch)
        _reset_parameters(model)
    model = model.to(torch_dtype)
    if pretrained_path is not None:
        load_pretrained_frontend(model, pretrained_path)
    logger.debug(f"Initialized networks with seed {seed}: {model.param_set().count()} parameters")
    return model


def load_pretrained_frontend(model: CrowdAdaptNet, path: Union[str, Path]) -> None:
    """
    Load extractor weights from a file holding a dict of named tensors whose keys
    match ``model.extractor.state_dict()``.
    """
    path = Path(path)
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"Pretrained weights not found: {path}", filename=str(path))
    except Exception as e:
        raise CheckpointError(f"Cannot read pretrained weights {path}: {e}", filename=str(path))
    if not isinstance(state, dict) or not all(isinstance(v, torch.Tensor) for v in state.values()):
        raise CheckpointError(f"{path} is not a named-tensor container", filename=str(path))
    try:
        model.extractor.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"Pretrained weights do not match the extractor: {e}", filename=str(path))
    logger.info(f"Loaded pretrained front end from {path}")


def image_to_tensor(pixels: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """H x W x 3 array in [0, 1] -> 1 x 3 x H x W tensor."""
    return torch.as_tensor(np.ascontiguousarray(pixels.transpose(2, 0, 1))[None], dtype=dtype)
