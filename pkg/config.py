"""
Configuration settings for the crowd-adapt toolkit.

Defaults live on ``Config``; run-level settings are dataclasses that serialise to
plain dictionaries and load from a sectioned ``key = value`` file.
"""
import configparser
import hashlib
import json
import logging
from dataclasses import MISSING, asdict, dataclass, field, fields
from typing import Any, Dict, Tuple

from exceptions import ConfigurationError

logger = logging.getLogger(__name__)


class Config:
    # Numerics
    EPSILON = 1e-7
    NORM_FLOOR = 1e-8
    GRADCHECK_STEP = 1e-5
    GRADCHECK_TOLERANCE = 1e-4

    # Density maps
    DEFAULT_SIGMA = 4.0
    TRUNCATE = 4.0
    DENSITY_MAGIC = b"DMAP"
    DENSITY_VERSION = 1

    # Geometry
    FEATURE_STRIDE = 8
    DESK_CROP = (128, 128)
    FULL_CROP = (480, 640)
    MIN_IMAGE_SIZE = 16
    MIN_MASK_FEATURE = 8
    MIN_DISC_FEATURE = 16
    DEFAULT_TILE_CAP = 1024

    # Metrics
    PSNR_CAP = 99.0
    SSIM_WINDOW = 11
    SSIM_SIGMA = 1.5
    SSIM_K1 = 0.01
    SSIM_K2 = 0.03

    # Synthetic scenes
    RADIUS_RANGE = (3.0, 8.0)
    DENSITY_LEVEL_COUNTS = {"low": (2, 8), "mid": (9, 20), "high": (21, 40)}
    TARGET_BRIGHTNESS_SHIFT = -0.25
    NOISE_CELL = 16
    DEFAULT_SCENE_SIZE = (160, 160)

    # Dataset layout
    IMAGES_DIR = "images"
    MASKS_DIR = "masks"
    HEADS_DIR = "heads"
    META_FILE = "meta.json"

    # Training artefacts
    LOSS_LOG_FILE = "loss_log.csv"
    LOSS_LOG_COLUMNS = ["iter", "den", "seg_s", "seg_t", "adv", "total", "disc"]
    CHECKPOINT_DIR = "checkpoints"
    FINAL_CHECKPOINT = "final.pt"

    @staticmethod
    def checkpoint_name(iteration: int) -> str:
        """File name of the periodic checkpoint written at ``iteration``."""
        return f"ckpt_{iteration:06d}.pt"


def _check_widths(name: str, widths: Tuple[int, ...]) -> None:
    for w in widths:
        if int(w) < 1:
            raise ConfigurationError(f"All widths in '{name}' must be >= 1, got {widths}",
                                     config_key=name, value=list(widths))


@dataclass(frozen=True)
class ArchConfig:
    """Widths and topology switches of the four sub-networks."""
    in_channels: int = 3
    extractor_widths: Tuple[int, ...] = (16, 32, 64)
    convs_per_block: Tuple[int, ...] = (2, 2, 2)
    tail_widths: Tuple[int, ...] = ()
    batch_norm: bool = True
    density_widths: Tuple[int, ...] = (32, 16, 8)
    ppm_bins: Tuple[int, ...] = (1, 2, 3, 6)
    ppm_width: int = 16
    fuse_width: int = 32
    disc_widths: Tuple[int, ...] = (32, 32, 64, 64)
    leaky_slope: float = 0.2
    smooth: bool = False

    @property
    def feature_channels(self) -> int:
        return self.tail_widths[-1] if self.tail_widths else self.extractor_widths[-1]

    @classmethod
    def vgg16(cls) -> "ArchConfig":
        """VGG16-bn front end truncated at stride 8 (conv4_3) for full-scale runs."""
        return cls(extractor_widths=(64, 128, 256), convs_per_block=(2, 2, 3),
                   tail_widths=(512, 512, 512), density_widths=(256, 128, 64),
                   ppm_width=128, fuse_width=256, disc_widths=(64, 128, 256, 512))

    @classmethod
    def tiny(cls, smooth: bool = True) -> "ArchConfig":
        """Minimal widths for gradient checks and fast tests."""
        return cls(extractor_widths=(4, 4, 8), convs_per_block=(1, 1, 1),
                   density_widths=(4, 4, 4), ppm_width=2, fuse_width=4,
                   disc_widths=(4, 4, 4, 4), smooth=smooth)

    def validate(self) -> "ArchConfig":
        if len(self.extractor_widths) != 3 or len(self.convs_per_block) != 3:
            raise ConfigurationError("Extractor needs exactly 3 pooled blocks (stride 8)",
                                     config_key="extractor_widths", value=list(self.extractor_widths))
        if len(self.density_widths) != 3:
            raise ConfigurationError("Density estimator needs exactly 3 upsampling stages",
                                     config_key="density_widths", value=list(self.density_widths))
        if len(self.disc_widths) != 4:
            raise ConfigurationError("Discriminator needs exactly 4 stride-2 layers",
                                     config_key="disc_widths", value=list(self.disc_widths))
        for name in ("extractor_widths", "convs_per_block", "tail_widths", "density_widths",
                     "ppm_bins", "disc_widths"):
            _check_widths(name, getattr(self, name))
        for name in ("in_channels", "ppm_width", "fuse_width"):
            _check_widths(name, (getattr(self, name),))
        return self

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ArchConfig":
        return _build(cls, data)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the segmentation and adversarial terms in the combined loss."""
    lambda_s: float = 0.01
    lambda_t: float = 0.01
    lambda_d: float = 0.001

    def validate(self) -> "LossWeights":
        for f in fields(self):
            value = getattr(self, f.name)
            if not value >= 0:
                raise ConfigurationError(f"Loss weight '{f.name}' must be >= 0, got {value}",
                                         config_key=f.name, value=value)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LossWeights":
        return _build(cls, data)


@dataclass(frozen=True)
class TrainConfig:
    """Settings of one training run."""
    batch_size: int = 8
    crop: Tuple[int, int] = Config.DESK_CROP
    lr_main: float = 1e-5
    lr_disc: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    iters: int = 1000
    seed: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)
    adapt_enabled: bool = True
    use_discriminator: bool = True
    sigma: float = Config.DEFAULT_SIGMA
    checkpoint_every: int = 500
    log_every: int = 10
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    num_workers: int = 0
    dtype: str = "float32"

    @property
    def mode_name(self) -> str:
        if not self.adapt_enabled:
            return "NoAdpt"
        return "SE+FD" if self.use_discriminator else "SE"

    @property
    def adversarial(self) -> bool:
        return self.adapt_enabled and self.use_discriminator

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1", config_key="batch_size",
                                     value=self.batch_size)
        if len(self.crop) != 2 or any(c <= 0 or c % Config.FEATURE_STRIDE for c in self.crop):
            raise ConfigurationError(f"crop dims must be positive multiples of 8, got {self.crop}",
                                     config_key="crop", value=list(self.crop))
        for name in ("lr_main", "lr_disc", "sigma", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0", config_key=name,
                                         value=getattr(self, name))
        if self.iters < 0:
            raise ConfigurationError("iters must be >= 0", config_key="iters", value=self.iters)
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigurationError("checkpoint_every and log_every must be >= 1",
                                     config_key="checkpoint_every", value=self.checkpoint_every)
        if self.num_workers < 0:
            raise ConfigurationError("num_workers must be >= 0", config_key="num_workers",
                                     value=self.num_workers)
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64", config_key="dtype",
                                     value=self.dtype)
        self.weights.validate()
        self.arch.validate()
        return self

    def to_dict(self) -> dict:
        data = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if hasattr(value, "to_dict"):
                value = value.to_dict()
            elif isinstance(value, tuple):
                value = list(value)
            data[f.name] = value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if isinstance(data.get("weights"), dict):
            data["weights"] = LossWeights.from_dict(data["weights"])
        if isinstance(data.get("arch"), dict):
            data["arch"] = ArchConfig.from_dict(data["arch"])
        return _build(cls, data)


@dataclass(frozen=True)
class EvalConfig:
    """Settings of a dataset-level evaluation."""
    sigma: float = Config.DEFAULT_SIGMA
    tile_cap: int = Config.DEFAULT_TILE_CAP
    num_workers: int = 0
    n_figures: int = 0

    def validate(self) -> "EvalConfig":
        if self.tile_cap < Config.MIN_IMAGE_SIZE or self.tile_cap % Config.FEATURE_STRIDE:
            raise ConfigurationError("tile_cap must be a multiple of 8 and >= 16",
                                     config_key="tile_cap", value=self.tile_cap)
        if not self.sigma > 0:
            raise ConfigurationError("sigma must be > 0", config_key="sigma", value=self.sigma)
        if self.num_workers < 0 or self.n_figures < 0:
            raise ConfigurationError("num_workers and n_figures must be >= 0", config_key="num_workers",
                                     value=[self.num_workers, self.n_figures])
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: dict):
    """Instantiate a config dataclass, rejecting unknown keys and restoring tuples."""
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"Unknown configuration key(s): {', '.join(unknown)}",
                                 config_key=unknown[0], value=unknown)
    kwargs = {}
    for name, value in data.items():
        default = _default_of(known[name])
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def _default_of(f) -> Any:
    if f.default_factory is not MISSING:
        return f.default_factory()
    return f.default


def _coerce(key: str, raw: str, default: Any) -> Any:
    """Parse a config-file string using the type of the field default."""
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if key == "crop":
                parts = raw.lower().replace("x", ",").split(",")
                return tuple(int(p) for p in parts if p.strip())
            items = [p for p in raw.split(",") if p.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(p) for p in items)
            return tuple(int(p) for p in items)
        return raw
    except ValueError:
        raise ConfigurationError(f"Invalid value for '{key}': {raw!r}", config_key=key, value=raw)


_SECTION_TARGETS = {"train": TrainConfig, "weights": LossWeights, "arch": ArchConfig, "eval": EvalConfig}
DATA_KEYS = ("source", "target", "test", "out")


def _parse_sections(text: str, source_name: str) -> Tuple[Dict[str, Dict[str, Any]], Dict[str, str]]:
    """Coerce every known section of a config text; the [data] section holds plain paths."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source_name)
    except configparser.Error as e:
        raise ConfigurationError(f"Cannot parse config {source_name}: {e}")

    values: Dict[str, Dict[str, Any]] = {name: {} for name in _SECTION_TARGETS}
    data_paths: Dict[str, str] = {}
    for section in parser.sections():
        if section == "data":
            for key, raw in parser.items(section):
                if key not in DATA_KEYS:
                    raise ConfigurationError(f"Unknown configuration key: data.{key}",
                                             config_key=f"data.{key}")
                data_paths[key] = raw.strip()
            continue
        if section not in _SECTION_TARGETS:
            raise ConfigurationError(f"Unknown configuration section: [{section}]", config_key=section)
        target = _SECTION_TARGETS[section]
        defaults = {f.name: _default_of(f) for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in defaults or key in ("weights", "arch"):
                raise ConfigurationError(f"Unknown configuration key: {section}.{key}",
                                         config_key=f"{section}.{key}")
            values[section][key] = _coerce(key, raw, defaults[key])
    return values, data_paths


def parse_train_config(text: str, source_name: str = "<string>") -> Tuple[TrainConfig, Dict[str, str]]:
    """
    Parse a sectioned ``key = value`` configuration text.

    Args:
        text: File contents
        source_name: Name used in error messages

    Returns:
        Tuple of (validated TrainConfig, data-path mapping from the [data] section)

    Raises:
        ConfigurationError: On unknown sections, unknown keys or unparsable values
    """
    values, data_paths = _parse_sections(text, source_name)
    cfg = TrainConfig(
        weights=LossWeights(**values["weights"]),
        arch=ArchConfig(**values["arch"]),
        **values["train"],
    )
    logger.info(f"Loaded training configuration from {source_name}")
    return cfg.validate(), data_paths


def parse_eval_config(text: str, source_name: str = "<string>") -> Tuple[EvalConfig, Dict[str, str]]:
    """Parse the [eval] and [data] sections; training sections are parsed but ignored."""
    values, data_paths = _parse_sections(text, source_name)
    cfg = EvalConfig(**values["eval"])
    logger.info(f"Loaded evaluation configuration from {source_name}")
    return cfg.validate(), data_paths


def _read_config_file(path: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return f.read()
    except OSError as e:
        raise ConfigurationError(f"Cannot read config file {path}: {e}", config_key="config", value=path)


def load_train_config(path: str) -> Tuple[TrainConfig, Dict[str, str]]:
    """Load and validate a training configuration file."""
    return parse_train_config(_read_config_file(path), source_name=str(path))


def load_eval_config(path: str) -> Tuple[EvalConfig, Dict[str, str]]:
    """Load and validate the evaluation settings of a configuration file."""
    return parse_eval_config(_read_config_file(path), source_name=str(path))


def apply_overrides(cfg: TrainConfig, overrides: Dict[str, Any]) -> TrainConfig:
    """
    Return a copy of ``cfg`` with non-None override values applied.

    Keys may name TrainConfig fields directly or use ``weights.<name>`` /
    ``arch.<name>``.
    """
    top: Dict[str, Any] = {}
    nested: Dict[str, Dict[str, Any]] = {"weights": {}, "arch": {}}
    for key, value in overrides.items():
        if value is None:
            continue
        if "." in key:
            section, name = key.split(".", 1)
            if section not in nested:
                raise ConfigurationError(f"Unknown configuration key: {key}", config_key=key)
            nested[section][name] = value
        else:
            top[key] = value
    data = cfg.to_dict()
    unknown = [k for k in top if k not in data]
    if unknown:
        raise ConfigurationError(f"Unknown configuration key(s): {', '.join(unknown)}",
                                 config_key=unknown[0])
    data.update({k: list(v) if isinstance(v, tuple) else v for k, v in top.items()})
    data["weights"].update(nested["weights"])
    data["arch"].update(nested["arch"])
    return TrainConfig.from_dict(data).validate()


def config_hash(cfg: TrainConfig) -> str:
    """Stable sha256 digest of the canonical JSON form of ``cfg``."""
    payload = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
