"""
Alternating adversarial training.

Each iteration runs a generator phase (E, C, S updated against the combined loss
with D frozen) followed by a discriminator phase (D updated on detached features).
Batch composition and crops are pure functions of (seed, iteration, domain), so a
resumed run replays exactly the draws of an uninterrupted one.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch

from config import ArchConfig, Config, TrainConfig, config_hash
from exceptions import CheckpointError, ConfigurationError, NumericalError
from services.data_service import Dataset, collate_source, collate_target, random_crop_pair
from services.loss_service import (LossRecord, adversarial_loss, density_loss, discriminator_loss,
                                   source_seg_loss, target_seg_loss, total_loss)
from services.network_service import PARAM_GROUPS, TORCH_DTYPES, CrowdAdaptNet, ParamSet, init_params
from services.report_service import get_software_versions
from utils import cleanup_file, ensure_dir

logger = logging.getLogger(__name__)

SOURCE_TAG, TARGET_TAG = 0, 1
GENERATOR_GROUPS = ("theta_e", "theta_c", "theta_s")


@dataclass
class TrainState:
    """Networks, optimizer moments and the iteration counter of one run."""
    model: CrowdAdaptNet
    gen_optimizer: torch.optim.Adam
    disc_optimizer: torch.optim.Adam
    iteration: int = 0

    @property
    def params(self) -> ParamSet:
        return self.model.param_set()


@dataclass
class TrainResult:
    state: TrainState
    checkpoint_path: Path
    log_path: Path
    records: List[LossRecord] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


def _set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def build_state(cfg: TrainConfig, pretrained_path: Optional[Union[str, Path]] = None) -> TrainState:
    """Fresh networks and Adam optimizers for ``cfg``."""
    model = init_params(cfg.arch, cfg.seed, pretrained_path=pretrained_path, dtype=cfg.dtype)
    params = model.param_set()
    gen_opt = torch.optim.Adam(params.tensors(*GENERATOR_GROUPS), lr=cfg.lr_main,
                               betas=tuple(cfg.adam_betas), eps=cfg.adam_eps)
    disc_opt = torch.optim.Adam(params.tensors("theta_d"), lr=cfg.lr_disc,
                                betas=tuple(cfg.adam_betas), eps=cfg.adam_eps)
    return TrainState(model, gen_opt, disc_opt, 0)


def generator_phase(state: TrainState, batch_s: Dict[str, torch.Tensor],
                    batch_t: Optional[Dict[str, torch.Tensor]],
                    cfg: TrainConfig) -> Tuple[LossRecord, torch.Tensor, Optional[torch.Tensor]]:
    """
    Minimize the combined loss over θ_e, θ_c, θ_s with θ_d frozen.

    Returns:
        (record, detached source features, detached target features or None)
    """
    model = state.model
    model.train()
    _set_requires_grad(model.discriminator, False)
    state.gen_optimizer.zero_grad(set_to_none=True)
    try:
        f_s = model.extract_features(batch_s["images"])
        den = density_loss(model.predict_density(f_s), batch_s["density"])
        seg_s = seg_t = adv = None
        f_t = None
        if cfg.adapt_enabled:
            seg_s = source_seg_loss(model.predict_mask(f_s), batch_s["masks"])
            f_t = model.extract_features(batch_t["images"])
            seg_t = target_seg_loss(model.predict_mask(f_t), batch_t["masks"])
            if cfg.use_discriminator:
                adv = adversarial_loss(model.discriminate(f_t))
        total, record = total_loss(den, seg_s, seg_t, adv, cfg.weights)
        total.backward()
        state.gen_optimizer.step()
    finally:
        _set_requires_grad(model.discriminator, True)
    return record, f_s.detach(), None if f_t is None else f_t.detach()


def discriminator_phase(state: TrainState, f_s: torch.Tensor, f_t: torch.Tensor) -> float:
    """Update θ_d only: source patches towards 1, target patches towards 0."""
    state.disc_optimizer.zero_grad(set_to_none=True)
    disc = state.model.discriminate
    loss = discriminator_loss(disc(f_s), disc(f_t))
    value = float(loss.detach())
    if not np.isfinite(value):
        raise NumericalError("Non-finite discriminator loss", component="disc", record={"disc": value})
    loss.backward()
    state.disc_optimizer.step()
    return value


def train_step(batch_s: Dict[str, torch.Tensor], batch_t: Optional[Dict[str, torch.Tensor]],
               state: TrainState, cfg: TrainConfig) -> Tuple[TrainState, LossRecord]:
    """
    One alternating iteration. The state is updated in place and returned.

    Raises:
        NumericalError: If any loss is non-finite (carries the diagnostic record)
    """
    if cfg.adapt_enabled and batch_t is None:
        raise ConfigurationError("Adaptation needs a target batch", config_key="adapt_enabled", value=True)
    record, f_s, f_t = generator_phase(state, batch_s, batch_t, cfg)
    if cfg.adversarial:
        record.disc = discriminator_phase(state, f_s, f_t)
    state.iteration += 1
    return state, record


class DomainSampler:
    """Deterministic cyclic shuffling and cropping over one dataset."""

    def __init__(self, dataset: Dataset, batch_size: int, crop: Tuple[int, int], seed: int, tag: int):
        self.dataset = dataset
        self.batch_size = batch_size
        self.crop = crop
        self.seed = seed
        self.tag = tag
        self._perms: Dict[int, np.ndarray] = {}

    def _permutation(self, epoch: int) -> np.ndarray:
        perm = self._perms.get(epoch)
        if perm is None:
            perm = np.random.default_rng([self.seed, self.tag, epoch]).permutation(self.dataset.N)
            self._perms = {epoch: perm}
        return perm

    def indices(self, iteration: int) -> List[int]:
        n = self.dataset.N
        out = []
        for j in range(self.batch_size):
            k = iteration * self.batch_size + j
            out.append(int(self._permutation(k // n)[k % n]))
        return out

    def crop_seed(self, iteration: int, j: int) -> int:
        return int(np.random.SeedSequence([self.seed, iteration, self.tag, j]).generate_state(1)[0])

    def samples(self, iteration: int) -> list:
        return [random_crop_pair(self.dataset.samples[idx], self.crop[0], self.crop[1],
                                 self.crop_seed(iteration, j))
                for j, idx in enumerate(self.indices(iteration))]


def _make_batches(iteration: int, source: DomainSampler, target: Optional[DomainSampler],
                  cfg: TrainConfig) -> Tuple[Dict[str, torch.Tensor], Optional[Dict[str, torch.Tensor]]]:
    dtype = TORCH_DTYPES[cfg.dtype]
    batch_s = collate_source(source.samples(iteration), sigma=cfg.sigma, dtype=dtype)
    batch_t = collate_target(target.samples(iteration), dtype=dtype) if target is not None else None
    return batch_s, batch_t


def iterate_batches(start: int, stop: int, source: DomainSampler, target: Optional[DomainSampler],
                    cfg: TrainConfig) -> Iterator[Tuple[int, Dict[str, torch.Tensor], Any]]:
    """Yield (iteration, source batch, target batch) in order, prefetching on worker threads."""
    if cfg.num_workers == 0:
        for it in range(start, stop):
            yield (it, *_make_batches(it, source, target, cfg))
        return
    depth = 2 * cfg.num_workers
    with ThreadPoolExecutor(max_workers=cfg.num_workers) as pool:
        pending = {}
        next_submit = start
        for it in range(start, stop):
            while next_submit < stop and next_submit < it + depth:
                pending[next_submit] = pool.submit(_make_batches, next_submit, source, target, cfg)
                next_submit += 1
            yield (it, *pending.pop(it).result())


# Checkpoints ------------------------------------------------------------------------

def save_checkpoint(state: TrainState, cfg: TrainConfig, path: Union[str, Path]) -> Path:
    """Write a flat named-tensor container with parameters, optimizer state and metadata."""
    path = Path(path)
    payload: Dict[str, Any] = {}
    for group, attr in PARAM_GROUPS.items():
        for name, tensor in getattr(state.model, attr).state_dict().items():
            payload[f"{group}/{name}"] = tensor.detach().clone()
    payload["opt/gen"] = state.gen_optimizer.state_dict()
    payload["opt/disc"] = state.disc_optimizer.state_dict()
    payload["meta/iteration"] = state.iteration
    payload["meta/seed"] = cfg.seed
    payload["meta/config_hash"] = config_hash(cfg)
    payload["meta/arch"] = json.dumps(state.model.arch.to_dict(), sort_keys=True)
    payload["meta/train_config"] = json.dumps(cfg.to_dict(), sort_keys=True)
    payload["meta/mode"] = cfg.mode_name
    payload["meta/adam"] = {"betas": list(cfg.adam_betas), "eps": cfg.adam_eps,
                            "lr_main": cfg.lr_main, "lr_disc": cfg.lr_disc}
    payload["meta/versions"] = get_software_versions()
    partial = path.with_name(path.name + ".partial")
    try:
        torch.save(payload, partial)
        partial.replace(path)
    except OSError as e:
        cleanup_file(partial)
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}", filename=str(path))
    logger.info(f"Saved checkpoint {path} (iteration {state.iteration})")
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a checkpoint container; any read or format failure is a CheckpointError."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}", filename=str(path))
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Corrupt checkpoint {path}: {e}", filename=str(path))
    if not isinstance(payload, dict):
        raise CheckpointError(f"Checkpoint {path} is not a named container", filename=str(path))
    for key in ("meta/iteration", "meta/arch", "meta/seed"):
        if key not in payload:
            raise CheckpointError(f"Checkpoint {path} lacks '{key}'", filename=str(path), key=key)
    return payload


def checkpoint_arch(payload: Dict[str, Any]) -> ArchConfig:
    try:
        return ArchConfig.from_dict(json.loads(payload["meta/arch"]))
    except (TypeError, ValueError, ConfigurationError) as e:
        raise CheckpointError(f"Checkpoint architecture is unreadable: {e}", key="meta/arch")


def _load_weights(model: CrowdAdaptNet, payload: Dict[str, Any]) -> None:
    for group, attr in PARAM_GROUPS.items():
        prefix = f"{group}/"
        state = {k[len(prefix):]: v for k, v in payload.items() if k.startswith(prefix)}
        try:
            getattr(model, attr).load_state_dict(state, strict=True)
        except RuntimeError as e:
            raise CheckpointError(f"Weights for {group} do not match the architecture: {e}", key=group)


def model_from_checkpoint(path: Union[str, Path]) -> Tuple[CrowdAdaptNet, Dict[str, Any]]:
    """
    Rebuild the networks stored in a checkpoint, in eval mode.

    Returns:
        (model, metadata dict)
    """
    payload = load_checkpoint(path)
    arch = checkpoint_arch(payload)
    first = next((v for k, v in payload.items() if k.startswith("theta_e/") and v.is_floating_point()), None)
    if first is None:
        raise CheckpointError(f"Checkpoint {path} holds no extractor weights", filename=str(path), key="theta_e")
    model = CrowdAdaptNet(arch).to(first.dtype)
    _load_weights(model, payload)
    model.eval()
    meta = {k[len("meta/"):]: v for k, v in payload.items() if k.startswith("meta/")}
    return model, meta


def restore_state(path: Union[str, Path], cfg: TrainConfig) -> TrainState:
    """
    Resume training state from a checkpoint written with a matching architecture.

    Raises:
        CheckpointError: On a corrupt file or an architecture mismatch
    """
    payload = load_checkpoint(path)
    arch = checkpoint_arch(payload)
    if arch != cfg.arch:
        diff = sorted(k for k, v in cfg.arch.to_dict().items() if arch.to_dict().get(k) != v)
        raise CheckpointError(f"Checkpoint architecture differs from configuration in: {', '.join(diff)}",
                              filename=str(path), key="meta/arch")
    state = build_state(cfg)
    _load_weights(state.model, payload)
    try:
        state.gen_optimizer.load_state_dict(payload["opt/gen"])
        state.disc_optimizer.load_state_dict(payload["opt/disc"])
    except (KeyError, ValueError, RuntimeError) as e:
        raise CheckpointError(f"Optimizer state in {path} is unusable: {e}", filename=str(path), key="opt")
    state.iteration = int(payload["meta/iteration"])
    logger.info(f"Resumed from {path} at iteration {state.iteration}")
    return state


# Run loop ---------------------------------------------------------------------------

def _append_log(rows: List[Dict[str, Any]], path: Path) -> None:
    if not rows:
        return
    frame = pd.DataFrame(rows, columns=Config.LOSS_LOG_COLUMNS)
    frame.to_csv(path, mode="a", header=not path.exists(), index=False)
    rows.clear()


def train(cfg: TrainConfig, source: Dataset, target: Optional[Dataset], out_dir: Union[str, Path],
          resume: Optional[Union[str, Path]] = None,
          pretrained_path: Optional[Union[str, Path]] = None) -> TrainResult:
    """
    Run ``cfg.iters`` alternating iterations and write checkpoints plus a loss log.

    Args:
        cfg: Validated training configuration
        source: Source dataset (heads and exact masks)
        target: Target dataset (coarse masks); unused in NoAdpt mode
        out_dir: Directory for the loss log and checkpoints
        resume: Optional checkpoint to continue from
        pretrained_path: Optional extractor weights for a fresh run

    Returns:
        TrainResult with the final state and artefact paths

    Raises:
        ConfigurationError: On empty datasets or invalid settings
        NumericalError: On a non-finite loss
        CheckpointError: On a bad resume checkpoint
    """
    cfg.validate()
    if source is None or source.N == 0:
        raise ConfigurationError("Source dataset is empty", config_key="data.source")
    if cfg.adapt_enabled and (target is None or target.N == 0):
        raise ConfigurationError("Target dataset is empty", config_key="data.target")

    out_dir = ensure_dir(out_dir)
    ckpt_dir = ensure_dir(out_dir / Config.CHECKPOINT_DIR)
    log_path = out_dir / Config.LOSS_LOG_FILE

    state = restore_state(resume, cfg) if resume else build_state(cfg, pretrained_path)
    if not resume and log_path.exists():
        log_path.unlink()
    logger.info(f"Training {cfg.mode_name}: iters={cfg.iters} batch={cfg.batch_size} crop={cfg.crop} "
                f"seed={cfg.seed} source N={source.N} target N={target.N if target else 0}")

    source_sampler = DomainSampler(source, cfg.batch_size, cfg.crop, cfg.seed, SOURCE_TAG)
    target_sampler = (DomainSampler(target, cfg.batch_size, cfg.crop, cfg.seed, TARGET_TAG)
                      if cfg.adapt_enabled else None)

    result = TrainResult(state, ckpt_dir / Config.FINAL_CHECKPOINT, log_path)
    pending_rows: List[Dict[str, Any]] = []
    for it, batch_s, batch_t in iterate_batches(state.iteration, cfg.iters, source_sampler,
                                                target_sampler, cfg):
        try:
            state, record = train_step(batch_s, batch_t, state, cfg)
        except NumericalError:
            _append_log(pending_rows, log_path)
            logger.error(f"Aborting at iteration {it + 1}")
            raise
        result.records.append(record)
        pending_rows.append(record.to_row(state.iteration))
        if state.iteration % cfg.log_every == 0:
            logger.info(f"iter {state.iteration}: {record.summary()}")
            _append_log(pending_rows, log_path)
        if state.iteration % cfg.checkpoint_every == 0:
            _append_log(pending_rows, log_path)
            result.checkpoints.append(save_checkpoint(state, cfg, ckpt_dir / Config.checkpoint_name(state.iteration)))

    _append_log(pending_rows, log_path)
    if not log_path.exists():
        pd.DataFrame(columns=Config.LOSS_LOG_COLUMNS).to_csv(log_path, index=False)
    save_checkpoint(state, cfg, result.checkpoint_path)
    return result


def discriminator_separation(arch: ArchConfig, seed: int = 0, steps: int = 200, lr: float = 1e-4,
                             shift: float = 1.0, feature_size: int = 16, batch_size: int = 8,
                             n_eval: int = 200) -> float:
    """
    Train D alone on two synthetic feature distributions and report patch accuracy.

    Source features are unit-variance Gaussian noise with mean ``shift``; target
    features have mean 0. Accuracy is measured on ``n_eval`` held-out features
    (half per domain) at threshold 0.5.
    """
    model = init_params(arch, seed)
    disc = model.discriminator
    opt = torch.optim.Adam(disc.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    shape = (batch_size, model.extractor.out_channels, feature_size, feature_size)

    disc.train()
    for _ in range(steps):
        f_s = torch.randn(shape, generator=gen) + shift
        f_t = torch.randn(shape, generator=gen)
        opt.zero_grad(set_to_none=True)
        loss = discriminator_loss(disc(f_s), disc(f_t))
        loss.backward()
        opt.step()

    disc.eval()
    half = n_eval // 2
    eval_shape = (half,) + shape[1:]
    with torch.no_grad():
        p_s = disc(torch.randn(eval_shape, generator=gen) + shift)
        p_t = disc(torch.randn(eval_shape, generator=gen))
    correct = int((p_s > 0.5).sum()) + int((p_t < 0.5).sum())
    accuracy = correct / float(p_s.numel() + p_t.numel())
    logger.info(f"Discriminator separation after {steps} steps: accuracy={accuracy:.4f}")
    return accuracy
