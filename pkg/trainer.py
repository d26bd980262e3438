#!/usr/bin/env python3
"""
Minibatch training of the linear VAEs: Adamax, a linear-warmup + cosine
learning-rate schedule, global-norm gradient clipping and the epoch loop that
writes the per-epoch log and checkpoints.
"""

import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

import config
import model as vae
from data import PatchBatch, as_matrix
from logger_config import get_logger
from results_exporter import TRAIN_LOG_HEADER, TrainLogWriter, export_table

logger = get_logger("trainer")

# Dedicated generator stream for minibatch shuffling
_SHUFFLE_STREAM = 1


class NonFiniteLossError(FloatingPointError):
    """A loss component or the gradient norm became NaN or infinite."""

    def __init__(self, epoch: int, batch: int, component: str, value: float):
        self.epoch = epoch
        self.batch = batch
        self.component = component
        self.value = value
        super().__init__(
            f"non-finite {component} ({value}) at epoch {epoch}, batch {batch}"
        )


@dataclass(frozen=True)
class TrainConfig:
    """
    Attributes
    ----------
    lr : float
        Peak learning rate
    batch_size : int
        Samples per minibatch
    epochs : int
        Cosine-annealed epochs (warmup epochs come on top)
    warmup_epochs : int
        Linear warmup epochs
    grad_clip : float
        Maximum global gradient norm
    beta : float
        KL weight (constant, no annealing)
    seed : int
        Seed of the shuffling stream
    beta1, beta2, eps : float
        Adamax constants
    checkpoint_fraction : float
        Checkpoint every round(fraction * total epochs) epochs
    """
    lr: float = config.LEARNING_RATE
    batch_size: int = config.BATCH_SIZE
    epochs: int = config.EPOCHS
    warmup_epochs: int = config.WARMUP_EPOCHS
    grad_clip: float = config.GRAD_CLIP
    beta: float = config.BETA
    seed: int = config.RANDOM_SEED
    beta1: float = config.ADAMAX_BETA1
    beta2: float = config.ADAMAX_BETA2
    eps: float = config.ADAMAX_EPS
    checkpoint_fraction: float = config.CHECKPOINT_FRACTION

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be nonnegative, got {self.lr}")
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs <= 0:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(
                f"warmup_epochs must be in [0, epochs), got {self.warmup_epochs} with epochs={self.epochs}"
            )
        if not self.grad_clip > 0:
            raise ValueError(f"grad_clip must be positive, got {self.grad_clip}")
        if not self.beta >= 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not 0 < self.checkpoint_fraction <= 1:
            raise ValueError(f"checkpoint_fraction must be in (0, 1], got {self.checkpoint_fraction}")

    @property
    def total_epochs(self) -> int:
        """Warmup is additive: 3000 + 5 runs 3005 epochs."""
        return self.epochs + self.warmup_epochs

    @classmethod
    def from_resolved(cls, resolved: Dict[str, Dict]) -> "TrainConfig":
        return cls(**resolved["train"])


@dataclass
class OptimizerState:
    first_moment: Dict[str, np.ndarray]
    inf_norm: Dict[str, np.ndarray]
    step_count: int = 0

    @classmethod
    def zeros_like(cls, tensors: Dict[str, np.ndarray]) -> "OptimizerState":
        return cls(
            first_moment={k: np.zeros_like(v) for k, v in tensors.items()},
            inf_norm={k: np.zeros_like(v) for k, v in tensors.items()},
        )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    recon_mean: float
    recon_var: float
    kl: float
    total: float
    grad_norm: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    def log_line(self) -> str:
        return " ".join(f"{key}={value:.6g}" if key != "epoch" else f"epoch={value}"
                        for key, value in self.to_dict().items())


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    @property
    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.records])

    def to_csv(self, path: str) -> None:
        export_table(
            path,
            TRAIN_LOG_HEADER,
            ([getattr(r, name) for name in TRAIN_LOG_HEADER] for r in self.records),
        )


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """
    Learning rate of an epoch.

    Warmup ramps linearly to ``lr`` (epoch 0 gets lr / warmup_epochs); the
    remaining ``epochs`` follow lr * (1 + cos(pi t / T)) / 2.
    """
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} out of range [0, {cfg.total_epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    t = epoch - cfg.warmup_epochs
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * t / cfg.epochs))


def clip_gradients(grads: vae.GradientSet, max_norm: float) -> vae.GradientSet:
    """Rescale all tensors by max_norm / g when the global L2 norm g exceeds max_norm."""
    if not max_norm > 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    if grads.global_norm <= max_norm:
        return grads
    return grads.scaled(max_norm / grads.global_norm)


def adamax_update(
    tensors: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = config.ADAMAX_BETA1,
    beta2: float = config.ADAMAX_BETA2,
    eps: float = config.ADAMAX_EPS
) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """
    One Adamax step on a dict of tensors.

    m <- b1 m + (1 - b1) g;  u <- max(b2 u, |g|);
    theta <- theta - lr / (1 - b1^t) * m / (u + eps)

    Returns new tensors and a new state; the inputs are not modified.
    """
    if set(tensors) != set(grads) or set(tensors) != set(state.first_moment):
        raise ValueError("tensors, gradients and optimizer state name different parameters")
    step = state.step_count + 1
    step_size = lr / (1.0 - beta1 ** step)

    new_tensors, first_moment, inf_norm = {}, {}, {}
    for name, theta in tensors.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape or state.first_moment[name].shape != theta.shape:
            raise ValueError(f"shape mismatch for '{name}': param {theta.shape}, grad {g.shape}")
        m = beta1 * state.first_moment[name] + (1.0 - beta1) * g
        u = np.maximum(beta2 * state.inf_norm[name], np.abs(g))
        first_moment[name] = m
        inf_norm[name] = u
        new_tensors[name] = theta - step_size * m / (u + eps)
    return new_tensors, OptimizerState(first_moment, inf_norm, step)


def adamax_step(
    params: vae.ModelParams,
    grads: vae.GradientSet,
    state: OptimizerState,
    lr: float,
    beta1: float = config.ADAMAX_BETA1,
    beta2: float = config.ADAMAX_BETA2,
    eps: float = config.ADAMAX_EPS
) -> Tuple[vae.ModelParams, OptimizerState]:
    tensors, state = adamax_update(params.tensors(), grads.tensors, state, lr, beta1, beta2, eps)
    return params.with_tensors(tensors), state


def _check_finite(breakdown: vae.FreeEnergyBreakdown, grad_norm: float, epoch: int, batch: int) -> None:
    for name, value in breakdown.components().items():
        if not np.isfinite(value):
            raise NonFiniteLossError(epoch, batch, name, value)
    if not np.isfinite(grad_norm):
        raise NonFiniteLossError(epoch, batch, "grad_norm", grad_norm)


def checkpoint_epochs(cfg: TrainConfig) -> List[int]:
    """1-based epoch counts after which an intermediate checkpoint is written."""
    interval = max(1, int(round(cfg.total_epochs * cfg.checkpoint_fraction)))
    return list(range(interval, cfg.total_epochs + 1, interval))


def train(
    params: vae.ModelParams,
    data: Union[PatchBatch, np.ndarray],
    cfg: TrainConfig,
    out_dir: Optional[str] = None,
    verbose: bool = False
) -> Tuple[vae.ModelParams, TrainLog]:
    """
    Run warmup + cosine epochs of minibatch Adamax on the free energy.

    Each epoch shuffles the full dataset with a permutation from the seeded
    shuffle stream. The logged breakdown is the sample-weighted mean of the
    minibatch losses seen during the epoch (evaluated before each update) and
    ``grad_norm`` is the mean pre-clip global norm.

    Parameters
    ----------
    params : ModelParams
        Initial model (not modified)
    data : PatchBatch or np.ndarray
        Training patches
    cfg : TrainConfig
        Training configuration
    out_dir : str, optional
        When given, ``train_log.csv`` is written there incrementally together
        with periodic ``checkpoint_eNNNNN.ckpt`` files and the final ``model.ckpt``
    verbose : bool
        Show a progress bar and log one structured line per epoch at INFO

    Returns
    -------
    tuple
        (trained ModelParams, TrainLog)

    Raises
    ------
    NonFiniteLossError
        A loss component or gradient norm became non-finite
    """
    x = as_matrix(data)
    n = x.shape[0]
    if n == 0:
        raise ValueError("training data is empty")

    rng = np.random.default_rng([cfg.seed, _SHUFFLE_STREAM])
    state = OptimizerState.zeros_like(params.tensors())
    params = params.copy()
    log = TrainLog()
    save_at = set(checkpoint_epochs(cfg)) - {cfg.total_epochs}

    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        writer = TrainLogWriter(os.path.join(out_dir, "train_log.csv"))

    logger.info(
        f"Training {params.family.value} K={params.n_latents} M={params.n_pixels} "
        f"on {n} patches for {cfg.total_epochs} epochs (beta={cfg.beta})"
    )
    try:
        for epoch in tqdm(range(cfg.total_epochs), desc="Training", disable=not verbose):
            lr = lr_at(cfg, epoch)
            order = rng.permutation(n)
            sums = np.zeros(4)
            norm_sum = 0.0
            n_batches = 0
            for batch_idx, start in enumerate(range(0, n, cfg.batch_size)):
                xb = x[order[start:start + cfg.batch_size]]
                breakdown, grads = vae.free_energy_and_gradients(params, xb, cfg.beta)
                _check_finite(breakdown, grads.global_norm, epoch, batch_idx)

                sums += len(xb) * np.array([
                    breakdown.mean_penalty, breakdown.variance_penalty, breakdown.kl, breakdown.total
                ])
                norm_sum += grads.global_norm
                n_batches += 1

                params, state = adamax_step(
                    params, clip_gradients(grads, cfg.grad_clip), state, lr,
                    cfg.beta1, cfg.beta2, cfg.eps,
                )

            recon_mean, recon_var, kl, total = sums / n
            record = EpochRecord(epoch, lr, recon_mean, recon_var, kl, total, norm_sum / n_batches)
            log.append(record)
            if writer is not None:
                writer.write(record.to_dict())
            if verbose:
                logger.info(record.log_line())
            else:
                logger.debug(record.log_line())

            if out_dir is not None and epoch + 1 in save_at:
                vae.save_checkpoint(params, os.path.join(out_dir, f"checkpoint_e{epoch + 1:05d}.ckpt"))
    finally:
        if writer is not None:
            writer.close()

    if out_dir is not None:
        path = os.path.join(out_dir, "model.ckpt")
        vae.save_checkpoint(params, path)
        logger.info(f"Final checkpoint saved to {path}")
    return params, log
