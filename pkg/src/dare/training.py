"""Deeply supervised batch-hard triplet training with a hand-written Adam."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, IdentityDataset
from .encoder import (
    EncoderConfig,
    EncoderParams,
    backward_batch,
    forward_batch,
    init_params,
)

logger = logging.getLogger(__name__)


class BatchError(ValueError):
    """A batch or dataset cannot satisfy the P x K layout."""


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"loss became NaN at iteration {iteration}")


@dataclass(frozen=True)
class PKBatch:
    features: np.ndarray
    labels: np.ndarray
    P: int
    K: int

    def __post_init__(self) -> None:
        if self.features.shape[0] != self.P * self.K or self.labels.shape != (self.P * self.K,):
            raise BatchError(f"a {self.P}x{self.K} batch needs {self.P * self.K} rows")
        groups = self.labels.reshape(self.P, self.K)
        if np.any(groups != groups[:, :1]):
            raise BatchError("every group of K rows must share one label")
        if len(np.unique(groups[:, 0])) != self.P:
            raise BatchError("group labels must be distinct")


@dataclass(frozen=True)
class TrainConfig:
    P: int = 18
    K: int = 4
    total_iterations: int = 6000
    decay_start: int | None = None  # defaults to total_iterations // 2
    base_lr: float = 3e-4
    beta1: float = 0.9
    beta1_after_decay: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    deep_supervision: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.decay_start is None:
            object.__setattr__(self, "decay_start", max(1, self.total_iterations // 2))
        if not 0 < self.decay_start <= self.total_iterations:
            raise ConfigError(
                f"need 0 < decay_start <= total_iterations, got {self.decay_start} "
                f"and {self.total_iterations}"
            )
        if self.P < 2 or self.K < 2:
            raise ConfigError(f"need P >= 2 and K >= 2, got P={self.P}, K={self.K}")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")


# distances and the loss ----------------------------------------------------


def pairwise_distances(embeddings: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows; a leading batch axis is allowed."""
    e = np.asarray(embeddings, dtype=np.float64)
    diff = e[..., :, None, :] - e[..., None, :, :]
    return np.sqrt(np.einsum("...ijk,...ijk->...ij", diff, diff))


def _check_groups(labels: np.ndarray) -> None:
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2:
        raise BatchError("batch-hard mining needs at least two identities")
    if counts.min() < 2:
        raise BatchError(f"identity {ids[counts.argmin()]} has a single sample in the batch")


def _stacked_loss_and_grad(e: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-set losses and embedding gradients for a stack ``e`` of shape (T, N, d)."""
    dist = pairwise_distances(e)
    same = labels[:, None] == labels[None, :]
    # argmax/argmin return the first occurrence, so the lowest index wins ties
    pos = np.argmax(np.where(same, dist, -np.inf), axis=-1)
    neg = np.argmin(np.where(same, np.inf, dist), axis=-1)
    d_pos = np.take_along_axis(dist, pos[..., None], axis=-1)[..., 0]
    d_neg = np.take_along_axis(dist, neg[..., None], axis=-1)[..., 0]
    margin = d_pos - d_neg
    losses = np.logaddexp(0.0, margin).sum(axis=-1)

    weight = 0.5 * (1.0 + np.tanh(0.5 * margin))  # derivative of softplus
    # coeff[t, i, j]: d loss / d dist_ij; zero-distance pairs get the zero subgradient
    coeff = np.zeros_like(dist)
    c_pos = np.divide(weight, d_pos, out=np.zeros_like(d_pos), where=d_pos > 0)
    c_neg = np.divide(-weight, d_neg, out=np.zeros_like(d_neg), where=d_neg > 0)
    np.put_along_axis(coeff, pos[..., None], c_pos[..., None], axis=-1)
    np.put_along_axis(coeff, neg[..., None], c_neg[..., None], axis=-1)
    sym = coeff + np.swapaxes(coeff, -1, -2)
    grad = sym.sum(axis=-1)[..., None] * e - sym @ e
    return losses, grad


def batch_hard_triplet_loss(embeddings: np.ndarray, labels: np.ndarray) -> float:
    """Soft-margin batch-hard triplet loss, summed over anchors.

    Each anchor contributes ``log(1 + exp(d_pos - d_neg))`` with ``d_pos`` the
    distance to its furthest same-label row and ``d_neg`` the distance to its
    nearest other-label row.
    """
    loss, _ = triplet_loss_and_grad(embeddings, labels)
    return loss


def triplet_loss_and_grad(embeddings: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    _check_groups(labels)
    losses, grad = _stacked_loss_and_grad(e[None], labels)
    return float(losses[0]), grad[0]


def _embedding_terms(stages: np.ndarray, fused: np.ndarray, deep_supervision: bool):
    if deep_supervision:
        return [*stages, fused]
    return [fused]


def total_loss(params: EncoderParams, batch: PKBatch, deep_supervision: bool = True) -> float:
    """Sum of the triplet loss over every stage embedding and the fused one.

    With ``deep_supervision=False`` only the fused embedding is supervised.
    """
    cache = forward_batch(params, batch.features)
    return float(sum(
        batch_hard_triplet_loss(e, batch.labels)
        for e in _embedding_terms(cache.stage_embeddings, cache.fused, deep_supervision)
    ))


def loss_and_gradient(
    params: EncoderParams, batch: PKBatch, deep_supervision: bool = True
) -> tuple[float, EncoderParams]:
    _check_groups(batch.labels)
    cache = forward_batch(params, batch.features)
    if deep_supervision:
        stack = np.concatenate([cache.stage_embeddings, cache.fused[None]])
        losses, grads = _stacked_loss_and_grad(stack, batch.labels)
        d_stages, d_fused = grads[:-1], grads[-1]
    else:
        losses, grads = _stacked_loss_and_grad(cache.fused[None], batch.labels)
        d_stages, d_fused = np.zeros_like(cache.stage_embeddings), grads[0]
    return float(losses.sum()), backward_batch(params, cache, d_stages, d_fused)


def gradient(params: EncoderParams, batch: PKBatch, config: TrainConfig) -> EncoderParams:
    """Analytic gradient of the training objective w.r.t. every parameter."""
    return loss_and_gradient(params, batch, config.deep_supervision)[1]


# schedule, sampling, optimizer ----------------------------------------------


def lr_schedule(t: float, config: TrainConfig) -> float:
    """Constant ``base_lr`` up to ``decay_start``, then exponential decay to 0.001x.

    Iterations past ``total_iterations`` are clamped to the final rate.
    """
    t0, t1 = config.decay_start, config.total_iterations
    t = min(t, t1)
    if t <= t0:
        return config.base_lr
    return config.base_lr * 0.001 ** ((t - t0) / (t1 - t0))


def sample_pk_batch(
    train: IdentityDataset, P: int, K: int, rng: np.random.Generator
) -> PKBatch:
    """P distinct identities, K samples each (with replacement only when short)."""
    ids = train.identities()
    if len(ids) < P:
        raise BatchError(f"need {P} identities for a PK batch, dataset has {len(ids)}")
    chosen = rng.choice(ids, size=P, replace=False)
    rows = []
    for ident in chosen:
        members = np.flatnonzero(train.labels == ident)
        rows.append(rng.choice(members, size=K, replace=len(members) < K))
    index = np.concatenate(rows)
    return PKBatch(train.features[index], train.labels[index], P, K)


class Adam:
    """Adam with bias correction; ``beta1`` may change between steps, moments are kept."""

    def __init__(self, params: EncoderParams, beta2: float = 0.999, epsilon: float = 1e-8):
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = np.zeros_like(params.vector)
        self.v = np.zeros_like(params.vector)
        self.beta1_power = 1.0
        self.beta2_power = 1.0

    def step(self, params: EncoderParams, grad: EncoderParams, lr: float, beta1: float) -> None:
        # bias correction uses the product of the betas actually applied
        self.beta1_power *= beta1
        self.beta2_power *= self.beta2
        bc1 = 1.0 - self.beta1_power
        bc2 = 1.0 - self.beta2_power
        g = grad.vector
        self.m *= beta1
        self.m += (1.0 - beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (g * g)
        params.vector -= lr * (self.m / bc1) / (np.sqrt(self.v / bc2) + self.epsilon)


@dataclass
class TrainResult:
    params: EncoderParams
    losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)

    def trace_csv(self) -> str:
        lines = ["iteration,loss,lr"]
        for i, (loss, lr) in enumerate(zip(self.losses, self.learning_rates), start=1):
            lines.append(f"{i},{loss!r},{lr!r}")
        return "\n".join(lines) + "\n"


def train(
    dataset: IdentityDataset,
    encoder_config: EncoderConfig,
    train_config: TrainConfig,
    init: EncoderParams | None = None,
) -> TrainResult:
    """Run ``total_iterations`` Adam steps on PK batches drawn from ``dataset``."""
    if dataset.dim != encoder_config.input_dim:
        raise ConfigError(
            f"dataset has dim {dataset.dim}, encoder expects {encoder_config.input_dim}"
        )
    seeds = np.random.SeedSequence(train_config.seed).spawn(2)
    init_seed = int(seeds[0].generate_state(1)[0])
    params = init.copy() if init is not None else init_params(encoder_config, init_seed)
    rng = np.random.default_rng(seeds[1])
    opt = Adam(params, train_config.beta2, train_config.epsilon)
    result = TrainResult(params)
    for t in range(1, train_config.total_iterations + 1):
        batch = sample_pk_batch(dataset, train_config.P, train_config.K, rng)
        loss, grad = loss_and_gradient(params, batch, train_config.deep_supervision)
        if math.isnan(loss):
            raise TrainingDiverged(t)
        lr = lr_schedule(t, train_config)
        beta1 = train_config.beta1 if t <= train_config.decay_start else train_config.beta1_after_decay
        opt.step(params, grad, lr, beta1)
        result.losses.append(loss)
        result.learning_rates.append(lr)
        if t % 1000 == 0:
            logger.debug("iteration %d loss %.4f lr %.2e", t, loss, lr)
    return result
