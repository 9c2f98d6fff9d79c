"""Staged feedforward encoder with an embedding head per stage and weighted fusion."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .core import ConfigError, EmbeddingTable, IdentityDataset, TableFormatError, format_float


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 32
    backbone_widths: tuple[int, ...] = (32, 64, 96, 128)
    head_hidden_width: int = 64
    embedding_dim: int = 16

    def __post_init__(self) -> None:
        object.__setattr__(self, "backbone_widths", tuple(int(w) for w in self.backbone_widths))
        if self.num_stages < 2:
            raise ConfigError(f"need at least 2 stages, got {self.num_stages}")
        if self.input_dim < 1 or any(w < 1 for w in self.backbone_widths):
            raise ConfigError("input_dim and backbone widths must be >= 1")
        if self.head_hidden_width < 1:
            raise ConfigError("head_hidden_width must be >= 1")
        if self.embedding_dim < 2:
            raise ConfigError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        costs, _ = _costs(self)
        if any(b <= a for a, b in zip(costs, costs[1:])):
            raise ConfigError(f"stage costs must strictly increase, got {costs}")

    @property
    def num_stages(self) -> int:
        return len(self.backbone_widths)

    def stage_inputs(self) -> tuple[int, ...]:
        return (self.input_dim,) + self.backbone_widths[:-1]


def _costs(config: EncoderConfig) -> tuple[list[float], float]:
    # an affine map m -> n costs m*n Mul-Adds; bias and nonlinearity are free
    backbone = [m * n for m, n in zip(config.stage_inputs(), config.backbone_widths)]
    heads = [
        w * config.head_hidden_width + config.head_hidden_width * config.embedding_dim
        for w in config.backbone_widths
    ]
    cumulative = np.cumsum(backbone)
    stage_costs = [float(c + h) for c, h in zip(cumulative, heads)]
    fusion = float(cumulative[-1] + sum(heads) + config.num_stages * config.embedding_dim)
    return stage_costs, fusion


def cost_profile(config: EncoderConfig) -> tuple[tuple[float, ...], float]:
    """Mul-Adds needed to obtain each stage embedding, and the fused one."""
    stage_costs, fusion = _costs(config)
    return tuple(stage_costs), fusion


_GROUPS = ("backbone_w", "backbone_b", "head_w1", "head_b1", "head_w2", "head_b2")


@functools.lru_cache(maxsize=None)
def _layout(config: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    S, H, d = config.num_stages, config.head_hidden_width, config.embedding_dim
    ins, outs = config.stage_inputs(), config.backbone_widths
    shapes = {
        "backbone_w": [(outs[s], ins[s]) for s in range(S)],
        "backbone_b": [(outs[s],) for s in range(S)],
        "head_w1": [(H, outs[s]) for s in range(S)],
        "head_b1": [(H,) for _ in range(S)],
        "head_w2": [(d, H) for _ in range(S)],
        "head_b2": [(d,) for _ in range(S)],
    }
    layout = [(f"{g}.{s}", shape) for g in _GROUPS for s, shape in enumerate(shapes[g])]
    layout.append(("fusion_w", (S,)))
    return layout


class EncoderParams:
    """All weights live in one flat vector; the per-layer arrays are views into it."""

    def __init__(self, config: EncoderConfig, vector: np.ndarray | None = None):
        layout = _layout(config)
        size = sum(math.prod(shape) for _, shape in layout)
        if vector is None:
            vector = np.zeros(size)
        if vector.shape != (size,):
            raise ValueError(f"parameter vector must have {size} entries, got {vector.shape}")
        self.config = config
        self.vector = vector
        self._named: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in layout:
            n = math.prod(shape)
            self._named[name] = vector[offset:offset + n].reshape(shape)
            offset += n
        S = config.num_stages
        for g in _GROUPS:
            setattr(self, g, [self._named[f"{g}.{s}"] for s in range(S)])
        self.fusion_w = self._named["fusion_w"]

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self._named.items()

    def copy(self) -> EncoderParams:
        return EncoderParams(self.config, self.vector.copy())

    def zeros_like(self) -> EncoderParams:
        return EncoderParams(self.config)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.vector)))


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases, fusion weights 1/S."""
    rng = np.random.default_rng(seed)
    params = EncoderParams(config)
    for s, (n_in, n_out) in enumerate(zip(config.stage_inputs(), config.backbone_widths)):
        params.backbone_w[s][...] = rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)
    for s, width in enumerate(config.backbone_widths):
        params.head_w1[s][...] = (
            rng.standard_normal((config.head_hidden_width, width)) / np.sqrt(width)
        )
        params.head_w2[s][...] = rng.standard_normal(
            (config.embedding_dim, config.head_hidden_width)
        ) / np.sqrt(config.head_hidden_width)
    params.fusion_w[:] = 1.0 / config.num_stages
    return params


@dataclass(frozen=True)
class MultiStageOutput:
    stage_embeddings: tuple[np.ndarray, ...]
    fused: np.ndarray
    cumulative_cost_at_stage: tuple[float, ...]
    fusion_cost: float


@dataclass
class ForwardCache:
    """Activations of a batch forward pass, kept for backpropagation."""

    inputs: np.ndarray
    hidden: list[np.ndarray]
    head_hidden: list[np.ndarray]
    stage_embeddings: np.ndarray  # (S, N, d)
    fused: np.ndarray  # (N, d)


def forward_batch(params: EncoderParams, x: np.ndarray) -> ForwardCache:
    """Forward pass over the rows of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    config = params.config
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ValueError(f"expected inputs of shape (N, {config.input_dim}), got {x.shape}")
    hidden, head_hidden, stage = [], [], []
    h = x
    for s in range(config.num_stages):
        h = np.tanh(h @ params.backbone_w[s].T + params.backbone_b[s])
        g = np.tanh(h @ params.head_w1[s].T + params.head_b1[s])
        hidden.append(h)
        head_hidden.append(g)
        stage.append(g @ params.head_w2[s].T + params.head_b2[s])
    stages = np.stack(stage)
    fused = np.tensordot(params.fusion_w, stages, axes=1)
    return ForwardCache(x, hidden, head_hidden, stages, fused)


def forward(params: EncoderParams, x: np.ndarray) -> MultiStageOutput:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a single input vector, got shape {x.shape}")
    cache = forward_batch(params, x[None, :])
    costs, fusion = cost_profile(params.config)
    return MultiStageOutput(
        tuple(e[0] for e in cache.stage_embeddings), cache.fused[0], costs, fusion
    )


def backward_batch(
    params: EncoderParams, cache: ForwardCache, d_stages: np.ndarray, d_fused: np.ndarray
) -> EncoderParams:
    """Backpropagate embedding gradients ``d_stages`` (S, N, d) and ``d_fused`` (N, d)."""
    config = params.config
    grad = params.zeros_like()
    grad.fusion_w[:] = np.einsum("snd,nd->s", cache.stage_embeddings, d_fused)
    d_phi = d_stages + params.fusion_w[:, None, None] * d_fused[None]
    d_h_next = None
    for s in reversed(range(config.num_stages)):
        g = cache.head_hidden[s]
        grad.head_w2[s][:] = d_phi[s].T @ g
        grad.head_b2[s][:] = d_phi[s].sum(axis=0)
        d_pre_g = (d_phi[s] @ params.head_w2[s]) * (1.0 - g * g)
        grad.head_w1[s][:] = d_pre_g.T @ cache.hidden[s]
        grad.head_b1[s][:] = d_pre_g.sum(axis=0)
        d_h = d_pre_g @ params.head_w1[s]
        if d_h_next is not None:
            d_h = d_h + d_h_next
        h = cache.hidden[s]
        d_pre_h = d_h * (1.0 - h * h)
        h_prev = cache.hidden[s - 1] if s > 0 else cache.inputs
        grad.backbone_w[s][:] = d_pre_h.T @ h_prev
        grad.backbone_b[s][:] = d_pre_h.sum(axis=0)
        d_h_next = d_pre_h @ params.backbone_w[s]
    return grad


def embed(params: EncoderParams, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-stage and fused embeddings for every row of ``x``."""
    cache = forward_batch(params, x)
    return list(cache.stage_embeddings), cache.fused


# checkpoint I/O ------------------------------------------------------------


def save_params(params: EncoderParams, path: str | Path) -> None:
    c = params.config
    lines = [
        f"#encoder stages {c.num_stages} input_dim {c.input_dim} "
        f"widths {','.join(str(w) for w in c.backbone_widths)} "
        f"head_hidden {c.head_hidden_width} embedding_dim {c.embedding_dim}"
    ]
    for name, a in params.named_arrays():
        shape = ",".join(str(n) for n in a.shape)
        lines.append(f"{name}|{shape}|" + " ".join(format_float(v) for v in a.ravel()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_params(path: str | Path) -> EncoderParams:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise TableFormatError("empty checkpoint", 1)
    tokens = lines[0].split()
    keys = ("stages", "input_dim", "widths", "head_hidden", "embedding_dim")
    if len(tokens) != 11 or tokens[0] != "#encoder" or tuple(tokens[1::2]) != keys:
        raise TableFormatError(
            "header must read '#encoder stages S input_dim D widths w1,...,wS "
            "head_hidden H embedding_dim d'", 1
        )
    try:
        config = EncoderConfig(
            input_dim=int(tokens[4]),
            backbone_widths=tuple(int(w) for w in tokens[6].split(",")),
            head_hidden_width=int(tokens[8]),
            embedding_dim=int(tokens[10]),
        )
    except ValueError as exc:
        raise TableFormatError(f"bad encoder header: {exc}", 1) from None
    if config.num_stages != int(tokens[2]):
        raise TableFormatError("stage count disagrees with width list", 1)

    params = init_params(config, seed=0)
    expected = dict(params.named_arrays())
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            name, shape_text, values = line.split("|")
        except ValueError:
            raise TableFormatError("expected 'name|shape|values'", lineno) from None
        if name not in expected:
            raise TableFormatError(f"unknown parameter {name!r}", lineno)
        target = expected[name]
        shape = tuple(int(n) for n in shape_text.split(","))
        if shape != target.shape:
            raise TableFormatError(f"{name} has shape {shape}, expected {target.shape}", lineno)
        try:
            data = np.array([float(v) for v in values.split()], dtype=np.float64)
        except ValueError:
            raise TableFormatError(f"non-numeric value in {name}", lineno) from None
        if data.size != target.size:
            raise TableFormatError(f"{name} has {data.size} values, expected {target.size}", lineno)
        target[...] = data.reshape(shape)
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise TableFormatError(f"checkpoint is missing {sorted(missing)}")
    return params


def embedding_table(params: EncoderParams, dataset: IdentityDataset) -> EmbeddingTable:
    """Embed ``dataset`` at every exit; the last block is the fused embedding."""
    stages, fused = embed(params, dataset.features)
    costs, fusion_cost = cost_profile(params.config)
    return EmbeddingTable((*stages, fused), (*costs, fusion_cost), dataset.labels, dataset.cameras)


def iter_exits(params: EncoderParams, x: np.ndarray) -> Iterator[tuple[int, np.ndarray, float]]:
    """Run the stages one at a time, yielding ``(exit, embedding, cumulative cost)``.

    Exits ``0..S-1`` are the stage embeddings; exit ``S`` is the fused embedding.
    Stopping the iteration stops the computation.
    """
    config = params.config
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (config.input_dim,):
        raise ValueError(f"expected an input of length {config.input_dim}, got shape {x.shape}")
    costs, fusion_cost = cost_profile(config)
    h = x
    stage_embeddings = []
    for s in range(config.num_stages):
        h = np.tanh(params.backbone_w[s] @ h + params.backbone_b[s])
        g = np.tanh(params.head_w1[s] @ h + params.head_b1[s])
        phi = params.head_w2[s] @ g + params.head_b2[s]
        stage_embeddings.append(phi)
        yield s, phi, costs[s]
    yield config.num_stages, np.tensordot(params.fusion_w, np.stack(stage_embeddings), axes=1), fusion_cost
