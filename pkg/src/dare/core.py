"""Domain types, synthetic identity data, splits and the line-oriented file format."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised when a configuration violates one of its bounds."""


class SplitError(ValueError):
    pass


class TableFormatError(ValueError):
    """Malformed embedding-table or dataset file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class IdentityDataset:
    """Labeled feature vectors, one row per sample."""

    features: np.ndarray
    labels: np.ndarray
    cameras: np.ndarray | None = None

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise ValueError(
                f"expected {features.shape[0]} labels, got shape {labels.shape}"
            )
        if labels.size and labels.min() < 0:
            raise ValueError("identity labels must be non-negative")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        if self.cameras is not None:
            cameras = np.asarray(self.cameras, dtype=np.int64)
            if cameras.shape != labels.shape:
                raise ValueError("cameras must align with labels")
            cameras.setflags(write=False)
            object.__setattr__(self, "cameras", cameras)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    def identities(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, index: np.ndarray) -> IdentityDataset:
        cams = None if self.cameras is None else self.cameras[index]
        return IdentityDataset(self.features[index], self.labels[index], cams)


@dataclass(frozen=True)
class SyntheticConfig:
    num_identities: int = 64
    samples_per_identity: int = 8
    input_dim: int = 32
    easy_fraction: float = 0.5
    coarse_margin: float = 3.0
    fine_margin: float = 1.0
    noise_sigma: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.num_identities < 2:
            raise ConfigError(f"num_identities must be >= 2, got {self.num_identities}")
        if self.samples_per_identity < 2:
            raise ConfigError(
                f"samples_per_identity must be >= 2, got {self.samples_per_identity}"
            )
        if self.input_dim < 2 or self.input_dim % 2:
            raise ConfigError(f"input_dim must be an even integer >= 2, got {self.input_dim}")
        if not 0.0 <= self.easy_fraction <= 1.0:
            raise ConfigError(f"easy_fraction must lie in [0, 1], got {self.easy_fraction}")
        if not self.coarse_margin > 0:
            raise ConfigError(f"coarse_margin must be > 0, got {self.coarse_margin}")
        if not self.fine_margin > 0:
            raise ConfigError(f"fine_margin must be > 0, got {self.fine_margin}")
        if not self.fine_margin < self.coarse_margin:
            raise ConfigError(
                f"fine_margin ({self.fine_margin}) must be < coarse_margin ({self.coarse_margin})"
            )
        if not self.noise_sigma >= 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


# Identity codes live in a CODE_DIMS-dimensional subspace. Hard identities
# additionally carry a per-sample pose whose "clutter" image, a random tanh
# network of depth CLUTTER_DEPTH, is added on top of their code.
CODE_DIMS = 3
POSE_DIMS = 2
CLUTTER_WIDTH = 16
CLUTTER_DEPTH = 4
CLUTTER_GAIN = 3.0
CLUTTER_SCALE = 3.0


def _random_directions(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _orthonormal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def generate_synthetic(config: SyntheticConfig) -> IdentityDataset:
    """Draw a labeled dataset with easy and hard identities.

    * Easy identities: the first half of the coordinates holds a code of norm
      ``coarse_margin`` (placed by a fixed rotation), the second half is 0.
    * Hard identities: the first half holds a random per-sample pose, the
      second half holds a code of norm ``fine_margin`` plus a clutter term.
      The clutter is a fixed smooth function of the pose (random rotation and
      ``tanh``, repeated) and is larger than the code, so telling hard
      identities apart means predicting the clutter from the pose and
      removing it. One affine layer cannot do that.

    The clutter function is shared by all identities and can be learned from
    every training sample. Codes are low dimensional, so a metric learned on
    some identities transfers to unseen ones. Isotropic Gaussian noise is
    added everywhere. Rows are grouped by identity and identity ``i`` has
    label ``i``.
    """
    config.validate()
    n_ids, n_per, dim = config.num_identities, config.samples_per_identity, config.input_dim
    half = dim // 2
    code_dims, pose_dims = min(CODE_DIMS, half), min(POSE_DIMS, half)
    structure_seq, sample_seq = np.random.SeedSequence(config.seed).spawn(2)
    structure = np.random.default_rng(structure_seq)

    n_easy = int(round(config.easy_fraction * n_ids))
    is_easy = np.zeros(n_ids, dtype=bool)
    is_easy[structure.permutation(n_ids)[:n_easy]] = True
    coarse = config.coarse_margin * _random_directions(structure, n_ids, code_dims)
    fine = config.fine_margin * _random_directions(structure, n_ids, code_dims)
    easy_basis = _orthonormal(structure, half)[:, :code_dims]
    hard_basis = _orthonormal(structure, half)[:, :code_dims]
    pose_basis = _orthonormal(structure, half)[:, :pose_dims]
    layers = [structure.standard_normal((CLUTTER_WIDTH, pose_dims)) / np.sqrt(pose_dims)]
    layers += [
        structure.standard_normal((CLUTTER_WIDTH, CLUTTER_WIDTH)) / np.sqrt(CLUTTER_WIDTH)
        for _ in range(CLUTTER_DEPTH - 1)
    ]
    readout = structure.standard_normal((half, CLUTTER_WIDTH)) / np.sqrt(CLUTTER_WIDTH)

    features = np.zeros((n_ids * n_per, dim))
    for ident, seq in enumerate(sample_seq.spawn(n_ids)):
        rng = np.random.default_rng(seq)
        rows = slice(ident * n_per, (ident + 1) * n_per)
        if is_easy[ident]:
            features[rows, :half] = easy_basis @ coarse[ident]
        else:
            pose = rng.standard_normal((n_per, pose_dims))
            h = pose
            for w in layers:
                h = np.tanh(CLUTTER_GAIN * h @ w.T)
            features[rows, :half] = pose @ pose_basis.T
            features[rows, half:] = hard_basis @ fine[ident] + CLUTTER_SCALE * h @ readout.T
        features[rows] += config.noise_sigma * rng.standard_normal((n_per, dim))

    labels = np.repeat(np.arange(n_ids), n_per)
    return IdentityDataset(features, labels)


def split_dataset(
    ds: IdentityDataset, train_frac: float, query_per_identity: int, seed: int
) -> tuple[IdentityDataset, IdentityDataset, IdentityDataset]:
    """Identity-disjoint train/test split, then per test identity a query/gallery split."""
    if not 0.0 < train_frac < 1.0:
        raise SplitError(f"train_frac must lie in (0, 1), got {train_frac}")
    if query_per_identity < 1:
        raise SplitError("query_per_identity must be >= 1")
    rng = np.random.default_rng(seed)
    ids = ds.identities()
    n_train = int(round(train_frac * len(ids)))
    if n_train < 1 or n_train >= len(ids):
        raise SplitError(f"train_frac={train_frac} leaves an empty train or test split")
    perm = rng.permutation(ids)
    train_ids, test_ids = np.sort(perm[:n_train]), np.sort(perm[n_train:])

    train_idx = np.flatnonzero(np.isin(ds.labels, train_ids))
    query_idx: list[np.ndarray] = []
    gallery_idx: list[np.ndarray] = []
    for ident in test_ids:
        rows = np.flatnonzero(ds.labels == ident)
        if len(rows) < query_per_identity + 1:
            raise SplitError(
                f"identity {ident} has {len(rows)} samples, needs at least "
                f"{query_per_identity + 1} for {query_per_identity} queries"
            )
        rows = rng.permutation(rows)
        query_idx.append(np.sort(rows[:query_per_identity]))
        gallery_idx.append(np.sort(rows[query_per_identity:]))
    return (
        ds.subset(train_idx),
        ds.subset(np.concatenate(query_idx)),
        ds.subset(np.concatenate(gallery_idx)),
    )


@dataclass(frozen=True)
class EmbeddingTable:
    """Per-stage embeddings of one sample set, with the cost of each stage."""

    stages: tuple[np.ndarray, ...]
    costs: tuple[float, ...]
    labels: np.ndarray
    cameras: np.ndarray | None = None

    def __post_init__(self) -> None:
        stages = tuple(np.asarray(s, dtype=np.float64) for s in self.stages)
        if not stages:
            raise ValueError("an embedding table needs at least one stage")
        if len(self.costs) != len(stages):
            raise ValueError(f"{len(stages)} stages but {len(self.costs)} costs")
        rows = [s.shape[0] for s in stages]
        for i, s in enumerate(stages):
            if s.ndim != 2:
                raise ValueError(f"stage {i + 1} must be 2-D")
            if s.shape[0] != rows[0]:
                raise ValueError(
                    f"stage {i + 1} has {s.shape[0]} rows but stage 1 has {rows[0]}"
                )
        for i in range(1, len(self.costs)):
            if self.costs[i] < self.costs[i - 1]:
                raise ValueError("costs must be non-decreasing")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (rows[0],):
            raise ValueError(f"expected {rows[0]} labels, got {labels.shape[0]}")
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "costs", tuple(float(c) for c in self.costs))
        object.__setattr__(self, "labels", labels)
        if self.cameras is not None:
            object.__setattr__(self, "cameras", np.asarray(self.cameras, dtype=np.int64))

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def __len__(self) -> int:
        return self.stages[0].shape[0]

    def dims(self) -> tuple[int, ...]:
        return tuple(s.shape[1] for s in self.stages)

    def subset(self, index: np.ndarray) -> EmbeddingTable:
        cams = None if self.cameras is None else self.cameras[index]
        return EmbeddingTable(
            tuple(s[index] for s in self.stages), self.costs, self.labels[index], cams
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        if self.costs != other.costs or self.dims() != other.dims():
            return False
        if (self.cameras is None) != (other.cameras is None):
            return False
        if self.cameras is not None and not np.array_equal(self.cameras, other.cameras):
            return False
        return np.array_equal(self.labels, other.labels) and all(
            np.array_equal(a, b) for a, b in zip(self.stages, other.stages)
        )

    __hash__ = None  # type: ignore[assignment]


def dataset_as_table(ds: IdentityDataset) -> EmbeddingTable:
    return EmbeddingTable((ds.features,), (0.0,), ds.labels, ds.cameras)


def table_as_dataset(table: EmbeddingTable) -> IdentityDataset:
    if table.num_stages != 1:
        raise TableFormatError(f"a dataset file has 1 stage, found {table.num_stages}")
    return IdentityDataset(table.stages[0], table.labels, table.cameras)


def format_float(x: float) -> str:
    # repr is the shortest string that round-trips an IEEE-754 double
    return repr(float(x))


def _format_cost(c: float) -> str:
    return str(int(c)) if float(c).is_integer() else format_float(c)


def save_embedding_table(table: EmbeddingTable, path: str | Path) -> None:
    """Write ``table`` as ``#stages`` header plus one ``label[,camera]|...`` line per row."""
    header = (
        f"#stages {table.num_stages} "
        f"dims {','.join(str(d) for d in table.dims())} "
        f"costs {','.join(_format_cost(c) for c in table.costs)}"
    )
    lines = [header]
    for i in range(len(table)):
        key = str(int(table.labels[i]))
        if table.cameras is not None:
            key += f",{int(table.cameras[i])}"
        parts = [key]
        for stage in table.stages:
            parts.append(" ".join(format_float(v) for v in stage[i]))
        lines.append("|".join(parts))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_int_list(text: str, what: str, line: int) -> list[int]:
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise TableFormatError(f"malformed {what} list {text!r}", line) from None


def _parse_header(text: str) -> tuple[int, list[int], list[float]]:
    tokens = text.split()
    if len(tokens) != 6 or tokens[0] != "#stages" or tokens[2] != "dims" or tokens[4] != "costs":
        raise TableFormatError(
            "header must read '#stages S dims d1,...,dS costs C1,...,CS'", 1
        )
    try:
        n_stages = int(tokens[1])
    except ValueError:
        raise TableFormatError(f"stage count {tokens[1]!r} is not an integer", 1) from None
    dims = _parse_int_list(tokens[3], "dims", 1)
    try:
        costs = [float(t) for t in tokens[5].split(",")]
    except ValueError:
        raise TableFormatError(f"malformed costs list {tokens[5]!r}", 1) from None
    if n_stages < 1:
        raise TableFormatError("stage count must be >= 1", 1)
    if len(dims) != n_stages or len(costs) != n_stages:
        raise TableFormatError(
            f"header declares {n_stages} stages but lists {len(dims)} dims and {len(costs)} costs",
            1,
        )
    if any(d < 1 for d in dims):
        raise TableFormatError("dims must be positive", 1)
    if any(not math.isfinite(c) for c in costs):
        raise TableFormatError("costs must be finite", 1)
    for s in range(1, n_stages):
        if costs[s] < costs[s - 1]:
            raise TableFormatError(
                f"costs must be non-decreasing (C{s + 1}={costs[s]:g} < C{s}={costs[s - 1]:g})", 1
            )
    return n_stages, dims, costs


def load_embedding_table(path: str | Path) -> EmbeddingTable:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise TableFormatError("empty file", 1)
    n_stages, dims, costs = _parse_header(lines[0])

    labels: list[int] = []
    cameras: list[int] = []
    rows: list[list[list[float]]] = [[] for _ in range(n_stages)]
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("|")
        if len(fields) != n_stages + 1:
            raise TableFormatError(
                f"expected {n_stages} stage fields, found {len(fields) - 1}", lineno
            )
        key = fields[0].split(",")
        try:
            labels.append(int(key[0]))
            if len(key) == 2:
                cameras.append(int(key[1]))
            elif len(key) != 1:
                raise ValueError
        except ValueError:
            raise TableFormatError(f"malformed label field {fields[0]!r}", lineno) from None
        for s, chunk in enumerate(fields[1:]):
            try:
                values = [float(t) for t in chunk.split()]
            except ValueError:
                raise TableFormatError(f"non-numeric value in stage {s + 1}", lineno) from None
            if len(values) != dims[s]:
                raise TableFormatError(
                    f"stage {s + 1} has {len(values)} values, header says {dims[s]}", lineno
                )
            rows[s].append(values)
    if cameras and len(cameras) != len(labels):
        raise TableFormatError("camera ids must be given for every row or for none")
    stages = tuple(
        np.asarray(r, dtype=np.float64).reshape(len(labels), d) for r, d in zip(rows, dims)
    )
    return EmbeddingTable(stages, tuple(costs), np.asarray(labels, dtype=np.int64),
                          np.asarray(cameras, dtype=np.int64) if cameras else None)


def save_dataset(ds: IdentityDataset, path: str | Path) -> None:
    save_embedding_table(dataset_as_table(ds), path)


def load_dataset(path: str | Path) -> IdentityDataset:
    return table_as_dataset(load_embedding_table(path))


def check_table_stages(tables: Sequence[EmbeddingTable]) -> None:
    """Raise unless all tables agree on stage count and per-stage dims."""
    first = tables[0]
    for t in tables[1:]:
        if t.dims() != first.dims():
            raise ValueError(f"stage dims differ: {first.dims()} vs {t.dims()}")
