"""Gallery ranking and the re-ID metrics (CMC rank-k, mAP)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import EmbeddingTable


@dataclass(frozen=True)
class RankedResult:
    query_index: int
    order: np.ndarray
    distances: np.ndarray  # sorted, aligned with ``order``
    matches: np.ndarray | None = None  # bool per rank

    @property
    def num_matches(self) -> int:
        return 0 if self.matches is None else int(self.matches.sum())


def distance_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
    diff = q[:, None, :] - g[None, :, :]
    return np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))


def _rank_row(
    dist: np.ndarray,
    query_index: int,
    query_label: int | None,
    gallery_labels: np.ndarray | None,
    keep: np.ndarray | None = None,
) -> RankedResult:
    candidates = np.arange(len(dist)) if keep is None else np.flatnonzero(keep)
    # stable sort: equal distances keep ascending gallery index
    order = candidates[np.argsort(dist[candidates], kind="stable")]
    matches = None
    if query_label is not None and gallery_labels is not None:
        matches = gallery_labels[order] == query_label
    return RankedResult(query_index, order, dist[order], matches)


def rank_gallery(
    query: np.ndarray,
    gallery: np.ndarray,
    query_label: int | None = None,
    gallery_labels: np.ndarray | None = None,
    query_index: int = 0,
) -> RankedResult:
    """Sort the gallery by Euclidean distance to ``query``."""
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise ValueError("gallery must be a non-empty 2-D array")
    dist = distance_matrix(query, gallery)[0]
    labels = None if gallery_labels is None else np.asarray(gallery_labels)
    return _rank_row(dist, query_index, query_label, labels)


def rank_all(
    queries: np.ndarray,
    gallery: np.ndarray,
    query_labels: np.ndarray,
    gallery_labels: np.ndarray,
    query_cameras: np.ndarray | None = None,
    gallery_cameras: np.ndarray | None = None,
    exclude_same_camera: bool = False,
) -> list[RankedResult]:
    """Rank the gallery for every query.

    With ``exclude_same_camera`` the gallery items sharing both identity and
    camera with the query are dropped before ranking.
    """
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise ValueError("gallery must be a non-empty 2-D array")
    dist = distance_matrix(queries, gallery)
    gallery_labels = np.asarray(gallery_labels)
    if exclude_same_camera and (query_cameras is None or gallery_cameras is None):
        raise ValueError("same-camera exclusion needs camera ids for queries and gallery")
    results = []
    for i, row in enumerate(dist):
        keep = None
        if exclude_same_camera:
            keep = ~((gallery_labels == query_labels[i]) & (gallery_cameras == query_cameras[i]))
        results.append(_rank_row(row, i, int(query_labels[i]), gallery_labels, keep))
    return results


def _matched(results: Sequence[RankedResult]) -> list[RankedResult]:
    if any(r.matches is None for r in results):
        raise ValueError("ranked results carry no match flags; rank with labels")
    kept = [r for r in results if r.num_matches > 0]
    if len(kept) < len(results):
        warnings.warn(
            f"{len(results) - len(kept)} queries have no true match in the gallery "
            "and are excluded from the metrics",
            stacklevel=3,
        )
    if not kept:
        raise ValueError("no query has a true match in the gallery")
    return kept


def cmc_at_k(results: Sequence[RankedResult], k: int) -> float:
    """Fraction of queries with a correct identity among the top ``k`` ranks."""
    if k < 1:
        raise ValueError("k must be >= 1")
    kept = _matched(results)
    return sum(bool(r.matches[:k].any()) for r in kept) / len(kept)


def average_precision(matches: np.ndarray) -> float:
    ranks = np.flatnonzero(matches) + 1
    hits = np.arange(1, len(ranks) + 1)
    return float(np.mean(hits / ranks))


def mean_average_precision(results: Sequence[RankedResult]) -> float:
    kept = _matched(results)
    return float(np.mean([average_precision(r.matches) for r in kept]))


@dataclass(frozen=True)
class StageMetrics:
    stage: str
    cmc1: float
    mAP: float


def stage_names(num_exits: int) -> list[str]:
    """Exit names for a table whose last column block is the fused embedding."""
    return [str(s) for s in range(1, num_exits)] + ["fusion"]


def evaluate_tables(
    query: EmbeddingTable, gallery: EmbeddingTable, exclude_same_camera: bool = False
) -> list[StageMetrics]:
    """Rank-1 CMC and mAP for every exit of an encoder embedding table."""
    if query.dims() != gallery.dims():
        raise ValueError(f"query dims {query.dims()} != gallery dims {gallery.dims()}")
    out = []
    for name, q, g in zip(stage_names(query.num_stages), query.stages, gallery.stages):
        results = rank_all(q, g, query.labels, gallery.labels,
                           query.cameras, gallery.cameras, exclude_same_camera)
        out.append(StageMetrics(name, cmc_at_k(results, 1), mean_average_precision(results)))
    return out


def metrics_csv(metrics: Sequence[StageMetrics]) -> str:
    lines = ["metric,stage,value"]
    for m in metrics:
        lines.append(f"cmc1,{m.stage},{m.cmc1!r}")
    for m in metrics:
        lines.append(f"map,{m.stage},{m.mAP!r}")
    return "\n".join(lines) + "\n"
