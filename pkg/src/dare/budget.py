"""Anytime and budgeted-stream identification.

Exit points of a trained encoder are the stage embeddings followed by the
fused embedding. Embedding tables produced by
:func:`dare.encoder.embedding_table` hold one block per exit point, with the
cumulative Mul-Add cost of reaching it.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .core import ConfigError, EmbeddingTable, IdentityDataset
from .encoder import EncoderConfig, EncoderParams, cost_profile, embed, iter_exits
from .retrieval import (
    RankedResult,
    average_precision,
    cmc_at_k,
    distance_matrix,
    mean_average_precision,
    rank_all,
    rank_gallery,
)
from .training import TrainConfig, TrainResult, train


class PolicyError(ValueError):
    pass


class InfeasibleBudget(PolicyError):
    pass


Strategy = Literal["random", "distance", "margin"]
STRATEGIES: tuple[str, ...] = ("random", "distance", "margin")


# exit policy algebra --------------------------------------------------------


def exit_distribution(a: float, S: int) -> np.ndarray:
    """Fraction of queries exiting at each stage: proportional to ``a**(s-1)``.

    ``0**0`` is taken as 1, so ``a = 0`` exits everything at stage 1, and
    ``a = inf`` sends everything to the last stage.
    """
    if S < 1:
        raise PolicyError(f"need at least one stage, got {S}")
    if not a >= 0:
        raise PolicyError(f"a must be >= 0, got {a}")
    if math.isinf(a):
        p = np.zeros(S)
        p[-1] = 1.0
        return p
    s = np.arange(S)
    # normalize by the largest term so big a cannot overflow
    if a <= 1.0:
        weights = np.power(a, s)  # numpy gives 0**0 == 1
    else:
        weights = np.power(1.0 / a, S - 1 - s)
    return weights / weights.sum()


def conditional_exit_probs(p: Sequence[float]) -> np.ndarray:
    """Probability of exiting at stage s given that stage s was reached.

    Stages that no query reaches are reported as NaN.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise PolicyError("p must be a probability vector")
    q = np.full(p.size, np.nan)
    remaining = 1.0
    for s, ps in enumerate(p):
        if remaining <= 1e-15:
            if ps > 1e-12:
                raise PolicyError(f"stage {s + 1} has mass {ps} but is unreachable")
            continue
        q[s] = min(1.0, ps / remaining)
        remaining -= ps
    if not np.isnan(q[-1]):
        q[-1] = 1.0
    return q


def reconstruct_exit_distribution(q: Sequence[float]) -> np.ndarray:
    """Inverse of :func:`conditional_exit_probs` (NaN entries mean unreachable)."""
    q = np.nan_to_num(np.asarray(q, dtype=np.float64), nan=0.0)
    survive = np.concatenate([[1.0], np.cumprod(1.0 - q)[:-1]])
    return q * survive


def expected_cost(p: Sequence[float], costs: Sequence[float]) -> float:
    p = np.asarray(p, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    if p.shape != costs.shape:
        raise PolicyError(f"{p.size} exit probabilities but {costs.size} costs")
    return float(p @ costs)


def solve_a_for_budget(per_query_budget: float, costs: Sequence[float], rtol: float = 1e-9) -> float:
    """The ``a`` whose exit distribution spends ``per_query_budget`` on average.

    Expected cost grows monotonically with ``a``, so bisection suffices.
    A budget of at least the last stage cost returns ``math.inf``: every query
    traverses all stages.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.size < 1 or np.any(np.diff(costs) <= 0):
        raise PolicyError("costs must strictly increase")
    target = float(per_query_budget)
    if target < costs[0]:
        raise InfeasibleBudget(f"budget {target:g} is below the first stage cost {costs[0]:g}")
    if costs.size == 1 or target >= costs[-1]:
        return math.inf
    if target == costs[0]:
        return 0.0
    S = costs.size

    def gap(a: float) -> float:
        return expected_cost(exit_distribution(a, S), costs) - target

    lo, hi = 0.0, 1.0
    while gap(hi) < 0:
        lo, hi = hi, hi * 2.0
        if hi > 1e300:
            return math.inf
    # bisect until the bracket collapses; this lands far inside the tolerance
    while hi - lo > 4 * np.finfo(float).eps * hi:
        mid = 0.5 * (lo + hi)
        if gap(mid) < 0:
            lo = mid
        else:
            hi = mid
    a = lo if abs(gap(lo)) <= abs(gap(hi)) else hi
    if abs(gap(a)) > rtol * target:
        raise PolicyError(f"could not reach budget {target:g} within relative {rtol:g}")
    return a


@dataclass(frozen=True)
class ExitPolicy:
    a: float
    p: np.ndarray
    q: np.ndarray
    costs: np.ndarray

    @classmethod
    def from_a(cls, a: float, costs: Sequence[float]) -> ExitPolicy:
        costs = np.asarray(costs, dtype=np.float64)
        p = exit_distribution(a, costs.size)
        return cls(a, p, conditional_exit_probs(p), costs)

    @classmethod
    def from_budget(cls, per_query_budget: float, costs: Sequence[float]) -> ExitPolicy:
        return cls.from_a(solve_a_for_budget(per_query_budget, costs), costs)

    @classmethod
    def from_q(cls, q: Sequence[float], costs: Sequence[float]) -> ExitPolicy:
        q = np.asarray(q, dtype=np.float64)
        return cls(math.nan, reconstruct_exit_distribution(q), q, np.asarray(costs, dtype=np.float64))

    @property
    def S(self) -> int:
        return self.p.size

    def expected_cost(self) -> float:
        return expected_cost(self.p, self.costs)


# anytime ------------------------------------------------------------------


@dataclass(frozen=True)
class AnytimeResult:
    result: RankedResult | None
    exit: int | None  # 0-based exit index, None when the budget buys nothing
    cost: float


def _check_gallery(gallery: EmbeddingTable, num_exits: int) -> None:
    if gallery.num_stages != num_exits:
        raise ConfigError(
            f"gallery table has {gallery.num_stages} exit blocks, the model has {num_exits}"
        )
    if len(gallery) == 0:
        raise ConfigError("gallery is empty")


def anytime_identify(
    params: EncoderParams,
    query: np.ndarray,
    gallery: EmbeddingTable,
    budget: float,
    query_label: int | None = None,
) -> AnytimeResult:
    """Evaluate stages until the next exit would exceed ``budget``; rank with the last one.

    An exit whose cost equals the budget is still taken. A budget below the
    first stage cost returns no ranking.
    """
    config = params.config
    _check_gallery(gallery, config.num_stages + 1)
    costs, fusion_cost = cost_profile(config)
    exit_costs = (*costs, fusion_cost)
    if budget < exit_costs[0]:
        return AnytimeResult(None, None, 0.0)
    best: tuple[int, np.ndarray, float] | None = None
    for e, phi, cost in iter_exits(params, query):
        best = (e, phi, cost)
        if e + 1 < len(exit_costs) and exit_costs[e + 1] > budget:
            break
    e, phi, cost = best
    ranked = rank_gallery(phi, gallery.stages[e], query_label, gallery.labels)
    return AnytimeResult(ranked, e, cost)


def anytime_exit(costs: Sequence[float], budget: float) -> int | None:
    """Deepest exit whose cumulative cost fits in ``budget``."""
    k = bisect.bisect_right(list(costs), budget)
    return k - 1 if k > 0 else None


@dataclass(frozen=True)
class AnytimePoint:
    budget: float
    cmc1: float
    mAP: float
    exit: int | None
    cost: float


def _exit_scores(
    query: EmbeddingTable, gallery: EmbeddingTable, e: int, exclude_same_camera: bool
) -> tuple[float, float]:
    results = rank_all(query.stages[e], gallery.stages[e], query.labels, gallery.labels,
                       query.cameras, gallery.cameras, exclude_same_camera)
    return cmc_at_k(results, 1), mean_average_precision(results)


def anytime_curve(
    query: EmbeddingTable,
    gallery: EmbeddingTable,
    budgets: Sequence[float],
    exclude_same_camera: bool = False,
) -> list[AnytimePoint]:
    """Accuracy of anytime identification at each budget.

    Works for any table of cumulative-cost exits, including the sequential
    ensemble baseline. Queries with no result (budget below the first exit)
    count as failures.
    """
    _check_gallery(gallery, query.num_stages)
    cache: dict[int, tuple[float, float]] = {}
    points = []
    for b in budgets:
        e = anytime_exit(query.costs, b)
        if e is None:
            points.append(AnytimePoint(float(b), 0.0, 0.0, None, 0.0))
            continue
        if e not in cache:
            cache[e] = _exit_scores(query, gallery, e, exclude_same_camera)
        cmc1, mAP = cache[e]
        points.append(AnytimePoint(float(b), cmc1, mAP, e, query.costs[e]))
    return points


def anytime_csv(points: Sequence[AnytimePoint], exit_names: Sequence[str]) -> str:
    lines = ["budget,cmc1,map,stage"]
    for pt in points:
        name = "none" if pt.exit is None else exit_names[pt.exit]
        lines.append(f"{pt.budget!r},{pt.cmc1!r},{pt.mAP!r},{name}")
    return "\n".join(lines) + "\n"


# sequential ensemble baseline ---------------------------------------------------


@dataclass
class SequentialEnsemble:
    """Independently trained encoders evaluated smallest first.

    Each member contributes only its fused embedding; reaching member ``k``
    costs the summed fused costs of members ``1..k``.
    """

    members: list[EncoderParams]
    traces: list[TrainResult] = field(default_factory=list)

    @property
    def cumulative_costs(self) -> tuple[float, ...]:
        return tuple(np.cumsum([cost_profile(m.config)[1] for m in self.members]).tolist())

    def embedding_table(self, dataset: IdentityDataset) -> EmbeddingTable:
        blocks = [embed(m, dataset.features)[1] for m in self.members]
        return EmbeddingTable(tuple(blocks), self.cumulative_costs, dataset.labels, dataset.cameras)


def build_sequential_ensemble_baseline(
    configs: Sequence[EncoderConfig], dataset: IdentityDataset, train_config: TrainConfig
) -> SequentialEnsemble:
    """Train each encoder on the fused-embedding loss alone, same data and schedule."""
    if not configs:
        raise ConfigError("the ensemble needs at least one member")
    totals = [cost_profile(c)[1] for c in configs]
    if any(b <= a for a, b in zip(totals, totals[1:])):
        raise ConfigError(f"member costs must strictly increase, got {totals}")
    member_config = TrainConfig(**{**train_config.__dict__, "deep_supervision": False})
    traces = [train(dataset, c, member_config) for c in configs]
    return SequentialEnsemble([t.params for t in traces], traces)


# budgeted stream -------------------------------------------------------------


@dataclass
class StreamState:
    """Routing-score history per stage, kept sorted for order statistics."""

    num_stages: int
    warmup: int = 10
    seed: int = 0
    histories: list[list[float]] = field(init=False)
    rng: np.random.Generator = field(init=False)

    def __post_init__(self) -> None:
        self.histories = [[] for _ in range(self.num_stages)]
        self.rng = np.random.default_rng(self.seed)

    def record(self, stage: int, score: float) -> None:
        if not math.isfinite(score):
            raise ValueError(f"routing score must be finite, got {score}")
        bisect.insort(self.histories[stage], score)


def _order_statistic_rank(q: float, n: int) -> int:
    # ceil(q * n), guarded against q * n landing a hair above an integer
    return min(n, math.ceil(round(q * n, 9)))


def should_exit(
    strategy: str, score: float | None, q: float, history: Sequence[float], state: StreamState
) -> bool:
    """Exit decision at one stage.

    ``distance`` exits when the nearest-neighbor distance is at most the
    ``ceil(q*n)``-th smallest value seen so far at this stage; ``margin`` exits
    when the margin is at least the ``ceil(q*n)``-th largest. Both fall back to
    a coin flip with probability ``q`` until the history holds ``warmup`` scores.
    """
    if q >= 1.0:
        return True
    if q <= 0.0:
        return False
    if strategy == "random" or len(history) < state.warmup:
        return bool(state.rng.random() < q)
    k = _order_statistic_rank(q, len(history))
    if k == 0:
        return False
    if strategy == "distance":
        return score <= history[k - 1]
    if strategy == "margin":
        return score >= history[len(history) - k]
    raise ConfigError(f"unknown strategy {strategy!r}")


@dataclass(frozen=True)
class StreamDecision:
    query_index: int
    exit_stage: int  # 0-based
    cost: float
    correct: bool
    ap: float


@dataclass(frozen=True)
class BudgetRow:
    a: float
    target_budget: float
    realized_cost: float
    cmc1: float
    mAP: float
    exit_fractions: tuple[float, ...]


def stream_exits(table: EmbeddingTable) -> tuple[list[np.ndarray], np.ndarray]:
    """Exit blocks and costs for the stream: stages 1..S-1, then the fused embedding."""
    blocks = list(table.stages[:-2]) + [table.stages[-1]]
    costs = np.array(list(table.costs[:-2]) + [table.costs[-1]])
    return blocks, costs


def _nearest_scores(dist: np.ndarray, gallery_labels: np.ndarray | None, strategy: str):
    nearest = np.argmin(dist, axis=1)
    d_near = dist[np.arange(len(dist)), nearest]
    if strategy != "margin":
        return d_near, nearest
    other = gallery_labels[None, :] != gallery_labels[nearest][:, None]
    d_other = np.where(other, dist, np.inf).min(axis=1)
    # a gallery holding a single identity has no competitor: treat as certain
    d_other = np.where(np.isfinite(d_other), d_other, d_near + dist.max() + 1.0)
    return d_other - d_near, nearest


def route_and_identify_stream(
    query: EmbeddingTable,
    gallery: EmbeddingTable,
    policy: ExitPolicy,
    strategy: str,
    state: StreamState | None = None,
) -> tuple[BudgetRow, list[StreamDecision]]:
    """Process queries in arrival order, exiting each at the stage chosen by ``strategy``.

    ``query`` and ``gallery`` are encoder embedding tables (stage blocks plus
    the fused block). A query that reaches the last stage is identified with
    the fused embedding. Realized cost is the policy cost of the exit taken.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    _check_gallery(gallery, query.num_stages)
    if strategy == "margin" and (gallery.labels is None or len(np.unique(gallery.labels)) < 1):
        raise ConfigError("the margin strategy needs gallery labels")
    q_blocks, _ = stream_exits(query)
    g_blocks, _ = stream_exits(gallery)
    S = len(q_blocks)
    if policy.S != S:
        raise ConfigError(f"policy has {policy.S} stages, tables provide {S}")
    state = state or StreamState(S)
    if state.num_stages != S:
        raise ConfigError("stream state has the wrong number of stages")

    dists = [distance_matrix(qb, gb) for qb, gb in zip(q_blocks, g_blocks)]
    scores = [_nearest_scores(d, gallery.labels, strategy)[0] for d in dists]

    decisions = []
    for i in range(len(query)):
        for s in range(S):
            score = float(scores[s][i])
            history = state.histories[s]
            leave = s == S - 1 or should_exit(strategy, score, policy.q[s], history, state)
            if strategy != "random":
                state.record(s, score)
            if leave:
                break
        order = np.argsort(dists[s][i], kind="stable")
        matches = gallery.labels[order] == query.labels[i]
        ap = average_precision(matches) if matches.any() else math.nan
        decisions.append(StreamDecision(i, s, float(policy.costs[s]), bool(matches[0]), ap))

    counts = np.bincount([d.exit_stage for d in decisions], minlength=S)
    matched = [d for d in decisions if not math.isnan(d.ap)]
    row = BudgetRow(
        a=policy.a,
        target_budget=policy.expected_cost(),
        realized_cost=float(np.mean([d.cost for d in decisions])),
        cmc1=float(np.mean([d.correct for d in matched])),
        mAP=float(np.mean([d.ap for d in matched])),
        exit_fractions=tuple((counts / len(decisions)).tolist()),
    )
    return row, decisions


def sweep_stream(
    query: EmbeddingTable,
    gallery: EmbeddingTable,
    strategy: str,
    a_values: Sequence[float] | None = None,
    budgets: Sequence[float] | None = None,
    seed: int = 0,
    warmup: int = 10,
) -> list[BudgetRow]:
    """One stream pass per operating point, each from a fresh history."""
    _, costs = stream_exits(query)
    if (a_values is None) == (budgets is None):
        raise ConfigError("give exactly one of a_values or budgets")
    if budgets is not None:
        policies = [ExitPolicy.from_budget(b, costs) for b in budgets]
    else:
        policies = [ExitPolicy.from_a(a, costs) for a in a_values]
    rows = []
    for policy in policies:
        state = StreamState(len(costs), warmup=warmup, seed=seed)
        rows.append(route_and_identify_stream(query, gallery, policy, strategy, state)[0])
    return rows


def sweep_csv(rows: Sequence[BudgetRow]) -> str:
    S = len(rows[0].exit_fractions) if rows else 0
    header = "a,target_budget,realized_cost,cmc1,map," + ",".join(
        f"exit_frac_{s}" for s in range(1, S + 1)
    )
    lines = [header]
    for r in rows:
        fracs = ",".join(repr(f) for f in r.exit_fractions)
        lines.append(f"{r.a!r},{r.target_budget!r},{r.realized_cost!r},{r.cmc1!r},{r.mAP!r},{fracs}")
    return "\n".join(lines) + "\n"
