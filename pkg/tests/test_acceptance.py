"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The trained models are shared through a module-scoped fixture, so the
criteria that need them (stage accuracy, deep supervision, routing, anytime)
train each seed only once.
"""

import math
import time

import numpy as np
import pytest

from dare.budget import (
    ExitPolicy,
    SequentialEnsemble,
    build_sequential_ensemble_baseline,
    conditional_exit_probs,
    exit_distribution,
    expected_cost,
    reconstruct_exit_distribution,
    stream_exits,
    anytime_curve,
    solve_a_for_budget,
    sweep_stream,
)
from dare.cli import main
from dare.core import EmbeddingTable, IdentityDataset, SyntheticConfig, generate_synthetic, split_dataset
from dare.encoder import EncoderConfig, embedding_table, init_params
from dare.retrieval import cmc_at_k, evaluate_tables, mean_average_precision, rank_all
from dare.training import (
    PKBatch,
    TrainConfig,
    batch_hard_triplet_loss,
    gradient,
    lr_schedule,
    total_loss,
    train,
)

from test_retrieval import oracle_metrics
from test_training import brute_force_triplet_loss

SEEDS = (0, 1, 2, 3)
STRATEGIES = ("random", "distance", "margin")


# shared experiment ----------------------------------------------------------------


def leave_one_out(table: EmbeddingTable) -> EmbeddingTable:
    """Give every row its own camera so same-camera exclusion drops only the query itself."""
    return EmbeddingTable(table.stages, table.costs, table.labels, np.arange(len(table)))


def test_identities(seed):
    """All samples of the test identities of the default split for ``seed``."""
    _, query, gallery = split_dataset(generate_synthetic(SyntheticConfig(seed=seed)), 0.5, 2, seed)
    return IdentityDataset(np.vstack([query.features, gallery.features]),
                           np.concatenate([query.labels, gallery.labels]))


test_identities.__test__ = False  # a helper, not a test


@pytest.fixture(scope="module")
def experiment():
    runs = {}
    for seed in SEEDS:
        ds = generate_synthetic(SyntheticConfig(seed=seed))
        train_split, _, _ = split_dataset(ds, 0.5, 2, seed)
        start = time.perf_counter()
        deep = train(train_split, EncoderConfig(), TrainConfig(seed=seed))
        deep_seconds = time.perf_counter() - start
        fused_only = train(train_split, EncoderConfig(), TrainConfig(seed=seed, deep_supervision=False))
        runs[seed] = dict(train=train_split, test=test_identities(seed), deep=deep.params,
                          fused_only=fused_only.params, deep_seconds=deep_seconds)
    return runs


# 1. gradient ------------------------------------------------------------------


def relative_gradient_error(params, batch, deep, step=1e-5):
    analytic = gradient(params, batch, TrainConfig(P=batch.P, K=batch.K, deep_supervision=deep)).vector
    base = params.vector.copy()
    probe = params.copy()
    numeric = np.zeros_like(base)
    for i in range(base.size):
        probe.vector[:] = base
        probe.vector[i] = base[i] + step
        plus = total_loss(probe, batch, deep)
        probe.vector[i] = base[i] - step
        minus = total_loss(probe, batch, deep)
        numeric[i] = (plus - minus) / (2 * step)
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-300)


def test_criterion_01_gradient_matches_finite_differences(acceptance_report):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    errors = []
    for _ in range(20):
        S = int(rng.integers(2, 5))
        config = EncoderConfig(
            input_dim=int(rng.integers(2, 17)),
            backbone_widths=tuple(sorted(int(w) for w in rng.integers(2, 17, S))),
            head_hidden_width=int(rng.integers(2, 17)),
            embedding_dim=int(rng.integers(2, 17)),
        )
        params = init_params(config, int(rng.integers(1 << 30)))
        P, K = int(rng.integers(2, 5)), int(rng.integers(2, 4))
        labels = np.repeat(np.arange(P), K)
        batch = PKBatch(rng.standard_normal((P * K, config.input_dim)), labels, P, K)
        errors.append(relative_gradient_error(params, batch, deep=bool(rng.integers(2))))
    elapsed = time.perf_counter() - start
    ok = max(errors) <= 1e-4 and elapsed < 30
    acceptance_report(1, "analytic gradient vs central differences", ok,
                      f"max relative error {max(errors):.2e} over 20 configs, {elapsed:.1f}s")
    assert ok


# 2. triplet loss oracle -------------------------------------------------------


def test_criterion_02_triplet_loss_oracle(acceptance_report):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        P, K, d = (int(v) for v in rng.integers(2, [5, 5, 9]))
        labels = np.repeat(rng.choice(50, P, replace=False), K)
        e = rng.standard_normal((P * K, d))
        worst = max(worst, abs(batch_hard_triplet_loss(e, labels) - brute_force_triplet_loss(e, labels)))
    hand = batch_hard_triplet_loss(np.array([[0.0], [1.0], [4.0], [5.0]]), np.array([0, 0, 1, 1]))
    expected = 2 * math.log1p(math.exp(-3)) + 2 * math.log1p(math.exp(-2))
    ok = worst <= 1e-12 and abs(hand - expected) <= 1e-12 and round(hand, 5) == 0.35103
    acceptance_report(2, "batch-hard loss equals brute-force enumeration", ok,
                      f"max deviation {worst:.1e} on 200 batches, hand case {hand:.5f}")
    assert ok


# 3. exit policy algebra ----------------------------------------------------------


def test_criterion_03_exit_policy_algebra(acceptance_report):
    rng = np.random.default_rng(3)
    checks = {}
    sums = [abs(exit_distribution(a, S).sum() - 1) for a in np.linspace(0, 50, 101) for S in (1, 2, 4, 7)]
    checks["sum p = 1"] = max(sums) <= 1e-12
    round_trip = 0.0
    for _ in range(100):
        p = rng.dirichlet(np.ones(rng.integers(1, 9)))
        round_trip = max(round_trip, np.abs(reconstruct_exit_distribution(conditional_exit_probs(p)) - p).max())
    checks["q -> p round trip"] = round_trip <= 1e-12
    checks["a=1 gives q=(1/4,1/3,1/2,1)"] = np.allclose(
        conditional_exit_probs(exit_distribution(1.0, 4)), [1 / 4, 1 / 3, 1 / 2, 1], rtol=0, atol=1e-12)
    checks["a=0 gives p=(1,0,0,0)"] = list(exit_distribution(0.0, 4)) == [1, 0, 0, 0]
    solver = 0.0
    for _ in range(200):
        costs = np.cumsum(rng.uniform(0.5, 50.0, rng.integers(2, 8)))
        target = rng.uniform(costs[0], costs[-1])
        a = solve_a_for_budget(target, costs)
        solver = max(solver, abs(expected_cost(exit_distribution(a, costs.size), costs) - target) / target)
    checks["solver self-consistency"] = solver <= 1e-9
    monotone = True
    for _ in range(20):
        costs = np.cumsum(rng.uniform(0.5, 50.0, 5))
        curve = [expected_cost(exit_distribution(a, 5), costs) for a in np.linspace(0, 100, 5001)]
        monotone &= all(b >= a for a, b in zip(curve, curve[1:]))
    checks["expected cost non-decreasing in a"] = monotone
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    acceptance_report(3, "exit policy algebra", ok,
                      f"solver error {solver:.1e}, round trip {round_trip:.1e}"
                      + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok


# 4. metric oracles ----------------------------------------------------------------


def test_criterion_04_metric_oracles(acceptance_report):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        n_g = int(rng.integers(1, 7))
        g_labels = rng.integers(0, 3, n_g)
        q_labels = rng.choice(g_labels, size=int(rng.integers(1, 4)))
        gallery = rng.integers(-2, 3, size=(n_g, 2)).astype(float)
        query = rng.integers(-2, 3, size=(len(q_labels), 2)).astype(float)
        k = int(rng.integers(1, n_g + 1))
        results = rank_all(query, gallery, q_labels, g_labels)
        cmc, mAP = oracle_metrics(query, gallery, q_labels, g_labels, k)
        worst = max(worst, abs(cmc_at_k(results, k) - cmc), abs(mean_average_precision(results) - mAP))
    hand = rank_all(np.array([[0.0]]), np.array([[0.0], [1.0], [2.0], [3.0]]), np.array([1]),
                    np.array([1, 0, 1, 0]))
    ap = mean_average_precision(hand)
    ok = worst <= 1e-12 and abs(ap - 5 / 6) <= 1e-15
    acceptance_report(4, "CMC and mAP equal brute-force recomputation", ok,
                      f"max deviation {worst:.1e} on 200 cases, hand AP {ap:.6f}")
    assert ok


# 5. per-stage accuracy ------------------------------------------------------------------


def stage_rank1(params, test):
    table = leave_one_out(embedding_table(params, test))
    return [m.cmc1 for m in evaluate_tables(table, table, exclude_same_camera=True)]


def test_criterion_05_stage_accuracy_and_fusion(experiment, acceptance_report):
    rows, seconds = [], 0.0
    for seed in SEEDS:
        start = time.perf_counter()
        rows.append(stage_rank1(experiment[seed]["deep"], experiment[seed]["test"]))
        seconds += experiment[seed]["deep_seconds"] + time.perf_counter() - start
    rows = np.array(rows)
    for seed, r in zip(SEEDS, rows):
        print(f"  seed {seed}: rank-1 stage1..4 " + " ".join(f"{v:.3f}" for v in r[:-1])
              + f" fusion {r[-1]:.3f}")
    gaps = rows[:, -1] - rows[:, :-1].max(axis=1)
    mean = rows.mean(axis=0)
    fusion_ok = bool(np.all(gaps >= -0.01))
    depth_ok = bool(mean[0] < mean[2])
    ok = fusion_ok and depth_ok and seconds < 300
    acceptance_report(
        5, "per-stage rank-1, fusion within 1pp of the best stage on every seed", ok,
        f"fusion minus best stage per seed {np.round(100 * gaps, 1).tolist()} pp; "
        f"mean stage1 {mean[0]:.3f} vs stage3 {mean[2]:.3f}; {seconds:.0f}s",
    )
    assert ok


# 6. deep supervision ----------------------------------------------------------------


def test_criterion_06_deep_supervision_helps(experiment, acceptance_report):
    deep = [stage_rank1(experiment[s]["deep"], experiment[s]["test"])[-1] for s in SEEDS]
    plain = [stage_rank1(experiment[s]["fused_only"], experiment[s]["test"])[-1] for s in SEEDS]
    ok = np.mean(deep) >= np.mean(plain)
    acceptance_report(6, "deep supervision does not hurt the fused embedding", ok,
                      f"mean fused rank-1 {np.mean(deep):.3f} with vs {np.mean(plain):.3f} without")
    assert ok


# 7. budgeted stream routing -----------------------------------------------------------


def stream_tables(seed, params):
    """A longer stream over the same identities: 72 samples each, 64 of them queries."""
    ds = generate_synthetic(SyntheticConfig(seed=seed, samples_per_identity=72))
    train_split, query, gallery = split_dataset(ds, 0.5, 64, seed)
    order = np.random.default_rng(seed).permutation(len(query))
    return train_split, embedding_table(params, query).subset(order), embedding_table(params, gallery)


def accuracy_at(rows, costs_grid):
    realized = np.array([r.realized_cost for r in rows])
    acc = np.array([r.cmc1 for r in rows])
    order = np.argsort(realized)
    return np.interp(costs_grid, realized[order], acc[order])


def test_criterion_07_routing(experiment, acceptance_report):
    per_seed, worst_fraction = {s: [] for s in STRATEGIES}, 0.0
    for seed in SEEDS:
        train_split, query, gallery = stream_tables(seed, experiment[seed]["deep"])
        assert set(train_split.labels) == set(experiment[seed]["train"].labels)
        assert len(query) >= 2000
        _, costs = stream_exits(query)
        budgets = np.linspace(costs[0], costs[-1], 14)[1:-1]
        rows = {s: sweep_stream(query, gallery, s, budgets=budgets, seed=seed) for s in STRATEGIES}
        for s in STRATEGIES:
            for b, r in zip(budgets, rows[s]):
                p = ExitPolicy.from_budget(b, costs).p
                worst_fraction = max(worst_fraction, np.abs(np.array(r.exit_fractions) - p).max())
        lo = max(min(r.realized_cost for r in rows[s]) for s in STRATEGIES)
        hi = min(max(r.realized_cost for r in rows[s]) for s in STRATEGIES)
        grid = np.linspace(lo, hi, 50)
        for s in STRATEGIES:
            per_seed[s].append(accuracy_at(rows[s], grid).mean())
    acc = {s: 100 * float(np.mean(v)) for s, v in per_seed.items()}
    ordering = acc["margin"] >= acc["distance"] >= acc["random"] - 0.5
    ok = ordering and worst_fraction <= 0.05
    acceptance_report(
        7, "routing at matched cost: margin >= distance >= random - 0.5pp", ok,
        f"mean rank-1 margin {acc['margin']:.2f}, distance {acc['distance']:.2f}, "
        f"random {acc['random']:.2f}; worst exit-fraction error {worst_fraction:.3f}",
    )
    assert ok


# 8. anytime vs sequential ensemble ---------------------------------------------------


ENSEMBLE_WIDTHS = ((32, 64), (32, 64, 96))


def test_criterion_08_anytime_dominates_ensemble(experiment, acceptance_report):
    wins, details = 0, []
    for seed in SEEDS:
        run = experiment[seed]
        configs = [EncoderConfig(backbone_widths=w) for w in ENSEMBLE_WIDTHS]
        smaller = build_sequential_ensemble_baseline(configs, run["train"], TrainConfig(seed=seed))
        # the largest member is the fused-only model of criterion 6: the builder would
        # train it with the identical config, data and seed
        ensemble = SequentialEnsemble(smaller.members + [run["fused_only"]])
        test = run["test"]
        dare_q = leave_one_out(embedding_table(run["deep"], test))
        ens_q = leave_one_out(ensemble.embedding_table(test))
        second_step = ens_q.costs[1]
        budgets = sorted(c for c in set(dare_q.costs) | set(ens_q.costs) if c >= second_step)
        dare = anytime_curve(dare_q, dare_q, budgets, exclude_same_camera=True)
        ens = anytime_curve(ens_q, ens_q, budgets, exclude_same_camera=True)
        margin = min(d.cmc1 - e.cmc1 for d, e in zip(dare, ens))
        wins += margin >= 0
        details.append(f"{100 * margin:+.1f}")
    ok = wins > len(SEEDS) / 2
    acceptance_report(8, "anytime curve dominates the sequential ensemble (majority of seeds)", ok,
                      f"dominates on {wins}/{len(SEEDS)} seeds; worst gap per seed {details} pp")
    assert ok


# 9. learning rate schedule -----------------------------------------------------------


def test_criterion_09_learning_rate_schedule(acceptance_report):
    worst = 0.0
    for t0, t1, a0 in ((3000, 6000, 3e-4), (1, 2, 1.0), (15000, 25000, 1e-3), (7, 1000, 0.5)):
        config = TrainConfig(total_iterations=t1, decay_start=t0, base_lr=a0)
        for t, expected in ((t0, a0), (t1, 0.001 * a0), ((t0 + t1) / 2, a0 * 0.001 ** 0.5)):
            worst = max(worst, abs(lr_schedule(t, config) - expected) / expected)
    ok = worst <= 1e-15
    acceptance_report(9, "learning-rate schedule boundaries and midpoint", ok,
                      f"max relative error {worst:.1e}")
    assert ok


# 10. CLI determinism -------------------------------------------------------------------


def cli_pipeline(root):
    data, seed = root / "data", "7"
    steps = [
        ["gen-data", "--out-dir", data, "--seed", seed],
        ["train", "--data", data / "train.txt", "--out", root / "model.txt",
         "--trace", root / "loss.csv", "--iterations", "300", "--seed", seed],
        ["embed", "--checkpoint", root / "model.txt", "--data", data / "query.txt",
         "--out", root / "query.txt"],
        ["embed", "--checkpoint", root / "model.txt", "--data", data / "gallery.txt",
         "--out", root / "gallery.txt"],
        ["eval", "--query", root / "query.txt", "--gallery", root / "gallery.txt",
         "--out", root / "metrics.csv"],
        ["anytime", "--query", root / "query.txt", "--gallery", root / "gallery.txt",
         "--out", root / "anytime.csv"],
        ["stream", "--query", root / "query.txt", "--gallery", root / "gallery.txt",
         "--strategy", "all", "--shuffle", "--seed", seed, "--out", root / "stream_{strategy}.csv"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0
    return sorted(root.glob("*.csv"))


def test_criterion_10_cli_is_deterministic(tmp_path, acceptance_report):
    first = cli_pipeline(tmp_path / "run1")
    second = cli_pipeline(tmp_path / "run2")
    names = [p.name for p in first]
    same = names == [p.name for p in second] and all(
        a.read_bytes() == b.read_bytes() for a, b in zip(first, second)
    )
    ok = same and len(names) == 6
    acceptance_report(10, "CLI pipeline yields byte-identical CSVs across runs", ok,
                      f"compared {', '.join(names)}")
    assert ok
