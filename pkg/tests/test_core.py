import numpy as np
import pytest

from dare.core import (
    ConfigError,
    EmbeddingTable,
    IdentityDataset,
    SplitError,
    SyntheticConfig,
    TableFormatError,
    generate_synthetic,
    load_dataset,
    load_embedding_table,
    save_dataset,
    save_embedding_table,
    split_dataset,
)


def test_generation_is_deterministic():
    a = generate_synthetic(SyntheticConfig(seed=7))
    b = generate_synthetic(SyntheticConfig(seed=7))
    assert a.features.tobytes() == b.features.tobytes()
    assert np.array_equal(a.labels, b.labels)
    c = generate_synthetic(SyntheticConfig(seed=8))
    assert not np.array_equal(a.features, c.features)


def test_generation_shape():
    cfg = SyntheticConfig(num_identities=10, samples_per_identity=3, input_dim=12)
    ds = generate_synthetic(cfg)
    assert ds.features.shape == (30, 12)
    assert np.array_equal(np.bincount(ds.labels), np.full(10, 3))


def test_noiseless_easy_data_is_nearest_centroid_separable():
    cfg = SyntheticConfig(noise_sigma=0.0, easy_fraction=1.0, seed=3)
    ds = generate_synthetic(cfg)
    ids = ds.identities()
    centroids = np.stack([ds.features[ds.labels == i].mean(axis=0) for i in ids])
    d = np.linalg.norm(ds.features[:, None, :] - centroids[None], axis=2)
    assert np.array_equal(ids[d.argmin(axis=1)], ds.labels)


@pytest.mark.parametrize(
    "kwargs, fragment",
    [
        (dict(num_identities=1), "num_identities"),
        (dict(samples_per_identity=1), "samples_per_identity"),
        (dict(easy_fraction=1.5), "easy_fraction"),
        (dict(fine_margin=3.0, coarse_margin=2.0), "fine_margin"),
        (dict(noise_sigma=-0.1), "noise_sigma"),
        (dict(coarse_margin=0.0), "coarse_margin"),
    ],
)
def test_invalid_synthetic_config(kwargs, fragment):
    with pytest.raises(ConfigError, match=fragment):
        generate_synthetic(SyntheticConfig(**kwargs))


def _toy(n_ids=10, per=8, seed=0):
    return generate_synthetic(
        SyntheticConfig(num_identities=n_ids, samples_per_identity=per, input_dim=8, seed=seed)
    )


def test_split_is_identity_disjoint_and_closed_set():
    train, query, gallery = split_dataset(_toy(), train_frac=0.5, query_per_identity=1, seed=0)
    train_ids, test_ids = set(train.labels), set(query.labels)
    assert len(train_ids) == 5 and len(test_ids) == 5
    assert not train_ids & test_ids
    assert set(query.labels) <= set(gallery.labels)
    assert np.array_equal(np.bincount(gallery.labels)[list(test_ids)], np.full(5, 7))


def test_split_partitions_samples_exactly():
    ds = _toy()
    parts = split_dataset(ds, 0.4, 2, seed=1)
    rows = np.concatenate([p.features for p in parts])
    assert rows.shape == ds.features.shape
    # every original row appears exactly once
    original = {r.tobytes() for r in ds.features}
    assert {r.tobytes() for r in rows} == original and len(original) == len(ds)


def test_split_determinism():
    ds = _toy()
    a = split_dataset(ds, 0.5, 1, seed=4)
    b = split_dataset(ds, 0.5, 1, seed=4)
    for x, y in zip(a, b):
        assert np.array_equal(x.features, y.features)
        assert np.array_equal(x.labels, y.labels)


def test_split_rejects_short_identities():
    ds = _toy(per=2)
    with pytest.raises(SplitError, match="needs at least 3"):
        split_dataset(ds, 0.5, 2, seed=0)


def _table(rng, cameras=True):
    rows = 5
    stages = (rng.standard_normal((rows, 3)), rng.standard_normal((rows, 2)) * 1e-300)
    cams = rng.integers(0, 3, rows) if cameras else None
    return EmbeddingTable(stages, (10.0, 25.5), rng.integers(0, 4, rows), cams)


@pytest.mark.parametrize("cameras", [True, False])
def test_table_round_trip_is_bit_exact(tmp_path, cameras):
    table = _table(np.random.default_rng(0), cameras)
    path = tmp_path / "t.txt"
    save_embedding_table(table, path)
    loaded = load_embedding_table(path)
    assert loaded == table
    for a, b in zip(loaded.stages, table.stages):
        assert a.tobytes() == b.tobytes()


def test_dataset_round_trip(tmp_path):
    ds = _toy()
    save_dataset(ds, tmp_path / "d.txt")
    back = load_dataset(tmp_path / "d.txt")
    assert back.features.tobytes() == ds.features.tobytes()
    assert np.array_equal(back.labels, ds.labels)
    assert (tmp_path / "d.txt").read_text().startswith("#stages 1 dims 8 costs 0\n")


def test_decreasing_costs_rejected(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("#stages 2 dims 1,1 costs 5,3\n0|1.0|2.0\n")
    with pytest.raises(TableFormatError, match="costs must be non-decreasing"):
        load_embedding_table(path)


def test_ragged_row_reports_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("#stages 2 dims 2,1 costs 1,2\n0|1.0 2.0|3.0\n1|1.0|3.0\n")
    with pytest.raises(TableFormatError, match="line 3: stage 1 has 1 values"):
        load_embedding_table(path)


@pytest.mark.parametrize(
    "text",
    [
        "stages 1 dims 1 costs 0\n0|1.0\n",
        "#stages 2 dims 1 costs 0,1\n",
        "#stages 1 dims 1 costs 0\nx|1.0\n",
        "#stages 1 dims 1 costs 0\n0|abc\n",
        "#stages 1 dims 1 costs 0\n0|1.0|2.0\n",
    ],
)
def test_malformed_files_rejected(tmp_path, text):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(TableFormatError):
        load_embedding_table(path)


def test_stage_row_count_mismatch_names_both_counts():
    with pytest.raises(ValueError, match="4 rows but stage 1 has 5"):
        EmbeddingTable((np.zeros((5, 2)), np.zeros((4, 2))), (1, 2), np.zeros(5))


def test_dataset_is_read_only():
    ds = IdentityDataset(np.zeros((2, 3)), [0, 1])
    with pytest.raises(ValueError):
        ds.features[0, 0] = 1.0
