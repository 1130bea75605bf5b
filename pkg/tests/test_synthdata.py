import numpy as np
import pandas as pd
import pytest

from tabadv.synthdata import (
    CARD_NETWORKS,
    CVV_VALUES,
    IP_NETWORKS,
    MERCHANT_CATEGORIES,
    TRANSACTION_COLUMNS,
    WEEK_MS,
    ConfigError,
    GeneratorConfig,
    generate,
    read_csv,
    split,
    write_csv,
)


def test_same_seed_same_data():
    cfg = GeneratorConfig(n_cards=200, n_merchants=20, weeks=3, seed=7)
    pd.testing.assert_frame_equal(generate(cfg), generate(cfg))


def test_zero_fraud_fraction_gives_no_fraud():
    df = generate(GeneratorConfig(n_cards=200, n_merchants=20, weeks=3, fraud_card_fraction=0.0))
    assert df["label"].sum() == 0


def test_default_desk_fraud_rate():
    df = generate(GeneratorConfig())
    assert 0.0084 <= df["label"].mean() <= 0.0156


def test_schema_and_vocabularies(small_df):
    assert list(small_df.columns) == list(TRANSACTION_COLUMNS)
    assert (small_df["amount"] > 0).all()
    assert small_df["latitude"].between(-90, 90).all() and small_df["longitude"].between(-180, 180).all()
    assert set(small_df["card_network"]) <= set(CARD_NETWORKS)
    assert set(small_df["cvv_match"]) <= set(CVV_VALUES)
    assert set(small_df["merchant_category"]) <= set(MERCHANT_CATEGORIES)
    assert set(small_df["ip_network"]) <= set(IP_NETWORKS)
    assert small_df["event_id"].is_unique
    ts = small_df["timestamp"].to_numpy()
    assert np.all(np.diff(ts) >= 0)


def test_card_network_fixed_per_card(small_df):
    assert (small_df.groupby("card_id")["card_network"].nunique() == 1).all()


def test_split_boundaries_and_partition():
    df = generate(GeneratorConfig(n_cards=300, n_merchants=20, weeks=20, seed=2))
    sp = split(df, 10, 4, 6)
    start = df.attrs["start_ms"]
    assert sp.boundaries_ms[1] == start + 10 * WEEK_MS
    assert sp.boundaries_ms[2] == start + 14 * WEEK_MS
    tr, va, te = sp.frames(df)
    assert tr["timestamp"].max() < va["timestamp"].min() <= va["timestamp"].max() < te["timestamp"].min()
    idx = list(sp.train) + list(sp.validation) + list(sp.test)
    assert len(idx) == len(set(idx)) == len(df)


def test_split_empty_tail():
    df = generate(GeneratorConfig(n_cards=100, n_merchants=10, weeks=4, seed=2))
    sp = split(df, 4, 0, 0)
    assert len(sp.validation) == 0 and len(sp.test) == 0 and len(sp.train) == len(df)


def test_split_beyond_horizon():
    df = generate(GeneratorConfig(n_cards=100, n_merchants=10, weeks=4, seed=2))
    with pytest.raises(ValueError):
        split(df, 3, 1, 1)


def test_bad_config():
    with pytest.raises(ConfigError):
        GeneratorConfig(target_fraud_rate=0.2)
    with pytest.raises(ConfigError):
        generate(GeneratorConfig(n_cards=10, n_merchants=5, weeks=1, burst_max_hours=24 * 8))


def test_csv_round_trip(tmp_path, small_df):
    p = tmp_path / "tx.csv"
    write_csv(small_df, p)
    back = read_csv(p)
    assert list(back.columns) == list(TRANSACTION_COLUMNS)
    assert np.allclose(back["amount"], small_df["amount"], atol=1e-6)
    assert (back["timestamp"].to_numpy() == small_df["timestamp"].to_numpy()).all()
    write_csv(back, tmp_path / "again.csv")
    assert p.read_bytes() == (tmp_path / "again.csv").read_bytes()
