import numpy as np
import pandas as pd
import pytest

from tabadv.attacks import EMPTY_ATTACK, SLOTS, AttackVector, DatasetStats, apply_to_raw, sample_component
from tabadv.features import (
    FeaturePlan,
    HigherOrder,
    Profile,
    RowMap,
    RowOracle,
    compute_features,
    parse_window,
)
from tabadv.learner import TrainParams
from tabadv.propagation import (
    EstimatorAssignment,
    EstimatorBundle,
    EstimatorError,
    LookupTable,
    Propagator,
    QualityThresholds,
    assign_estimators,
    build_lookup,
    build_regression_set,
    estimator_quality,
    train_estimators,
)
from tabadv.synthdata import HOUR_MS, MINUTE_MS, split


def wide_plan() -> FeaturePlan:
    """Every aggregation, a geo-valued profile and both higher-order kinds."""
    specs = [RowMap("amount", "field", "amount"), RowMap("hour_of_day", "hour_of_day"), RowMap("cvv_code", "code", "cvv_match")]
    for key, w in (("card_id", "1h"), ("card_id", "7d"), ("merchant_id", "24h")):
        for agg in ("count", "sum", "mean", "stddev", "max"):
            specs.append(Profile(f"{agg}_{key}_{w}", agg, key, parse_window(w)))
    specs.append(Profile("max_lat_card_7d", "max", "card_id", parse_window("7d"), "latitude"))
    specs.append(Profile("mean_lon_merchant_24h", "mean", "merchant_id", parse_window("24h"), "longitude"))
    specs.append(HigherOrder("z7", "zscore", (("x", "amount"), ("mean", "mean_card_id_7d"), ("std", "stddev_card_id_7d"))))
    specs.append(HigherOrder("r1", "ratio", (("num", "amount"), ("den", "sum_card_id_1h"), ("offset", "1"))))
    return FeaturePlan(tuple(specs))


def random_attack(row, stats, rng, p=0.5):
    a = EMPTY_ATTACK
    for slot in SLOTS:
        if rng.random() < p:
            a = a.with_slot(slot, sample_component(slot, row.base, stats, rng))
    return a


def _card_frame():
    # one card, five events inside an hour summing to 1200; the victim pays 100
    t0 = 1_700_000_000_000
    amounts = [300.0, 400.0, 250.0, 150.0, 100.0]
    n = len(amounts)
    return pd.DataFrame({
        "event_id": np.arange(n), "timestamp": t0 + np.arange(n) * 5 * MINUTE_MS, "amount": amounts,
        "card_id": [7] * n, "card_network": ["visa"] * n, "cvv_match": ["match"] * n,
        "merchant_id": [1] * n, "merchant_category": ["grocery"] * n, "latitude": [40.0] * n,
        "longitude": [-74.0] * n, "ip_network": ["net01"] * n, "label": [0, 0, 0, 0, 1],
    })


@pytest.fixture(scope="module")
def card_case():
    df = _card_frame()
    plan = FeaturePlan((
        RowMap("amount", "field", "amount"),
        Profile("sum_card_1h", "sum", "card_id", HOUR_MS),
        Profile("count_card_24h", "count", "card_id", 24 * HOUR_MS),
    ))
    enriched = compute_features(df, plan)
    return enriched, Propagator(df, plan)


def test_worked_amount_example(card_case):
    enriched, prop = card_case
    row = enriched.row(4)
    assert row.features[1] == 1200.0
    out = prop.propagate(row, AttackVector(amount_scale=0.5))
    assert out.features[0] == 50.0 and out.features[1] == 1150.0


def test_worked_reset_example(card_case):
    enriched, prop = card_case
    row = enriched.row(4)
    assert row.features[2] == 5.0
    out = prop.propagate(row, AttackVector(card_action="reset"))
    assert out.features[2] == 1.0 and out.features[1] == 100.0


def test_empty_attack_is_identity(small_enriched, small_df, plan):
    prop = Propagator(small_df, plan)
    for i in range(0, len(small_df), 401):
        row = small_enriched.row(i)
        assert np.array_equal(prop.propagate(row, EMPTY_ATTACK).features, row.features)


def test_exact_path_matches_oracle(small_df, rng):
    plan = wide_plan()
    enriched = compute_features(small_df, plan)
    prop = Propagator(small_df, plan)
    oracle = RowOracle(small_df, plan)
    stats = DatasetStats.from_dataset(small_df)
    for _ in range(300):
        row = enriched.row(int(rng.integers(len(small_df))))
        attack = random_attack(row, stats, rng)
        got = prop.propagate(row, attack).features
        ref = oracle.recompute(apply_to_raw(row.base, attack)).features
        assert np.allclose(got, ref, rtol=1e-9, atol=1e-9), attack.describe()


def test_batch_equals_single(small_df, small_enriched, plan, rng):
    prop = Propagator(small_df, plan)
    stats = DatasetStats.from_dataset(small_df)
    row = small_enriched.row(1234)
    attacks = [random_attack(row, stats, rng) for _ in range(40)]
    batch = prop.propagate_many(row, attacks)
    for a, x in zip(attacks, batch):
        assert np.array_equal(prop.propagate(row, a).features, x)


def test_reset_idempotent(small_df, small_enriched, plan):
    prop = Propagator(small_df, plan)
    reset = AttackVector(card_action="reset")
    once = prop.propagate(small_enriched.row(77), reset)
    twice = prop.propagate(once, reset)
    assert np.array_equal(once.features, twice.features)


def test_reset_dominates_time_shift(small_df, small_enriched, plan):
    prop = Propagator(small_df, plan)
    row = small_enriched.row(500)
    out = prop.propagate(row, AttackVector(time_shift_ms=-3 * HOUR_MS, card_action="reset", amount_scale=0.5))
    amount = row.base["amount"] * 0.5
    for spec in plan.profiles:
        if spec.key == "card_id":
            want = {"count": 1.0, "stddev": 0.0}.get(spec.agg, amount)
            assert out.features[plan.index(spec.name)] == pytest.approx(want)


def test_lookup_table_arithmetic():
    df = pd.DataFrame({"timestamp": [0, HOUR_MS // 2, HOUR_MS + 1, 3 * HOUR_MS]})
    from tabadv.features import EnrichedDataset

    plan = FeaturePlan((Profile("count_card_1h", "count", "card_id", HOUR_MS),))
    e = EnrichedDataset(df, np.array([[2.0], [4.0], [10.0], [7.0]]), plan)
    lt = build_lookup(e, "count_card_1h", HOUR_MS, start_ms=0)
    # bins: {2,4} -> 3, {10} -> 10, empty -> nearest (ties to the earlier bin), {7} -> 7
    assert lt.bins.tolist() == [3.0, 10.0, 10.0, 7.0]
    assert lt.query(HOUR_MS + 5) == 10.0
    assert lt.query(-5 * HOUR_MS) == 3.0 and lt.query(99 * HOUR_MS) == 7.0
    const = EnrichedDataset(df, np.full((4, 1), 5.5), plan)
    assert np.all(build_lookup(const, "count_card_1h").bins == 5.5)
    with pytest.raises(Exception):
        build_lookup(e, "missing_profile")


def test_regression_targets_are_oracle_values(small_df, small_enriched, plan, rng):
    oracle = RowOracle(small_df, plan)
    profiles = ["count_card_24h", "sum_card_7d"]
    X, Y = build_regression_set(oracle, small_enriched, [10, 2000], profiles, 5, rng)
    assert X.shape == (10, len(plan.specs) + 1) and Y.shape == (10, 2)
    assert np.all(np.abs(X[:, -1]) >= 60_000) and np.all(np.abs(X[:, -1]) <= 604_800_000)
    for k in range(10):
        pos = 10 if k < 5 else 2000
        raw = small_df.iloc[pos]
        rec = oracle.recompute({"event_id": int(raw["event_id"]), "timestamp": int(raw["timestamp"]) + int(X[k, -1])})
        assert np.array_equal(Y[k], rec.features[[plan.index(p) for p in profiles]])
        assert np.array_equal(X[k, :-1], small_enriched.X[pos])


def test_assignment_rules():
    vol = {"a": 3.0, "b": 3.0, "c": 3.0, "d": 80.0}
    q = {
        "a": {"r2": 0.99, "residual_range": 0.1, "identity_r2": 0.5},
        "b": {"r2": -0.5, "residual_range": 0.1, "identity_r2": -1.0},
        "c": {"r2": 0.7, "residual_range": 1.0, "identity_r2": 0.8},
    }
    a = assign_estimators(q, vol, QualityThresholds())
    assert a.by_profile == {"a": "regression", "b": "discarded", "c": "discarded", "d": "lookup"}
    wide = {"a": {"r2": 0.99, "residual_range": 11.0, "identity_r2": 0.0}}
    assert assign_estimators(wide, {"a": 1.0}).by_profile["a"] == "discarded"


def test_missing_estimator_is_an_error(small_df, plan):
    lookup_all = EstimatorBundle(EstimatorAssignment.uniform(plan, "lookup"))
    with pytest.raises(EstimatorError):
        Propagator(small_df, plan, lookup_all)
    with pytest.raises(EstimatorError):
        Propagator(small_df, plan, EstimatorBundle(EstimatorAssignment.uniform(plan, "regression")))


@pytest.fixture(scope="module")
def trained_bundle(small_df, small_enriched):
    sp = split(small_df, 3, 1, 2)
    params = TrainParams(n_rounds=80, max_depth=4, early_stopping_patience=10)
    return train_estimators(small_df, small_enriched, sp, params, np.random.default_rng(0), rows_per_split=300,
                            thresholds=QualityThresholds(volume_min=20.0))


def test_trained_bundle_quality_gate(trained_bundle, plan):
    b = trained_bundle
    assert set(b.assignment.by_profile) == {p.name for p in plan.profiles}
    for name in b.assignment.of("regression"):
        q = b.quality[name]
        assert q["r2"] > q["identity_r2"] and q["r2"] >= 0.5
    for name in b.assignment.of("lookup"):
        assert name in b.lookups
    if b.regression is not None:
        assert b.regression.model.n_outputs == len(b.assignment.of("regression"))


def test_bundle_round_trip(tmp_path, trained_bundle, small_df, small_enriched, plan):
    p = tmp_path / "est.txt"
    trained_bundle.save(p)
    back = EstimatorBundle.load(p)
    assert back.assignment == trained_bundle.assignment
    assert back.to_text() == trained_bundle.to_text()
    a, b = Propagator(small_df, plan, trained_bundle), Propagator(small_df, plan, back)
    row = small_enriched.row(3000)
    attack = AttackVector(time_shift_ms=5 * HOUR_MS, amount_scale=0.3)
    assert np.array_equal(a.propagate(row, attack).features, b.propagate(row, attack).features)


def test_estimator_quality_identity_baseline():
    y = np.column_stack([np.arange(10.0)])
    q = estimator_quality(y, y + 0.01, np.zeros_like(y), ["p"])["p"]
    assert q["r2"] > 0.99 and q["identity_r2"] < 0


def test_onehot_plan_card_switch_matches_oracle(small_df, rng):
    from tabadv.features import default_plan

    plan = default_plan(onehot_max=8)
    enriched = compute_features(small_df, plan)
    prop = Propagator(small_df, plan)
    oracle = RowOracle(small_df, plan)
    stats = DatasetStats.from_dataset(small_df)
    for _ in range(60):
        row = enriched.row(int(rng.integers(len(small_df))))
        attack = EMPTY_ATTACK.with_slot("card", sample_component("card", row.base, stats, rng))
        got = prop.propagate(row, attack).features
        ref = oracle.recompute(apply_to_raw(row.base, attack)).features
        assert np.allclose(got, ref, rtol=1e-9, atol=1e-9), attack.describe()
