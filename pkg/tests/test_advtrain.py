from dataclasses import replace

import pytest

from tabadv.advtrain import (
    AdvTrainConfig,
    AdvTrainTrace,
    RoundRecord,
    adversarial_eval,
    adversarial_train,
    clean_threshold,
    derive_seed,
)
from tabadv.attacks import EMPTY_ATTACK, DatasetStats
from tabadv.learner import TrainParams, fit
from tabadv.propagation import Propagator
from tabadv.search import SearchConfig
from tabadv.synthdata import split

PARAMS = TrainParams(n_rounds=30, max_depth=3, early_stopping_patience=5)


@pytest.fixture(scope="module")
def setup(small_df, small_enriched, plan):
    sp = split(small_df, 3, 1, 2)
    tr, va = small_enriched.slice(sp.train), small_enriched.slice(sp.validation)
    model = fit(tr.X, tr.labels, va.X, va.labels, PARAMS, feature_names=plan.names)
    return model, sp, Propagator(small_df, plan), DatasetStats.from_dataset(tr.raw)


def _config(**kw):
    base = dict(search=SearchConfig(strategy="random", norm_cap=65, budget=30, random_iters=30, include_time=False),
                max_adv_rounds=3, stop_patience=5, max_boost_rounds=10, adversarial_fraction=0.2, seed=11)
    base.update(kw)
    return AdvTrainConfig(**base)


def test_derive_seed_is_stable_and_component_specific():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert derive_seed(1, "a") != derive_seed(2, "a")
    assert 0 <= derive_seed(7, "x", 3) < 2**32


def test_zero_cap_evaluation_is_clean(setup, small_enriched):
    model, sp, prop, stats = setup
    thr = clean_threshold(model, small_enriched.slice(sp.validation))
    rep, res = adversarial_eval(model, small_enriched, sp.test, thr, prop, stats,
                                SearchConfig(strategy="greedy", norm_cap=0))
    assert all(r.attack == EMPTY_ATTACK for r in res)
    assert rep.adversarial_pauc == pytest.approx(rep.clean_pauc, abs=1e-12)
    assert rep.success_rate == 0.0


def test_single_round_trace(setup, small_enriched):
    model, sp, prop, stats = setup
    best, trace = adversarial_train(model, small_enriched, sp, prop, stats, _config(max_adv_rounds=1), PARAMS)
    assert len(trace.records) == 1 and trace.records[0].round == 1
    assert trace.baseline.round == 0 and trace.baseline.total_trees == model.n_rounds
    r = trace.records[0]
    assert r.total_trees == model.n_rounds + r.trees_added
    assert best.n_rounds == r.total_trees
    # the original ensemble is a prefix of the updated one
    assert best.trees[: model.n_rounds] == model.trees


def test_returned_model_is_argmax_record(setup, small_enriched):
    model, sp, prop, stats = setup
    best, trace = adversarial_train(model, small_enriched, sp, prop, stats, _config(), PARAMS)
    assert 1 <= len(trace.records) <= 3
    assert [r.round for r in trace.records] == list(range(1, len(trace.records) + 1))
    k = trace.best()
    assert trace.records[k].adversarial_pauc == max(r.adversarial_pauc for r in trace.records)
    assert best.n_rounds == trace.records[k].total_trees


def test_training_is_deterministic(setup, small_enriched, tmp_path):
    model, sp, prop, stats = setup
    paths = []
    for i in range(2):
        _, trace = adversarial_train(model, small_enriched, sp, prop, stats, _config(max_adv_rounds=2), PARAMS)
        paths.append(tmp_path / f"t{i}.csv")
        trace.write_csv(paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_augment_mode_runs(setup, small_enriched):
    model, sp, prop, stats = setup
    _, trace = adversarial_train(model, small_enriched, sp, prop, stats, _config(max_adv_rounds=1, mode="augment"), PARAMS)
    assert len(trace.records) == 1


def test_patience_stops_early():
    tr = AdvTrainTrace(RoundRecord(0, 0.9, 0.1, 1.0, 0, 0, 5))
    tr.records = [RoundRecord(i, 0.9, v, 1.0, 3, 1, 5 + i) for i, v in enumerate([0.2, 0.3, 0.3], 1)]
    assert tr.best() == 1


def test_config_validation():
    with pytest.raises(ValueError):
        AdvTrainConfig(adversarial_fraction=0)
    with pytest.raises(ValueError):
        AdvTrainConfig(mode="mix")
    with pytest.raises(ValueError):
        AdvTrainConfig(schedule=("sometimes", 3))
    with pytest.raises(ValueError):
        AdvTrainConfig(max_adv_rounds=0)


def test_no_positives_raises(setup, small_enriched):
    model, sp, prop, stats = setup
    empty = replace(sp, validation=range(sp.validation.start, sp.validation.start))
    with pytest.raises(ValueError):
        adversarial_train(model, small_enriched, empty, prop, stats, _config(), PARAMS)
