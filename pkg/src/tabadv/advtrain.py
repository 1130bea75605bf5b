"""Adversarial training: attack positives, swap in the attacks, keep boosting."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attacks import DatasetStats
from .evaluation import EvalReport, evaluate, operating_threshold, pauc_at_fpr
from .features import EnrichedDataset
from .learner import GbdtModel, TrainParams, continue_fit
from .search import AttackEnv, ModelScorer, SearchConfig, attack_rows

logger = logging.getLogger(__name__)


def derive_seed(*parts) -> int:
    """Stable 32-bit sub-seed from integers and component names."""
    words = []
    for p in parts:
        if isinstance(p, str):
            words.extend(p.encode())
        else:
            words.append(int(p) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def model_columns(model: GbdtModel, plan) -> np.ndarray:
    names = model.feature_names or tuple(plan.names)
    return np.array([plan.index(n) for n in names], dtype=np.int64)


def scorer_for(model: GbdtModel, plan) -> ModelScorer:
    return ModelScorer(model, model_columns(model, plan))


def clean_threshold(model: GbdtModel, val: EnrichedDataset, alpha: float = 0.01) -> float:
    """Score at the alpha-FPR operating point on clean validation rows."""
    return operating_threshold(scorer_for(model, val.plan)(val.X), val.labels, alpha)


def attack_positions(enriched: EnrichedDataset, positions, env: AttackEnv, config: SearchConfig, threads: int = 1) -> list:
    return attack_rows([enriched.row(int(i)) for i in positions], env, config, threads)


def adversarial_eval(model: GbdtModel, enriched: EnrichedDataset, eval_range: range, threshold: float, propagator,
                     stats: DatasetStats, config: SearchConfig, alpha: float = 0.01, threads: int = 1):
    """Clean vs adversarial report of ``model`` on ``eval_range``: every positive
    is replaced by its best attack found against this model."""
    scorer = scorer_for(model, enriched.plan)
    sub = enriched.slice(eval_range)
    clean = scorer(sub.X)
    pos = np.flatnonzero(sub.labels == 1)
    env = AttackEnv(scorer, propagator, stats, threshold)
    results = attack_positions(enriched, pos + eval_range.start, env, config, threads)
    attacked = clean.copy()
    attacked[pos] = [r.score for r in results]
    report = evaluate(clean, attacked, sub.labels, alpha, config.norm_cap, threshold=threshold)
    return report, results


@dataclass(frozen=True)
class AdvTrainConfig:
    adversarial_fraction: float = 0.05
    # ("on_convergence", patience) or ("periodic", k boosting rounds)
    schedule: tuple = ("on_convergence", 10)
    search: SearchConfig = SearchConfig(strategy="greedy", norm_cap=65.0)
    max_adv_rounds: int = 25
    stop_epsilon: float = 0.002
    stop_patience: int = 3
    # cap on boosting rounds appended per adversarial round
    max_boost_rounds: int = 100
    mode: str = "replace"
    alpha: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.adversarial_fraction <= 1:
            raise ValueError("adversarial_fraction must lie in (0, 1]")
        if self.max_adv_rounds < 1:
            raise ValueError("max_adv_rounds must be at least 1")
        if self.mode not in ("replace", "augment"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.schedule[0] not in ("periodic", "on_convergence") or int(self.schedule[1]) < 1:
            raise ValueError(f"bad schedule {self.schedule!r}")


@dataclass
class RoundRecord:
    round: int
    clean_pauc: float
    adversarial_pauc: float
    success_rate: float
    n_attacked: int
    trees_added: int
    total_trees: int


@dataclass
class AdvTrainTrace:
    baseline: RoundRecord | None = None
    records: list = field(default_factory=list)

    def best(self) -> int:
        """Index of the record with the highest adversarial pAUC (first on ties)."""
        return int(np.argmax([r.adversarial_pauc for r in self.records]))

    def write_csv(self, path) -> None:
        rows = ([self.baseline] if self.baseline else []) + self.records
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(asdict(rows[0])), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in asdict(r).items()})


def adversarial_train(baseline: GbdtModel, enriched: EnrichedDataset, split, propagator, stats: DatasetStats,
                      config: AdvTrainConfig = AdvTrainConfig(), params: TrainParams = TrainParams(),
                      threads: int = 1):
    """Returns (best model by validation adversarial pAUC, trace)."""
    plan = enriched.plan
    cols = model_columns(baseline, plan)
    y = enriched.labels
    tr, va = split.train, split.validation
    train_pos = np.flatnonzero(y[tr.start : tr.stop] == 1) + tr.start
    val_pos = np.flatnonzero(y[va.start : va.stop] == 1) + va.start
    if train_pos.size == 0 or val_pos.size == 0:
        raise ValueError("adversarial training needs positives in both the training and validation splits")
    val = enriched.slice(va)

    X_train = enriched.X[tr.start : tr.stop].copy()
    y_train = y[tr.start : tr.stop].astype(float)
    extra_X, extra_y = [], []
    rng = np.random.default_rng(derive_seed(config.seed, "advtrain.victims"))

    def evaluate_model(model, rnd):
        thr = clean_threshold(model, val, config.alpha)
        search = replace(config.search, seed=derive_seed(config.seed, "advtrain.eval", rnd))
        report, _ = adversarial_eval(model, enriched, va, thr, propagator, stats, search, config.alpha, threads)
        return report

    rep = evaluate_model(baseline, 0)
    trace = AdvTrainTrace(RoundRecord(0, rep.clean_pauc, rep.adversarial_pauc, rep.success_rate, 0, 0, baseline.n_rounds))
    logger.info("baseline: %s", rep.summary())
    models = []
    model = baseline
    best_adv, stale = rep.adversarial_pauc, 0
    for rnd in range(1, config.max_adv_rounds + 1):
        # (a) fresh victim sample
        k = max(1, int(round(config.adversarial_fraction * train_pos.size)))
        victims = np.sort(rng.choice(train_pos, size=k, replace=False))
        # (b) attack against the current model
        thr = clean_threshold(model, val, config.alpha)
        env = AttackEnv(ModelScorer(model, cols), propagator, stats, thr)
        s_train = replace(config.search, seed=derive_seed(config.seed, "advtrain.train", rnd))
        s_val = replace(config.search, seed=derive_seed(config.seed, "advtrain.val", rnd))
        res_train = attack_positions(enriched, victims, env, s_train, threads)
        res_val = attack_positions(enriched, val_pos, env, s_val, threads)
        # (c) replace victims by their attacks (or append them)
        if config.mode == "replace":
            for i, r in zip(victims, res_train):
                X_train[i - tr.start] = r.features
        else:
            extra_X.extend(r.features for r in res_train)
            extra_y.extend([1.0] * len(res_train))
        X_val = val.X.copy()
        for i, r in zip(val_pos, res_val):
            X_val[i - va.start] = r.features
        Xt = X_train if not extra_X else np.vstack([X_train, np.asarray(extra_X)])
        yt = y_train if not extra_y else np.r_[y_train, extra_y]
        # (d) warm-start update
        p = replace(params, seed=derive_seed(config.seed, "advtrain.boost", rnd))
        if config.schedule[0] == "on_convergence":
            p = replace(p, early_stopping_patience=int(config.schedule[1]))
        new = continue_fit(model, Xt[:, cols], yt, X_val[:, cols], val.labels.astype(float), config.max_boost_rounds,
                           p, tuple(config.schedule))
        added = new.n_rounds - model.n_rounds
        model = new
        # (e) fresh validation attack on the updated model
        rep = evaluate_model(model, rnd)
        trace.records.append(RoundRecord(rnd, rep.clean_pauc, rep.adversarial_pauc, rep.success_rate, len(victims), added, model.n_rounds))
        models.append(model)
        logger.info("round %d: +%d trees, %s", rnd, added, rep.summary())
        if rep.adversarial_pauc > best_adv + config.stop_epsilon:
            best_adv, stale = rep.adversarial_pauc, 0
        else:
            best_adv = max(best_adv, rep.adversarial_pauc)
            stale += 1
            if stale >= config.stop_patience:
                break
    return models[trace.best()], trace
