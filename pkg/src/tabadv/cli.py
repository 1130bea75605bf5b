"""Command-line entry point for the experiment pipeline.

Every subcommand reads and writes fixed file names inside the output
directory, so stages only talk to each other through files:

    generate          transactions.csv
    featurize         plan.txt, features.csv
    train-baseline    baseline.model, baseline_metrics.csv
    train-estimators  estimators.txt, estimator_quality.csv
    attack-bench      attack_bench.csv
    adv-train         robust.model, robust_estimators.txt, advtrain_trace.csv
    evaluate          evaluation.csv
    report            report.txt

Exit codes: 0 ok, 1 config error, 2 missing prerequisite, 3 runtime error.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import shutil
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .advtrain import AdvTrainConfig, adversarial_eval, adversarial_train, clean_threshold, derive_seed, scorer_for
from .attacks import CostModel, DatasetStats
from .evaluation import evaluate, report_row, write_reports
from .features import EnrichedDataset, FeaturePlan, PlanError, compute_features, default_plan
from .learner import GbdtModel, TrainParams, fit, tune
from .propagation import EstimatorBundle, Propagator, QualityThresholds, train_estimators
from .search import STRATEGIES, AttackEnv, SearchConfig, attack_rows, success_rate
from .synthdata import ConfigError, GeneratorConfig, generate, read_csv, split, write_csv

logger = logging.getLogger("tabadv")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 1, 2, 3

FILES = {
    "transactions": "transactions.csv",
    "plan": "plan.txt",
    "features": "features.csv",
    "baseline": "baseline.model",
    "baseline_metrics": "baseline_metrics.csv",
    "estimators": "estimators.txt",
    "estimator_quality": "estimator_quality.csv",
    "bench": "attack_bench.csv",
    "robust": "robust.model",
    "robust_estimators": "robust_estimators.txt",
    "trace": "advtrain_trace.csv",
    "evaluation": "evaluation.csv",
    "report": "report.txt",
}


class MissingPrerequisite(FileNotFoundError):
    pass


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: Path = Path("run")
    threads: int = 1
    alpha: float = 0.01
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    split_weeks: tuple = (10, 4, 6)
    plan_path: Path | None = None
    onehot_max: int = 0
    tune_trials: int = 0
    learner: TrainParams = field(default_factory=TrainParams)
    estimator_learner: TrainParams = field(default_factory=lambda: TrainParams(n_rounds=200, max_depth=5))
    costs: CostModel = field(default_factory=CostModel)
    estimator_rows: int = 3000
    estimator_perturbations: int = 4
    quality: QualityThresholds = field(default_factory=QualityThresholds)
    bench_strategies: tuple = STRATEGIES
    bench_caps: tuple = (7.0, 30.0, 49.0, 65.0, 82.0)
    bench_victims: int = 300
    bench_budget: int = 500
    bench_include_time: bool = False
    advtrain: AdvTrainConfig = field(default_factory=AdvTrainConfig)
    advtrain_include_time: bool = False
    eval_caps: tuple = (0.0, 30.0, 49.0, 65.0, 82.0, 100.0)
    eval_strategy: str = "greedy"
    eval_budget: int = 500
    eval_include_time: bool = False

    def path(self, key: str) -> Path:
        return self.out_dir / FILES[key]

    def component_seed(self, name: str) -> int:
        return derive_seed(self.seed, name)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Sectioned ``key = value`` file; every section and key is optional.

    Sections: run, generator, split, features, learner, tuning, estimators,
    costs, bench, advtrain, evaluate.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
    sec = {s: dict(cp[s]) for s in cp.sections()}
    known = {"run", "generator", "split", "features", "learner", "tuning", "estimators", "costs", "bench", "advtrain", "evaluate"}
    if set(sec) - known:
        raise ConfigError(f"unknown config sections {sorted(set(sec) - known)}")
    for k, v in (overrides or {}).items():
        sec.setdefault("run", {})[k] = str(v)

    def take(section: str, key: str, conv, default):
        s = sec.get(section, {})
        if key not in s:
            return default
        try:
            return conv(s.pop(key))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc

    try:
        cfg = ExperimentConfig()
        cfg.seed = take("run", "seed", int, 0)
        cfg.out_dir = Path(take("run", "out_dir", str, "run"))
        cfg.threads = take("run", "threads", int, 1)
        cfg.alpha = take("run", "alpha", float, 0.01)
        gen = sec.pop("generator", {})
        gen.setdefault("seed", str(derive_seed(cfg.seed, "generator")))
        cfg.generator = GeneratorConfig.from_mapping(gen)
        cfg.split_weeks = (take("split", "train_weeks", int, 10), take("split", "val_weeks", int, 4),
                           take("split", "test_weeks", int, 6))
        plan = take("features", "plan", str, None)
        cfg.plan_path = Path(plan) if plan else None
        cfg.onehot_max = take("features", "onehot_max", int, 0)
        cfg.tune_trials = take("tuning", "trials", int, 0)
        learner = sec.pop("learner", {})
        learner.setdefault("seed", str(derive_seed(cfg.seed, "learner")))
        cfg.learner = TrainParams.from_mapping(learner)
        cfg.costs = CostModel.from_mapping(sec.pop("costs", {}))

        cfg.estimator_rows = take("estimators", "rows_per_split", int, cfg.estimator_rows)
        cfg.estimator_perturbations = take("estimators", "perturbations_per_row", int, cfg.estimator_perturbations)
        cfg.quality = QualityThresholds(
            volume_min=take("estimators", "volume_min", float, 50.0),
            r2_min=take("estimators", "r2_min", float, 0.5),
            residual_range_max=take("estimators", "residual_range_max", float, 10.0),
        )
        cfg.estimator_learner = replace(
            cfg.estimator_learner,
            n_rounds=take("estimators", "n_rounds", int, cfg.estimator_learner.n_rounds),
            max_depth=take("estimators", "max_depth", int, cfg.estimator_learner.max_depth),
            seed=derive_seed(cfg.seed, "estimators.learner"),
        )

        cfg.bench_strategies = take("bench", "strategies", lambda s: tuple(s.replace(",", " ").split()), STRATEGIES)
        bad = set(cfg.bench_strategies) - set(STRATEGIES)
        if bad:
            raise ConfigError(f"[bench] unknown strategies {sorted(bad)}")
        cfg.bench_caps = take("bench", "norm_caps", _floats, cfg.bench_caps)
        cfg.bench_victims = take("bench", "victims", int, cfg.bench_victims)
        cfg.bench_budget = take("bench", "budget", int, cfg.bench_budget)
        cfg.bench_include_time = take("bench", "include_time", _bool, False)

        search = SearchConfig(
            strategy=take("advtrain", "strategy", str, "greedy"),
            norm_cap=take("advtrain", "norm_cap", float, 65.0),
            budget=take("advtrain", "budget", int, 500),
        )
        schedule = (take("advtrain", "schedule", str, "on_convergence"), take("advtrain", "schedule_k", int, 10))
        cfg.advtrain_include_time = take("advtrain", "include_time", _bool, False)
        cfg.advtrain = AdvTrainConfig(
            adversarial_fraction=take("advtrain", "fraction", float, 0.05),
            schedule=schedule,
            search=search,
            max_adv_rounds=take("advtrain", "max_rounds", int, 25),
            stop_epsilon=take("advtrain", "stop_epsilon", float, 0.002),
            stop_patience=take("advtrain", "stop_patience", int, 3),
            max_boost_rounds=take("advtrain", "max_boost_rounds", int, 100),
            mode=take("advtrain", "mode", str, "replace"),
            alpha=cfg.alpha,
            seed=derive_seed(cfg.seed, "advtrain"),
        )
        cfg.eval_caps = take("evaluate", "norm_caps", _floats, cfg.eval_caps)
        cfg.eval_strategy = take("evaluate", "strategy", str, "greedy")
        cfg.eval_budget = take("evaluate", "budget", int, 500)
        cfg.eval_include_time = take("evaluate", "include_time", _bool, False)
        SearchConfig(strategy=cfg.eval_strategy, budget=cfg.eval_budget)
        if cfg.threads < 1:
            raise ConfigError("threads must be >= 1")
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    leftover = {s: sorted(v) for s, v in sec.items() if v}
    if leftover:
        raise ConfigError(f"unknown config keys {leftover}")
    return cfg


# --- shared loading


def _need(cfg: ExperimentConfig, *keys) -> None:
    for k in keys:
        if not cfg.path(k).exists():
            raise MissingPrerequisite(f"{cfg.path(k)} is missing; run the stage that writes it first")


def _plan(cfg: ExperimentConfig) -> FeaturePlan:
    if cfg.plan_path is None:
        return default_plan(cfg.onehot_max)
    if not cfg.plan_path.exists():
        raise MissingPrerequisite(f"feature plan {cfg.plan_path} does not exist")
    return FeaturePlan.from_text(cfg.plan_path.read_text())


class _World:
    """Enriched data, split, attack statistics and propagation for one run."""

    def __init__(self, cfg: ExperimentConfig, bundle_key: str | None = "estimators"):
        _need(cfg, "plan", "features")
        self.plan = FeaturePlan.from_text(cfg.path("plan").read_text())
        self.enriched = EnrichedDataset.from_csv(cfg.path("features"), self.plan)
        self.split = split(self.enriched.raw, *cfg.split_weeks)
        self.stats = DatasetStats.from_dataset(self.enriched.raw.iloc[self.split.train.start : self.split.train.stop])
        bundle = None
        if bundle_key is not None:
            _need(cfg, bundle_key)
            bundle = EstimatorBundle.load(cfg.path(bundle_key))
        self.propagator = Propagator(self.enriched.raw, self.plan, bundle)

    def sub(self, name: str) -> EnrichedDataset:
        return self.enriched.slice(getattr(self.split, name))


def _load_model(cfg: ExperimentConfig, key: str) -> GbdtModel:
    _need(cfg, key)
    return GbdtModel.load(cfg.path(key))


# --- subcommands


def cmd_generate(cfg: ExperimentConfig, args) -> None:
    df = generate(cfg.generator)
    write_csv(df, cfg.path("transactions"))
    logger.info("wrote %d transactions (fraud rate %.4f)", len(df), df["label"].mean())


def cmd_featurize(cfg: ExperimentConfig, args) -> None:
    _need(cfg, "transactions")
    plan = _plan(cfg)
    df = read_csv(cfg.path("transactions"))
    cfg.path("plan").write_text(plan.to_text())
    compute_features(df, plan).to_csv(cfg.path("features"))
    logger.info("wrote %d features for %d rows", len(plan.names), len(df))


def cmd_train_baseline(cfg: ExperimentConfig, args) -> None:
    w = _World(cfg, bundle_key=None)
    tr, va, te = w.sub("train"), w.sub("validation"), w.sub("test")
    params = cfg.learner
    if cfg.tune_trials > 0:
        params, _ = tune(tr.X, tr.labels, va.X, va.labels, params, cfg.tune_trials,
                         np.random.default_rng(cfg.component_seed("tuning")), feature_names=w.plan.names)
        logger.info("tuned learner parameters: %s", params)
    model = fit(tr.X, tr.labels, va.X, va.labels, params, feature_names=w.plan.names)
    model.save(cfg.path("baseline"))
    scorer = scorer_for(model, w.plan)
    thr = clean_threshold(model, va, cfg.alpha)
    rows = []
    for name, part in (("validation", va), ("test", te)):
        s = scorer(part.X)
        rows.append(report_row(evaluate(s, s, part.labels, cfg.alpha, 0.0, threshold=thr), split=name))
    write_reports(cfg.path("baseline_metrics"), rows)
    logger.info("baseline: %d trees, test clean pAUC %.4f", model.n_rounds, rows[1]["clean_pauc"])


def cmd_train_estimators(cfg: ExperimentConfig, args) -> None:
    w = _World(cfg, bundle_key=None)
    rng = np.random.default_rng(cfg.component_seed("estimators"))
    bundle = train_estimators(w.enriched.raw, w.enriched, w.split, cfg.estimator_learner, rng, cfg.estimator_rows,
                              cfg.estimator_perturbations, cfg.quality)
    bundle.save(cfg.path("estimators"))
    rows = []
    for name, kind in bundle.assignment.by_profile.items():
        q = bundle.quality.get(name, {})
        rows.append({"profile": name, "estimator": kind, **{k: float(v) for k, v in q.items()}})
    keys = sorted({k for r in rows for k in r} - {"profile", "estimator"})
    write_reports(cfg.path("estimator_quality"), [{**{k: r.get(k, "") for k in ["profile", "estimator"] + keys}} for r in rows])
    counts = {k: len(bundle.assignment.of(k)) for k in ("exact", "lookup", "regression", "discarded")}
    logger.info("estimator assignment: %s", counts)


def _flagged_test_victims(cfg: ExperimentConfig, w: _World, model: GbdtModel, threshold: float, n: int, name: str):
    te = w.split.test
    scores = scorer_for(model, w.plan)(w.enriched.X[te.start : te.stop])
    labels = w.enriched.labels[te.start : te.stop]
    flagged = np.flatnonzero((labels == 1) & (scores >= threshold)) + te.start
    if flagged.size > n:
        rng = np.random.default_rng(cfg.component_seed(name))
        flagged = np.sort(rng.choice(flagged, size=n, replace=False))
    return flagged


def cmd_attack_bench(cfg: ExperimentConfig, args) -> None:
    w = _World(cfg)
    model = _load_model(cfg, "baseline")
    thr = clean_threshold(model, w.sub("validation"), cfg.alpha)
    victims = _flagged_test_victims(cfg, w, model, thr, cfg.bench_victims, "bench.victims")
    if victims.size == 0:
        raise RuntimeError("the baseline flags no test positives; nothing to attack")
    env = AttackEnv(scorer_for(model, w.plan), w.propagator, w.stats, thr, cfg.costs)
    rows_in = [w.enriched.row(int(i)) for i in victims]
    include_time = cfg.bench_include_time or args.include_time
    out = []
    for strategy in cfg.bench_strategies:
        for cap in cfg.bench_caps:
            sc = SearchConfig(strategy=strategy, norm_cap=cap, budget=cfg.bench_budget, random_iters=cfg.bench_budget,
                              include_time=include_time, seed=cfg.component_seed(f"bench.{strategy}"))
            res = attack_rows(rows_in, env, sc, cfg.threads)
            out.append({
                "strategy": strategy,
                "norm_cap": float(cap),
                "victims": len(res),
                "successes": sum(r.success for r in res),
                "success_rate": success_rate(res),
                "mean_evals": float(np.mean([r.evaluations for r in res])),
            })
            logger.info("%s cap=%g success=%.3f", strategy, cap, out[-1]["success_rate"])
    write_reports(cfg.path("bench"), out)


def cmd_adv_train(cfg: ExperimentConfig, args) -> None:
    w = _World(cfg)
    baseline = _load_model(cfg, "baseline")
    at = cfg.advtrain
    include_time = cfg.advtrain_include_time or args.include_time
    at = replace(at, search=replace(at.search, include_time=include_time))
    robust, trace = adversarial_train(baseline, w.enriched, w.split, w.propagator, w.stats, at, cfg.learner,
                                      cfg.threads)
    robust.save(cfg.path("robust"))
    shutil.copyfile(cfg.path("estimators"), cfg.path("robust_estimators"))
    trace.write_csv(cfg.path("trace"))
    best = trace.records[trace.best()]
    logger.info("robust model from round %d: adversarial pAUC %.4f", best.round, best.adversarial_pauc)


def cmd_evaluate(cfg: ExperimentConfig, args) -> None:
    w = _World(cfg)
    va = w.sub("validation")
    models = [("baseline", 0.0, _load_model(cfg, "baseline"))]
    if cfg.path("robust").exists():
        models.append(("robust", cfg.advtrain.search.norm_cap, GbdtModel.load(cfg.path("robust"))))
    else:
        logger.warning("%s not found; evaluating the baseline only", cfg.path("robust"))
    include_time = cfg.eval_include_time or args.include_time
    rows = []
    for name, train_cap, model in models:
        thr = clean_threshold(model, va, cfg.alpha)
        for cap in cfg.eval_caps:
            sc = SearchConfig(strategy=cfg.eval_strategy, norm_cap=cap, budget=cfg.eval_budget,
                              random_iters=cfg.eval_budget, include_time=include_time,
                              seed=cfg.component_seed(f"evaluate.{name}"))
            rep, _ = adversarial_eval(model, w.enriched, w.split.test, thr, w.propagator, w.stats, sc, cfg.alpha,
                                      cfg.threads)
            rows.append({"model": name, "train_cap": train_cap, "eval_cap": float(cap),
                         "clean_pauc": rep.clean_pauc, "adv_pauc": rep.adversarial_pauc,
                         "success_rate": rep.success_rate})
            logger.info("%s eval_cap=%g adv_pauc=%.4f", name, cap, rep.adversarial_pauc)
    write_reports(cfg.path("evaluation"), rows)


def build_report(cfg: ExperimentConfig) -> str:
    parts = []
    if cfg.path("baseline_metrics").exists():
        parts.append("== baseline (clean)\n" + pd.read_csv(cfg.path("baseline_metrics"))[
            ["split", "clean_pauc", "recall_at_fpr", "positives", "negatives"]].to_string(index=False))
    if cfg.path("estimator_quality").exists():
        q = pd.read_csv(cfg.path("estimator_quality"))
        parts.append("== estimator assignment\n" + q["estimator"].value_counts().sort_index().to_string())
    if cfg.path("bench").exists():
        b = pd.read_csv(cfg.path("bench"))
        parts.append("== attack success rate (rows: strategy, columns: norm cap)\n"
                     + b.pivot(index="strategy", columns="norm_cap", values="success_rate").round(3).to_string())
    if cfg.path("trace").exists():
        t = pd.read_csv(cfg.path("trace"))
        parts.append("== adversarial training trace (validation)\n" + t.to_string(index=False))
    if cfg.path("evaluation").exists():
        e = pd.read_csv(cfg.path("evaluation"))
        parts.append("== adversarial pAUC on test (rows: model, columns: eval cap)\n"
                     + e.pivot(index="model", columns="eval_cap", values="adv_pauc").round(4).to_string())
    if not parts:
        raise MissingPrerequisite(f"no metric files found in {cfg.out_dir}")
    return "\n\n".join(parts) + "\n"


def cmd_report(cfg: ExperimentConfig, args) -> None:
    text = build_report(cfg)
    cfg.path("report").write_text(text)
    print(text, end="")


COMMANDS = {
    "generate": cmd_generate,
    "featurize": cmd_featurize,
    "train-baseline": cmd_train_baseline,
    "train-estimators": cmd_train_estimators,
    "attack-bench": cmd_attack_bench,
    "adv-train": cmd_adv_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}
PIPELINE = ("generate", "featurize", "train-baseline", "train-estimators", "attack-bench", "adv-train", "evaluate", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tabadv",
        description="Adversarial attacks and adversarial training for tabular fraud detection",
        epilog="Run the stages in order: " + " -> ".join(PIPELINE) + ", or use 'all'.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["all"]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="sectioned key = value config file")
        p.add_argument("--out", help="output directory (overrides [run] out_dir)")
        p.add_argument("--seed", type=int, help="global seed (overrides [run] seed)")
        p.add_argument("--threads", type=int, help="worker threads for attack generation")
        if name in ("attack-bench", "adv-train", "evaluate", "all"):
            p.add_argument("--include-time", action="store_true", help="allow temporal perturbations in the search")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {k: v for k, v in (("out_dir", args.out), ("seed", args.seed), ("threads", args.threads)) if v is not None}
    try:
        cfg = load_config(args.config, overrides)
    except (ConfigError, PlanError) as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    if not hasattr(args, "include_time"):
        args.include_time = False
    stages = PIPELINE if args.command == "all" else (args.command,)
    try:
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        for stage in stages:
            logger.info("stage %s", stage)
            COMMANDS[stage](cfg, args)
    except MissingPrerequisite as exc:
        logger.error("%s", exc)
        return EXIT_MISSING
    except (ConfigError, PlanError) as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        logger.error("%s failed: %s", args.command, exc)
        logger.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
