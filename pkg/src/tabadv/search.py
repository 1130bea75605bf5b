"""Black-box attack search with access to model scores.

Every strategy starts from the clean victim, evaluates candidate attacks in
batches through the propagation pipeline and the model, and keeps the
lowest-scoring attack found under the norm cap.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attacks import (
    AMOUNT_SCALE_RANGE,
    DEFAULT_COSTS,
    EMPTY_ATTACK,
    MAX_TIME_SHIFT_MS,
    MIN_TIME_SHIFT_MS,
    SLOTS,
    AttackDomainError,
    AttackVector,
    CostModel,
    DatasetStats,
    attack_norm,
    sample_component,
    slot_cost,
)
from .features import EnrichedRow

STRATEGIES = ("random", "scd_greedy", "scd_cost_efficient", "greedy")


class SearchConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    strategy: str = "random"
    norm_cap: float = 100.0
    budget: int = 500
    random_iters: int = 500
    bernoulli_p: float = 0.2
    grid_points: int = 16
    card_switch_k: int = 8
    max_resample: int = 10
    include_time: bool = True
    # restrict the search to these slots (None = all)
    only_slots: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise SearchConfigError(f"unknown strategy {self.strategy!r}")
        if not 0 <= self.norm_cap <= 100:
            raise SearchConfigError("norm_cap must lie in [0, 100]")
        if self.budget < 1:
            raise SearchConfigError("budget must be at least 1")
        if not 0 <= self.bernoulli_p <= 1:
            raise SearchConfigError("bernoulli_p must lie in [0, 1]")
        if self.grid_points < 2 or self.random_iters < 1:
            raise SearchConfigError("grid_points must be >= 2 and random_iters >= 1")

    @property
    def slots(self) -> tuple:
        allowed = SLOTS if self.only_slots is None else tuple(self.only_slots)
        return tuple(s for s in SLOTS if s in allowed and (self.include_time or s != "time"))


@dataclass
class AttackResult:
    event_id: int
    attack: AttackVector
    score: float
    clean_score: float
    success: bool
    evaluations: int
    norm: float
    exhausted: bool = False
    iterations: int = 0
    # scores of the incumbent after each accepted step, starting with the clean score
    trajectory: list = field(default_factory=list, repr=False)
    features: np.ndarray | None = field(default=None, repr=False)


class ModelScorer:
    """Scores full engineered rows with a model trained on a column subset."""

    def __init__(self, model, columns=None):
        self.model = model
        self.columns = None if columns is None else np.asarray(columns, dtype=np.int64)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.asarray(self.model.predict(X if self.columns is None else X[:, self.columns]), dtype=float)


@dataclass
class AttackEnv:
    """Everything a search needs besides the victim: scorer, propagation,
    data statistics for sampling, the decision threshold and the costs."""

    scorer: object
    propagator: object
    stats: DatasetStats
    threshold: float
    costs: CostModel = DEFAULT_COSTS


class _Evaluator:
    def __init__(self, row: EnrichedRow, env: AttackEnv, budget: int):
        self.row = row
        self.env = env
        self.budget = budget
        self.used = 0
        self.exhausted = False

    @property
    def remaining(self) -> int:
        return self.budget - self.used

    def __call__(self, attacks: list):
        """Scores for as many attacks as the budget allows (a prefix)."""
        if len(attacks) > self.remaining:
            attacks = attacks[: self.remaining]
            self.exhausted = True
        if not attacks:
            self.exhausted = True
            return attacks, np.zeros(0), np.zeros((0, len(self.row.features)))
        X = self.env.propagator.propagate_many(self.row, attacks)
        self.used += len(attacks)
        return attacks, self.env.scorer(X), X


def victim_rng(seed: int, event_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(event_id) & 0xFFFFFFFF])


def _result(row, env, attack, score, clean, X, ev, iterations=0, trajectory=None) -> AttackResult:
    return AttackResult(
        event_id=int(row.base["event_id"]),
        attack=attack,
        score=float(score),
        clean_score=float(clean),
        success=bool(clean >= env.threshold and score < env.threshold),
        evaluations=ev.used,
        norm=attack_norm(attack, env.costs),
        exhausted=ev.exhausted,
        iterations=iterations,
        trajectory=trajectory if trajectory is not None else [float(clean), float(score)],
        features=X,
    )


def _clean(row: EnrichedRow, env: AttackEnv) -> float:
    return float(env.scorer(row.features[None, :])[0])


# --- random search


def random_search(row: EnrichedRow, env: AttackEnv, config: SearchConfig) -> AttackResult:
    """Independent candidates with one Bernoulli(p) trial per slot (the card
    group is a single trial); over-budget candidates are redrawn up to
    ``max_resample`` times and then dropped."""
    rng = victim_rng(config.seed, row.base["event_id"])
    ev = _Evaluator(row, env, config.budget)
    clean = _clean(row, env)
    candidates = []
    for _ in range(min(config.random_iters, config.budget)):
        for _try in range(config.max_resample):
            a = EMPTY_ATTACK
            for slot in config.slots:
                if rng.random() < config.bernoulli_p:
                    a = a.with_slot(slot, sample_component(slot, row.base, env.stats, rng))
            if attack_norm(a, env.costs) <= config.norm_cap + 1e-9:
                candidates.append(a)
                break
    best_a, best_s, best_x = EMPTY_ATTACK, clean, row.features.copy()
    if candidates:
        cands, scores, X = ev(candidates)
        k = int(np.argmin(scores))
        if scores[k] < best_s:
            best_a, best_s, best_x = cands[k], float(scores[k]), X[k]
    return _result(row, env, best_a, best_s, clean, best_x, ev, 1, [clean, best_s])


# --- grids


def amount_grid(n: int) -> np.ndarray:
    g = np.exp(np.linspace(math.log(AMOUNT_SCALE_RANGE[0]), math.log(AMOUNT_SCALE_RANGE[1]), n))
    return g[g != 1.0]


def time_grid(n: int) -> np.ndarray:
    mags = np.rint(np.exp(np.linspace(math.log(MIN_TIME_SHIFT_MS), math.log(MAX_TIME_SHIFT_MS), max(1, n // 2)))).astype(np.int64)
    return np.concatenate([-mags[::-1], mags])


def slot_grid(slot: str, row: EnrichedRow, attack: AttackVector, env: AttackEnv, config: SearchConfig,
              rng: np.random.Generator) -> list:
    """Candidate values for ``slot`` that keep the attack within the norm cap."""
    room = config.norm_cap - (attack_norm(attack, env.costs) - slot_cost(attack, slot, env.costs)) + 1e-9
    current = attack.slot_value(slot)
    base = row.base
    if slot == "network":
        values = [n for n in env.stats.ip_networks if n != base["ip_network"]]
    elif slot == "geo":
        values = [(c.lat, c.lon) for c in env.stats.geo_clusters]
    elif slot == "amount":
        values = [float(s) for s in amount_grid(config.grid_points)]
    elif slot == "time":
        values = [int(d) for d in time_grid(config.grid_points)]
    else:
        values = [("reset", None)]
        # distinct bundles only; replacement cards sharing a bundle look identical
        bundles = sorted(set(env.stats.card_bundles))
        if bundles:
            k = min(config.card_switch_k, len(bundles))
            pick = rng.choice(len(bundles), size=k, replace=False)
            values += [("switch", bundles[i]) for i in sorted(pick)]
    out = []
    for v in values:
        if v == current:
            continue
        try:
            cand = attack.with_slot(slot, v)
        except AttackDomainError:
            continue
        if slot_cost(cand, slot, env.costs) <= room:
            out.append(cand)
    return out


# --- coordinate descent and greedy


def scd_search(row: EnrichedRow, env: AttackEnv, config: SearchConfig) -> AttackResult:
    """Sweeps over the slots in random order; per slot the best grid value is
    accepted if it lowers the score (greedy) or, among score-lowering values,
    the one with the best score decrease per unit of norm (cost-efficient)."""
    if config.strategy not in ("scd_greedy", "scd_cost_efficient"):
        raise SearchConfigError("scd_search needs an scd strategy")
    rng = victim_rng(config.seed, row.base["event_id"])
    ev = _Evaluator(row, env, config.budget)
    clean = _clean(row, env)
    best_a, best_s, best_x = EMPTY_ATTACK, clean, row.features.copy()
    sweeps, path = 0, [clean]
    while not ev.exhausted:
        sweeps += 1
        improved = False
        for i in rng.permutation(len(config.slots)):
            slot = config.slots[i]
            grid = slot_grid(slot, row, best_a, env, config, rng)
            if not grid:
                continue
            cands, scores, X = ev(grid)
            if not cands:
                break
            if config.strategy == "scd_greedy":
                k = int(np.argmin(scores))
                ok = scores[k] < best_s
            else:
                gain = best_s - scores
                dn = np.array([attack_norm(c, env.costs) for c in cands]) - attack_norm(best_a, env.costs)
                ratio = np.where(gain > 0, gain / np.maximum(dn, 1e-9), -np.inf)
                k = int(np.argmax(ratio))
                ok = gain[k] > 0
            if ok:
                best_a, best_s, best_x = cands[k], float(scores[k]), X[k]
                path.append(best_s)
                improved = True
            if ev.exhausted:
                break
        if not improved:
            break
    return _result(row, env, best_a, best_s, clean, best_x, ev, sweeps, path)


def greedy_search(row: EnrichedRow, env: AttackEnv, config: SearchConfig) -> AttackResult:
    """Each iteration scores the full grids of every slot and commits the single
    best slot value; stops when nothing improves or the budget runs out."""
    rng = victim_rng(config.seed, row.base["event_id"])
    ev = _Evaluator(row, env, config.budget)
    clean = _clean(row, env)
    best_a, best_s, best_x = EMPTY_ATTACK, clean, row.features.copy()
    iters, path = 0, [clean]
    while not ev.exhausted:
        iters += 1
        grid = [c for slot in config.slots for c in slot_grid(slot, row, best_a, env, config, rng)]
        if not grid:
            break
        cands, scores, X = ev(grid)
        if not cands:
            break
        k = int(np.argmin(scores))
        if scores[k] >= best_s:
            break
        best_a, best_s, best_x = cands[k], float(scores[k]), X[k]
        path.append(best_s)
    return _result(row, env, best_a, best_s, clean, best_x, ev, iters, path)


def run_search(row: EnrichedRow, env: AttackEnv, config: SearchConfig) -> AttackResult:
    if config.strategy == "random":
        return random_search(row, env, config)
    if config.strategy == "greedy":
        return greedy_search(row, env, config)
    return scd_search(row, env, config)


def attack_rows(rows: list, env: AttackEnv, config: SearchConfig, threads: int = 1) -> list:
    """One search per victim; results come back in input order and do not
    depend on the thread count (each victim owns its RNG)."""
    if threads <= 1 or len(rows) < 2:
        return [run_search(r, env, config) for r in rows]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda r: run_search(r, env, config), rows))


def success_rate(results: list) -> float:
    if not results:
        raise ValueError("success rate of an empty result list is undefined")
    return sum(r.success for r in results) / len(results)
