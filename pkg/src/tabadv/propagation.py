"""Propagate raw-space attacks into engineered features.

Stages, applied in order to the victim row: (i) direct categorical/numeric
changes, (ii) timestamp shift with profile re-estimation, (iii) exact
associative update of value-based profiles for the changed value, (iv) reset
of every card-grouped profile when the card changes. Row maps and
higher-order features are recomputed last.

Per profile the time-shift stage uses one of four estimators:
``exact`` (window recomputed from the data), ``lookup`` (mean profile value
per time bin), ``regression`` (multi-output GBDT on the unperturbed row plus
the delay) or ``discarded`` (value left as is; excluded from the classifier).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .attacks import AttackVector, apply_to_raw
from .evaluation import r2_score
from .features import (
    EnrichedDataset,
    EnrichedRow,
    FeaturePlan,
    PlanError,
    Profile,
    RowOracle,
    _window_aggregates,
    fill_derived,
)
from .learner import GbdtModel, TrainParams, fit
from .synthdata import HOUR_MS

logger = logging.getLogger(__name__)

ASSIGNMENTS = ("exact", "lookup", "regression", "discarded")
BUNDLE_HEADER = "tabadv-estimators v1"


class EstimatorError(RuntimeError):
    pass


# --- exact window statistics


class ExactProfileIndex:
    """Per-entity time-sorted arrays with shifted prefix sums: window bounds by
    binary search, count and sum in O(1), stddev and max over the slice."""

    def __init__(self, dataset: pd.DataFrame, plan: FeaturePlan):
        self.plan = plan
        ts_all = dataset["timestamp"].to_numpy(np.int64)
        eid_all = dataset["event_id"].to_numpy(np.int64)
        self._tables = {}
        for key in {p.key for p in plan.profiles}:
            keys = dataset[key].to_numpy()
            order = np.lexsort((eid_all, ts_all, keys))
            sk = keys[order]
            bounds = np.flatnonzero(np.r_[True, sk[1:] != sk[:-1], True])
            groups = {}
            for a, b in zip(bounds[:-1], bounds[1:]):
                rows = order[a:b]
                entry = {"ts": ts_all[rows], "eid": eid_all[rows]}
                for f in {p.field for p in plan.profiles if p.key == key}:
                    v = dataset[f].to_numpy(float)[rows]
                    shift = v[0]
                    d = v - shift
                    entry[f] = (v, shift, np.r_[0.0, np.cumsum(d)])
                groups[sk[a]] = entry
            self._tables[key] = groups

    def others(self, key: str, key_value, t: int, eid: int, window_ms: int, fld: str):
        """Other rows of the window ending at (t, eid): (count, sum, values)."""
        g = self._tables[key].get(key_value)
        if g is None:
            return 0, 0.0, np.zeros(0)
        ts, eids = g["ts"], g["eid"]
        v, shift, p1 = g[fld]
        a = int(np.searchsorted(ts, t - window_ms, side="right"))
        b = int(np.searchsorted(ts, t, side="left"))
        b2 = int(np.searchsorted(ts, t, side="right"))
        c = b + int(np.searchsorted(eids[b:b2], eid, side="left"))
        if c <= a:
            return 0, 0.0, np.zeros(0)
        n, s1 = c - a, p1[c] - p1[a]
        own = np.flatnonzero(eids[a:c] == eid)
        if own.size == 0:
            return n, s1 + n * shift, v[a:c]
        # the row's own original record sits inside the window: take it out
        j = a + int(own[0])
        n -= 1
        return n, s1 - (v[j] - shift) + n * shift, np.r_[v[a:j], v[j + 1 : c]]

    def window_stats(self, key: str, key_value, t: int, eid: int, window_ms: int, fld: str, self_value: float):
        """(count, sum, mean, std, max) of the window ending at (t, eid) with the
        row contributing ``self_value``; other rows are taken from the data."""
        n, total, vals = self.others(key, key_value, t, eid, window_ms, fld)
        n += 1
        total += self_value
        std = 0.0
        if n > 1:
            allv = np.append(vals, self_value)
            m = allv.sum() / n
            std = math.sqrt(float(np.sum((allv - m) ** 2)) / n)
        mx = max(float(vals.max()), self_value) if vals.size else self_value
        return float(n), total, total / n, std, mx


_AGG_SLOT = {"count": 0, "sum": 1, "mean": 2, "stddev": 3, "max": 4}


# --- lookup tables


@dataclass
class LookupTable:
    profile: str
    start_ms: int
    bin_width_ms: int
    bins: np.ndarray

    def query(self, t) -> np.ndarray:
        idx = (np.asarray(t, dtype=np.int64) - self.start_ms) // self.bin_width_ms
        return self.bins[np.clip(idx, 0, self.bins.size - 1)]


def build_lookup(enriched: EnrichedDataset, profile: str, bin_width_ms: int = HOUR_MS, start_ms: int | None = None) -> LookupTable:
    """Mean profile value per time bin; empty bins take the nearest filled bin."""
    if len(enriched) == 0:
        raise EstimatorError("lookup tables need a non-empty training split")
    j = enriched.plan.index(profile)
    if not isinstance(enriched.plan.specs[j], Profile):
        raise PlanError(f"{profile} is not a profile feature")
    ts = enriched.raw["timestamp"].to_numpy(np.int64)
    start = int(ts.min()) if start_ms is None else int(start_ms)
    idx = (ts - start) // bin_width_ms
    if idx.min() < 0:
        raise EstimatorError("rows precede the lookup table start")
    n_bins = int(idx.max()) + 1
    sums = np.bincount(idx, weights=enriched.X[:, j], minlength=n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    filled = np.flatnonzero(counts)
    bins = np.empty(n_bins)
    bins[filled] = sums[filled] / counts[filled]
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        pos = np.searchsorted(filled, empty)
        lo = filled[np.clip(pos - 1, 0, filled.size - 1)]
        hi = filled[np.clip(pos, 0, filled.size - 1)]
        # nearest filled bin, ties to the earlier one
        nearest = np.where(np.abs(empty - lo) <= np.abs(hi - empty), lo, hi)
        bins[empty] = bins[nearest]
    return LookupTable(profile, start, int(bin_width_ms), bins)


# --- estimator bundle


@dataclass
class RegressionEstimator:
    profiles: list
    model: GbdtModel

    def predict(self, X_rows: np.ndarray, delays_ms) -> np.ndarray:
        inputs = np.column_stack([X_rows, np.asarray(delays_ms, dtype=float)])
        return self.model.predict(inputs)


@dataclass
class EstimatorAssignment:
    by_profile: dict

    def __post_init__(self):
        bad = {k: v for k, v in self.by_profile.items() if v not in ASSIGNMENTS}
        if bad:
            raise ValueError(f"unknown assignments {bad}")

    @classmethod
    def uniform(cls, plan: FeaturePlan, kind: str = "exact") -> "EstimatorAssignment":
        return cls({p.name: kind for p in plan.profiles})

    def of(self, kind: str) -> list:
        return [k for k, v in self.by_profile.items() if v == kind]

    def kept_features(self, plan: FeaturePlan) -> list:
        dropped = set(self.of("discarded"))
        return [n for n in plan.names if n not in dropped]

    def check(self, plan: FeaturePlan) -> None:
        names = {p.name for p in plan.profiles}
        if set(self.by_profile) != names:
            raise EstimatorError("assignment must cover exactly the plan's profiles")


@dataclass
class EstimatorBundle:
    assignment: EstimatorAssignment
    lookups: dict = field(default_factory=dict)
    regression: RegressionEstimator | None = None
    quality: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [BUNDLE_HEADER]
        for name, kind in self.assignment.by_profile.items():
            lines.append(f"assignment {name} {kind}")
        for name, q in self.quality.items():
            lines.append("quality " + name + " " + " ".join(f"{k}={v!r}" for k, v in q.items()))
        for name, lt in self.lookups.items():
            lines.append(f"lookup {name} {lt.start_ms} {lt.bin_width_ms} {lt.bins.size}")
            lines.append(" ".join(repr(float(v)) for v in lt.bins))
        if self.regression is not None:
            lines.append("regression " + " ".join(self.regression.profiles))
            lines.append(self.regression.model.to_text().rstrip("\n"))
        lines.append("bundle_end")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EstimatorBundle":
        lines = text.splitlines()
        if not lines or lines[0].strip() != BUNDLE_HEADER:
            raise ValueError("not a tabadv-estimators v1 file")
        by_profile, quality, lookups, regression = {}, {}, {}, None
        i = 1
        while i < len(lines):
            parts = lines[i].split()
            tag = parts[0] if parts else ""
            if tag == "assignment":
                by_profile[parts[1]] = parts[2]
            elif tag == "quality":
                quality[parts[1]] = {k: float(v) for k, v in (p.split("=", 1) for p in parts[2:])}
            elif tag == "lookup":
                i += 1
                bins = np.array([float(v) for v in lines[i].split()])
                lookups[parts[1]] = LookupTable(parts[1], int(parts[2]), int(parts[3]), bins)
            elif tag == "regression":
                j = lines.index("end", i)
                model = GbdtModel.from_text("\n".join(lines[i + 1 : j + 1]) + "\n")
                regression = RegressionEstimator(parts[1:], model)
                i = j
            elif tag == "bundle_end":
                break
            i += 1
        return cls(EstimatorAssignment(by_profile), lookups, regression, quality)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "EstimatorBundle":
        return cls.from_text(Path(path).read_text())


# --- the propagation pipeline


class Propagator:
    """Maps (victim row, attacks) to engineered feature rows."""

    def __init__(self, dataset: pd.DataFrame, plan: FeaturePlan, bundle: EstimatorBundle | None = None):
        self.plan = plan
        self.bundle = bundle or EstimatorBundle(EstimatorAssignment.uniform(plan, "exact"))
        self.bundle.assignment.check(plan)
        a = self.bundle.assignment
        for name in a.of("lookup"):
            if name not in self.bundle.lookups:
                raise EstimatorError(f"missing lookup table for {name}")
        reg = a.of("regression")
        if reg:
            if self.bundle.regression is None or not set(reg) <= set(self.bundle.regression.profiles):
                raise EstimatorError("missing regression estimator for " + ", ".join(reg))
        self.index = ExactProfileIndex(dataset, plan)
        self._profiles = [(j, s) for j, s in enumerate(plan.specs) if isinstance(s, Profile)]
        # profiles sharing (key, window, field) share window statistics
        self._windows = {}
        for j, s in self._profiles:
            self._windows.setdefault((s.key, s.window_ms, s.field), {})[s.agg] = j

    def propagate(self, row: EnrichedRow, attack: AttackVector) -> EnrichedRow:
        X = self.propagate_many(row, [attack])
        return EnrichedRow(apply_to_raw(row.base, attack), X[0])

    def propagate_many(self, row: EnrichedRow, attacks) -> np.ndarray:
        k = len(attacks)
        X = np.tile(np.asarray(row.features, dtype=float), (k, 1))
        if k == 0:
            return X
        base = row.base
        perturbed = [apply_to_raw(base, a) for a in attacks]
        cols = {c: np.array([p[c] for p in perturbed]) for c in base}
        card_changed = np.array([a.card_action != "none" for a in attacks])
        shifted = np.flatnonzero([a.time_shift_ms is not None for a in attacks])

        # (ii) time shift, evaluated with the row's original values
        if shifted.size:
            self._shift_stage(row, attacks, shifted, card_changed, X)

        # (iii) value changes, exact associative updates per window
        for (key, window, fld), aggs in self._windows.items():
            old = float(base[fld])
            new = cols[fld].astype(float)
            rows = np.flatnonzero(new != old)
            if key == "card_id":
                rows = rows[~card_changed[rows]]
            if rows.size:
                self._value_stage(X, rows, aggs, old, new[rows], key, window, fld, cols)

        # (iv) card reset: card-grouped profiles back to single-event base values
        if card_changed.any():
            rows = np.flatnonzero(card_changed)
            for j, spec in self._profiles:
                if spec.key != "card_id":
                    continue
                if spec.agg == "count":
                    X[rows, j] = 1.0
                elif spec.agg == "stddev":
                    X[rows, j] = 0.0
                else:
                    X[rows, j] = cols[spec.field][rows].astype(float)

        fill_derived(self.plan, cols, X)
        return X

    def _shift_stage(self, row, attacks, shifted, card_changed, X):
        a = self.bundle.assignment.by_profile
        base = row.base
        t0 = int(base["timestamp"])
        eid = int(base["event_id"])
        delays = np.array([attacks[i].time_shift_ms for i in shifted], dtype=np.int64)
        by_kind = {}
        for j, spec in self._profiles:
            by_kind.setdefault(a[spec.name], []).append((j, spec))
        for j, spec in by_kind.get("lookup", []):
            X[shifted, j] = self.bundle.lookups[spec.name].query(t0 + delays)
        if by_kind.get("regression"):
            reg = self.bundle.regression
            pred = np.atleast_2d(reg.predict(np.tile(row.features, (shifted.size, 1)), delays))
            for j, spec in by_kind["regression"]:
                X[shifted, j] = pred[:, reg.profiles.index(spec.name)]
        exact = by_kind.get("exact", [])
        if exact:
            cache = {}
            for r, i in enumerate(shifted):
                t = t0 + int(delays[r])
                for j, spec in exact:
                    if spec.key == "card_id" and card_changed[i]:
                        continue
                    ck = (spec.key, spec.window_ms, spec.field, t)
                    if ck not in cache:
                        cache[ck] = self.index.window_stats(
                            spec.key, base[spec.key], t, eid, spec.window_ms, spec.field, float(base[spec.field])
                        )
                    X[i, j] = cache[ck][_AGG_SLOT[spec.agg]]

    def _value_stage(self, X, rows, aggs, old, new, key, window, fld, cols):
        def current(agg):
            return X[rows, aggs[agg]] if agg in aggs else None

        exact_max = "max" in aggs and self.bundle.assignment.by_profile[self.plan.specs[aggs["max"]].name] == "exact"
        n = current("count")
        total = current("sum")
        mean = current("mean")
        others = None
        if n is None or (total is None and mean is None) or exact_max:
            others = [
                self.index.others(key, cols[key][r], int(cols["timestamp"][r]), int(cols["event_id"][r]), window, fld)
                for r in rows
            ]
            if n is None:
                n = np.array([o[0] + 1.0 for o in others])
            if total is None and mean is None:
                total = np.array([o[1] for o in others]) + old
        n = np.maximum(np.asarray(n, dtype=float), 1.0)
        if mean is None and total is not None:
            mean = total / n
        if total is None and mean is not None:
            total = mean * n
        new_total = total - old + new if total is not None else None
        if "sum" in aggs:
            X[rows, aggs["sum"]] = new_total
        if "mean" in aggs:
            X[rows, aggs["mean"]] = new_total / n
        if "stddev" in aggs:
            std = current("stddev")
            single = n <= 1.0
            m2 = std * std * n
            n1 = np.where(single, 1.0, n - 1.0)
            m_rm = (n * mean - old) / n1
            m2_rm = m2 - (old - mean) * (old - m_rm)
            m_new = m_rm + (new - m_rm) / n
            m2_new = m2_rm + (new - m_rm) * (new - m_new)
            X[rows, aggs["stddev"]] = np.where(single, 0.0, np.sqrt(np.maximum(m2_new, 0.0) / n))
        if "max" in aggs:
            j = aggs["max"]
            if exact_max:
                X[rows, j] = np.maximum(np.array([o[2].max() if o[0] else -np.inf for o in others]), new)
            else:
                # shrinking the row that held the max is approximated by the old max
                X[rows, j] = np.maximum(X[rows, j], new)


def propagate(row: EnrichedRow, attack: AttackVector, propagator: Propagator) -> EnrichedRow:
    return propagator.propagate(row, attack)


# --- estimator training


def profile_volumes(enriched: EnrichedDataset) -> dict:
    """Mean number of events per entity window, seen from each row."""
    raw = enriched.raw
    ts = raw["timestamp"].to_numpy(np.int64)
    out, cache = {}, {}
    for spec in enriched.plan.profiles:
        ck = (spec.key, spec.window_ms)
        if ck not in cache:
            codes, uniq = pd.factorize(raw[spec.key].to_numpy())
            cnt = _window_aggregates(codes.astype(np.int64), ts, np.zeros(len(raw)), np.int64(spec.window_ms), len(uniq), False)[0]
            cache[ck] = float(cnt.mean()) if cnt.size else 0.0
        out[spec.name] = cache[ck]
    return out


def sample_delays(rng: np.random.Generator, n: int, lo_ms: int = 60_000, hi_ms: int = 604_800_000) -> np.ndarray:
    """Signed delays: log-uniform magnitude on [lo, hi], uniform sign."""
    mag = np.rint(np.exp(rng.uniform(math.log(lo_ms), math.log(hi_ms), size=n))).astype(np.int64)
    sign = np.where(rng.random(n) < 0.5, -1, 1)
    return sign * mag


def build_regression_set(oracle: RowOracle, enriched: EnrichedDataset, positions, profiles: list,
                         n_perturbations_per_row: int, rng: np.random.Generator):
    """Inputs = unperturbed features + delay; targets = exact post-shift profiles."""
    plan = enriched.plan
    cols = [plan.index(p) for p in profiles]
    positions = np.asarray(positions)
    inputs, targets = [], []
    for pos in positions:
        raw = enriched.raw.iloc[int(pos)]
        eid, t = int(raw["event_id"]), int(raw["timestamp"])
        for d in sample_delays(rng, n_perturbations_per_row):
            rec = oracle.recompute({"event_id": eid, "timestamp": t + int(d)})
            inputs.append(np.r_[enriched.X[pos], float(d)])
            targets.append(rec.features[cols])
    F = len(plan.specs) + 1
    return np.asarray(inputs).reshape(-1, F), np.asarray(targets).reshape(-1, len(profiles))


@dataclass(frozen=True)
class QualityThresholds:
    volume_min: float = 50.0
    r2_min: float = 0.5
    residual_range_max: float = 10.0


def estimator_quality(y_true: np.ndarray, y_pred: np.ndarray, y_identity: np.ndarray, profiles: list) -> dict:
    out = {}
    for o, name in enumerate(profiles):
        yt, yp = y_true[:, o], y_pred[:, o]
        resid = yt - yp
        sd = float(yt.std())
        out[name] = {
            "r2": r2_score(yt, yp),
            "identity_r2": r2_score(yt, y_identity[:, o]),
            "residual_range": float((resid.max() - resid.min()) / sd) if sd > 0 else 0.0,
        }
    return out


def assign_estimators(quality: dict, volumes: dict, thresholds: QualityThresholds = QualityThresholds(),
                      exact: tuple = ()) -> EstimatorAssignment:
    """High-volume profiles get lookup tables; low-volume ones keep their
    regression estimator only inside the quality region and only when it beats
    leaving the profile unchanged."""
    by = {}
    for name, vol in volumes.items():
        if name in exact:
            by[name] = "exact"
        elif vol >= thresholds.volume_min:
            by[name] = "lookup"
        else:
            q = quality.get(name)
            ok = (
                q is not None
                and q["r2"] >= thresholds.r2_min
                and q["residual_range"] <= thresholds.residual_range_max
                and q["r2"] > q["identity_r2"]
            )
            by[name] = "regression" if ok else "discarded"
    return EstimatorAssignment(by)


def select_outputs(model: GbdtModel, keep: list) -> GbdtModel:
    trees = [[rt[o] for o in keep] for rt in model.trees]
    return GbdtModel(model.objective, model.n_features, model.base_score[keep], model.learning_rate, trees, model.feature_names)


def train_estimators(dataset: pd.DataFrame, enriched: EnrichedDataset, split, params: TrainParams,
                     rng: np.random.Generator, rows_per_split: int = 3000, n_perturbations_per_row: int = 4,
                     thresholds: QualityThresholds = QualityThresholds(), bin_width_ms: int = HOUR_MS) -> EstimatorBundle:
    """Fit lookup tables (training split) and the regression estimator, then
    assign estimators per profile through the quality gate."""
    plan = enriched.plan
    train = enriched.slice(split.train)
    volumes = profile_volumes(train)
    low = [n for n, v in volumes.items() if v < thresholds.volume_min]
    high = [n for n, v in volumes.items() if v >= thresholds.volume_min]
    lookups = {n: build_lookup(train, n, bin_width_ms) for n in high}
    quality, regression = {}, None
    if low:
        oracle = RowOracle(dataset, plan)

        def sample(r: range):
            m = min(rows_per_split, len(r))
            return np.sort(rng.choice(np.arange(r.start, r.stop), size=m, replace=False))

        Xtr, Ytr = build_regression_set(oracle, enriched, sample(split.train), low, n_perturbations_per_row, rng)
        Xva, Yva = build_regression_set(oracle, enriched, sample(split.validation), low, n_perturbations_per_row, rng)
        Xte, Yte = build_regression_set(oracle, enriched, sample(split.test), low, n_perturbations_per_row, rng)
        names = plan.names + ["delay_ms"]
        model = fit(Xtr, Ytr, Xva, Yva, params, objective="multi_squared_error", feature_names=names)
        identity = Xte[:, [plan.index(p) for p in low]]
        quality = estimator_quality(Yte, model.predict(Xte), identity, low)
        for name, q in quality.items():
            q["volume"] = volumes[name]
            logger.info("profile %s: r2=%.3f identity_r2=%.3f residual_range=%.2f", name, q["r2"], q["identity_r2"], q["residual_range"])
        assignment = assign_estimators(quality, volumes, thresholds)
        keep = [low.index(n) for n in assignment.of("regression")]
        if keep:
            regression = RegressionEstimator([low[i] for i in keep], select_outputs(model, keep))
    else:
        assignment = assign_estimators({}, volumes, thresholds)
    return EstimatorBundle(assignment, lookups, regression, quality)
