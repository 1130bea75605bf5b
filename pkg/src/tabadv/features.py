"""Engineered features: row maps, entity-grouped sliding-window profiles and
higher-order transforms, computed in one streaming pass over time-sorted rows.

Windows are trailing and half-open, ``(t - w, t]``, and include the row itself.
Rows sharing a timestamp are ordered by ``event_id``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from numba import njit

from .synthdata import CITIES, HOUR_MS, VOCABULARIES

AGGREGATIONS = ("count", "sum", "mean", "stddev", "max")
GROUP_KEYS = ("card_id", "merchant_id")
NUMERIC_FIELDS = ("amount", "latitude", "longitude")
ROWMAP_FNS = ("field", "log_amount", "hour_of_day", "geo_cluster", "code", "onehot")
HIGHER_FNS = ("zscore", "ratio")

_WINDOW_RE = re.compile(r"^(\d+)([mhdw])$")
_UNIT_MS = {"m": 60_000, "h": HOUR_MS, "d": 24 * HOUR_MS, "w": 7 * 24 * HOUR_MS}


class PlanError(ValueError):
    pass


def parse_window(text: str) -> int:
    m = _WINDOW_RE.match(text.strip())
    if not m:
        raise PlanError(f"bad window {text!r}; expected e.g. 15m, 1h, 24h, 7d")
    return int(m.group(1)) * _UNIT_MS[m.group(2)]


def format_window(ms: int) -> str:
    for unit in ("d", "h", "m"):
        if ms % _UNIT_MS[unit] == 0:
            return f"{ms // _UNIT_MS[unit]}{unit}"
    raise PlanError(f"window {ms} ms is not a whole number of minutes")


@dataclass(frozen=True)
class RowMap:
    name: str
    fn: str
    field: str | None = None
    # onehot only: the category this indicator fires on
    value: str | None = None
    kind = "rowmap"


@dataclass(frozen=True)
class Profile:
    name: str
    agg: str
    key: str
    window_ms: int
    field: str = "amount"
    kind = "profile"


@dataclass(frozen=True)
class HigherOrder:
    name: str
    fn: str
    # zscore: x, mean, std; ratio: num, den, offset
    args: tuple[tuple[str, str], ...] = ()
    kind = "higher"

    def arg(self, key, default=None):
        return dict(self.args).get(key, default)


@dataclass(frozen=True)
class FeaturePlan:
    specs: tuple = field(default_factory=tuple)

    def __post_init__(self):
        seen = set()
        for spec in self.specs:
            if spec.name in seen:
                raise PlanError(f"duplicate feature {spec.name}")
            _validate_spec(spec, seen)
            seen.add(spec.name)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise PlanError(f"feature {name} not in plan") from None

    def spec(self, name: str):
        return self.specs[self.index(name)]

    @property
    def profiles(self) -> list[Profile]:
        return [s for s in self.specs if isinstance(s, Profile)]

    @property
    def higher(self) -> list[HigherOrder]:
        return [s for s in self.specs if isinstance(s, HigherOrder)]

    @property
    def rowmaps(self) -> list[RowMap]:
        return [s for s in self.specs if isinstance(s, RowMap)]

    def to_text(self) -> str:
        lines = ["# kind name key=value ..."]
        for s in self.specs:
            if isinstance(s, RowMap):
                extra = f" field={s.field}" if s.field else ""
                extra += f" value={s.value}" if s.value is not None else ""
                lines.append(f"rowmap {s.name} fn={s.fn}{extra}")
            elif isinstance(s, Profile):
                extra = "" if s.agg == "count" else f" field={s.field}"
                lines.append(f"profile {s.name} agg={s.agg} key={s.key} window={format_window(s.window_ms)}{extra}")
            else:
                args = " ".join(f"{k}={v}" for k, v in s.args)
                lines.append(f"higher {s.name} fn={s.fn} {args}".rstrip())
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FeaturePlan":
        specs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 2:
                raise PlanError(f"line {lineno}: expected 'kind name key=value ...'")
            kind, name = parts[0], parts[1]
            try:
                params = dict(p.split("=", 1) for p in parts[2:])
            except ValueError:
                raise PlanError(f"line {lineno}: parameters must be key=value") from None
            try:
                if kind == "rowmap":
                    specs.append(RowMap(name, params.pop("fn"), params.pop("field", None), params.pop("value", None)))
                elif kind == "profile":
                    agg = params.pop("agg")
                    specs.append(
                        Profile(name, agg, params.pop("key"), parse_window(params.pop("window")), params.pop("field", "amount"))
                    )
                elif kind == "higher":
                    fn = params.pop("fn")
                    specs.append(HigherOrder(name, fn, tuple(params.items())))
                    params = {}
                else:
                    raise PlanError(f"line {lineno}: unknown kind {kind!r}")
            except KeyError as e:
                raise PlanError(f"line {lineno}: missing parameter {e.args[0]}") from None
            if params:
                raise PlanError(f"line {lineno}: unexpected parameters {sorted(params)}")
        return cls(tuple(specs))

    @classmethod
    def from_file(cls, path) -> "FeaturePlan":
        return cls.from_text(Path(path).read_text())

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def _validate_spec(spec, earlier: set) -> None:
    if isinstance(spec, RowMap):
        if spec.fn not in ROWMAP_FNS:
            raise PlanError(f"{spec.name}: unknown row map {spec.fn!r}")
        if spec.fn == "field" and spec.field not in NUMERIC_FIELDS:
            raise PlanError(f"{spec.name}: unknown numeric field {spec.field!r}")
        if spec.fn in ("code", "onehot") and spec.field not in VOCABULARIES:
            raise PlanError(f"{spec.name}: unknown categorical field {spec.field!r}")
        if spec.fn == "onehot" and spec.value not in VOCABULARIES[spec.field]:
            raise PlanError(f"{spec.name}: {spec.value!r} is not a {spec.field} category")
    elif isinstance(spec, Profile):
        if spec.agg not in AGGREGATIONS:
            raise PlanError(f"{spec.name}: unknown aggregation {spec.agg!r}")
        if spec.key not in GROUP_KEYS:
            raise PlanError(f"{spec.name}: unknown group key {spec.key!r}")
        if spec.field not in NUMERIC_FIELDS:
            raise PlanError(f"{spec.name}: unknown value field {spec.field!r}")
        if spec.window_ms <= 0:
            raise PlanError(f"{spec.name}: window must be positive")
    elif isinstance(spec, HigherOrder):
        required = {"zscore": ("x", "mean", "std"), "ratio": ("num", "den")}.get(spec.fn)
        if required is None:
            raise PlanError(f"{spec.name}: unknown higher-order function {spec.fn!r}")
        for key in required:
            ref = spec.arg(key)
            if ref is None:
                raise PlanError(f"{spec.name}: missing argument {key}")
            if ref not in earlier:
                raise PlanError(f"{spec.name}: {ref!r} must be declared earlier in the plan")
        if spec.fn == "ratio":
            float(spec.arg("offset", 0.0))
    else:
        raise PlanError(f"unknown spec {spec!r}")


def default_plan(onehot_max: int = 0) -> FeaturePlan:
    """Structural stand-in plan. Categorical fields with at most ``onehot_max``
    categories get one indicator per category instead of an integer code."""
    specs = [
        RowMap("amount", "field", "amount"),
        RowMap("log_amount", "log_amount"),
        RowMap("hour_of_day", "hour_of_day"),
        RowMap("latitude", "field", "latitude"),
        RowMap("longitude", "field", "longitude"),
        RowMap("geo_cluster", "geo_cluster"),
    ]
    for name, fld in (("card_network_code", "card_network"), ("cvv_code", "cvv_match"),
                      ("merchant_category_code", "merchant_category"), ("ip_network_code", "ip_network")):
        if len(VOCABULARIES[fld]) <= onehot_max:
            specs += [RowMap(f"{fld}_is_{v}", "onehot", fld, v) for v in VOCABULARIES[fld]]
        else:
            specs.append(RowMap(name, "code", fld))
    for w in ("1h", "24h", "7d"):
        for agg in ("count", "sum", "mean", "stddev"):
            specs.append(Profile(f"{agg}_card_{w}", agg, "card_id", parse_window(w)))
    for w in ("24h", "30d"):
        for agg in ("count", "sum"):
            specs.append(Profile(f"{agg}_merchant_{w}", agg, "merchant_id", parse_window(w)))
    specs.append(HigherOrder("amount_zscore_card_7d", "zscore", (("x", "amount"), ("mean", "mean_card_7d"), ("std", "stddev_card_7d"))))
    specs.append(HigherOrder("amount_ratio_card_24h", "ratio", (("num", "amount"), ("den", "mean_card_24h"), ("offset", "1"))))
    return FeaturePlan(tuple(specs))


# --- row maps and higher-order transforms (vectorised, also used for single rows)


def _nearest_city(lat, lon):
    centers = np.asarray(CITIES)
    d = (np.asarray(lat, float)[:, None] - centers[:, 0]) ** 2 + (np.asarray(lon, float)[:, None] - centers[:, 1]) ** 2
    return np.argmin(d, axis=1).astype(float)


def encode(field_name: str, values) -> np.ndarray:
    vocab = VOCABULARIES[field_name]
    lookup = {v: i for i, v in enumerate(vocab)}
    try:
        return np.array([lookup[v] for v in values], dtype=float)
    except KeyError as e:
        raise PlanError(f"{field_name}: value {e.args[0]!r} not in vocabulary") from None


def rowmap_values(spec: RowMap, cols: dict) -> np.ndarray:
    if spec.fn == "field":
        return np.asarray(cols[spec.field], dtype=float)
    if spec.fn == "log_amount":
        return np.log(np.asarray(cols["amount"], dtype=float))
    if spec.fn == "hour_of_day":
        return ((np.asarray(cols["timestamp"], dtype=np.int64) // HOUR_MS) % 24).astype(float)
    if spec.fn == "geo_cluster":
        return _nearest_city(cols["latitude"], cols["longitude"])
    if spec.fn == "onehot":
        return (np.asarray(cols[spec.field]) == spec.value).astype(float)
    return encode(spec.field, cols[spec.field])


def higher_values(spec: HigherOrder, get) -> np.ndarray:
    if spec.fn == "zscore":
        x, mean, std = get(spec.arg("x")), get(spec.arg("mean")), get(spec.arg("std"))
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(std > 0, (x - mean) / np.where(std > 0, std, 1.0), 0.0)
    num, den = get(spec.arg("num")), get(spec.arg("den"))
    offset = float(spec.arg("offset", 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        d = den + offset
        return np.where(d != 0, num / np.where(d != 0, d, 1.0), 0.0)


def fill_derived(plan: FeaturePlan, cols: dict, out: np.ndarray, which=("rowmap", "higher")) -> None:
    """Recompute row maps and/or higher-order features of ``out`` (n, F) in place."""
    if "rowmap" in which:
        for j, spec in enumerate(plan.specs):
            if isinstance(spec, RowMap):
                out[:, j] = rowmap_values(spec, cols)
    if "higher" in which:
        for j, spec in enumerate(plan.specs):
            if isinstance(spec, HigherOrder):
                out[:, j] = higher_values(spec, lambda name: out[:, plan.index(name)])


# --- streaming window kernel


@njit(cache=True)
def _window_aggregates(group, ts, values, window, n_groups, need_std=True):
    """One pass over time-sorted rows; per-entity window pointers act as ring
    buffers over each entity's event list. Returns (count, sum, mean, std, max);
    std is only filled when ``need_std``."""
    n = group.shape[0]
    start = np.zeros(n_groups + 1, np.int64)
    for i in range(n):
        start[group[i] + 1] += 1
    for g in range(n_groups):
        start[g + 1] += start[g]
    fill = start[:-1].copy()
    head = start[:-1].copy()
    dq_head = start[:-1].copy()
    dq_tail = start[:-1].copy()
    buf_ts = np.empty(n, np.int64)
    buf_val = np.empty(n, np.float64)
    dq = np.empty(n, np.int64)
    # per-entity prefix sums of shifted values (one extra slot per entity)
    pref = np.zeros(n + n_groups, np.float64)
    shift = np.zeros(n_groups, np.float64)

    cnt_out = np.empty(n, np.float64)
    sum_out = np.empty(n, np.float64)
    mean_out = np.empty(n, np.float64)
    std_out = np.empty(n, np.float64)
    max_out = np.empty(n, np.float64)
    for i in range(n):
        g = group[i]
        k = fill[g]
        fill[g] += 1
        v = values[i]
        buf_ts[k] = ts[i]
        buf_val[k] = v
        if k == start[g]:
            shift[g] = v
        d = v - shift[g]
        pref[k + g + 1] = pref[k + g] + d
        lo = ts[i] - window
        while buf_ts[head[g]] <= lo:
            head[g] += 1
        h = head[g]
        c = k - h + 1
        s1 = pref[k + g + 1] - pref[h + g]
        total = s1 + c * shift[g]
        cnt_out[i] = c
        sum_out[i] = total
        mean_out[i] = total / c
        if c > 1 and need_std:
            # two-pass over the window: sums of squares cancel badly
            m = 0.0
            for q in range(h, k + 1):
                m += buf_val[q]
            m /= c
            acc = 0.0
            for q in range(h, k + 1):
                acc += (buf_val[q] - m) * (buf_val[q] - m)
            std_out[i] = math.sqrt(acc / c)
        else:
            std_out[i] = 0.0
        while dq_tail[g] > dq_head[g] and buf_val[dq[dq_tail[g] - 1]] <= v:
            dq_tail[g] -= 1
        dq[dq_tail[g]] = k
        dq_tail[g] += 1
        while dq[dq_head[g]] < h:
            dq_head[g] += 1
        max_out[i] = buf_val[dq[dq_head[g]]]
    return cnt_out, sum_out, mean_out, std_out, max_out


_AGG_SLOT = {"count": 0, "sum": 1, "mean": 2, "stddev": 3, "max": 4}


def _check_sorted(ts: np.ndarray, eid: np.ndarray) -> None:
    dt = np.diff(ts)
    if np.any(dt < 0) or np.any((dt == 0) & (np.diff(eid) <= 0)):
        raise ValueError("dataset must be sorted by (timestamp, event_id)")


@dataclass
class EnrichedDataset:
    raw: pd.DataFrame
    X: np.ndarray
    plan: FeaturePlan

    @property
    def names(self) -> list[str]:
        return self.plan.names

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.plan.index(name)]

    @property
    def labels(self) -> np.ndarray:
        return self.raw["label"].to_numpy()

    def __len__(self):
        return len(self.raw)

    def rows(self, idx) -> "EnrichedDataset":
        idx = np.asarray(idx)
        return EnrichedDataset(self.raw.iloc[idx].reset_index(drop=True), self.X[idx], self.plan)

    def slice(self, r: range) -> "EnrichedDataset":
        return EnrichedDataset(self.raw.iloc[r.start : r.stop].reset_index(drop=True), self.X[r.start : r.stop], self.plan)

    def row(self, i: int) -> "EnrichedRow":
        return EnrichedRow(self.raw.iloc[i].to_dict(), self.X[i].copy())

    def to_csv(self, path) -> None:
        df = self.raw.copy()
        for j, name in enumerate(self.names):
            df[f"f_{name}"] = self.X[:, j]
        df.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")

    @classmethod
    def from_csv(cls, path, plan: FeaturePlan) -> "EnrichedDataset":
        from .synthdata import TRANSACTION_COLUMNS

        df = pd.read_csv(path, dtype={c: str for c in VOCABULARIES})
        cols = [f"f_{n}" for n in plan.names]
        missing = [c for c in cols if c not in df.columns]
        if missing:
            raise PlanError(f"{path}: enriched file lacks feature columns {missing}")
        return cls(df[list(TRANSACTION_COLUMNS)].copy(), df[cols].to_numpy(dtype=float), plan)


@dataclass
class EnrichedRow:
    base: dict
    features: np.ndarray


def _raw_columns(dataset: pd.DataFrame) -> dict:
    return {c: dataset[c].to_numpy() for c in dataset.columns}


def compute_features(dataset: pd.DataFrame, plan: FeaturePlan) -> EnrichedDataset:
    """Enrich a time-sorted transaction table with every feature of ``plan``."""
    for spec in plan.profiles:
        for col in (spec.key, spec.field):
            if col not in dataset.columns:
                raise PlanError(f"{spec.name}: dataset has no column {col!r}")
    n = len(dataset)
    cols = _raw_columns(dataset)
    ts = cols["timestamp"].astype(np.int64)
    _check_sorted(ts, cols["event_id"].astype(np.int64))
    X = np.zeros((n, len(plan.specs)))
    fill_derived(plan, cols, X, which=("rowmap",))

    cache = {}
    for j, spec in enumerate(plan.specs):
        if not isinstance(spec, Profile):
            continue
        ck = (spec.key, spec.window_ms, spec.field)
        if ck not in cache:
            codes, uniq = pd.factorize(cols[spec.key], sort=False)
            need_std = any(p.agg == "stddev" and (p.key, p.window_ms, p.field) == ck for p in plan.profiles)
            cache[ck] = _window_aggregates(
                codes.astype(np.int64), ts, cols[spec.field].astype(np.float64), np.int64(spec.window_ms), len(uniq), need_std
            ) if n else tuple(np.zeros(0) for _ in range(5))
        X[:, j] = cache[ck][_AGG_SLOT[spec.agg]]
    fill_derived(plan, cols, X, which=("higher",))
    return EnrichedDataset(dataset.reset_index(drop=True), X, plan)


# --- exact single-row recomputation


def aggregate(agg: str, values: np.ndarray) -> float:
    if agg == "count":
        return float(values.size)
    if agg == "sum":
        return float(values.sum())
    if agg == "mean":
        return float(values.mean())
    if agg == "stddev":
        return float(values.std()) if values.size > 1 else 0.0
    return float(values.max())


class RowOracle:
    """Exact feature recomputation for a single modified row.

    Window members are gathered explicitly (other rows of the same entity with
    ``(ts, event_id)`` ordered before the row and ``ts > t - w``) and aggregated
    directly. Effects of the modification on other rows are ignored.
    """

    def __init__(self, dataset: pd.DataFrame, plan: FeaturePlan):
        self.plan = plan
        self.dataset = dataset.reset_index(drop=True)
        cols = _raw_columns(self.dataset)
        self._eid = cols["event_id"].astype(np.int64)
        self._pos = {int(e): i for i, e in enumerate(self._eid)}
        self._groups = {}
        for key in {p.key for p in plan.profiles}:
            keys = cols[key]
            order = np.argsort(keys, kind="stable")
            sk = keys[order]
            bounds = np.flatnonzero(np.r_[True, sk[1:] != sk[:-1], True])
            table = {}
            for a, b in zip(bounds[:-1], bounds[1:]):
                rows = order[a:b]
                table[sk[a]] = (cols["timestamp"][rows].astype(np.int64), self._eid[rows], rows)
            self._groups[key] = table
        self._values = {f: cols[f].astype(float) for f in {p.field for p in plan.profiles}}

    def original(self, event_id: int) -> dict:
        return self.dataset.iloc[self.position(event_id)].to_dict()

    def position(self, event_id: int) -> int:
        try:
            return self._pos[int(event_id)]
        except KeyError:
            raise KeyError(f"unknown event_id {event_id}") from None

    def window_members(self, key: str, key_value, t: int, eid: int, window_ms: int) -> np.ndarray:
        """Dataset positions of other rows inside the window ending at (t, eid)."""
        entry = self._groups[key].get(key_value)
        if entry is None:
            return np.zeros(0, np.int64)
        gts, geid, rows = entry
        a = np.searchsorted(gts, t - window_ms, side="right")
        b = np.searchsorted(gts, t, side="right")
        sel = rows[a:b]
        keep = (gts[a:b] < t) | (geid[a:b] < eid)
        keep &= geid[a:b] != eid
        return sel[keep]

    def recompute(self, modified_row: dict) -> EnrichedRow:
        eid = int(modified_row["event_id"])
        self.position(eid)
        row = {**self.original(eid), **modified_row}
        t = int(row["timestamp"])
        out = np.zeros((1, len(self.plan.specs)))
        cols = {k: np.array([v]) for k, v in row.items()}
        fill_derived(self.plan, cols, out, which=("rowmap",))
        for j, spec in enumerate(self.plan.specs):
            if isinstance(spec, Profile):
                members = self.window_members(spec.key, row[spec.key], t, eid, spec.window_ms)
                vals = np.append(self._values[spec.field][members], float(row[spec.field]))
                out[0, j] = aggregate(spec.agg, vals)
        fill_derived(self.plan, cols, out, which=("higher",))
        return EnrichedRow(row, out[0])


def recompute_row(dataset: pd.DataFrame, plan: FeaturePlan, modified_row: dict) -> EnrichedRow:
    return RowOracle(dataset, plan).recompute(modified_row)
