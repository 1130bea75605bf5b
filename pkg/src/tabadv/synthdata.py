"""Seeded synthetic card-not-present transaction stream with planted fraud bursts.

Legitimate traffic is a homogeneous Poisson process per card over the whole
horizon. Compromised cards additionally receive one short burst of fraudulent
transactions with inflated amounts, risky merchants/networks/locations and
elevated CVV mismatch, so that card window profiles carry a signal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd

MINUTE_MS = 60_000
HOUR_MS = 3_600_000
DAY_MS = 86_400_000
WEEK_MS = 604_800_000

# Monday 2023-01-02 00:00 UTC
DEFAULT_START_MS = 1_672_617_600_000

TRANSACTION_COLUMNS = (
    "event_id",
    "timestamp",
    "amount",
    "card_id",
    "card_network",
    "cvv_match",
    "merchant_id",
    "merchant_category",
    "latitude",
    "longitude",
    "ip_network",
    "label",
)

CARD_NETWORKS = ("visa", "mastercard", "amex", "discover")
CVV_VALUES = ("match", "mismatch", "missing")
MERCHANT_CATEGORIES = (
    "grocery",
    "fuel",
    "restaurant",
    "travel",
    "apparel",
    "pharmacy",
    "entertainment",
    "electronics",
    "digital_goods",
    "jewelry",
)
RISKY_CATEGORIES = ("electronics", "digital_goods", "jewelry")
IP_NETWORKS = tuple(f"net{i:02d}" for i in range(16))
RISKY_NETWORKS = IP_NETWORKS[12:]

# (lat, lon) of the dense "city" clusters
CITIES = (
    (40.71, -74.01),
    (34.05, -118.24),
    (41.88, -87.63),
    (29.76, -95.37),
    (47.61, -122.33),
    (51.51, -0.13),
    (48.86, 2.35),
    (38.72, -9.14),
    (52.52, 13.40),
    (41.39, 2.17),
)
RISKY_CITIES = (8, 9)
# relative legitimate activity per hour of day (quiet between midnight and 5am)
DIURNAL_WEIGHTS = np.array([0.25] * 5 + [1.0] * 19)
LEGIT_RISKY_WEIGHT = 0.35
CITY_SPREAD_DEG = 0.2

VOCABULARIES = {
    "card_network": CARD_NETWORKS,
    "cvv_match": CVV_VALUES,
    "merchant_category": MERCHANT_CATEGORIES,
    "ip_network": IP_NETWORKS,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    n_cards: int = 5000
    n_merchants: int = 200
    weeks: int = 20
    legit_rate: float = 2.0
    # None derives the fraction from target_fraud_rate
    fraud_card_fraction: float | None = None
    fraud_burst_size: float = 4.0
    target_fraud_rate: float = 0.012
    fraud_amount_factor: float = 3.0
    burst_max_hours: float = 6.0
    start_ms: int = DEFAULT_START_MS
    seed: int = 0

    def __post_init__(self):
        for name in ("n_cards", "n_merchants", "weeks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.legit_rate <= 0:
            raise ConfigError("legit_rate must be positive")
        if self.fraud_burst_size < 1:
            raise ConfigError("fraud_burst_size must be >= 1")
        if not 0 < self.target_fraud_rate < 0.1:
            raise ConfigError("target_fraud_rate must lie in (0, 0.1)")
        if self.fraud_card_fraction is not None and not 0 <= self.fraud_card_fraction <= 1:
            raise ConfigError("fraud_card_fraction must lie in [0, 1]")
        if self.fraud_amount_factor <= 0 or self.burst_max_hours <= 0:
            raise ConfigError("fraud_amount_factor and burst_max_hours must be positive")

    @property
    def horizon_ms(self) -> int:
        return self.weeks * WEEK_MS

    def card_fraud_fraction(self) -> float:
        if self.fraud_card_fraction is not None:
            return self.fraud_card_fraction
        r = self.target_fraud_rate
        legit_per_card = self.legit_rate * self.weeks
        return min(1.0, r * legit_per_card / (self.fraud_burst_size * (1.0 - r)))

    @classmethod
    def from_mapping(cls, values: dict) -> "GeneratorConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown generator key: {key}")
            raw = str(raw).strip()
            if key == "fraud_card_fraction":
                kwargs[key] = None if raw.lower() in ("", "none", "auto") else float(raw)
            elif key in ("n_cards", "n_merchants", "weeks", "start_ms", "seed"):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "GeneratorConfig":
        return cls.from_mapping(read_key_values(path))


def read_key_values(path) -> dict:
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _lognormal_amounts(rng, mu, sigma):
    return np.maximum(np.round(np.exp(rng.normal(mu, sigma)), 2), 0.01)


def _city_points(rng, city_idx):
    centers = np.asarray(CITIES)[city_idx]
    pts = centers + rng.normal(0.0, CITY_SPREAD_DEG, size=centers.shape)
    return np.clip(pts[:, 0], -90, 90), np.clip(pts[:, 1], -180, 180)


def generate(config: GeneratorConfig) -> pd.DataFrame:
    """Generate the transaction table, sorted by (timestamp, event_id)."""
    burst_ms = int(config.burst_max_hours * HOUR_MS)
    if burst_ms >= config.horizon_ms:
        raise ConfigError("horizon too short for the requested burst placement")

    rng = np.random.default_rng(config.seed)
    n_cards, n_merchants = config.n_cards, config.n_merchants
    n_cities = len(CITIES)

    # merchants: fixed category, Zipf-like popularity
    merchant_cat = rng.integers(0, len(MERCHANT_CATEGORIES), size=n_merchants)
    popularity = 1.0 / np.arange(1, n_merchants + 1) ** 0.8
    popularity = rng.permutation(popularity)
    popularity /= popularity.sum()
    risky_cat = np.isin(merchant_cat, [MERCHANT_CATEGORIES.index(c) for c in RISKY_CATEGORIES])
    risky_pop = np.where(risky_cat, popularity, 0.0)
    if risky_pop.sum() == 0:
        risky_pop = popularity.copy()
    risky_pop /= risky_pop.sum()
    # everyday customers rarely shop at risky merchants
    legit_pop = np.where(risky_cat, LEGIT_RISKY_WEIGHT * popularity, popularity)
    legit_pop /= legit_pop.sum()

    # cards: per-card attribute bundle and spending habits
    card_network = rng.choice(len(CARD_NETWORKS), size=n_cards, p=[0.45, 0.35, 0.12, 0.08])
    # amex cards omit the CVV more often; per-card rates make cvv conditional on the card
    p_missing = rng.beta(1.0, 30.0, size=n_cards) + np.where(card_network == 2, 0.08, 0.0)
    p_mismatch = rng.beta(1.0, 60.0, size=n_cards)
    home_city = rng.integers(0, n_cities, size=n_cards)
    home_net = rng.integers(0, len(IP_NETWORKS) - len(RISKY_NETWORKS), size=n_cards)
    mu_amount = rng.normal(3.6, 0.6, size=n_cards)

    # legitimate traffic
    n_legit = rng.poisson(config.legit_rate * config.weeks, size=n_cards)
    l_card = np.repeat(np.arange(n_cards), n_legit)
    n_l = l_card.size
    # diurnal legitimate activity: uniform day, hour drawn from DIURNAL_WEIGHTS
    l_day = rng.integers(0, config.weeks * 7, size=n_l)
    l_hour = rng.choice(24, size=n_l, p=DIURNAL_WEIGHTS / DIURNAL_WEIGHTS.sum())
    l_time = l_day * DAY_MS + l_hour * HOUR_MS + rng.integers(0, HOUR_MS, size=n_l)
    l_amount = _lognormal_amounts(rng, mu_amount[l_card], 0.5)
    l_merchant = rng.choice(n_merchants, size=n_l, p=legit_pop)
    u = rng.random(n_l)
    l_cvv = np.where(u < p_missing[l_card], 2, np.where(u < p_missing[l_card] + p_mismatch[l_card], 1, 0))
    l_lat, l_lon = _city_points(rng, home_city[l_card])
    l_net = np.where(rng.random(n_l) < 0.85, home_net[l_card], rng.integers(0, len(IP_NETWORKS), size=n_l))

    # fraud bursts on compromised cards
    n_comp = int(round(config.card_fraud_fraction() * n_cards))
    comp = np.sort(rng.choice(n_cards, size=n_comp, replace=False)) if n_comp else np.zeros(0, np.int64)
    burst_len = 1 + rng.poisson(config.fraud_burst_size - 1.0, size=n_comp)
    f_card = np.repeat(comp, burst_len)
    n_f = f_card.size
    # burst start: night hours with elevated probability
    day = rng.integers(0, config.weeks * 7, size=n_comp)
    night = rng.random(n_comp) < 0.7
    hour_ms = np.where(
        night,
        rng.integers(0, 5 * HOUR_MS, size=n_comp),
        rng.integers(0, 24 * HOUR_MS, size=n_comp),
    )
    start = np.minimum(day.astype(np.int64) * DAY_MS + hour_ms, config.horizon_ms - burst_ms - 1)
    span = (rng.uniform(0.5, 1.0, size=n_comp) * burst_ms).astype(np.int64)
    f_time = np.repeat(start, burst_len) + (rng.random(n_f) * np.repeat(span, burst_len)).astype(np.int64)
    f_amount = _lognormal_amounts(rng, mu_amount[f_card] + math.log(config.fraud_amount_factor), 0.6)
    f_merchant = np.where(
        rng.random(n_f) < 0.75,
        rng.choice(n_merchants, size=n_f, p=risky_pop),
        rng.choice(n_merchants, size=n_f, p=popularity),
    )
    u = rng.random(n_f)
    f_cvv = np.where(u < 0.45, 1, np.where(u < 0.55, 2, 0))
    f_city = np.where(
        rng.random(n_f) < 0.5,
        rng.choice(np.asarray(RISKY_CITIES), size=n_f),
        rng.integers(0, n_cities, size=n_f),
    )
    f_lat, f_lon = _city_points(rng, f_city)
    risky_net_codes = np.array([IP_NETWORKS.index(n) for n in RISKY_NETWORKS])
    f_net = np.where(
        rng.random(n_f) < 0.6,
        rng.choice(risky_net_codes, size=n_f),
        rng.integers(0, len(IP_NETWORKS), size=n_f),
    )

    card = np.concatenate([l_card, f_card])
    ts = np.concatenate([l_time, f_time]).astype(np.int64) + config.start_ms
    order = np.lexsort((np.arange(card.size), ts))
    merchant = np.concatenate([l_merchant, f_merchant])[order]

    df = pd.DataFrame(
        {
            "event_id": np.arange(card.size, dtype=np.int64),
            "timestamp": ts[order],
            "amount": np.concatenate([l_amount, f_amount])[order],
            "card_id": card[order].astype(np.int64),
            "card_network": np.asarray(CARD_NETWORKS, dtype=object)[card_network[card[order]]],
            "cvv_match": np.asarray(CVV_VALUES, dtype=object)[np.concatenate([l_cvv, f_cvv])[order]],
            "merchant_id": merchant.astype(np.int64),
            "merchant_category": np.asarray(MERCHANT_CATEGORIES, dtype=object)[merchant_cat[merchant]],
            "latitude": np.round(np.concatenate([l_lat, f_lat])[order], 6),
            "longitude": np.round(np.concatenate([l_lon, f_lon])[order], 6),
            "ip_network": np.asarray(IP_NETWORKS, dtype=object)[np.concatenate([l_net, f_net])[order]],
            "label": np.concatenate([np.zeros(n_l, np.int64), np.ones(n_f, np.int64)])[order],
        },
        columns=list(TRANSACTION_COLUMNS),
    )
    df.attrs["start_ms"] = config.start_ms
    df.attrs["weeks"] = config.weeks
    return df


@dataclass(frozen=True)
class DatasetSplit:
    """Half-open row ranges ``[start, stop)`` into the time-sorted dataset."""

    train: range
    validation: range
    test: range
    boundaries_ms: tuple[int, int, int, int]

    def frames(self, dataset: pd.DataFrame):
        return tuple(dataset.iloc[r.start : r.stop].reset_index(drop=True) for r in (self.train, self.validation, self.test))


def dataset_start(dataset: pd.DataFrame) -> int:
    if "start_ms" in dataset.attrs:
        return int(dataset.attrs["start_ms"])
    first = int(dataset["timestamp"].iloc[0])
    return first - (first - DEFAULT_START_MS) % DAY_MS


def dataset_weeks(dataset: pd.DataFrame, start_ms: int) -> int:
    if "weeks" in dataset.attrs:
        return int(dataset.attrs["weeks"])
    last = int(dataset["timestamp"].iloc[-1])
    return int((last - start_ms) // WEEK_MS) + 1


def split(dataset: pd.DataFrame, train_weeks: int, val_weeks: int, test_weeks: int, start_ms: int | None = None) -> DatasetSplit:
    """Chronological split at week boundaries counted from the dataset start."""
    if min(train_weeks, val_weeks, test_weeks) < 0:
        raise ConfigError("week counts must be non-negative")
    start = dataset_start(dataset) if start_ms is None else int(start_ms)
    total = train_weeks + val_weeks + test_weeks
    if len(dataset) and total > dataset_weeks(dataset, start):
        raise ConfigError(f"split of {total} weeks exceeds the dataset horizon")
    bounds = (
        start,
        start + train_weeks * WEEK_MS,
        start + (train_weeks + val_weeks) * WEEK_MS,
        start + total * WEEK_MS,
    )
    ts = dataset["timestamp"].to_numpy()
    if len(ts) and np.any(np.diff(ts) < 0):
        raise ValueError("dataset must be sorted by timestamp")
    lo, b1, b2, hi = (int(np.searchsorted(ts, b, side="left")) for b in bounds)
    return DatasetSplit(range(lo, b1), range(b1, b2), range(b2, hi), bounds)


def write_csv(dataset: pd.DataFrame, path) -> None:
    dataset.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")


def read_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={c: str for c in VOCABULARIES})
    missing = [c for c in TRANSACTION_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    return df[list(TRANSACTION_COLUMNS)]
