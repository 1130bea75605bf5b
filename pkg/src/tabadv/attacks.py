"""Perturbation space on raw transactions and its cost norm.

An attack has up to five slots: ip network, geolocation, time shift, amount
scale and a card action (reset, or switch to another observed card bundle).
Its norm is the sum of per-slot costs and lies in [0, 100].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .synthdata import MINUTE_MS, WEEK_MS

SLOTS = ("network", "geo", "time", "amount", "card")
AMOUNT_SCALE_RANGE = (0.02, 5.0)
MIN_TIME_SHIFT_MS = MINUTE_MS
MAX_TIME_SHIFT_MS = WEEK_MS
# card id used for reset/switch: never present in the data
NEW_CARD_ID = -1
_SLOT_ATTR = {"network": "network", "geo": "geo", "time": "time_shift_ms", "amount": "amount_scale"}


class AttackDomainError(ValueError):
    pass


@dataclass(frozen=True)
class AttackVector:
    network: str | None = None
    geo: tuple[float, float] | None = None
    time_shift_ms: int | None = None
    amount_scale: float | None = None
    card_action: str = "none"
    # (card_network, cvv_match) of the replacement card; switch only
    card_bundle: tuple[str, str] | None = None

    def __post_init__(self):
        if self.card_action not in ("none", "reset", "switch"):
            raise AttackDomainError(f"unknown card action {self.card_action!r}")
        if (self.card_action == "switch") != (self.card_bundle is not None):
            raise AttackDomainError("a card bundle is required for, and only for, a switch")
        if self.time_shift_ms is not None:
            if self.time_shift_ms == 0:
                raise AttackDomainError("time shift must be non-zero when present")
            if abs(self.time_shift_ms) > MAX_TIME_SHIFT_MS:
                raise AttackDomainError("time shift beyond one week")
        if self.amount_scale is not None:
            if self.amount_scale == 1.0:
                raise AttackDomainError("amount scale must differ from 1 when present")
            lo, hi = AMOUNT_SCALE_RANGE
            if not lo <= self.amount_scale <= hi:
                raise AttackDomainError(f"amount scale {self.amount_scale} outside [{lo}, {hi}]")
        if self.geo is not None:
            lat, lon = self.geo
            if not (-90 <= lat <= 90 and -180 <= lon <= 180):
                raise AttackDomainError("geo outside valid coordinate range")

    @property
    def is_empty(self) -> bool:
        return self == EMPTY_ATTACK

    def slot_value(self, slot: str):
        if slot == "card":
            return None if self.card_action == "none" else (self.card_action, self.card_bundle)
        return getattr(self, _SLOT_ATTR[slot])

    def with_slot(self, slot: str, value) -> "AttackVector":
        if slot == "card":
            action, bundle = value if value is not None else ("none", None)
            return replace(self, card_action=action, card_bundle=bundle)
        return replace(self, **{_SLOT_ATTR[slot]: value})

    def present_slots(self) -> list[str]:
        return [s for s in SLOTS if self.slot_value(s) is not None]

    def describe(self) -> str:
        parts = []
        if self.network is not None:
            parts.append(f"network={self.network}")
        if self.geo is not None:
            parts.append(f"geo={self.geo[0]:.4f},{self.geo[1]:.4f}")
        if self.time_shift_ms is not None:
            parts.append(f"time_shift_ms={self.time_shift_ms}")
        if self.amount_scale is not None:
            parts.append(f"amount_scale={self.amount_scale:.6g}")
        if self.card_action != "none":
            parts.append(f"card={self.card_action}" + (f"({self.card_bundle[0]},{self.card_bundle[1]})" if self.card_bundle else ""))
        return ";".join(parts) or "none"


EMPTY_ATTACK = AttackVector()


@dataclass(frozen=True)
class CostModel:
    network_cost: float = 3.0
    geo_cost: float = 4.0
    temporal_max: float = 18.0
    amount_max: float = 26.0
    card_reset_cost: float = 33.0
    card_switch_extra: float = 16.0

    @property
    def card_switch_cost(self) -> float:
        return self.card_reset_cost + self.card_switch_extra

    @property
    def c_temporal(self) -> float:
        return self.temporal_max / math.log(MAX_TIME_SHIFT_MS + 1)

    @property
    def c_amount_up(self) -> float:
        return self.amount_max / math.log(AMOUNT_SCALE_RANGE[1])

    @property
    def c_amount_down(self) -> float:
        return self.amount_max / math.log(1.0 / AMOUNT_SCALE_RANGE[0])

    @property
    def max_norm(self) -> float:
        return self.network_cost + self.geo_cost + self.temporal_max + self.amount_max + self.card_switch_cost

    def slot_max(self, slot: str) -> float:
        return {
            "network": self.network_cost,
            "geo": self.geo_cost,
            "time": self.temporal_max,
            "amount": self.amount_max,
            "card": self.card_switch_cost,
        }[slot]

    @classmethod
    def from_mapping(cls, values: dict) -> "CostModel":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown cost keys {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in values.items()})


DEFAULT_COSTS = CostModel()


def amount_cost(s: float, costs: CostModel = DEFAULT_COSTS) -> float:
    lo, hi = AMOUNT_SCALE_RANGE
    if not lo <= s <= hi:
        raise AttackDomainError(f"amount scale {s} outside [{lo}, {hi}]")
    if s > 1.0:
        return costs.c_amount_up * math.log(s)
    return costs.c_amount_down * math.log(1.0 / s)


def temporal_cost(delta_ms: int, costs: CostModel = DEFAULT_COSTS) -> float:
    if abs(delta_ms) > MAX_TIME_SHIFT_MS:
        raise AttackDomainError("time shift beyond one week")
    return costs.c_temporal * math.log(abs(delta_ms) + 1)


def slot_cost(attack: AttackVector, slot: str, costs: CostModel = DEFAULT_COSTS) -> float:
    if slot == "network":
        return costs.network_cost if attack.network is not None else 0.0
    if slot == "geo":
        return costs.geo_cost if attack.geo is not None else 0.0
    if slot == "time":
        return temporal_cost(attack.time_shift_ms, costs) if attack.time_shift_ms is not None else 0.0
    if slot == "amount":
        return amount_cost(attack.amount_scale, costs) if attack.amount_scale is not None else 0.0
    return {"none": 0.0, "reset": costs.card_reset_cost, "switch": costs.card_switch_cost}[attack.card_action]


def attack_norm(attack: AttackVector, costs: CostModel = DEFAULT_COSTS) -> float:
    return sum(slot_cost(attack, s, costs) for s in SLOTS)


@dataclass(frozen=True)
class GeoCluster:
    lat: float
    lon: float
    spread: float


@dataclass(frozen=True)
class DatasetStats:
    """Sampling statistics of the raw data used to draw slot values."""

    ip_networks: tuple[str, ...]
    geo_clusters: tuple[GeoCluster, ...]
    card_bundles: tuple[tuple[str, str], ...]
    amount_range: tuple[float, float] = AMOUNT_SCALE_RANGE
    time_range_ms: tuple[int, int] = (MIN_TIME_SHIFT_MS, MAX_TIME_SHIFT_MS)
    card_switch_k: int = 8

    @classmethod
    def from_dataset(cls, dataset: pd.DataFrame, cell_deg: float = 1.0, min_share: float = 0.01) -> "DatasetStats":
        """Geo clusters are grid cells holding at least ``min_share`` of the rows."""
        lat = dataset["latitude"].to_numpy(float)
        lon = dataset["longitude"].to_numpy(float)
        cell = np.floor(lat / cell_deg).astype(np.int64) * 100_000 + np.floor(lon / cell_deg).astype(np.int64)
        cells, inverse, counts = np.unique(cell, return_inverse=True, return_counts=True)
        clusters = []
        for c in np.flatnonzero(counts >= max(1, min_share * len(dataset))):
            m = inverse == c
            spread = float(np.sqrt((lat[m].var() + lon[m].var()) / 2))
            clusters.append(GeoCluster(round(float(lat[m].mean()), 6), round(float(lon[m].mean()), 6), round(spread, 6)))
        first = dataset.drop_duplicates("card_id", keep="first")
        bundles = tuple(zip(first["card_network"].astype(str), first["cvv_match"].astype(str)))
        nets = tuple(sorted(dataset["ip_network"].astype(str).unique()))
        return cls(nets, tuple(clusters), bundles)


def sample_component(slot: str, row: dict, stats: DatasetStats, rng: np.random.Generator):
    """Draw a random value for one attack slot of ``row``."""
    if slot == "network":
        choices = [n for n in stats.ip_networks if n != row.get("ip_network")]
        if not choices:
            raise AttackDomainError("no alternative ip network in the vocabulary")
        return choices[rng.integers(len(choices))]
    if slot == "geo":
        if not stats.geo_clusters:
            raise AttackDomainError("no dense geo region available")
        c = stats.geo_clusters[rng.integers(len(stats.geo_clusters))]
        lat, lon = rng.normal((c.lat, c.lon), c.spread)
        return (float(np.clip(lat, -90, 90)), float(np.clip(lon, -180, 180)))
    if slot == "time":
        lo, hi = stats.time_range_ms
        mag = int(round(math.exp(rng.uniform(math.log(lo), math.log(hi)))))
        return mag if rng.random() < 0.5 else -mag
    if slot == "amount":
        lo, hi = stats.amount_range
        s = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
        return s if s != 1.0 else hi
    if slot == "card":
        if rng.random() < 0.5:
            return ("reset", None)
        if not stats.card_bundles:
            raise AttackDomainError("no observed card bundle to switch to")
        return ("switch", stats.card_bundles[rng.integers(len(stats.card_bundles))])
    raise ValueError(f"unknown slot {slot!r}")


def apply_to_raw(row: dict, attack: AttackVector) -> dict:
    """Raw transaction after the attack (the victim keeps its event_id and label)."""
    out = dict(row)
    if attack.network is not None:
        out["ip_network"] = attack.network
    if attack.geo is not None:
        out["latitude"], out["longitude"] = attack.geo
    if attack.time_shift_ms is not None:
        out["timestamp"] = int(row["timestamp"]) + int(attack.time_shift_ms)
    if attack.amount_scale is not None:
        out["amount"] = float(row["amount"]) * attack.amount_scale
    if attack.card_action != "none":
        out["card_id"] = NEW_CARD_ID
        if attack.card_bundle is not None:
            out["card_network"], out["cvv_match"] = attack.card_bundle
    return out
