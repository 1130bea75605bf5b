"""Histogram-based gradient-boosted decision trees.

Supports binary logistic classification and multi-output squared-error
regression (one tree per output per round), early stopping on a validation
metric and warm-start continuation of an existing ensemble.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from numba import njit

from .evaluation import MetricError, pauc_at_fpr, r2_score

logger = logging.getLogger(__name__)

FORMAT_HEADER = "tabadv-gbdt v1"
OBJECTIVES = ("logistic", "multi_squared_error")


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class TrainParams:
    n_rounds: int = 300
    learning_rate: float = 0.1
    max_depth: int = 6
    min_child_samples: int = 20
    feature_subsample: float = 1.0
    early_stopping_patience: int = 30
    histogram_bins: int = 256
    l2_reg: float = 1.0
    min_split_gain: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_rounds < 0:
            raise ValueError("n_rounds must be >= 0")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.max_depth < 1 or self.min_child_samples < 1 or self.early_stopping_patience < 1:
            raise ValueError("max_depth, min_child_samples and early_stopping_patience must be positive")
        if not 0 < self.feature_subsample <= 1:
            raise ValueError("feature_subsample must lie in (0, 1]")
        if not 2 <= self.histogram_bins <= 256:
            raise ValueError("histogram_bins must lie in [2, 256]")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainParams":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(types)
        if unknown:
            raise ValueError(f"unknown learner keys {sorted(unknown)}")
        conv = {k: (float(v) if types[k] == "float" else int(v)) for k, v in values.items()}
        return cls(**conv)


@dataclass(frozen=True)
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf. Go left iff x <= threshold."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def apply(self, X: np.ndarray) -> np.ndarray:
        return _tree_apply(X, self.feature, self.threshold, self.left, self.right, self.value)


@dataclass
class GbdtModel:
    objective: str
    n_features: int
    base_score: np.ndarray
    learning_rate: float
    # trees[r][o]: tree of boosting round r for output o
    trees: list = field(default_factory=list)
    feature_names: tuple | None = None
    history: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        self.base_score = np.atleast_1d(np.asarray(self.base_score, dtype=float))
        self._packed = None

    @property
    def n_outputs(self) -> int:
        return self.base_score.size

    @property
    def n_rounds(self) -> int:
        return len(self.trees)

    def truncated(self, n_rounds: int) -> "GbdtModel":
        return GbdtModel(self.objective, self.n_features, self.base_score.copy(), self.learning_rate,
                         list(self.trees[:n_rounds]), self.feature_names)

    def _pack(self):
        if self._packed is None:
            feats, thrs, lefts, rights, vals, roots, outs = [], [], [], [], [], [], []
            offset = 0
            for round_trees in self.trees:
                for o, t in enumerate(round_trees):
                    feats.append(t.feature)
                    thrs.append(t.threshold)
                    lefts.append(np.where(t.left >= 0, t.left + offset, -1))
                    rights.append(np.where(t.right >= 0, t.right + offset, -1))
                    vals.append(t.value)
                    roots.append(offset)
                    outs.append(o)
                    offset += t.n_nodes
            cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)
            self._packed = (
                cat(feats, np.int64), cat(thrs, np.float64), cat(lefts, np.int64), cat(rights, np.int64),
                cat(vals, np.float64), np.asarray(roots, np.int64), np.asarray(outs, np.int64),
            )
        return self._packed

    def _check_layout(self, X):
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise LayoutError(f"expected {self.n_features} features, got shape {X.shape}")
        return X

    def raw_predict(self, X) -> np.ndarray:
        X = self._check_layout(X)
        acc = _predict_packed(X, *self._pack(), self.n_outputs)
        return self.base_score[None, :] + self.learning_rate * acc

    def predict(self, X) -> np.ndarray:
        """Fraud probability for logistic models, else (n, n_outputs) values."""
        raw = self.raw_predict(X)
        if self.objective == "logistic":
            return _sigmoid(raw[:, 0])
        return raw

    # --- persistence

    def to_text(self) -> str:
        lines = [
            FORMAT_HEADER,
            f"objective {self.objective}",
            f"n_features {self.n_features}",
            f"n_outputs {self.n_outputs}",
            f"learning_rate {self.learning_rate!r}",
            "base_score " + " ".join(repr(float(b)) for b in self.base_score),
            "feature_names " + (" ".join(self.feature_names) if self.feature_names else "-"),
            f"rounds {self.n_rounds}",
        ]
        for r, round_trees in enumerate(self.trees):
            for o, t in enumerate(round_trees):
                lines.append(f"tree {r} {o} {t.n_nodes}")
                for k in range(t.n_nodes):
                    lines.append(
                        f"{k} {int(t.feature[k])} {float(t.threshold[k])!r} {int(t.left[k])} {int(t.right[k])} {float(t.value[k])!r}"
                    )
        lines.append("end")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GbdtModel":
        lines = iter(text.splitlines())
        if next(lines, "").strip() != FORMAT_HEADER:
            raise ValueError("not a tabadv-gbdt v1 model")
        head = {}
        for _ in range(7):
            key, _, rest = next(lines).partition(" ")
            head[key] = rest
        n_out = int(head["n_outputs"])
        names = None if head["feature_names"] == "-" else tuple(head["feature_names"].split())
        model = cls(head["objective"], int(head["n_features"]), np.array([float(b) for b in head["base_score"].split()]),
                    float(head["learning_rate"]), [], names)
        n_rounds = int(head["rounds"])
        for _ in range(n_rounds):
            round_trees = []
            for _ in range(n_out):
                _, r, o, n_nodes = next(lines).split()
                recs = [next(lines).split() for _ in range(int(n_nodes))]
                round_trees.append(Tree(
                    np.array([int(x[1]) for x in recs], np.int64),
                    np.array([float(x[2]) for x in recs]),
                    np.array([int(x[3]) for x in recs], np.int64),
                    np.array([int(x[4]) for x in recs], np.int64),
                    np.array([float(x[5]) for x in recs]),
                ))
            model.trees.append(round_trees)
        if next(lines).strip() != "end":
            raise ValueError("truncated model file")
        return model

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "GbdtModel":
        return cls.from_text(Path(path).read_text())


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


@njit(cache=True)
def _predict_packed(X, feat, thr, left, right, value, roots, tree_out, n_out):
    n = X.shape[0]
    out = np.zeros((n, n_out))
    for i in range(n):
        for t in range(roots.shape[0]):
            node = roots[t]
            while feat[node] >= 0:
                if X[i, feat[node]] <= thr[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[i, tree_out[t]] += value[node]
    return out


@njit(cache=True)
def _tree_apply(X, feat, thr, left, right, value):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        node = 0
        while feat[node] >= 0:
            if X[i, feat[node]] <= thr[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@njit(cache=True)
def _histogram(binned, rows, feats, g, h, n_bins):
    hg = np.zeros((feats.shape[0], n_bins))
    hh = np.zeros((feats.shape[0], n_bins))
    hc = np.zeros((feats.shape[0], n_bins))
    for r in rows:
        gi = g[r]
        hi = h[r]
        for j in range(feats.shape[0]):
            b = binned[r, feats[j]]
            hg[j, b] += gi
            hh[j, b] += hi
            hc[j, b] += 1.0
    return hg, hh, hc


class _Binner:
    def __init__(self, X: np.ndarray, max_bins: int):
        self.edges = []
        for j in range(X.shape[1]):
            col = X[:, j]
            uniq = np.unique(col)
            if uniq.size <= max_bins:
                edges = (uniq[:-1] + uniq[1:]) / 2.0
            else:
                qs = np.quantile(col, np.linspace(0, 1, max_bins + 1)[1:-1], method="lower")
                edges = np.unique(qs)
            self.edges.append(edges)
        self.n_edges = np.array([e.size for e in self.edges])

    def transform(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape, dtype=np.uint8)
        for j, e in enumerate(self.edges):
            out[:, j] = np.searchsorted(e, X[:, j], side="left")
        return out


class _Node:
    __slots__ = ("rows", "depth", "hist", "idx")

    def __init__(self, rows, depth, hist, idx):
        self.rows, self.depth, self.hist, self.idx = rows, depth, hist, idx


def _grow_tree(binned, binner, g, h, feats, params: TrainParams, rows):
    """Depth-wise growth; returns (Tree, list of (rows, leaf_value))."""
    lam = params.l2_reg
    n_bins = params.histogram_bins
    feat_l, thr_l, left_l, right_l, val_l = [], [], [], [], []

    def new_node():
        feat_l.append(-1)
        thr_l.append(0.0)
        left_l.append(-1)
        right_l.append(-1)
        val_l.append(0.0)
        return len(feat_l) - 1

    n_edges = binner.n_edges[feats]
    bin_ids = np.arange(n_bins)
    root = _Node(rows, 0, _histogram(binned, rows, feats, g, h, n_bins), new_node())
    leaves = []
    stack = [root]
    while stack:
        node = stack.pop()
        G = float(g[node.rows].sum())
        H = float(h[node.rows].sum())
        split = None
        if node.depth < params.max_depth and node.rows.size >= 2 * params.min_child_samples:
            hg, hh, hc = node.hist
            GL = np.cumsum(hg, axis=1)
            HL = np.cumsum(hh, axis=1)
            CL = np.cumsum(hc, axis=1)
            GR, HR, CR = G - GL, H - HL, node.rows.size - CL
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = GL**2 / (HL + lam) + GR**2 / (HR + lam) - G**2 / (H + lam)
            valid = (CL >= params.min_child_samples) & (CR >= params.min_child_samples)
            valid &= bin_ids[None, :] < n_edges[:, None]
            valid &= (HL > 1e-12) & (HR > 1e-12)
            gain = np.where(valid, gain, -np.inf)
            k = int(np.argmax(gain))
            j, b = divmod(k, n_bins)
            if np.isfinite(gain[j, b]) and gain[j, b] > params.min_split_gain + 1e-12:
                split = (j, b)
        if split is None:
            val_l[node.idx] = -G / (H + lam)
            leaves.append((node.rows, val_l[node.idx]))
            continue
        j, b = split
        f = int(feats[j])
        go_left = binned[node.rows, f] <= b
        lrows, rrows = node.rows[go_left], node.rows[~go_left]
        feat_l[node.idx] = f
        thr_l[node.idx] = float(binner.edges[f][b])
        li, ri = new_node(), new_node()
        left_l[node.idx], right_l[node.idx] = li, ri
        # histogram subtraction: build the smaller child, derive the sibling
        small, large = (lrows, rrows) if lrows.size <= rrows.size else (rrows, lrows)
        hs = _histogram(binned, small, feats, g, h, n_bins)
        hl = tuple(p - s for p, s in zip(node.hist, hs))
        if small is lrows:
            lhist, rhist = hs, hl
        else:
            lhist, rhist = hl, hs
        node.hist = None
        stack.append(_Node(rrows, node.depth + 1, rhist, ri))
        stack.append(_Node(lrows, node.depth + 1, lhist, li))
    tree = Tree(np.array(feat_l, np.int64), np.array(thr_l), np.array(left_l, np.int64),
                np.array(right_l, np.int64), np.array(val_l))
    return tree, leaves


def _gradients(objective, raw, y):
    if objective == "logistic":
        p = _sigmoid(raw[:, 0])
        return [(p - y, np.maximum(p * (1.0 - p), 1e-16))]
    return [(raw[:, o] - y[:, o], np.ones(y.shape[0])) for o in range(y.shape[1])]


def _val_metric(objective, raw, y):
    if objective == "logistic":
        try:
            return pauc_at_fpr(_sigmoid(raw[:, 0]), y, 0.01)
        except MetricError:
            return -float(np.mean(np.logaddexp(0, raw[:, 0]) - y * raw[:, 0]))
    return float(np.mean([r2_score(y[:, o], raw[:, o]) for o in range(y.shape[1])]))


def schedule_gate(state: dict, schedule: tuple) -> str:
    """Decide whether boosting continues or the next attack round starts.

    ``schedule`` is ``("periodic", k)`` or ``("on_convergence", patience)``;
    ``state`` holds ``rounds`` (rounds boosted since the last attack) and
    ``stale`` (consecutive rounds without validation improvement).
    """
    kind, k = schedule
    if kind == "periodic":
        return "attack_now" if state["rounds"] >= k else "keep_boosting"
    if kind == "on_convergence":
        return "attack_now" if state["stale"] >= k else "keep_boosting"
    raise ValueError(f"unknown schedule {kind!r}")


def _boost(model: GbdtModel, X, y, X_val, y_val, rounds: int, params: TrainParams, schedule=None) -> GbdtModel:
    objective = model.objective
    X = np.ascontiguousarray(X, dtype=np.float64)
    raw = model.raw_predict(X)
    has_val = X_val is not None and y_val is not None and len(y_val) > 0
    if has_val:
        X_val = np.ascontiguousarray(X_val, dtype=np.float64)
        raw_val = model.raw_predict(X_val)
        best = _val_metric(objective, raw_val, y_val)
    best_round = model.n_rounds
    schedule = schedule or ("on_convergence", params.early_stopping_patience)
    state = {"rounds": 0, "stale": 0}
    history = []

    if rounds > 0:
        binner = _Binner(X, params.histogram_bins)
        binned = binner.transform(X)
        rng = np.random.default_rng(params.seed + 7919 * model.n_rounds)
        n_feat = X.shape[1]
        k_feat = max(1, int(round(params.feature_subsample * n_feat)))
        all_rows = np.arange(X.shape[0], dtype=np.int64)
        trees = list(model.trees)
        for _ in range(rounds):
            grads = _gradients(objective, raw, y)
            round_trees = []
            for o, (g, h) in enumerate(grads):
                feats = np.sort(rng.choice(n_feat, k_feat, replace=False)) if k_feat < n_feat else np.arange(n_feat)
                tree, leaves = _grow_tree(binned, binner, g, h, feats.astype(np.int64), params, all_rows)
                for rows, v in leaves:
                    raw[rows, o] += model.learning_rate * v
                round_trees.append(tree)
            trees.append(round_trees)
            state["rounds"] += 1
            if has_val:
                for o, t in enumerate(round_trees):
                    raw_val[:, o] += model.learning_rate * t.apply(X_val)
                metric = _val_metric(objective, raw_val, y_val)
                history.append(metric)
                if metric > best + 1e-12:
                    best, best_round = metric, len(trees)
                    state["stale"] = 0
                else:
                    state["stale"] += 1
            else:
                best_round = len(trees)
            if schedule_gate(state, schedule) == "attack_now":
                break
        out = GbdtModel(objective, model.n_features, model.base_score.copy(), model.learning_rate,
                        trees[:best_round], model.feature_names)
    else:
        out = model.truncated(model.n_rounds)
    out.history = history
    return out


def fit(X, y, X_val=None, y_val=None, params: TrainParams = TrainParams(), objective: str = "logistic",
        feature_names=None) -> GbdtModel:
    """Train from scratch; returns the best-validation-iteration model."""
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if objective == "logistic":
        if y.ndim != 1:
            raise ValueError("logistic labels must be 1-d")
        n_pos = y.sum()
        if n_pos == 0 or n_pos == y.size:
            raise ValueError("logistic objective needs both classes in the training labels")
        base = np.array([np.log(n_pos / (y.size - n_pos))])
    else:
        if y.ndim == 1:
            y = y[:, None]
        if y_val is not None:
            y_val = np.asarray(y_val, dtype=np.float64).reshape(len(y_val), -1)
        base = y.mean(axis=0)
    model = GbdtModel(objective, X.shape[1], base, params.learning_rate, [],
                      tuple(feature_names) if feature_names is not None else None)
    return _boost(model, X, y, X_val, y_val, params.n_rounds, params)


def continue_fit(model: GbdtModel, X, y, X_val=None, y_val=None, extra_rounds: int = 0,
                 params: TrainParams = TrainParams(), schedule=None) -> GbdtModel:
    """Append up to ``extra_rounds`` rounds to a copy of ``model``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise LayoutError(f"expected {model.n_features} features, got shape {X.shape}")
    y = np.asarray(y, dtype=np.float64)
    if model.objective != "logistic":
        y = y.reshape(len(y), -1)
        if y_val is not None:
            y_val = np.asarray(y_val, dtype=np.float64).reshape(len(y_val), -1)
    params = replace(params, learning_rate=model.learning_rate)
    return _boost(model, X, y, X_val, y_val, extra_rounds, params, schedule)


TUNING_SPACE = {
    "learning_rate": (0.03, 0.3),
    "max_depth": (3, 8),
    "min_child_samples": (5, 100),
    "l2_reg": (0.1, 10.0),
    "feature_subsample": (0.5, 1.0),
}


def tune(X, y, X_val, y_val, base: TrainParams, n_trials: int, rng: np.random.Generator,
         feature_names=None) -> tuple[TrainParams, list]:
    """Small random search over ``TUNING_SPACE``; keeps the candidate with the best
    validation metric (the untouched ``base`` is trial 0). Returns (params, trials)."""
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    trials = []
    best_p, best_m = None, -np.inf
    for t in range(n_trials):
        if t == 0:
            p = base
        else:
            lo, hi = TUNING_SPACE["learning_rate"]
            p = replace(
                base,
                learning_rate=float(np.exp(rng.uniform(np.log(lo), np.log(hi)))),
                max_depth=int(rng.integers(TUNING_SPACE["max_depth"][0], TUNING_SPACE["max_depth"][1] + 1)),
                min_child_samples=int(rng.integers(*TUNING_SPACE["min_child_samples"])),
                l2_reg=float(np.exp(rng.uniform(*np.log(TUNING_SPACE["l2_reg"])))),
                feature_subsample=float(rng.uniform(*TUNING_SPACE["feature_subsample"])),
            )
        model = fit(X, y, X_val, y_val, p, feature_names=feature_names)
        metric = _val_metric(model.objective, model.raw_predict(np.asarray(X_val, dtype=float)), np.asarray(y_val, float))
        trials.append((p, metric))
        logger.info("trial %d: metric %.4f (%s)", t, metric, p)
        if metric > best_m:
            best_p, best_m = p, metric
    return best_p, trials
