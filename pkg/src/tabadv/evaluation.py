"""ROC-based metrics restricted to the low-FPR operating region."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields

import numpy as np


class MetricError(ValueError):
    pass


def _check(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be 1-d arrays of equal length")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0 or n_pos == labels.size:
        raise MetricError("both classes must be present")
    return scores, labels == 1


def roc_curve(scores, labels):
    """ROC vertices (fpr, tpr, thresholds), one per distinct score, from (0, 0).

    Tied scores form a single step, so the curve moves diagonally across them.
    ``thresholds[k]`` flags ``score >= thresholds[k]``; the first is ``+inf``.
    """
    scores, pos = _check(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    p = pos[order]
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(p)[last]
    fp = np.cumsum(~p)[last]
    fpr = np.r_[0.0, fp / (~p).sum()]
    tpr = np.r_[0.0, tp / p.sum()]
    return fpr, tpr, np.r_[np.inf, s[last]]


def _partial_area(fpr, tpr, alpha):
    k = np.searchsorted(fpr, alpha, side="right")
    xs = fpr[:k]
    ys = tpr[:k]
    if k < fpr.size and xs[-1] < alpha:
        x0, x1, y0, y1 = fpr[k - 1], fpr[k], tpr[k - 1], tpr[k]
        # vertical segments already handled by searchsorted side="right"
        y_alpha = y0 + (y1 - y0) * (alpha - x0) / (x1 - x0)
        xs = np.r_[xs, alpha]
        ys = np.r_[ys, y_alpha]
    return float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))


def pauc_at_fpr(scores, labels, alpha: float = 0.01, normalization: str = "ratio") -> float:
    """Area under the ROC curve for FPR in [0, alpha], normalised.

    ``ratio`` divides by alpha (perfect = 1, chance = alpha / 2); ``mcclish``
    rescales so that chance = 0.5 and perfect = 1.
    """
    if not 0 < alpha <= 1:
        raise MetricError("alpha must lie in (0, 1]")
    fpr, tpr, _ = roc_curve(scores, labels)
    area = _partial_area(fpr, tpr, alpha)
    if normalization == "ratio":
        return area / alpha
    if normalization == "mcclish":
        lo, hi = alpha * alpha / 2.0, alpha
        return 0.5 * (1.0 + (area - lo) / (hi - lo))
    raise MetricError(f"unknown normalization {normalization!r}")


def recall_at_fpr(scores, labels, alpha: float = 0.01) -> float:
    """Best TPR among ROC vertices whose FPR does not exceed alpha."""
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(tpr[fpr <= alpha + 1e-12].max())


def operating_threshold(scores, labels, alpha: float = 0.01) -> float:
    """Lowest score threshold (flag ``score >= t``) whose FPR stays within alpha."""
    fpr, _, thr = roc_curve(scores, labels)
    ok = np.flatnonzero(fpr <= alpha + 1e-12)
    t = thr[ok[-1]]
    if np.isinf(t):
        return float(np.nextafter(np.max(scores), np.inf))
    return float(t)


def pairwise_auc(scores, labels) -> float:
    scores, pos = _check(scores, labels)
    sp, sn = scores[pos], scores[~pos]
    diff = sp[:, None] - sn[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def r2_score(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, float)
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    ss_res = float(np.sum((y_true - np.asarray(y_pred, float)) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


@dataclass
class EvalReport:
    clean_pauc: float
    adversarial_pauc: float
    success_rate: float
    recall_at_fpr: float
    adversarial_recall: float
    operating_threshold: float
    norm_cap: float
    positives: int
    negatives: int
    attacked: int

    def summary(self) -> str:
        return (
            f"norm_cap={self.norm_cap:g} clean_pauc={self.clean_pauc:.4f} "
            f"adversarial_pauc={self.adversarial_pauc:.4f} success_rate={self.success_rate:.4f} "
            f"recall@fpr={self.recall_at_fpr:.4f} adversarial_recall={self.adversarial_recall:.4f} "
            f"(pos={self.positives} neg={self.negatives} attacked={self.attacked})"
        )


def evaluate(clean_scores, attacked_scores, labels, alpha: float = 0.01, norm_cap: float = 0.0,
             threshold: float | None = None, attacked_mask=None) -> EvalReport:
    """Clean vs adversarial report for one model.

    ``attacked_scores`` are the model's scores on the clean rows with positives
    replaced by their best attacks. The operating threshold comes from the clean
    scores unless given. Success counts flagged positives pushed below it.
    """
    clean = np.asarray(clean_scores, float)
    adv = np.asarray(attacked_scores, float)
    labels = np.asarray(labels)
    if clean.shape != adv.shape or clean.shape != labels.shape:
        raise MetricError("clean and attacked rows do not match")
    pos = labels == 1
    if np.any(adv[~pos] != clean[~pos]):
        raise MetricError("attacked rows may only differ from clean rows on positives")
    if threshold is None:
        threshold = operating_threshold(clean, labels, alpha)
    flagged = pos & (clean >= threshold)
    flipped = flagged & (adv < threshold)
    if attacked_mask is None:
        attacked_mask = pos
    return EvalReport(
        clean_pauc=pauc_at_fpr(clean, labels, alpha),
        adversarial_pauc=pauc_at_fpr(adv, labels, alpha),
        success_rate=float(flipped.sum() / flagged.sum()) if flagged.any() else 0.0,
        recall_at_fpr=float(flagged.sum() / pos.sum()),
        adversarial_recall=float((pos & (adv >= threshold)).sum() / pos.sum()),
        operating_threshold=float(threshold),
        norm_cap=float(norm_cap),
        positives=int(pos.sum()),
        negatives=int((~pos).sum()),
        attacked=int(np.sum(attacked_mask)),
    )


def write_reports(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def report_row(report: EvalReport, **extra) -> dict:
    return {**extra, **asdict(report)}


REPORT_FIELDS = [f.name for f in fields(EvalReport)]
