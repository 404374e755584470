"""Image- and pixel-level ranking metrics and the evaluation harness.

AUC uses the rank-statistic form with average ranks for ties, so an all-tied
score set degrades to 0.5. AP integrates the precision-recall curve stepwise
with tied scores grouped at a single threshold. Both are invariant under
strictly monotone transforms of the scores.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, UndefinedMetricError

METRIC_KEYS = ("i_auc", "i_ap", "p_auc", "p_ap")


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    level: str = "image"  # {image, pixel}


@dataclass
class MetricsReport:
    per_class: dict[str, dict[str, float]]
    mean: dict[str, float]
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"per_class": self.per_class, "mean": self.mean, "skipped": self.skipped}

    def format_table(self) -> str:
        """Plain-text table: one row per class plus Mean; columns AUC, AP, P-AUC, P-AP."""
        header = ["Class", "AUC", "AP", "P-AUC", "P-AP"]
        rows = [header]
        for cls in sorted(self.per_class):
            m = self.per_class[cls]
            rows.append([cls] + [f"{100 * m[k]:.2f}" for k in METRIC_KEYS])
        rows.append(["Mean"] + [f"{100 * self.mean[k]:.2f}" for k in METRIC_KEYS])
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = []
        for i, row in enumerate(rows):
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
            if i == 0:
                lines.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
        if self.skipped:
            lines.append(f"(skipped, no anomalous test samples: {', '.join(self.skipped)})")
        return "\n".join(lines) + "\n"


def image_score(anomaly_map: np.ndarray) -> float:
    """Image-level score: maximum of the anomaly map."""
    return float(np.max(anomaly_map))


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the rank statistic; tied scores get
    average ranks (equivalent to counting tied pairs at weight 0.5)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Stepwise PR integration sum_k (R_k - R_{k-1}) * P_k over descending
    distinct-score thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise UndefinedMetricError("average_precision needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s_sorted = scores[order]
    y_sorted = (labels[order] == 1).astype(np.float64)
    # last index of each tied group = one threshold per distinct score
    boundary = np.nonzero(np.diff(s_sorted))[0]
    group_ends = np.concatenate([boundary, [len(s_sorted) - 1]])
    tp = np.cumsum(y_sorted)[group_ends]
    n_at = group_ends + 1.0
    precision = tp / n_at
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def _gaussian_smooth(arr: np.ndarray, sigma: float) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    return gaussian_filter(arr, sigma=sigma)


def evaluate(model, corpus, smooth_sigma: float = 0.0) -> MetricsReport:
    """Per-class and mean AUC/AP at image and pixel level.

    ``model`` needs a ``predict_map(sample) -> (H, W) float array`` method.
    Pixel scores are pooled over all test pixels of a class (normal test
    images contribute all-negative pixels). Classes without any anomalous
    test sample are excluded from the mean with a warning.
    """
    per_class: dict[str, dict[str, float]] = {}
    skipped: list[str] = []
    for cls in corpus.classes:
        tests = corpus.test_samples(cls)
        if not tests:
            skipped.append(cls)
            continue
        missing = [s.sample_id for s in tests if s.is_anomalous and s.mask is None]
        if missing:
            raise DataError(f"class {cls!r} has anomalous test samples without masks: {missing}")
        img_scores, img_labels = [], []
        pix_scores, pix_labels = [], []
        for s in tests:
            amap = np.asarray(model.predict_map(s), dtype=np.float64)
            if smooth_sigma > 0:
                amap = _gaussian_smooth(amap, smooth_sigma)
            img_scores.append(image_score(amap))
            img_labels.append(1 if s.is_anomalous else 0)
            pix_scores.append(amap.reshape(-1))
            pix_labels.append(s.mask.astype(np.int64).reshape(-1))
        if not any(img_labels) or all(img_labels):
            skipped.append(cls)
            warnings.warn(f"class {cls!r} lacks anomalous (or normal) test samples; skipped")
            continue
        img_scores = np.asarray(img_scores)
        img_labels = np.asarray(img_labels)
        pix_scores = np.concatenate(pix_scores)
        pix_labels = np.concatenate(pix_labels)
        per_class[cls] = {
            "i_auc": roc_auc(img_scores, img_labels),
            "i_ap": average_precision(img_scores, img_labels),
            "p_auc": roc_auc(pix_scores, pix_labels),
            "p_ap": average_precision(pix_scores, pix_labels),
        }
    if not per_class:
        raise DataError("no class had both anomalous and normal test samples")
    mean = {k: float(np.mean([m[k] for m in per_class.values()])) for k in METRIC_KEYS}
    return MetricsReport(per_class=per_class, mean=mean, skipped=skipped)
