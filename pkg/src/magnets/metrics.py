"""Regression metrics and ground-truth explanation scoring."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata


def rmse(y, y_hat) -> float:
    y, y_hat = np.asarray(y, dtype=float), np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def r2(y, y_hat) -> float:
    """Coefficient of determination, total sum of squares about ``mean(y)``."""
    y, y_hat = np.asarray(y, dtype=float), np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.size < 2:
        raise ValueError("r2 needs two equal-length arrays with at least 2 entries")
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise ValueError("r2 is undefined for constant targets")
    return float(1.0 - np.sum((y - y_hat) ** 2) / ss_tot)


def pool_channels(a: np.ndarray) -> np.ndarray:
    """Per-time-step maximum over channels: [..., C, T] -> [..., T]."""
    return np.asarray(a).max(axis=-2)


def normalize_attribution(attr: np.ndarray) -> np.ndarray:
    """Scale by the largest magnitude in the sample, then take absolute values."""
    attr = np.asarray(attr, dtype=float)
    if not np.all(np.isfinite(attr)):
        raise ValueError("attribution contains non-finite values")
    top = np.abs(attr).max() if attr.size else 0.0
    if top == 0:
        return np.zeros_like(attr)
    return np.abs(attr / top)


def magnets_mask_scores(masks: np.ndarray, feature_weights: np.ndarray, pool: str = "weighted") -> np.ndarray:
    """Turn binary masks [C, M, T] into relevance scores [C, T] in [0, 1].

    Each mask is weighted by its end-to-end weight magnitude relative to the
    largest one; masks below 1e-6 of the largest contribute nothing. With
    ``pool="union"`` every surviving mask counts with weight 1.
    """
    w = np.abs(np.asarray(feature_weights, dtype=float))
    top = w.max() if w.size else 0.0
    if top == 0:
        return np.zeros((masks.shape[0], masks.shape[2]))
    rel = w / top
    rel = np.where(rel < 1e-6, 0.0, rel)
    if pool == "union":
        rel = (rel > 0).astype(float)
    elif pool != "weighted":
        raise ValueError(f"unknown mask pooling {pool!r}")
    return (masks * rel[:, :, None]).max(axis=1)


def magnets_mask_to_score(explanation, pool: str = "weighted") -> np.ndarray:
    return magnets_mask_scores(explanation.masks, explanation.feature_weights, pool)


def explanation_auc(score, gt) -> float:
    """ROC AUC of ``score`` ranking ``gt``; tied pairs count 1/2.

    Returns NaN when ``gt`` has a single class.
    """
    score = np.asarray(score, dtype=float).ravel()
    gt = np.asarray(gt).ravel().astype(bool)
    n_pos = int(gt.sum())
    n_neg = gt.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(score)
    return float((ranks[gt].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def explanation_f1(score, gt, threshold: float = 0.5) -> float:
    pred = np.asarray(score, dtype=float).ravel() > threshold
    gt = np.asarray(gt).ravel().astype(bool)
    tp = int(np.sum(pred & gt))
    n_pred, n_true = int(pred.sum()), int(gt.sum())
    if n_pred == 0:
        return 1.0 if n_true == 0 else 0.0
    return 2.0 * tp / (n_pred + n_true)


@dataclass
class ExplanationScore:
    auc: np.ndarray  # per evaluated sample; NaN where gt has one class
    f1: np.ndarray
    n_evaluated: int
    n_skipped: int

    @property
    def auc_mean(self) -> float:
        ok = ~np.isnan(self.auc)
        return float(self.auc[ok].mean()) if ok.any() else float("nan")

    @property
    def f1_mean(self) -> float:
        return float(self.f1.mean()) if self.f1.size else float("nan")


def score_explanations(scores: np.ndarray, gt: np.ndarray) -> ExplanationScore:
    """Score [N, C, T] relevance maps against [N, C, T] ground truth.

    Both are pooled over channels first; samples whose pooled truth is empty
    are skipped.
    """
    pooled_s = pool_channels(scores)
    pooled_g = pool_channels(gt)
    aucs, f1s = [], []
    skipped = 0
    for s, g in zip(pooled_s, pooled_g):
        if not g.any():
            skipped += 1
            continue
        aucs.append(explanation_auc(s, g))
        f1s.append(explanation_f1(s, g))
    return ExplanationScore(np.asarray(aucs, dtype=float), np.asarray(f1s, dtype=float),
                            len(f1s), skipped)


@dataclass
class MetricsReport:
    dataset: str
    model: str
    rmse_raw: float
    r2: float
    lambda_spars: float | None = None
    lambda_ortho: float | None = None
    expl_auc_mean: float | None = None
    expl_f1_mean: float | None = None
    n_evaluated: int | None = None
    n_skipped: int | None = None
    seed: int | None = None
    wall_ms: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if not d["extra"]:
            d.pop("extra")
        if self.expl_f1_mean is None:
            for key in ("expl_auc_mean", "expl_f1_mean", "n_evaluated", "n_skipped"):
                d.pop(key)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
