"""Evaluation metrics (confusion matrix, per-class and weighted F1) and
the paired t-test with a continued-fraction Student-t CDF.
"""

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class EvalMetrics:
    confusion: np.ndarray       # (C, C), rows = true class, cols = predicted
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    weighted_f1: float
    macro_f1: float


def confusion_matrix(predictions, targets, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for pred, true in zip(predictions, targets):
        cm[true, pred] += 1
    return cm


def evaluate(predictions, targets, n_classes):
    """Per-class precision/recall/F1 plus weighted and macro aggregates.

    F1 is defined as 0 when precision + recall is 0.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if len(predictions) != len(targets):
        raise ValueError("prediction/target length mismatch")
    if len(targets) == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    cm = confusion_matrix(predictions, targets, n_classes)
    support = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    tp = np.diag(cm).astype(np.float64)
    precision = np.where(pred_count > 0, tp / np.maximum(pred_count, 1), 0.0)
    recall = np.where(support > 0, tp / np.maximum(support, 1), 0.0)
    pr = precision + recall
    f1 = np.where(pr > 0, 2.0 * precision * recall / np.maximum(pr, 1e-300), 0.0)
    total = support.sum()
    weighted_f1 = float((f1 * support).sum() / total)
    return EvalMetrics(
        confusion=cm, precision=precision, recall=recall, f1=f1,
        support=support,
        accuracy=float(tp.sum() / total),
        weighted_f1=weighted_f1,
        macro_f1=float(f1.mean()),
    )


# ---------------------------------------------------------------------------
# Student-t machinery: regularized incomplete beta via Lentz's continued
# fraction (Numerical Recipes betacf), accurate to ~1e-14


def _betacf(a, b, x):
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def betainc_reg(a, b, x):
    """Regularized incomplete beta I_x(a, b)."""
    if not (0.0 <= x <= 1.0):
        raise ValueError(f"x={x} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t, df):
    """Two-sided tail probability P(|T| >= |t|) for T ~ Student-t(df)."""
    if df < 1:
        raise ValueError("degrees of freedom must be >= 1")
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(scores_a, scores_b):
    """Classic paired t-test; returns (t statistic, two-sided p value).

    Zero-variance differences degenerate to (+/-inf, 0.0) for a nonzero
    mean and (0.0, 1.0) when every difference is zero.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired t-test needs two equal-length 1-D samples")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return float(t), float(student_t_sf2(t, n - 1))
