"""Outcome labels and evaluation metrics.

The outcome label is derived from motor scores: improvement rate
(pre - post) / pre, thresholded at tau (ties count as responders).
Classification metrics are kept as exact rationals internally and formatted
to two decimals only at presentation time.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .clinical import ClinicalRecord
from .errors import (
    EmptyClass,
    EmptyInput,
    MissingPostScore,
    SingleClassCohort,
    ZeroBaseline,
)
from .seeding import stream

DEFAULT_TAU = 0.30


@dataclass(frozen=True)
class OutcomeLabel:
    improvement: float
    label: int
    tau: float


def improvement_rate(rec: ClinicalRecord, tau: float = DEFAULT_TAU) -> OutcomeLabel:
    """Relative motor improvement and its thresholded binary label.

    A subject exactly at the threshold counts as a responder.
    """
    if rec.updrs3_post is None:
        raise MissingPostScore(f"subject {rec.subject_id!r} has no postoperative score")
    if rec.updrs3_pre == 0:
        raise ZeroBaseline(f"subject {rec.subject_id!r} has zero baseline score")
    rate = (rec.updrs3_pre - rec.updrs3_post) / rec.updrs3_pre
    return OutcomeLabel(improvement=rate, label=1 if rate >= tau else 0, tau=tau)


def balance_indices(labels: list[int], seed: int) -> list[int]:
    """Indices to keep after seeded majority-class downsampling.

    The minority class is untouched; input order is preserved among the kept
    items. Requires both classes to be present.
    """
    pos = [i for i, y in enumerate(labels) if y == 1]
    neg = [i for i, y in enumerate(labels) if y == 0]
    if not pos or not neg:
        raise SingleClassCohort("both outcome classes are required for balancing")
    if len(pos) == len(neg):
        return list(range(len(labels)))
    majority, minority = (pos, neg) if len(pos) > len(neg) else (neg, pos)
    rng = stream(seed, "balance")
    keep = rng.choice(len(majority), size=len(minority), replace=False)
    kept = set(majority[i] for i in keep) | set(minority)
    return sorted(kept)


def balance_downsample(
    records: list[ClinicalRecord], seed: int, tau: float = DEFAULT_TAU
) -> list[ClinicalRecord]:
    """Randomly drop majority-class records until classes match in size."""
    labels = [improvement_rate(rec, tau).label for rec in records]
    return [records[i] for i in balance_indices(labels, seed)]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fn: int
    fp: int
    tn: int

    @classmethod
    def from_pairs(cls, predicted: np.ndarray, actual: np.ndarray) -> "ConfusionCounts":
        predicted = np.asarray(predicted).astype(int)
        actual = np.asarray(actual).astype(int)
        if predicted.shape != actual.shape:
            raise ValueError("prediction and label vectors differ in length")
        return cls(
            tp=int(np.sum((predicted == 1) & (actual == 1))),
            fn=int(np.sum((predicted == 0) & (actual == 1))),
            fp=int(np.sum((predicted == 1) & (actual == 0))),
            tn=int(np.sum((predicted == 0) & (actual == 0))),
        )

    @property
    def n(self) -> int:
        return self.tp + self.fn + self.fp + self.tn


def classification_metrics(counts: ConfusionCounts) -> dict[str, Fraction]:
    """Accuracy, true positive rate, false positive rate as exact fractions."""
    if counts.tp + counts.fn == 0:
        raise EmptyClass("no positive subjects: TPR undefined")
    if counts.fp + counts.tn == 0:
        raise EmptyClass("no negative subjects: FPR undefined")
    return {
        "acc": Fraction(counts.tp + counts.tn, counts.n),
        "tpr": Fraction(counts.tp, counts.tp + counts.fn),
        "fpr": Fraction(counts.fp, counts.fp + counts.tn),
    }


def format_percent(value: Fraction | float) -> str:
    """Presentation form: percentage with exactly two decimals."""
    return f"{float(value) * 100.0:.2f}"


@dataclass
class CalibrationBin:
    lower: float
    upper: float
    count: int
    mean_prob: float
    frac_positive: float


@dataclass
class CalibrationReport:
    ece: float
    bins: list[CalibrationBin]
    n: int


def calibration_report(
    probs: np.ndarray, labels: np.ndarray, n_bins: int = 10
) -> CalibrationReport:
    """Expected calibration error over equal-width probability bins.

    Bin b covers [b/B, (b+1)/B), with the last bin closed at 1. Empty bins
    are skipped. ECE is the count-weighted mean absolute gap between mean
    predicted probability and observed positive fraction.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if probs.size == 0:
        raise EmptyInput("calibration requested over zero predictions")
    if probs.shape != labels.shape:
        raise ValueError("probs and labels differ in length")
    if np.any(probs < 0) or np.any(probs > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    idx = np.minimum((probs * n_bins).astype(int), n_bins - 1)
    bins = []
    ece = 0.0
    for b in range(n_bins):
        sel = idx == b
        count = int(sel.sum())
        if count == 0:
            continue
        mean_prob = float(probs[sel].mean())
        frac_pos = float(labels[sel].mean())
        bins.append(
            CalibrationBin(
                lower=b / n_bins,
                upper=(b + 1) / n_bins,
                count=count,
                mean_prob=mean_prob,
                frac_positive=frac_pos,
            )
        )
        ece += (count / probs.size) * abs(mean_prob - frac_pos)
    return CalibrationReport(ece=ece, bins=bins, n=int(probs.size))


@dataclass
class NetBenefitRow:
    threshold: float
    model: float
    treat_all: float
    treat_none: float


def default_thresholds() -> np.ndarray:
    """Decision thresholds 0.05 .. 0.95 in steps of 0.05."""
    return np.round(np.arange(1, 20) * 0.05, 10)


def decision_curve(
    probs: np.ndarray, labels: np.ndarray, thresholds: np.ndarray | None = None
) -> list[NetBenefitRow]:
    """Net benefit of treating above each threshold, vs treat-all/treat-none.

    Net benefit at threshold t is TP/N - (FP/N) * t/(1-t); treating everyone
    gives prevalence - (1-prevalence) * t/(1-t); treating no one gives 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if probs.size == 0:
        raise EmptyInput("decision curve requested over zero predictions")
    if probs.shape != labels.shape:
        raise ValueError("probs and labels differ in length")
    if thresholds is None:
        thresholds = default_thresholds()
    n = probs.size
    prevalence = labels.mean()
    rows = []
    for t in np.asarray(thresholds, dtype=np.float64):
        if not 0.0 < t < 1.0:
            raise ValueError(f"thresholds must lie strictly inside (0, 1), got {t}")
        treat = probs >= t
        tp = float(np.sum(treat & (labels == 1)))
        fp = float(np.sum(treat & (labels == 0)))
        odds = t / (1.0 - t)
        rows.append(
            NetBenefitRow(
                threshold=float(t),
                model=tp / n - (fp / n) * odds,
                treat_all=float(prevalence) - (1.0 - float(prevalence)) * odds,
                treat_none=0.0,
            )
        )
    return rows
