"""Evaluation metrics: micro/macro F1 and AUC, precision at a cutoff,
per-class expected calibration error with equal-width bins, and group
prevalence errors (MAE and smoothed MRAE)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class EvalBatch:
    """Per-document per-class probabilities with binary gold labels."""

    probabilities: np.ndarray  # (docs, classes) in [0, 1]
    gold: np.ndarray           # (docs, classes) in {0, 1}

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        self.gold = np.asarray(self.gold)
        if self.probabilities.shape != self.gold.shape:
            raise ValueError(f"probabilities {self.probabilities.shape} and gold "
                             f"{self.gold.shape} shapes differ")
        if self.probabilities.size == 0:
            raise ValueError("empty evaluation batch")
        if self.probabilities.min() < 0 or self.probabilities.max() > 1:
            raise ValueError("probabilities outside [0, 1]")
        if not np.isin(self.gold, (0, 1)).all():
            raise ValueError("gold labels must be binary")
        self.gold = self.gold.astype(np.int8)

    @property
    def num_docs(self) -> int:
        return self.probabilities.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probabilities.shape[1]


def _f1(tp: float, fp: float, fn: float) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom > 0 else 0.0


def f1_scores(batch: EvalBatch, threshold: float = 0.5) -> tuple[float, float]:
    """(macro F1, micro F1) at a decision threshold.

    Micro pools true/false positives and negatives over every (document,
    class) pair; macro averages per-class F1, counting fully degenerate
    classes (no gold positives, no predictions) as zero.
    """
    pred = batch.probabilities >= threshold
    gold = batch.gold.astype(bool)
    tp = (pred & gold).sum(axis=0).astype(float)
    fp = (pred & ~gold).sum(axis=0).astype(float)
    fn = (~pred & gold).sum(axis=0).astype(float)
    macro = float(np.mean([_f1(tp[l], fp[l], fn[l])
                           for l in range(batch.num_classes)]))
    micro = _f1(tp.sum(), fp.sum(), fn.sum())
    return macro, micro


def precision_at_n(batch: EvalBatch, n: int) -> float:
    """Mean over documents of the gold fraction among the top-n scores.

    Score ties break by class index.  Documents without gold codes
    contribute zero.
    """
    if n < 1:
        raise ValueError(f"cutoff must be at least 1, got {n}")
    if n > batch.num_classes:
        raise ValueError(f"cutoff {n} exceeds the number of classes "
                         f"{batch.num_classes}")
    hits = []
    for probs, gold in zip(batch.probabilities, batch.gold):
        top = np.argsort(-probs, kind="stable")[:n]
        hits.append(gold[top].sum() / n)
    return float(np.mean(hits))


def _rank_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """AUC as the Mann-Whitney statistic; ties count one half."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_scores(batch: EvalBatch) -> tuple[float, float]:
    """(macro AUC, micro AUC).

    Micro pools every (document, class) pair into one ranking; macro
    averages AUC over classes that have both a positive and a negative,
    skipping degenerate classes.  If no class qualifies, that is an error.
    """
    per_class = []
    for l in range(batch.num_classes):
        labels = batch.gold[:, l]
        if labels.min() == labels.max():
            continue
        per_class.append(_rank_auc(batch.probabilities[:, l], labels))
    if not per_class:
        raise ValueError("no class has both a positive and a negative example")
    flat_scores = batch.probabilities.reshape(-1)
    flat_labels = batch.gold.reshape(-1)
    if flat_labels.min() == flat_labels.max():
        raise ValueError("pooled batch has only one label value")
    return float(np.mean(per_class)), _rank_auc(flat_scores, flat_labels)


@dataclass
class CalibrationTable:
    """Equal-width probability bins per class: counts, mean confidence,
    and empirical positive fraction."""

    counts: np.ndarray     # (classes, bins)
    mean_conf: np.ndarray  # (classes, bins), zero where empty
    pos_frac: np.ndarray   # (classes, bins), zero where empty

    @property
    def num_bins(self) -> int:
        return self.counts.shape[1]


def calibration_table(batch: EvalBatch, bins: int = 20) -> CalibrationTable:
    if bins < 1:
        raise ValueError(f"need at least one bin, got {bins}")
    n, L = batch.num_docs, batch.num_classes
    idx = np.minimum((batch.probabilities * bins).astype(int), bins - 1)
    counts = np.zeros((L, bins))
    conf = np.zeros((L, bins))
    pos = np.zeros((L, bins))
    for l in range(L):
        np.add.at(counts[l], idx[:, l], 1.0)
        np.add.at(conf[l], idx[:, l], batch.probabilities[:, l])
        np.add.at(pos[l], idx[:, l], batch.gold[:, l])
    occupied = counts > 0
    mean_conf = np.where(occupied, conf / np.maximum(counts, 1), 0.0)
    pos_frac = np.where(occupied, pos / np.maximum(counts, 1), 0.0)
    return CalibrationTable(counts=counts, mean_conf=mean_conf, pos_frac=pos_frac)


def mece(batch: EvalBatch, bins: int = 20) -> tuple[float, np.ndarray]:
    """Mean expected calibration error over classes, plus the per-class
    vector.  Per class: sum over bins of (bin weight) * |positive fraction -
    mean confidence|."""
    table = calibration_table(batch, bins)
    weights = table.counts / batch.num_docs
    per_class = (weights * np.abs(table.pos_frac - table.mean_conf)).sum(axis=1)
    return float(per_class.mean()), per_class


def quant_errors(estimates: Sequence[np.ndarray], truths: Sequence[np.ndarray],
                 sizes: Sequence[int]) -> tuple[float, float]:
    """Group-averaged (MAE, MRAE) of prevalence estimates.

    MRAE smooths the denominator with 1/(2*group size) so empty classes do
    not divide by zero; the smoothing therefore shrinks with group size.
    """
    if not (len(estimates) == len(truths) == len(sizes)):
        raise ValueError("estimates, truths, and sizes must align")
    if len(estimates) == 0:
        raise ValueError("no groups to evaluate")
    maes, mraes = [], []
    for est, truth, size in zip(estimates, truths, sizes):
        if size < 1:
            raise ValueError(f"group size must be positive, got {size}")
        est = np.asarray(est, dtype=np.float64)
        truth = np.asarray(truth, dtype=np.float64)
        if est.shape != truth.shape:
            raise ValueError(f"estimate shape {est.shape} does not match truth "
                             f"{truth.shape}")
        diff = np.abs(est - truth)
        eps = 1.0 / (2.0 * size)
        maes.append(diff.mean())
        mraes.append((diff / (truth + eps)).mean())
    return float(np.mean(maes)), float(np.mean(mraes))


def per_class_report(batch: EvalBatch, bins: int = 20,
                     threshold: float = 0.5) -> list[dict]:
    """Per-class rows (f1, auc, ece, prevalence) for the report CSV."""
    pred = batch.probabilities >= threshold
    gold = batch.gold.astype(bool)
    _, per_class_ece = mece(batch, bins)
    rows = []
    for l in range(batch.num_classes):
        tp = float((pred[:, l] & gold[:, l]).sum())
        fp = float((pred[:, l] & ~gold[:, l]).sum())
        fn = float((~pred[:, l] & gold[:, l]).sum())
        labels = batch.gold[:, l]
        auc = (_rank_auc(batch.probabilities[:, l], labels)
               if labels.min() != labels.max() else float("nan"))
        rows.append({
            "class": l,
            "f1": _f1(tp, fp, fn),
            "auc": auc,
            "ece": float(per_class_ece[l]),
            "prevalence": float(gold[:, l].mean()),
        })
    return rows
