"""ELBO scoring, threshold calibration, F1, Wilcoxon test and PCA export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule, elbo
from .errors import ContractError, UndefinedResultError


@dataclass(frozen=True)
class ThresholdConfig:
    trim: float = 0.1
    k: float = 1.5

    def __post_init__(self):
        if not 0.0 <= self.trim < 0.5 or not self.k >= 0.0:
            raise ContractError(f"need 0 <= trim < 0.5 and k >= 0, got trim={self.trim}, k={self.k}")


@dataclass(frozen=True)
class ScoreReport:
    scores: np.ndarray
    threshold: float
    verdicts: np.ndarray
    truth: np.ndarray
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    zero_division: bool

    def metrics(self) -> dict:
        keys = ("precision", "recall", "f1", "threshold", "tp", "fp", "fn", "tn", "zero_division")
        return {k: getattr(self, k) for k in keys}


def score_windows(windows, model, schedule: NoiseSchedule, seed: int = 0, steps: int | None = None) -> np.ndarray:
    """Negative ELBO per window.

    The same seeded noise sequence is used for every window, so a window's
    score does not depend on its position or on the other windows scored.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3:
        raise ContractError(f"expected (N, L, C) windows, got {windows.shape}")
    if windows.shape[0] == 0:
        return np.empty(0)
    return np.asarray(elbo(windows, model, schedule, seed=seed, steps=steps))


def calibrate_threshold(scores, config: ThresholdConfig = ThresholdConfig()) -> float:
    """``trimmed mean + k * IQR`` of validation scores (linear-interpolation quantiles)."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    n = s.size
    if n < 10:
        raise ContractError(f"threshold calibration needs at least 10 scores, got {n}")
    if not np.all(np.isfinite(s)):
        raise ContractError("validation scores contain non-finite values")
    cut = int(math.floor(config.trim * n))
    mu = float(np.mean(s[cut : n - cut]))
    q1, q3 = np.quantile(s, [0.25, 0.75], method="linear")
    return mu + config.k * float(q3 - q1)


def classify_and_f1(scores, threshold: float, truth) -> ScoreReport:
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    if scores.shape != truth.shape or scores.ndim != 1:
        raise ContractError(f"scores {scores.shape} and labels {truth.shape} must be equal-length vectors")
    verdicts = scores > threshold
    tp = int(np.sum(verdicts & truth))
    fp = int(np.sum(verdicts & ~truth))
    fn = int(np.sum(~verdicts & truth))
    tn = int(np.sum(~verdicts & ~truth))
    flag = False
    if tp + fp == 0:
        precision, flag = 0.0, True
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall, flag = 0.0, True
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0.0:
        f1, flag = 0.0, True
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return ScoreReport(scores, float(threshold), verdicts, truth, precision, recall, f1, tp, fp, fn, tn, flag)


# -- Wilcoxon signed-rank ------------------------------------------------------------


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size)
    sv = values[order]
    i = 0
    while i < sv.size:
        j = i
        while j + 1 < sv.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


@lru_cache(maxsize=None)
def _signed_rank_counts(doubled_ranks: tuple[int, ...]) -> np.ndarray:
    """Number of sign patterns giving each value of 2 * W+ (ranks doubled to stay integral)."""
    total = sum(doubled_ranks)
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a, b) -> tuple[float, float]:
    """Two-sided paired test; returns (W, p) with W the smaller of the signed-rank sums.

    Zero differences are discarded and tied magnitudes get mid-ranks.  With
    at most 25 non-zero pairs the p-value is exact (enumeration over sign
    patterns by counting); above that a tie-corrected normal approximation is
    used.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    if not 5 <= a.size <= 50:
        raise ContractError(f"wilcoxon_signed_rank supports 5..50 pairs, got {a.size}")
    d = a - b
    d = d[d != 0.0]
    if d.size == 0:
        raise UndefinedResultError("all paired differences are zero; the signed-rank test is undefined")
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    n = d.size
    if n <= 25:
        doubled = tuple(int(round(2 * r)) for r in ranks)
        counts = _signed_rank_counts(doubled)
        k = int(round(2 * w))
        tail = sum(counts[: k + 1])
        p = min(1.0, 2.0 * float(tail) / float(2**n))
        return w, p
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    z = (w - mean) / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return w, min(1.0, p)


def wilcoxon_critical_value(n: int, alpha: float = 0.05) -> int:
    """Largest W whose exact two-sided p-value is at most ``alpha`` (-1 when none is)."""
    if n < 1:
        raise ContractError("need at least one pair")
    counts = _signed_rank_counts(tuple(2 * r for r in range(1, n + 1)))
    tail, crit = 0, -1
    for w in range(n * (n + 1) // 2 + 1):
        tail += counts[2 * w]
        if 2.0 * float(tail) / float(2**n) <= alpha:
            crit = w
        else:
            break
    return crit


# -- PCA -------------------------------------------------------------------------------


@dataclass(frozen=True)
class PcaResult:
    reference: np.ndarray
    generated: np.ndarray
    ratios: np.ndarray
    components: np.ndarray
    mean: np.ndarray


def pca2(reference, generated) -> PcaResult:
    """Fit on the flattened reference windows; project both sets onto the top two components.

    ``ratios`` are the explained-variance shares of the two components.
    """
    ref = np.asarray(reference, dtype=np.float64)
    gen = np.asarray(generated, dtype=np.float64)
    ref = ref.reshape(ref.shape[0], -1)
    gen = gen.reshape(gen.shape[0], -1)
    if ref.shape[0] < 2 or gen.shape[0] < 2:
        raise ContractError("PCA needs at least two windows in each set")
    if ref.shape[1] != gen.shape[1]:
        raise ContractError(f"reference and generated windows differ in size: {ref.shape[1]} vs {gen.shape[1]}")
    mean = ref.mean(axis=0)
    centred = ref - mean
    cov = centred.T @ centred / (ref.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals[::-1], 0.0, None)
    vecs = vecs[:, ::-1]
    total = vals.sum()
    if not total > 0.0:
        raise ContractError("reference data has zero variance (rank 0)")
    comps = vecs[:, :2]
    # fix the sign so results do not depend on the eigensolver
    flip = np.sign(comps[np.argmax(np.abs(comps), axis=0), np.arange(comps.shape[1])])
    comps = comps * np.where(flip == 0, 1.0, flip)
    ratios = vals[:2] / total
    return PcaResult(centred @ comps, (gen - mean) @ comps, ratios, comps, mean)


# -- files -------------------------------------------------------------------------------


def write_scores_csv(report: ScoreReport, path, window_ids=None) -> None:
    ids = np.arange(report.scores.size) if window_ids is None else np.asarray(window_ids)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_id", "score", "verdict", "truth"])
        for i, s, v, t in zip(ids.tolist(), report.scores.tolist(), report.verdicts.tolist(), report.truth.tolist()):
            w.writerow([i, repr(s), int(v), int(t)])


def write_metrics_json(report: ScoreReport, path, config: dict | None = None) -> None:
    payload = report.metrics()
    payload["config"] = config or {}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_pca_csv(result: PcaResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["set", "pc1", "pc2"])
        for name, pts in (("original", result.reference), ("generated", result.generated)):
            for p1, p2 in pts.tolist():
                w.writerow([name, repr(p1), repr(p2)])
    ratio_path = Path(path).with_suffix(".ratios.json")
    with open(ratio_path, "w", encoding="utf-8") as fh:
        json.dump({"explained_variance_ratio": result.ratios.tolist()}, fh, indent=2)
        fh.write("\n")


__all__ = [
    "ThresholdConfig",
    "ScoreReport",
    "PcaResult",
    "score_windows",
    "calibrate_threshold",
    "classify_and_f1",
    "wilcoxon_signed_rank",
    "wilcoxon_critical_value",
    "pca2",
    "write_scores_csv",
    "write_metrics_json",
    "write_pca_csv",
]
