"""Evaluation metrics for liveness scoring: ROC-AUC, EER threshold, HTER.

Convention: label 1 = real/live, label 0 = fake/spoof. A sample is
accepted as real when its score is >= the threshold, so

    FAR = fraction of fakes accepted   (score >= threshold)
    FRR = fraction of reals rejected   (score <  threshold)

The EER threshold is selected on the evaluation scores themselves — the
usual protocol for cross-domain anti-spoofing reporting, but note that it
flatters HTER compared to thresholding on a held-out development split.
"""

from __future__ import annotations

import numpy as np


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ValueError(f"scores/labels must be matching 1-d arrays, got "
                         f"{scores.shape} vs {labels.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    present = set(np.unique(labels))
    if present - {0, 1}:
        raise ValueError(f"labels must be 0/1, found {sorted(present)}")
    if present != {0, 1}:
        raise ValueError("both classes must be present")
    return scores, labels.astype(np.int64)


def roc_auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted 1/2.

    Computed with the rank formula (average ranks on ties), which equals
    exhaustive pair counting exactly: ranks are half-integers, so the
    arithmetic is exact in float64.
    """
    scores, labels = _validate(scores, labels)
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0   # average 1-based rank
        i = j + 1
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    rank_sum = ranks[labels == 1].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def far_frr(scores, labels, threshold: float) -> tuple[float, float]:
    """(false-accept rate, false-reject rate) at the given threshold."""
    scores, labels = _validate(scores, labels)
    fakes = scores[labels == 0]
    reals = scores[labels == 1]
    return (float(np.mean(fakes >= threshold)),
            float(np.mean(reals < threshold)))


def eer_threshold(scores, labels) -> tuple[float, float, float]:
    """Threshold minimizing |FAR - FRR|; returns (threshold, far, frr).

    Candidates are the observed scores plus midpoints between adjacent
    distinct scores; ties on |FAR - FRR| break toward the lower threshold.
    """
    scores, labels = _validate(scores, labels)
    uniq = np.unique(scores)
    candidates = np.sort(np.concatenate([uniq, (uniq[:-1] + uniq[1:]) / 2.0]))
    best = None
    for thr in candidates:
        fa, fr = far_frr(scores, labels, float(thr))
        gap = abs(fa - fr)
        if best is None or gap < best[0]:
            best = (gap, float(thr), fa, fr)
    return best[1], best[2], best[3]


def hter(scores, labels, threshold: float) -> float:
    """(FAR + FRR) / 2 at the given threshold."""
    fa, fr = far_frr(scores, labels, threshold)
    return (fa + fr) / 2.0
