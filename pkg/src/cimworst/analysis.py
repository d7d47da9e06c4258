"""Diagnostics for worst-case networks: confidence, confusion and perturbation shape."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Mapping, Optional

import numpy as np

NUM_BINS = 20
PERTURBED_FRACTION = 0.05  # |dW| above this fraction of th_g counts as perturbed


@dataclass
class ConfidenceAnalysis:
    mean_correct: Optional[float]
    mean_wrong: Optional[float]
    hist_correct: List[int]
    hist_wrong: List[int]
    bin_edges: List[float]


def analyze_confidence(confidence, correct) -> ConfidenceAnalysis:
    """Mean softmax confidence over correct and wrong samples, plus 20-bin histograms on [0, 1].

    A mean over an empty set is ``None`` rather than zero.
    """
    conf = np.asarray(confidence, dtype=np.float64)
    ok = np.asarray(correct, dtype=bool)
    edges = np.linspace(0.0, 1.0, NUM_BINS + 1)
    hc, _ = np.histogram(conf[ok], bins=edges)
    hw, _ = np.histogram(conf[~ok], bins=edges)
    return ConfidenceAnalysis(
        float(conf[ok].mean()) if ok.any() else None,
        float(conf[~ok].mean()) if (~ok).any() else None,
        hc.tolist(), hw.tolist(), edges.tolist(),
    )


@dataclass
class ConfusionAnalysis:
    counts: np.ndarray
    normalized: np.ndarray
    sink_class: Optional[int]
    sink_share: float   # fraction of all misclassifications predicted as the sink class


def analyze_confusion(true, predicted, num_classes: int = 10) -> ConfusionAnalysis:
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (np.asarray(true), np.asarray(predicted)), 1)
    rows = counts.sum(axis=1, keepdims=True)
    normalized = np.divide(counts, rows, out=np.zeros(counts.shape), where=rows > 0)
    off = counts.copy()
    np.fill_diagonal(off, 0)
    col = off.sum(axis=0)
    total = int(col.sum())
    if total == 0:
        return ConfusionAnalysis(counts, normalized, None, 0.0)
    sink = int(np.argmax(col))
    return ConfusionAnalysis(counts, normalized, sink, float(col[sink] / total))


@dataclass
class PerturbationAnalysis:
    histogram: List[int]           # counts of |dW| / th_g in NUM_BINS bins on [0, 1]
    per_layer: List[dict]
    degenerate: bool               # th_g == 0: histogram is all zero
    extreme_fraction: float        # share of weights in the lowest or highest bin


def analyze_perturbation(deltas: Mapping[str, np.ndarray], th_g: float) -> PerturbationAnalysis:
    layers = []
    for name, d in deltas.items():
        a = np.abs(d)
        frac = float((a > PERTURBED_FRACTION * th_g).mean()) if th_g > 0 and d.size else 0.0
        layers.append({"name": name, "numel": int(d.size), "perturbed_fraction": frac,
                       "max_abs": float(a.max()) if d.size else 0.0,
                       "mean_abs": float(a.mean()) if d.size else 0.0})
    if th_g <= 0:
        return PerturbationAnalysis([0] * NUM_BINS, layers, True, 0.0)
    ratio = np.concatenate([np.abs(d).ravel() for d in deltas.values()]) / th_g
    hist, _ = np.histogram(np.clip(ratio, 0.0, 1.0), bins=NUM_BINS, range=(0.0, 1.0))
    n = max(int(hist.sum()), 1)
    return PerturbationAnalysis(hist.tolist(), layers, False, float((hist[0] + hist[-1]) / n))
