"""Linear distortion classifier over image embeddings.

Training minimizes L2-regularized hinge loss with seeded deterministic
mini-batch subgradient descent (no external solver). Features are
mean-centered and L2-normalized before training; the center is carried in
the model so scoring applies the same transform. Scores are oriented so
that higher means more distorted; decisions compare the score against a
per-(attribute, demographic) threshold calibrated to a recall target on
human labels, with a pooled fallback for cells that have no distorted
labels.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .domain import DomainError

LABEL_CLEAN = "clean"
LABEL_DISTORTED = "distorted"

Cell = tuple[str, str]  # (applied attribute, demographic code)


class DegenerateData(DomainError):
    pass


class DimensionMismatch(DomainError):
    pass


class NoLabels(DomainError):
    pass


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray
    bias: float
    center: np.ndarray
    trained_on: str  # dataset fingerprint

    @property
    def dimension(self) -> int:
        return int(self.weights.shape[0])

    def score(self, embedding: np.ndarray) -> float:
        """Distortion score; higher = more distorted."""
        x = np.asarray(embedding, dtype=np.float64)
        if x.shape != self.weights.shape:
            raise DimensionMismatch(f"embedding shape {x.shape} vs model dimension {self.dimension}")
        x = x - self.center
        norm = float(np.linalg.norm(x))
        if norm > 0.0:
            x = x / norm
        return float(self.weights @ x + self.bias)

    def scores(self, embeddings: np.ndarray) -> np.ndarray:
        x = np.asarray(embeddings, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dimension:
            raise DimensionMismatch(f"embeddings shape {x.shape} vs model dimension {self.dimension}")
        x = x - self.center
        norms = np.linalg.norm(x, axis=1)
        norms[norms == 0.0] = 1.0
        x = x / norms[:, None]
        return x @ self.weights + self.bias


def _fingerprint(x: np.ndarray, y: np.ndarray, reg_strength: float, epochs: int, seed: int) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(x).tobytes())
    h.update(np.ascontiguousarray(y).tobytes())
    h.update(json.dumps({"reg": reg_strength, "epochs": epochs, "seed": seed}).encode())
    return h.hexdigest()


def train_svm(
    examples: Sequence[tuple[np.ndarray, str]],
    reg_strength: float = 1e-3,
    epochs: int = 200,
    seed: int = 0,
    *,
    batch_size: int = 64,
) -> LinearModel:
    """Fit the linear classifier on (embedding, label) pairs.

    Labels are "clean" or "distorted". Deterministic for fixed inputs and
    seed. The bias is trained as an augmented constant feature so it shares
    the regularizer.
    """
    if not examples:
        raise DegenerateData("no training examples")
    labels = []
    for _, label in examples:
        if label not in (LABEL_CLEAN, LABEL_DISTORTED):
            raise DegenerateData(f"unknown label: {label!r}")
        labels.append(1.0 if label == LABEL_DISTORTED else -1.0)
    y = np.asarray(labels, dtype=np.float64)
    if len(set(labels)) < 2:
        raise DegenerateData("training data must contain both clean and distorted examples")
    dims = {np.asarray(v).shape for v, _ in examples}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise DimensionMismatch(f"inconsistent embedding shapes: {sorted(map(str, dims))}")
    x_raw = np.stack([np.asarray(v, dtype=np.float64) for v, _ in examples])

    center = x_raw.mean(axis=0)
    x = x_raw - center
    norms = np.linalg.norm(x, axis=1)
    norms[norms == 0.0] = 1.0
    x = x / norms[:, None]

    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])  # constant feature carries the bias
    w = np.zeros(d + 1, dtype=np.float64)
    rng = np.random.default_rng(seed)
    lam = float(reg_strength)
    bsz = max(1, min(batch_size, n))
    t = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, bsz):
            t += 1
            idx = order[start : start + bsz]
            eta = 1.0 / (lam * t)
            margins = y[idx] * (xa[idx] @ w)
            violating = idx[margins < 1.0]
            w *= 1.0 - eta * lam
            if violating.size:
                w += (eta / idx.size) * (y[violating] @ xa[violating])

    return LinearModel(
        weights=w[:-1].copy(),
        bias=float(w[-1]),
        center=center,
        trained_on=_fingerprint(x_raw, y, reg_strength, epochs, seed),
    )


@dataclass(frozen=True)
class ThresholdTable:
    cells: Mapping[Cell, float]
    fallback: float
    recall_target: float = 0.97

    def threshold_for(self, attribute: str, demographic_code: str) -> float:
        return self.cells.get((attribute, demographic_code), self.fallback)


def _recall_threshold(distorted_scores: Sequence[float], recall_target: float) -> float:
    """Largest threshold t with recall of (score >= t) at least recall_target."""
    ordered = sorted(distorted_scores, reverse=True)
    needed = math.ceil(recall_target * len(ordered))
    needed = max(1, min(needed, len(ordered)))
    return ordered[needed - 1]


def calibrate_thresholds(
    model: LinearModel,
    labeled: Sequence[tuple[Cell, float, str]],
    recall_target: float = 0.97,
) -> ThresholdTable:
    """Per-cell decision thresholds from human-labeled scores.

    A higher false-positive rate is acceptable; the threshold is pushed as
    high as the recall target allows. Cells with no distorted labels fall
    back to the pooled global threshold.
    """
    if not labeled:
        raise NoLabels("no labeled scores to calibrate on")
    by_cell: dict[Cell, list[float]] = {}
    all_distorted: list[float] = []
    for cell, score, label in labeled:
        if label == LABEL_DISTORTED:
            by_cell.setdefault(tuple(cell), []).append(float(score))
            all_distorted.append(float(score))
        elif label != LABEL_CLEAN:
            raise NoLabels(f"unknown label: {label!r}")
    fallback = _recall_threshold(all_distorted, recall_target) if all_distorted else math.inf
    cells = {cell: _recall_threshold(scores, recall_target) for cell, scores in by_cell.items()}
    return ThresholdTable(cells=cells, fallback=fallback, recall_target=recall_target)


@dataclass(frozen=True)
class DetectionFragment:
    distortion_score: float
    distorted: bool


def classify(
    model: LinearModel,
    table: ThresholdTable,
    embedding: np.ndarray,
    attribute: str,
    demographic_code: str,
) -> DetectionFragment:
    """Score one transformed face and decide against its cell threshold.

    Ties at the threshold classify as distorted (conservative).
    """
    score = model.score(embedding)
    return DetectionFragment(
        distortion_score=score,
        distorted=score >= table.threshold_for(attribute, demographic_code),
    )


# -- persistence --------------------------------------------------------------


def save_model(model: LinearModel, path: str | Path) -> None:
    body = {
        "weights": model.weights.tolist(),
        "bias": model.bias,
        "dimension": model.dimension,
        "center": model.center.tolist(),
        "fingerprint": model.trained_on,
    }
    Path(path).write_text(json.dumps(body) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> LinearModel:
    body = json.loads(Path(path).read_text(encoding="utf-8"))
    weights = np.asarray(body["weights"], dtype=np.float64)
    if weights.shape[0] != body["dimension"]:
        raise DimensionMismatch("model file dimension disagrees with its weights")
    return LinearModel(
        weights=weights,
        bias=float(body["bias"]),
        center=np.asarray(body["center"], dtype=np.float64),
        trained_on=body["fingerprint"],
    )


def save_thresholds(table: ThresholdTable, path: str | Path) -> None:
    body = {
        "cells": {f"{attr}/{code}": t for (attr, code), t in sorted(table.cells.items())},
        "fallback": table.fallback if math.isfinite(table.fallback) else None,
        "recall-target": table.recall_target,
    }
    Path(path).write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")


def load_thresholds(path: str | Path) -> ThresholdTable:
    body = json.loads(Path(path).read_text(encoding="utf-8"))
    cells: dict[Cell, float] = {}
    for key, value in body["cells"].items():
        attr, code = key.split("/", 1)
        cells[(attr, code)] = float(value)
    fallback = body["fallback"]
    return ThresholdTable(
        cells=cells,
        fallback=math.inf if fallback is None else float(fallback),
        recall_target=float(body["recall-target"]),
    )
