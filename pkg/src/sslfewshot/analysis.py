"""Angular diagnostics of prototypes and embeddings.

All statistics live on the unit sphere: rows and columns are normalized
before any angle is taken, so feature norms never leak in.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, ParseError, format_float
from .nn import ClassifierWeights, FeatureExtractor

__all__ = [
    "AngleStats",
    "OccupancyStats",
    "prototype_angles",
    "pairwise_angles",
    "occupancy_stats",
    "export_embeddings",
    "load_embeddings",
]

BIN_WIDTH_DEG = 5.0


def _unit_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), eps)


def _angle_deg(cos: np.ndarray) -> np.ndarray:
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def pairwise_angles(vectors: np.ndarray) -> np.ndarray:
    """Angles in degrees between all row pairs ``i < j``."""
    u = _unit_rows(vectors)
    iu = np.triu_indices(u.shape[0], k=1)
    return _angle_deg((u @ u.T)[iu])


@dataclass(frozen=True)
class AngleStats:
    angles_deg: np.ndarray
    mean: float
    std: float
    histogram: np.ndarray  # counts per 5-degree bin over [0, 180]

    @property
    def bin_edges(self) -> np.ndarray:
        return np.arange(0.0, 180.0 + BIN_WIDTH_DEG, BIN_WIDTH_DEG)


def prototype_angles(cw: ClassifierWeights | np.ndarray) -> AngleStats:
    W = cw.array() if isinstance(cw, ClassifierWeights) else np.asarray(cw, dtype=np.float64)
    if W.shape[1] < 2:
        raise ValueError("need at least two prototypes")
    angles = pairwise_angles(W.T)
    edges = np.arange(0.0, 180.0 + BIN_WIDTH_DEG, BIN_WIDTH_DEG)
    hist, _ = np.histogram(angles, bins=edges)
    return AngleStats(angles, float(angles.mean()), float(angles.std()), hist)


@dataclass(frozen=True)
class OccupancyStats:
    per_class_spread: dict[int, float]  # mean angle to own centroid, degrees
    within: float
    between: float
    compactness_ratio: float


def occupancy_stats(feats: np.ndarray, labels: Sequence[int]) -> OccupancyStats:
    """Within-class angular spread versus between-centroid angle."""
    u = _unit_rows(feats)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    centroids = []
    spread = {}
    for cls in classes:
        members = u[labels == cls]
        if len(members) < 2:
            raise ValueError(f"class {int(cls)} has a single sample; occupancy needs at least 2")
        centroid = _unit_rows(members.mean(axis=0, keepdims=True))[0]
        centroids.append(centroid)
        spread[int(cls)] = float(_angle_deg(members @ centroid).mean())
    within = float(np.mean(list(spread.values())))
    between = float(pairwise_angles(np.stack(centroids)).mean()) if len(classes) > 1 else 0.0
    ratio = within / between if between > 0 else float("inf") if within > 0 else 0.0
    return OccupancyStats(spread, within, between, ratio)


def export_embeddings(fe: FeatureExtractor, ds: Dataset, path) -> int:
    """Write ``<label> <d floats>`` per sample; returns the line count."""
    feats = fe.forward(ds.features)
    lines = [" ".join([str(int(lab))] + [format_float(v) for v in row]) for lab, row in zip(ds.labels, feats)]
    path = Path(path)
    try:
        path.write_text("\n".join(lines) + ("\n" if lines else ""))
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc.strerror}") from exc
    return len(lines)


def load_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    rows, labels = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if len(parts) < 2:
            raise ParseError("expected a label and at least one value", lineno)
        labels.append(int(parts[0]))
        rows.append([float(v) for v in parts[1:]])
        if len(rows[-1]) != len(rows[0]):
            raise ParseError("row width differs from the first row", lineno)
    return np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64)
