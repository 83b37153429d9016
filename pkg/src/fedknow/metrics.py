"""Evaluation metrics and deterministic CSV emission."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class MetricRow:
    mode: str
    client: int
    seed: int
    ta: float
    pov: float

    def __post_init__(self):
        if not (0.0 <= self.ta <= 1.0 and 0.0 <= self.pov <= 1.0):
            raise ValueError(f"metrics outside [0,1]: ta={self.ta} pov={self.pov}")


def test_accuracy(predictions, labels) -> float:
    """Share of rows whose argmax (ties to the lowest index) hits the label."""
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.ndim != 2 or predictions.shape[0] == 0:
        raise ValueError("test_accuracy: need a nonempty (N, k) prediction array")
    if predictions.shape[0] != labels.shape[0]:
        raise ValueError("test_accuracy: predictions/labels length mismatch")
    return float((np.argmax(predictions, axis=1) == labels).mean())


def pov(predictions, range_masks) -> float:
    """Share of rows whose argmax falls outside the range prior's support."""
    predictions = np.asarray(predictions, dtype=np.float64)
    range_masks = np.asarray(range_masks, dtype=np.float64)
    if predictions.shape != range_masks.shape or predictions.shape[0] == 0:
        raise ValueError("pov: need matching nonempty (N, k) arrays")
    pred = np.argmax(predictions, axis=1)
    return float((range_masks[np.arange(len(pred)), pred] == 0).mean())


def model_pov(model, rkm, test_x) -> float:
    """POV of any row-predicting model against a range prior."""
    test_x = np.asarray(test_x, dtype=np.float64)
    preds = model.predict_rows(test_x) if hasattr(model, "predict_rows") else model(test_x)
    return pov(preds, rkm.masks_of_rows(test_x))


def fmt(v) -> str:
    """Stable scalar formatting for CSV bytes (repr round-trips floats)."""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv_atomic(path, header: list[str], rows) -> Path:
    """Write rows to path via a temp file + rename so readers never see a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")
    os.replace(tmp, path)
    return path
