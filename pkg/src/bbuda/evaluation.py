"""H-score, average class accuracy and the source-only baseline (SO++)."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import jsonio
from .model import UNKNOWN, decide
from .numerics import InvalidInput


def h_score(acc_in: float, acc_out: float) -> float:
    """Harmonic mean of in-class accuracy and out-class detection accuracy."""
    for name, v in (("acc_in", acc_in), ("acc_out", acc_out)):
        if not 0.0 <= v <= 1.0:
            raise InvalidInput(f"{name} must lie in [0, 1], got {v}")
    if acc_in + acc_out == 0:
        return 0.0
    return 2.0 * acc_in * acc_out / (acc_in + acc_out)


@dataclass
class GroundTruth:
    labels: np.ndarray
    k: int  # labels >= k are outside the source label space

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.k < 2:
            raise InvalidInput("need at least 2 source classes")
        if np.any(self.labels < 0):
            raise InvalidInput("labels must be non-negative")

    @property
    def is_out(self) -> np.ndarray:
        return self.labels >= self.k


@dataclass
class EvalReport:
    """Metrics for one set of open-set predictions.

    ``acc_in`` / ``acc_out`` / ``h_score`` are ``None`` when the
    corresponding group of instances is empty. ``per_class`` is keyed by
    source class id, with ``"unknown"`` for all out-class instances.
    """
    acc_in: Optional[float]
    acc_out: Optional[float]
    h_score: Optional[float]
    aa: float
    per_class: Dict[str, float] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"acc_in": self.acc_in, "acc_out": self.acc_out, "h_score": self.h_score,
                "aa": self.aa, "per_class": self.per_class, "counts": self.counts}

    def to_json(self) -> str:
        return jsonio.dumps(self.to_dict())

    def to_csv(self) -> str:
        keys = sorted(self.per_class, key=lambda s: (s == "unknown", int(s) if s.isdigit() else 0))
        header = ["acc_in", "acc_out", "h_score", "aa"] + [f"acc_class_{k}" for k in keys]
        row = [self.acc_in, self.acc_out, self.h_score, self.aa] + [self.per_class[k] for k in keys]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerow(["" if v is None else format(v, ".17g") for v in row])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        path = Path(path)
        if path.suffix == ".csv":
            path.write_text(self.to_csv(), encoding="utf-8")
        else:
            path.write_text(self.to_json() + "\n", encoding="utf-8")


def evaluate(predictions, truth: GroundTruth) -> EvalReport:
    """Score open-set predictions (class index or ``UNKNOWN``) against ground truth.

    Acc_in and Acc_out are instance-level rates over in-class and out-class
    instances. AA is the macro mean of per-class accuracies with every
    out-class instance folded into a single unknown class; classes with no
    instances are left out of the mean.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    if pred.shape != truth.labels.shape:
        raise InvalidInput("predictions and labels must be aligned")
    out = truth.is_out
    ref = np.where(out, UNKNOWN, truth.labels)
    correct = pred == ref

    acc_in = float(correct[~out].mean()) if (~out).any() else None
    acc_out = float(correct[out].mean()) if out.any() else None
    h = h_score(acc_in, acc_out) if acc_in is not None and acc_out is not None else None

    per_class: Dict[str, float] = {}
    counts: Dict[str, int] = {}
    for c in range(truth.k):
        mask = ref == c
        if mask.any():
            per_class[str(c)] = float(correct[mask].mean())
            counts[str(c)] = int(mask.sum())
    if out.any():
        per_class["unknown"] = float(correct[out].mean())
        counts["unknown"] = int(out.sum())
    # fixed-order sum, independent of instance order
    aa = math.fsum(per_class.values()) / len(per_class) if per_class else 0.0
    return EvalReport(acc_in, acc_out, h, aa, per_class, counts)


def so_plus_plus(source_probs, truth: GroundTruth) -> EvalReport:
    """Apply the entropy-threshold open-set rule directly to cached source outputs."""
    return evaluate(decide(np.asarray(source_probs, dtype=np.float64)), truth)
