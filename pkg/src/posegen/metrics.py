"""Pose evaluation metrics: ADD, ADD-S, threshold accuracy and AUC."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import losses
from .geometry import RigidTransform

AUC_MAX_THRESHOLD = 0.1
ADDS_THRESHOLD = 0.02
ADD_DIAMETER_FRACTION = 0.1


@dataclass(frozen=True)
class EvalRecord:
    object_id: str
    add_distance: float
    adds_distance: float
    symmetric: bool = False
    diameter: float = float("nan")

    def __post_init__(self):
        for name in ("add_distance", "adds_distance"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v!r}")

    @property
    def governing_distance(self) -> float:
        """ADD for non-symmetric objects, ADD-S for symmetric ones."""
        return self.adds_distance if self.symmetric else self.add_distance


def add_distance(gt: RigidTransform, est: RigidTransform, model_points) -> float:
    return losses.pose_loss(gt, est, model_points)


def adds_distance(gt: RigidTransform, est: RigidTransform, model_points) -> float:
    return losses.sym_pose_loss(gt, est, model_points)


def _distances(records: Sequence[EvalRecord], use_symmetric_rule: bool) -> np.ndarray:
    if len(records) == 0:
        raise ValueError("no evaluation records")
    if use_symmetric_rule:
        return np.array([r.governing_distance for r in records])
    return np.array([r.adds_distance for r in records])


def accuracy_at(records: Sequence[EvalRecord], threshold: float,
                use_symmetric_rule: bool = False) -> float:
    """Fraction of records whose distance is strictly below ``threshold``.

    With ``use_symmetric_rule`` the LineMOD convention applies (ADD for
    non-symmetric, ADD-S for symmetric objects); otherwise ADD-S is used for
    every record.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    d = _distances(records, use_symmetric_rule)
    return float(np.count_nonzero(d < threshold)) / len(d)


def add_accuracy(records: Sequence[EvalRecord], fraction: float = ADD_DIAMETER_FRACTION) -> float:
    """LineMOD accuracy with a per-record threshold of ``fraction * diameter``."""
    if len(records) == 0:
        raise ValueError("no evaluation records")
    hits = sum(r.governing_distance < fraction * r.diameter for r in records)
    return float(hits) / len(records)


def auc(records: Sequence[EvalRecord], max_threshold: float = AUC_MAX_THRESHOLD,
        use_symmetric_rule: bool = False) -> float:
    """Normalised area under accuracy-vs-threshold on ``[0, max_threshold]``.

    Each record contributes ``max(0, max_threshold - d)``, the length of the
    threshold interval over which it counts as correct, so the area is exact.
    """
    if max_threshold <= 0:
        raise ValueError("max_threshold must be positive")
    d = _distances(records, use_symmetric_rule)
    return float(np.sum(np.maximum(0.0, max_threshold - d)) / (len(d) * max_threshold))


@dataclass(frozen=True)
class ReportRow:
    object: str
    auc: float
    acc_2cm: float
    acc_add: float


def per_object_report(records: Iterable[EvalRecord] | Mapping[str, Sequence[EvalRecord]],
                      max_threshold: float = AUC_MAX_THRESHOLD,
                      threshold: float = ADDS_THRESHOLD,
                      add_fraction: float = ADD_DIAMETER_FRACTION) -> list[ReportRow]:
    """One row per object (AUC, ADD-S < 2 cm, ADD accuracy) plus an unweighted MEAN row."""
    if isinstance(records, Mapping):
        groups = {k: list(v) for k, v in records.items()}
    else:
        groups = {}
        for r in records:
            groups.setdefault(r.object_id, []).append(r)
    rows = [
        ReportRow(obj, auc(rs, max_threshold), accuracy_at(rs, threshold), add_accuracy(rs, add_fraction))
        for obj, rs in groups.items()
    ]
    if rows:
        rows.append(ReportRow(
            "MEAN",
            float(np.mean([r.auc for r in rows])),
            float(np.mean([r.acc_2cm for r in rows])),
            float(np.mean([r.acc_add for r in rows])),
        ))
    return rows


def write_report(rows: Sequence[ReportRow], csv_path, json_path=None, extra: dict | None = None) -> None:
    """Write the report as CSV and, optionally, JSON with identical rows."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["object", "auc", "acc_2cm", "acc_add"])
        for r in rows:
            w.writerow([r.object, *(repr(float(v)) for v in (r.auc, r.acc_2cm, r.acc_add))])
    if json_path is not None:
        payload = {"rows": [asdict(r) for r in rows]}
        if extra:
            payload.update(extra)
        with open(json_path, "w") as fh:
            json.dump(payload, fh, indent=2)


def read_report_csv(path: str | os.PathLike) -> list[ReportRow]:
    with open(path, newline="") as fh:
        return [ReportRow(r["object"], float(r["auc"]), float(r["acc_2cm"]), float(r["acc_add"]))
                for r in csv.DictReader(fh)]
