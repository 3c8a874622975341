"""Outlier-rejection and pose-estimation metrics, a RANSAC baseline, and
delimiter-separated reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .geometry import (DegenerateConfiguration, GeometryError, epipolar_residual, pose_error,
                       weighted_eight_point)
from .synthgen import ScenePair, derive_labels

__all__ = [
    "ClassificationReport",
    "PoseErrorSet",
    "RansacResult",
    "RansacFailure",
    "prf",
    "pose_accuracy",
    "pose_map",
    "pose_auc",
    "ransac_baseline",
    "SceneResult",
    "evaluate_method",
    "network_predictor",
    "ransac_predictor",
    "read_report",
    "aggregate",
    "write_report",
    "FAILED_POSE_ERROR",
]

FAILED_POSE_ERROR = 180.0


@dataclass
class ClassificationReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f_score: float
    no_positive_labels: bool = False

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def prf(predictions, labels) -> ClassificationReport:
    pred = np.asarray(predictions).reshape(-1) > 0.5
    lab = np.asarray(labels).reshape(-1) > 0.5
    if pred.shape != lab.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} predictions, {lab.shape[0]} labels")
    tp = int(np.sum(pred & lab))
    fp = int(np.sum(pred & ~lab))
    fn = int(np.sum(~pred & lab))
    tn = int(np.sum(~pred & ~lab))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ClassificationReport(tp, fp, fn, tn, precision, recall, f, tp + fn == 0)


@dataclass
class PoseErrorSet:
    rotation: list[float] = field(default_factory=list)
    translation: list[float] = field(default_factory=list)

    def add(self, rot_err: float, trans_err: float) -> None:
        self.rotation.append(float(rot_err))
        self.translation.append(float(trans_err))

    @property
    def combined(self) -> np.ndarray:
        return np.maximum(np.asarray(self.rotation, dtype=np.float64),
                          np.asarray(self.translation, dtype=np.float64))

    def __len__(self):
        return len(self.rotation)


def _combined(errors) -> np.ndarray:
    if isinstance(errors, PoseErrorSet):
        arr = errors.combined
    else:
        arr = np.asarray(errors, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("empty pose error set")
    return arr


def pose_accuracy(errors, threshold_deg: float) -> float:
    """Fraction of scenes whose combined error is <= the threshold."""
    arr = _combined(errors)
    return float(np.mean(arr <= threshold_deg))


def pose_map(errors, t_deg: int) -> float:
    """Mean of the accuracies at 5, 10, ..., t degrees."""
    arr = _combined(errors)
    if t_deg < 5 or t_deg % 5 != 0:
        raise ValueError(f"mAP threshold must be a positive multiple of 5, got {t_deg}")
    thresholds = np.arange(5, t_deg + 1, 5)
    return float(np.mean([np.mean(arr <= th) for th in thresholds]))


def pose_auc(errors, t_deg: int) -> float:
    """Area under the cumulative accuracy curve on [0, t], 1-degree trapezoids, over t."""
    arr = _combined(errors)
    if t_deg <= 0:
        raise ValueError("AUC threshold must be positive")
    grid = np.arange(0, int(t_deg) + 1)
    acc = np.array([np.mean(arr <= g) for g in grid])
    area = float(np.sum(0.5 * (acc[1:] + acc[:-1])))
    return area / t_deg


# ---------------------------------------------------------------------------
# RANSAC


class RansacFailure(RuntimeError):
    pass


@dataclass
class RansacResult:
    labels: np.ndarray
    e: np.ndarray
    n_inliers: int
    low_consensus: bool = False


def _msac_cost(e, p1, p2, thr):
    r = epipolar_residual(e, p1, p2)
    return float(np.minimum(r, thr).sum()), r < thr


def ransac_baseline(s: np.ndarray, iterations: int = 1000, inlier_threshold: float = 1e-4,
                    seed: int = 0) -> RansacResult:
    """Hypothesize-and-verify with the eight-point minimal solver.

    Hypotheses are ranked by the truncated residual sum ``sum(min(r, thr))``
    (MSAC), which prefers the tighter of two models with equal inlier counts.
    The winner is refit on its consensus set and the refit is kept when it
    lowers the cost. Raises :class:`RansacFailure` when no hypothesis gathers
    8 inliers.
    """
    s = np.asarray(s, dtype=np.float64)
    n = len(s)
    if n < 8:
        raise ValueError(f"RANSAC needs at least 8 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    p1, p2 = s[:, :2], s[:, 2:]
    best_cost, best_e, best_mask = math.inf, None, None
    ones = np.ones(8)
    for _ in range(iterations):
        idx = rng.choice(n, size=8, replace=False)
        try:
            e = weighted_eight_point(s[idx], ones)
        except GeometryError:
            continue
        cost, mask = _msac_cost(e, p1, p2, inlier_threshold)
        if cost < best_cost:
            best_cost, best_e, best_mask = cost, e, mask
    count = 0 if best_mask is None else int(best_mask.sum())
    if count < 8:
        raise RansacFailure(f"no hypothesis reached 8 inliers (best {count})")
    try:
        e_refit = weighted_eight_point(s, best_mask.astype(np.float64))
        refit_cost, refit_mask = _msac_cost(e_refit, p1, p2, inlier_threshold)
        if refit_cost <= best_cost and refit_mask.sum() >= 8:
            best_e, best_mask = e_refit, refit_mask
    except GeometryError:
        pass
    labels = best_mask.astype(np.float64)
    return RansacResult(labels, best_e, int(labels.sum()), low_consensus=count < 0.05 * n)


# ---------------------------------------------------------------------------
# per-scene evaluation and reports


@dataclass
class SceneResult:
    method: str
    scene_id: int
    precision: float
    recall: float
    f_score: float
    rot_err: float
    trans_err: float
    failed: bool = False

    @property
    def pose_err(self) -> float:
        return max(self.rot_err, self.trans_err)


def evaluate_method(scenes: Sequence[ScenePair], method: str,
                    predict: Callable[[ScenePair], tuple[np.ndarray, np.ndarray | None, np.ndarray]],
                    label_threshold: float = 1e-4) -> list[SceneResult]:
    """Run ``predict(scene) -> (inlier_mask, e_hat or None, cheirality_weights)`` on every scene.

    Labels are the geometric ground truth at ``label_threshold``. A missing
    or undecomposable estimate counts as a 180-degree pose error.
    """
    results = []
    for sc in scenes:
        labels = derive_labels(sc.correspondences, sc.essential_gt, label_threshold)
        mask, e_hat, weights = predict(sc)
        rep = prf(mask, labels)
        failed = e_hat is None
        rot = trans = FAILED_POSE_ERROR
        if not failed:
            try:
                rot, trans = pose_error(e_hat, sc.pose_gt, sc.p1, sc.p2, weights)
            except GeometryError:
                failed = True
        results.append(SceneResult(method, sc.scene_id, rep.precision, rep.recall, rep.f_score,
                                   rot, trans, failed))
    return results


def network_predictor(net):
    def predict(sc: ScenePair):
        out = net.predict(sc.correspondences)
        return out["inliers"], out["e_hat"], out["weights"]
    return predict


def ransac_predictor(iterations: int = 1000, inlier_threshold: float = 1e-4, seed: int = 0):
    def predict(sc: ScenePair):
        try:
            res = ransac_baseline(sc.correspondences, iterations, inlier_threshold,
                                  seed + int(sc.scene_id))
        except (RansacFailure, DegenerateConfiguration):
            return np.zeros(len(sc)), None, None
        return res.labels, res.e, res.labels
    return predict


def aggregate(results: Sequence[SceneResult]) -> dict:
    errors = PoseErrorSet()
    for r in results:
        errors.add(r.rot_err, r.trans_err)
    return {
        "precision": float(np.mean([r.precision for r in results])),
        "recall": float(np.mean([r.recall for r in results])),
        "f_score": float(np.mean([r.f_score for r in results])),
        "map5": pose_map(errors, 5),
        "map20": pose_map(errors, 20),
        "auc5": pose_auc(errors, 5),
        "auc20": pose_auc(errors, 20),
        "n_scenes": len(results),
        "n_failed": int(sum(r.failed for r in results)),
    }


REPORT_COLUMNS = ["method", "scene", "precision", "recall", "f_score", "rot_err_deg",
                  "trans_err_deg", "pose_err_deg", "failed"]
AGGREGATE_COLUMNS = ["precision", "recall", "f_score", "map5", "map20", "auc5", "auc20"]


def write_report(path, groups: dict[str, Sequence[SceneResult]], delimiter: str = ",") -> dict:
    """Write per-scene rows for every method followed by one aggregate row per method.

    Aggregate rows carry ``scene = mean`` and the mAP/AUC figures in
    dedicated columns. Returns the aggregates keyed by method.
    """
    aggs = {m: aggregate(rs) for m, rs in groups.items()}
    cols = REPORT_COLUMNS + ["map5", "map20", "auc5", "auc20"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(cols)
        for method, rs in groups.items():
            for r in rs:
                w.writerow([method, r.scene_id, repr(r.precision), repr(r.recall),
                            repr(r.f_score), repr(r.rot_err), repr(r.trans_err),
                            repr(r.pose_err), int(r.failed), "", "", "", ""])
        for method, a in aggs.items():
            w.writerow([method, "mean", repr(a["precision"]), repr(a["recall"]),
                        repr(a["f_score"]), "", "", "", a["n_failed"], repr(a["map5"]),
                        repr(a["map20"]), repr(a["auc5"]), repr(a["auc20"])])
    return aggs


def read_report(path, delimiter: str = ",") -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter=delimiter))


def mean_or_nan(values: Iterable[float]) -> float:
    values = list(values)
    return float(np.mean(values)) if values else math.nan
