"""Masked vertex-error metrics and dynamic-time-warping lip distance."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .mesh import MeshError, VertexMask

METRIC_FIELDS = ("e_max_lip", "e_mean_lip", "e_mean_face", "e_mean_head", "dtw_lip")


@dataclass(frozen=True)
class MetricReport:
    e_max_lip: float
    e_mean_lip: float
    e_mean_face: float
    e_mean_head: float
    dtw_lip: float
    frames: int

    def __post_init__(self):
        for name in METRIC_FIELDS:
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ValueError(f"metric {name} must be finite and non-negative, got {value}")

    def to_dict(self):
        return dataclasses.asdict(self)


def _masks(masks, n_vertices):
    if isinstance(masks, dict):
        masks = masks.values()
    by_label = {}
    for m in masks:
        by_label[m.label] = m.check(n_vertices)
    missing = {"lip", "face", "head"} - set(by_label)
    if missing:
        raise MeshError(f"missing masks: {sorted(missing)}")
    return by_label


def _check_pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 3 or pred.shape[-1] != 3:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape} (expected (T, N, 3))")
    return pred, target


def masked_errors(pred, target, masks) -> dict:
    """Per-frame vertex distances reduced over each mask, averaged over frames."""
    pred, target = _check_pair(pred, target)
    by_label = _masks(masks, pred.shape[1])
    dist = np.linalg.norm(pred - target, axis=-1)  # (T, N)
    lip = dist[:, by_label["lip"].indices]
    return {
        "e_max_lip": float(np.mean(lip.max(axis=1))),
        "e_mean_lip": float(np.mean(lip)),
        "e_mean_face": float(np.mean(dist[:, by_label["face"].indices])),
        "e_mean_head": float(np.mean(dist[:, by_label["head"].indices])),
    }


def frame_costs(pred, target, lip: VertexMask):
    """(T, T') matrix of summed lip-vertex distances between frame pairs."""
    a = np.asarray(pred, dtype=np.float64)[:, lip.indices]
    b = np.asarray(target, dtype=np.float64)[:, lip.indices]
    return np.linalg.norm(a[:, None] - b[None], axis=-1).sum(axis=-1)


def dtw_lip(pred, target, lip: VertexMask) -> float:
    """Accumulated cost of the optimal warping path (no length normalization)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if len(pred) == 0 or len(target) == 0:
        raise ValueError("DTW needs two non-empty sequences")
    if pred.shape[1:] != target.shape[1:]:
        raise ValueError(f"frame shape mismatch: {pred.shape[1:]} vs {target.shape[1:]}")
    lip.check(pred.shape[1])
    cost = frame_costs(pred, target, lip)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
    return float(acc[n, m])


def sequence_report(pred, target, masks) -> MetricReport:
    pred, target = _check_pair(pred, target)
    errs = masked_errors(pred, target, masks)
    lip = _masks(masks, pred.shape[1])["lip"]
    return MetricReport(**errs, dtw_lip=dtw_lip(pred, target, lip), frames=len(pred))


def aggregate(reports) -> MetricReport:
    """Mean of per-sample metrics in input order; frames are summed."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    values = {f: float(np.mean([getattr(r, f) for r in reports])) for f in METRIC_FIELDS}
    return MetricReport(**values, frames=int(sum(r.frames for r in reports)))


def evaluate(archive, samples, masks, predict=None) -> MetricReport:
    """Run the model on every sample and average the metrics.

    ``archive`` is a :class:`~meshanim.model.ModelArchive`; ``predict`` may
    replace the network with any ``sample -> (T, N, 3)`` callable.
    """
    if predict is None:
        from .model import forward_sequence

        def predict(s):
            return forward_sequence(s.template, s.features, s.n_frames, archive.params,
                                    archive.hierarchy, archive.config).data

    reports = [sequence_report(predict(s), s.targets, masks) for s in samples]
    return aggregate(reports)
