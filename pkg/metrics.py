"""
metrics.py - ranking metrics for zero-inflated predictions.

Every evaluation instant (one segment, one horizon step) ranks the N
nodes by predicted value. Minority metrics score the top-m nodes against
the m nodes with non-zero labels; majority metrics score the bottom-z
nodes against the z zero-label nodes. Ties are broken by node index.
"""

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Tuple

import numpy as np
import torch
from loguru import logger
from sklearn.metrics import silhouette_samples


def _as_numpy(values):
    if isinstance(values, torch.Tensor):
        return values.detach().cpu().numpy()
    return np.asarray(values)


def _descending_order(yhat):
    return np.lexsort((np.arange(len(yhat)), -yhat))


def _ascending_order(yhat):
    return np.lexsort((np.arange(len(yhat)), yhat))


def _recall(order, relevant) -> Optional[float]:
    size = int(relevant.sum())
    if size == 0:
        return None
    return float(relevant[order[:size]].sum()) / size


def _average_precision(order, relevant) -> Optional[float]:
    size = int(relevant.sum())
    if size == 0:
        return None
    hits = relevant[order].astype(np.float64)
    ranks = np.arange(1, len(hits) + 1)
    precision_at_hit = np.cumsum(hits) / ranks
    return float((precision_at_hit * hits).sum()) / size


def recall_min(yhat_t, y_t) -> Optional[float]:
    """None when the instant has no non-zero label."""
    yhat_t, y_t = _as_numpy(yhat_t).astype(np.float64), _as_numpy(y_t)
    return _recall(_descending_order(yhat_t), y_t > 0)


def recall_maj(yhat_t, y_t) -> Optional[float]:
    yhat_t, y_t = _as_numpy(yhat_t).astype(np.float64), _as_numpy(y_t)
    return _recall(_ascending_order(yhat_t), y_t == 0)


def map_min(yhat_t, y_t) -> Optional[float]:
    yhat_t, y_t = _as_numpy(yhat_t).astype(np.float64), _as_numpy(y_t)
    return _average_precision(_descending_order(yhat_t), y_t > 0)


def map_maj(yhat_t, y_t) -> Optional[float]:
    yhat_t, y_t = _as_numpy(yhat_t).astype(np.float64), _as_numpy(y_t)
    return _average_precision(_ascending_order(yhat_t), y_t == 0)


def disparity(report_parts) -> Tuple[float, float]:
    """
    (|rec_maj − rec_min|, |map_maj − map_min|) from a MetricReport or a
    mapping with those four keys.
    """
    if not isinstance(report_parts, Mapping):
        report_parts = asdict(report_parts)
    return (abs(report_parts["rec_maj"] - report_parts["rec_min"]),
            abs(report_parts["map_maj"] - report_parts["map_min"]))


@dataclass
class MetricReport:
    rec_maj: float
    rec_min: float
    map_maj: float
    map_min: float
    rec_d: float
    map_d: float
    instants: int
    skipped_min: int
    skipped_maj: int

    def to_json(self, decimals=4):
        """Display fields (recall ×100, rounded) plus full-precision raw values."""
        display = {
            "Rec-maj": round(100.0 * self.rec_maj, decimals),
            "Rec-min": round(100.0 * self.rec_min, decimals),
            "MAP-maj": round(self.map_maj, decimals),
            "MAP-min": round(self.map_min, decimals),
            "Rec-D": round(100.0 * self.rec_d, decimals),
            "MAP-D": round(self.map_d, decimals),
        }
        return {"display": display, "raw": asdict(self)}

    @classmethod
    def from_json(cls, data):
        return cls(**data["raw"])


def _mean(values):
    return float(np.mean(values)) if values else float("nan")


def evaluate(Yhat, Y) -> MetricReport:
    """
    Mean of every per-instant metric over the (segment, δ) instants where
    it is defined.

    Args:
        Yhat: Predictions (S, Δ, N)
        Y: Labels (S, Δ, N)
    """
    Yhat, Y = _as_numpy(Yhat).astype(np.float64), _as_numpy(Y)
    if Yhat.shape != Y.shape or Yhat.ndim != 3:
        raise ValueError(f"expected matching (S, Δ, N) arrays, got {Yhat.shape} and {Y.shape}")
    rec_min_values, rec_maj_values, map_min_values, map_maj_values = [], [], [], []
    for yhat_t, y_t in zip(Yhat.reshape(-1, Yhat.shape[-1]), Y.reshape(-1, Y.shape[-1])):
        desc, asc = _descending_order(yhat_t), _ascending_order(yhat_t)
        nonzero, zero = y_t > 0, y_t == 0
        if nonzero.any():
            rec_min_values.append(_recall(desc, nonzero))
            map_min_values.append(_average_precision(desc, nonzero))
        if zero.any():
            rec_maj_values.append(_recall(asc, zero))
            map_maj_values.append(_average_precision(asc, zero))

    instants = Yhat.shape[0] * Yhat.shape[1]
    skipped_min = instants - len(rec_min_values)
    skipped_maj = instants - len(rec_maj_values)
    if skipped_min:
        logger.debug(f"{skipped_min}/{instants} instants have no non-zero label; skipped for minority metrics")
    parts = {
        "rec_maj": _mean(rec_maj_values),
        "rec_min": _mean(rec_min_values),
        "map_maj": _mean(map_maj_values),
        "map_min": _mean(map_min_values),
    }
    rec_d, map_d = disparity(parts)
    return MetricReport(**parts, rec_d=rec_d, map_d=map_d, instants=instants,
                        skipped_min=skipped_min, skipped_maj=skipped_maj)


def class_silhouette(H, labels) -> Mapping[str, float]:
    """
    Mean silhouette coefficient of each class in embedding space
    (cosine distance), a measure of minority/majority separability.
    """
    H, labels = _as_numpy(H), _as_numpy(labels).astype(int)
    H = H.reshape(-1, H.shape[-1])
    labels = labels.reshape(-1)
    if len(np.unique(labels)) < 2:
        return {"minority": math.nan, "majority": math.nan}
    scores = silhouette_samples(H, labels, metric="cosine")
    return {
        "minority": float(scores[labels == 1].mean()),
        "majority": float(scores[labels == 0].mean()),
    }
