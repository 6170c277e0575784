"""Ranking and mask metrics plus the serialisable report container."""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .._validation import check_int
from ..exceptions import InvalidInputError, InvalidParameterError

TOP_KS = (1, 5, 10)


def truth_ranks(scores, truths):
    """0-based rank of each row's truth; ties go to the lower class index."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=int)
    if scores.ndim != 2 or len(truths) != scores.shape[0]:
        raise InvalidInputError(f"scores {scores.shape} do not match {len(truths)} truths")
    rows = np.arange(scores.shape[0])
    t = scores[rows, truths][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    ahead = (scores > t) | ((scores == t) & (idx < truths[:, None]))
    return ahead.sum(axis=1)


def topk_accuracy(scores, truths, k):
    """Fraction of rows whose truth is among the ``k`` best scores."""
    scores = np.asarray(scores)
    k = check_int(k, "k", min_value=1)
    if k > scores.shape[1]:
        raise InvalidParameterError(f"k={k} exceeds the number of classes {scores.shape[1]}")
    if scores.shape[0] == 0:
        return 0.0
    return float(np.mean(truth_ranks(scores, truths) < k))


def topk_report(scores, truths, prefix="top", ks=TOP_KS):
    """Top-K (or R@K) for each K, capped at the class count where K exceeds it."""
    n_classes = np.asarray(scores).shape[1]
    return {f"{prefix}{k}": topk_accuracy(scores, truths, min(k, n_classes)) for k in ks}


def _binary(mask, threshold):
    m = np.asarray(mask)
    return m >= threshold if m.dtype != bool else m


def dice_score(pred, target, threshold=0.5):
    p, t = _binary(pred, threshold), _binary(target, threshold)
    denom = p.sum() + t.sum()
    return 1.0 if denom == 0 else float(2.0 * np.logical_and(p, t).sum() / denom)


def iou_score(pred, target, threshold=0.5):
    p, t = _binary(pred, threshold), _binary(target, threshold)
    union = np.logical_or(p, t).sum()
    return 1.0 if union == 0 else float(np.logical_and(p, t).sum() / union)


def mean_absolute_error(pred, target):
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidInputError(f"mask shapes differ: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


@dataclass
class MetricsReport:
    task: str
    metrics: dict
    n_items: int
    config: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        for prefix in ("top", "R@"):
            vals = [self.metrics.get(f"{prefix}{k}") for k in TOP_KS]
            vals = [v for v in vals if v is not None]
            if any(a > b + 1e-12 for a, b in zip(vals, vals[1:])):
                raise InvalidInputError(f"{self.task}: non-monotone {prefix}K values {vals}")
        for key, value in self.metrics.items():
            if key.endswith(("dice", "iou")) and not 0.0 <= value <= 1.0:
                raise InvalidInputError(f"{self.task}: {key}={value} outside [0, 1]")
            if key.endswith("mae") and value < 0:
                raise InvalidInputError(f"{self.task}: {key}={value} is negative")

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def save(self, out_dir, name=None):
        path = Path(out_dir) / f"{name or self.task}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))
