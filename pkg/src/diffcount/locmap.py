"""Object-location maps: rendering, peak detection, count normalization, metrics.

A location map is a dense H x W float grid with an amplitude-normalized
Gaussian (peak value 1.0) at every object center.  All operations here are
pure functions over value inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "PointSet",
    "ExemplarBox",
    "CountMetrics",
    "MatchResult",
    "render_gt_map",
    "detect_peaks",
    "test_time_normalize",
    "count_metrics",
    "match_points",
    "perturb_boxes",
]


@dataclass
class PointSet:
    """2D points in pixel coordinates (x = column, y = row), optional scores."""

    points: np.ndarray  # (N, 2) float64
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if len(self.scores) != len(self.points):
                raise ValueError("scores length must match points")

    def __len__(self) -> int:
        return len(self.points)

    def validate(self, height: int, width: int) -> None:
        p = self.points
        if len(p) == 0:
            return
        if p[:, 0].min() < 0 or p[:, 0].max() > width - 1 + 1e-9:
            raise ValueError("x coordinate out of image bounds")
        if p[:, 1].min() < 0 or p[:, 1].max() > height - 1 + 1e-9:
            raise ValueError("y coordinate out of image bounds")
        if len(p) > 1:
            order = np.lexsort((p[:, 1], p[:, 0]))
            deltas = np.abs(np.diff(p[order], axis=0)).sum(axis=1)
            if np.any(deltas < 1e-9):
                raise ValueError("duplicate point coordinates")

    def to_json_dict(self) -> dict:
        doc = {"points": [[float(x), float(y)] for x, y in self.points]}
        if self.scores is not None:
            doc["scores"] = [float(s) for s in self.scores]
        return doc

    @staticmethod
    def from_json_dict(doc: dict) -> "PointSet":
        return PointSet(
            np.asarray(doc["points"], dtype=np.float64).reshape(-1, 2),
            np.asarray(doc["scores"], dtype=np.float64) if "scores" in doc else None,
        )


@dataclass(frozen=True)
class ExemplarBox:
    """Axis-aligned box in pixel coordinates, x_max > x_min and y_max > y_min."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, x: float, y: float, strict: bool = False) -> bool:
        if strict:
            return self.x_min < x < self.x_max and self.y_min < y < self.y_max
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])


@dataclass(frozen=True)
class CountMetrics:
    mae: float
    rmse: float
    n_images: int

    def to_json_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "n_images": self.n_images}


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    mean_tp_distance: float


def render_gt_map(points: PointSet, height: int, width: int, sigma: float) -> np.ndarray:
    """Render unit-peak Gaussians at the given centers, combined by maximum.

    Each point contributes exp(-((x-xj)^2 + (y-yj)^2) / (2 sigma^2)); sigma=0
    degenerates to single-pixel impulses at rounded coordinates.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    points.validate(height, width)
    out = np.zeros((height, width), dtype=np.float64)
    if len(points) == 0:
        return out
    if sigma == 0.0:
        for x, y in points.points:
            out[int(math.floor(y + 0.5)), int(math.floor(x + 0.5))] = 1.0
        return out
    # stamp radius where the kernel falls below 1e-12
    radius = int(math.ceil(7.5 * sigma)) + 1
    inv = 1.0 / (2.0 * sigma * sigma)
    for x, y in points.points:
        x0 = max(int(math.floor(x)) - radius, 0)
        x1 = min(int(math.ceil(x)) + radius, width - 1)
        y0 = max(int(math.floor(y)) - radius, 0)
        y1 = min(int(math.ceil(y)) + radius, height - 1)
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        stamp = np.exp(-(((xs[None, :] - x) ** 2) + ((ys[:, None] - y) ** 2)) * inv)
        np.maximum(out[y0 : y1 + 1, x0 : x1 + 1], stamp, out=out[y0 : y1 + 1, x0 : x1 + 1])
    return out


def detect_peaks(values: np.ndarray, tau: float = 0.1) -> PointSet:
    """3x3 local maxima above tau, plateaus collapsed to their smallest cell.

    A cell qualifies when its value exceeds tau and is >= all existing
    neighbors (border cells compare against fewer).  Adjacent qualifying cells
    necessarily share a value; each 8-connected plateau is reported once, at
    its lexicographically smallest (row, col) cell.
    """
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("map contains non-finite values")
    h, w = values.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = values
    candidate = values > tau
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            candidate &= values >= padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
    if not candidate.any():
        return PointSet(np.empty((0, 2)), np.empty(0))
    labels, n = ndimage.label(candidate, structure=np.ones((3, 3), dtype=int))
    flat_index = np.arange(h * w, dtype=np.int64).reshape(h, w)
    mins = ndimage.minimum(flat_index, labels=labels, index=np.arange(1, n + 1))
    mins = np.sort(np.asarray(mins, dtype=np.int64))
    rows, cols = mins // w, mins % w
    pts = np.stack([cols, rows], axis=1).astype(np.float64)
    return PointSet(pts, values[rows, cols])


def test_time_normalize(
    raw_count: int, detections: PointSet, exemplars: list[ExemplarBox]
) -> int:
    """Divide the count by the mean detections-per-exemplar-box when > 1."""
    if raw_count != len(detections):
        raise ValueError("raw_count must equal the number of detections")
    if not exemplars:
        return raw_count
    if len(detections) == 0:
        return raw_count
    per_box = [
        sum(1 for x, y in detections.points if b.contains(x, y, strict=True))
        for b in exemplars
    ]
    r = float(np.mean(per_box))
    if r > 1.0:
        return int(math.floor(raw_count / r + 0.5))
    return raw_count


def count_metrics(pred_counts, gt_counts) -> CountMetrics:
    """MAE and RMSE over per-image counts."""
    pred = np.asarray(pred_counts, dtype=np.float64)
    gt = np.asarray(gt_counts, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ValueError("pred/gt count lists must be 1D and equally long")
    if len(pred) == 0:
        raise ValueError("empty input")
    err = pred - gt
    return CountMetrics(
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err**2))),
        n_images=len(pred),
    )


def match_points(
    preds: PointSet, gt_points: PointSet, gt_boxes: list[ExemplarBox]
) -> MatchResult:
    """Greedy ascending-distance one-to-one matching of predictions to centers.

    A prediction is a true positive iff it is matched and lies inside its
    ground-truth point's box; every ground truth lacking a true positive is a
    false negative, so tp + fp == |preds| and tp + fn == |gt|.
    """
    if len(gt_boxes) != len(gt_points):
        raise ValueError("need exactly one box per ground-truth point")
    np_, ng = len(preds), len(gt_points)
    tp, dists = 0, []
    if np_ > 0 and ng > 0:
        d = np.linalg.norm(
            preds.points[:, None, :] - gt_points.points[None, :, :], axis=2
        )
        order = np.argsort(d, axis=None, kind="stable")
        pred_used = np.zeros(np_, dtype=bool)
        gt_used = np.zeros(ng, dtype=bool)
        for flat in order:
            i, j = divmod(int(flat), ng)
            if pred_used[i] or gt_used[j]:
                continue
            pred_used[i] = True
            gt_used[j] = True
            x, y = preds.points[i]
            if gt_boxes[j].contains(x, y):
                tp += 1
                dists.append(d[i, j])
            if pred_used.all() or gt_used.all():
                break
    fp = np_ - tp
    fn = ng - tp
    precision = tp / np_ if np_ > 0 else (1.0 if ng == 0 else 0.0)
    recall = tp / ng if ng > 0 else (1.0 if np_ == 0 else 0.0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MatchResult(
        tp=tp,
        fp=fp,
        fn=fn,
        precision=precision,
        recall=recall,
        f1=f1,
        mean_tp_distance=float(np.mean(dists)) if dists else 0.0,
    )


def perturb_boxes(
    boxes: list[ExemplarBox],
    scale: float,
    rng: np.random.Generator,
    height: int,
    width: int,
) -> list[ExemplarBox]:
    """Offset each corner by uniform noise within +-scale of the box size.

    x coordinates move by up to scale * width of the box, y coordinates by up
    to scale * height; results are clamped to image bounds and re-ordered so
    min < max always holds.
    """
    if not 0 <= scale < 0.5:
        raise ValueError("scale must be in [0, 0.5)")
    out = []
    for b in boxes:
        dx = rng.uniform(-scale * b.width, scale * b.width, size=2)
        dy = rng.uniform(-scale * b.height, scale * b.height, size=2)
        xs = np.clip([b.x_min + dx[0], b.x_max + dx[1]], 0, width - 1)
        ys = np.clip([b.y_min + dy[0], b.y_max + dy[1]], 0, height - 1)
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(ys), max(ys)
        if x1 - x0 < 1e-3:
            x1 = x0 + 1e-3
        if y1 - y0 < 1e-3:
            y1 = y0 + 1e-3
        out.append(ExemplarBox(x0, y0, x1, y1))
    return out


def export_png16(values: np.ndarray, path: str | Path) -> None:
    """Write a location map as 16-bit grayscale PNG (values mapped from [0,1])."""
    from PIL import Image

    arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    img = Image.fromarray(np.round(arr * 65535.0).astype(np.uint16), mode="I;16")
    img.save(Path(path))


def import_png16(path: str | Path) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(Path(path)), dtype=np.float64)
    return arr / 65535.0


def save_points_json(points: PointSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(points.to_json_dict(), indent=2))


def load_points_json(path: str | Path) -> PointSet:
    return PointSet.from_json_dict(json.loads(Path(path).read_text()))
