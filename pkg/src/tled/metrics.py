"""Point-set distances: directed nearest distances, percentile Hausdorff, success curves."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import MetricsError

DEFAULT_PERCENTILE = 95.0
DEFAULT_SUCCESS_THRESHOLD_MM = 1.7


@dataclass
class PointSet:
    points: np.ndarray  # (n, 3) mm
    label: str = ""
    _tree: cKDTree | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1 and pts.size == 0:
            pts = pts.reshape(0, 3)
        pts = np.atleast_2d(pts)
        if pts.shape[1] == 2:
            pts = np.hstack([pts, np.zeros((len(pts), 1))])
        if pts.shape[1] != 3:
            raise MetricsError(f"points must be (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise MetricsError(f"point set {self.label!r} has non-finite coordinates")
        self.points = pts

    def __len__(self):
        return len(self.points)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree


def _as_set(p, label="") -> PointSet:
    return p if isinstance(p, PointSet) else PointSet(p, label)


def directed_distances(A, B) -> np.ndarray:
    """d(a, B) for every a in A: Euclidean distance to the nearest point of B."""
    A, B = _as_set(A, "A"), _as_set(B, "B")
    if len(B) == 0:
        raise MetricsError("target point set is empty")
    if len(A) == 0:
        return np.zeros(0)
    d, _ = B.tree.query(A.points, k=1)
    return np.asarray(d, dtype=float)


def nearest_rank_percentile(values, p) -> float:
    """Smallest value v with at least p% of the values <= v (p = 100 gives the max)."""
    values = np.sort(np.asarray(values, dtype=float))
    if not 0 < p <= 100:
        raise MetricsError(f"percentile must lie in (0, 100], got {p}")
    if values.size == 0:
        raise MetricsError("no distances")
    rank = int(np.ceil(p / 100.0 * values.size - 1e-9))
    return float(values[max(rank, 1) - 1])


def pooled_distances(A, B) -> np.ndarray:
    A, B = _as_set(A, "A"), _as_set(B, "B")
    if len(A) == 0 or len(B) == 0:
        raise MetricsError("Hausdorff distance needs two non-empty point sets")
    return np.concatenate([directed_distances(A, B), directed_distances(B, A)])


def hausdorff_percentile(A, B, p=DEFAULT_PERCENTILE) -> float:
    """Symmetric percentile Hausdorff distance over the pooled directed distances."""
    return nearest_rank_percentile(pooled_distances(A, B), p)


def registration_success_curve(A, B, thresholds=(DEFAULT_SUCCESS_THRESHOLD_MM,)) -> np.ndarray:
    """For each threshold, the largest percentile p (in %) with HD(p) <= threshold."""
    d = np.sort(pooled_distances(A, B))
    thresholds = np.atleast_1d(np.asarray(thresholds, dtype=float))
    counts = np.searchsorted(d, thresholds, side="right")
    return 100.0 * counts / d.size


@dataclass
class MetricsReport:
    percentile: float
    threshold_mm: float
    hausdorff_mm: float
    hausdorff_max_mm: float
    success_percentile: float
    n_a: int
    n_b: int

    def to_dict(self) -> dict:
        return {
            "threshold_mm": self.threshold_mm,
            "percentile": self.percentile,
            "hausdorff_mm": self.hausdorff_mm,
            "hausdorff_max_mm": self.hausdorff_max_mm,
            "success_percentile": self.success_percentile,
            "n_a": self.n_a,
            "n_b": self.n_b,
        }


def compare_point_sets(A, B, percentile=DEFAULT_PERCENTILE, threshold=DEFAULT_SUCCESS_THRESHOLD_MM) -> MetricsReport:
    A, B = _as_set(A, "A"), _as_set(B, "B")
    d = pooled_distances(A, B)
    return MetricsReport(
        percentile=float(percentile),
        threshold_mm=float(threshold),
        hausdorff_mm=nearest_rank_percentile(d, percentile),
        hausdorff_max_mm=float(d.max()),
        success_percentile=float(100.0 * np.count_nonzero(d <= threshold) / d.size),
        n_a=len(A),
        n_b=len(B),
    )


def load_points_csv(path, label=None) -> PointSet:
    """``x,y,z`` per line in mm; an optional non-numeric header line is skipped."""
    path = Path(path)
    rows = []
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                row = [c.strip() for c in row if c.strip()]
                if not row or row[0].startswith("#"):
                    continue
                try:
                    vals = [float(c) for c in row]
                except ValueError:
                    if not rows and lineno == 1:
                        continue
                    raise MetricsError(f"{path}:{lineno}: non-numeric value in {row}") from None
                if len(vals) not in (2, 3):
                    raise MetricsError(f"{path}:{lineno}: expected x,y,z, got {len(vals)} values")
                rows.append(vals + [0.0] * (3 - len(vals)))
    except OSError as exc:
        raise MetricsError(f"cannot read {path}: {exc}") from None
    return PointSet(np.array(rows, dtype=float).reshape(-1, 3), label or path.stem)


def write_points_csv(path, points) -> None:
    np.savetxt(path, np.asarray(points, dtype=float).reshape(-1, 3), delimiter=",", fmt="%.17g")


def write_report(path, report: MetricsReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
