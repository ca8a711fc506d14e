"""Distance-based agreement metrics between mask sets.

The central quantity is the squared generalized energy distance between
the set of predicted segmentations and the set of annotations, built on
d = 1 - IoU. Expectations run over ordered pairs drawn with
replacement, so self-pairs count. An optimal-assignment IoU (annotations
duplicated to the prediction count, Kuhn-Munkres matching) complements
it. Both come in volume form and in a per-axial-slice form that skips
slices empty in every annotation and every prediction.

Empty-mask conventions: IoU of two empty masks is 1, IoU of an empty
mask against a non-empty one is 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, UsageError

N_ANNOTATORS = 4


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks on the same grid."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"iou: mask grids {a.shape} and {b.shape} differ")
    am = a.astype(bool)
    bm = b.astype(bool)
    union = int(np.logical_or(am, bm).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(am, bm).sum())
    return inter / union


def iou_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - IoU, the distance used throughout the metrics."""
    return 1.0 - iou(a, b)


@dataclass
class MaskSetPair:
    """Annotations (exactly four) and predictions on one shared grid."""

    gt: list
    pred: list

    def __post_init__(self):
        if len(self.gt) != N_ANNOTATORS:
            raise UsageError(f"expected {N_ANNOTATORS} annotation masks, got {len(self.gt)}")
        if len(self.pred) < 1:
            raise UsageError("need at least one prediction mask")
        self.gt = [np.asarray(m) for m in self.gt]
        self.pred = [np.asarray(m) for m in self.pred]
        grid = self.gt[0].shape
        for m in self.gt + self.pred:
            if m.shape != grid:
                raise ShapeError(f"mask grid {m.shape} != {grid}")


def _mask_matrix(masks: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([np.asarray(m).astype(bool).reshape(-1) for m in masks])


def _pairwise_distance(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> np.ndarray:
    """Matrix of 1 - IoU over all pairs, vectorized via bit matrices."""
    ma = _mask_matrix(a).astype(np.float64)
    mb = _mask_matrix(b).astype(np.float64)
    inter = ma @ mb.T
    sizes_a = ma.sum(axis=1)
    sizes_b = mb.sum(axis=1)
    union = sizes_a[:, None] + sizes_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou_mat = np.where(union > 0, inter / union, 1.0)
    return 1.0 - iou_mat


def _ged_squared_masks(gt: Sequence[np.ndarray], pred: Sequence[np.ndarray],
                       distance: Callable | None) -> float:
    if distance is None:
        cross = _pairwise_distance(pred, gt)
        dss = _pairwise_distance(pred, pred)
        dyy = _pairwise_distance(gt, gt)
        return float(2.0 * cross.mean() - dss.mean() - dyy.mean())
    cross = np.mean([[distance(s, y) for y in gt] for s in pred])
    dss = np.mean([[distance(s, s2) for s2 in pred] for s in pred])
    dyy = np.mean([[distance(y, y2) for y2 in gt] for y in gt])
    return float(2.0 * cross - dss - dyy)


def ged_squared(pair: MaskSetPair, distance: Callable | None = None) -> float:
    """Squared generalized energy distance between predictions and annotations.

    2 E[d(S,Y)] - E[d(S,S')] - E[d(Y,Y')], expectations over ordered
    pairs with replacement (self-pairs included). distance defaults to
    1 - IoU; pass a callable (mask, mask) -> float to override.
    """
    return _ged_squared_masks(pair.gt, pair.pred, distance)


# ---------------------------------------------------------------------
# optimal assignment
# ---------------------------------------------------------------------

@dataclass
class AssignmentResult:
    """matching[i] is the column assigned to row i."""

    matching: tuple
    total_cost: float


def _km_min_cost(cost: np.ndarray) -> tuple[list[int], float]:
    """Kuhn-Munkres with potentials; returns (row_to_col, optimal total)."""
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match_row = np.zeros(n + 1, dtype=int)  # column j -> row, 0 while free
    way = np.zeros(n + 1, dtype=int)
    cpad = np.zeros((n + 1, n + 1))
    cpad[1:, 1:] = cost
    for i in range(1, n + 1):
        match_row[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_row[j0]
            free = ~used
            free[0] = False
            cur = cpad[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            masked = np.where(free, minv, inf)
            j1 = int(np.argmin(masked[1:])) + 1
            delta = masked[j1]
            u[match_row[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if match_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_row[j0] = match_row[j1]
            j0 = j1
    row_to_col = [0] * n
    for j in range(1, n + 1):
        if match_row[j]:
            row_to_col[match_row[j] - 1] = j - 1
    total = float(sum(cost[i, row_to_col[i]] for i in range(n)))
    return row_to_col, total


def hungarian_assign(cost) -> AssignmentResult:
    """Minimum-cost perfect matching on a square cost matrix.

    Among all optimal matchings, returns the one whose column sequence
    (row 0's column, row 1's column, ...) is lexicographically smallest,
    which makes results deterministic under cost ties.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ShapeError(f"cost matrix must be square, got shape {cost.shape}")
    n = cost.shape[0]
    if n < 1:
        raise UsageError("cost matrix must be at least 1x1")
    if not np.all(np.isfinite(cost)):
        raise UsageError("cost matrix entries must be finite")
    _, best_total = _km_min_cost(cost)
    tol = 1e-9 * max(1.0, abs(best_total))
    free_cols = list(range(n))
    chosen: list[int] = []
    fixed_cost = 0.0
    for i in range(n):
        for j in free_cols:
            rest = [c for c in free_cols if c != j]
            sub_total = 0.0
            if i < n - 1:
                sub = cost[np.ix_(range(i + 1, n), rest)]
                sub_total = _km_min_cost(sub)[1]
            if fixed_cost + cost[i, j] + sub_total <= best_total + tol:
                chosen.append(j)
                fixed_cost += float(cost[i, j])
                free_cols = rest
                break
        else:  # pragma: no cover - optimality guarantees a choice exists
            raise RuntimeError("assignment refinement failed to extend a prefix")
    total = float(sum(cost[i, chosen[i]] for i in range(n)))
    return AssignmentResult(matching=tuple(chosen), total_cost=total)


def _matched_iou_masks(gt: Sequence[np.ndarray], pred: Sequence[np.ndarray]) -> float:
    n = len(pred)
    if n % N_ANNOTATORS != 0:
        raise UsageError(f"prediction count {n} must be a multiple of "
                         f"{N_ANNOTATORS} so annotations can be duplicated evenly")
    gt_dup = list(gt) * (n // N_ANNOTATORS)
    cost = _pairwise_distance(gt_dup, pred)
    # any optimal matching yields the same total, hence the same mean
    _, total = _km_min_cost(cost)
    return 1.0 - total / n


def hungarian_matched_iou(pair: MaskSetPair) -> float:
    """Mean IoU under an optimal prediction-to-annotation matching.

    The four annotations are duplicated N/4 times to square the cost
    matrix (entries 1 - IoU) before matching.
    """
    return _matched_iou_masks(pair.gt, pair.pred)


# ---------------------------------------------------------------------
# per-slice protocol
# ---------------------------------------------------------------------

@dataclass
class Slice2DResult:
    """Per-axial-slice metric means; None when every slice was skipped."""

    ged: float | None
    matched_iou: float | None
    n_slices_used: int
    n_slices_skipped: int


def eval_2d_protocol(pair: MaskSetPair) -> Slice2DResult:
    """Metrics averaged over axial slices with any annotated or predicted
    content; slices empty in all four annotations and all predictions are
    skipped."""
    depth = pair.gt[0].shape[0]
    geds = []
    ious = []
    skipped = 0
    for z in range(depth):
        gt_s = [m[z] for m in pair.gt]
        pred_s = [m[z] for m in pair.pred]
        if not any(m.any() for m in gt_s) and not any(m.any() for m in pred_s):
            skipped += 1
            continue
        geds.append(_ged_squared_masks(gt_s, pred_s, None))
        ious.append(_matched_iou_masks(gt_s, pred_s))
    if not geds:
        return Slice2DResult(ged=None, matched_iou=None, n_slices_used=0,
                             n_slices_skipped=skipped)
    return Slice2DResult(ged=float(np.mean(geds)), matched_iou=float(np.mean(ious)),
                         n_slices_used=len(geds), n_slices_skipped=skipped)


@dataclass
class CaseMetrics:
    """All agreement metrics for one case."""

    ged3d: float
    iou3d: float
    ged2d: float | None
    iou2d: float | None
    n_samples: int
    skipped_slices: int


def eval_case(pair: MaskSetPair) -> CaseMetrics:
    """Volume metrics plus the per-slice protocol for one case."""
    sl = eval_2d_protocol(pair)
    return CaseMetrics(ged3d=ged_squared(pair),
                       iou3d=hungarian_matched_iou(pair),
                       ged2d=sl.ged,
                       iou2d=sl.matched_iou,
                       n_samples=len(pair.pred),
                       skipped_slices=sl.n_slices_skipped)


# ---------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------

_REPORT_FIELDS = ["case_id", "ged2d", "iou2d", "ged3d", "iou3d",
                  "n_samples", "skipped_slices"]


def case_record(case_id: str, m: CaseMetrics) -> dict:
    return {"case_id": case_id, "ged2d": m.ged2d, "iou2d": m.iou2d,
            "ged3d": m.ged3d, "iou3d": m.iou3d, "n_samples": m.n_samples,
            "skipped_slices": m.skipped_slices}


def summarize(records: list[dict]) -> dict:
    """Mean metrics over case records; 2D means skip no-content cases."""
    def mean_of(key, rows):
        vals = [r[key] for r in rows if r.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    return {"n_cases": len(records),
            "mean_ged3d": mean_of("ged3d", records),
            "mean_iou3d": mean_of("iou3d", records),
            "mean_ged2d": mean_of("ged2d", records),
            "mean_iou2d": mean_of("iou2d", records),
            "n_cases_with_2d": sum(1 for r in records if r.get("ged2d") is not None)}


def write_metrics_jsonl(records: list[dict], path) -> None:
    """One canonical-JSON record per line, summary record last."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
        summary = dict(summarize(records), record="summary")
        fh.write(json.dumps(summary, sort_keys=True, separators=(",", ":")) + "\n")


def write_metrics_csv(records: list[dict], path) -> None:
    """The same per-case records as CSV; None becomes an empty cell."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_REPORT_FIELDS)
        writer.writeheader()
        for rec in records:
            row = {k: ("" if rec.get(k) is None else rec.get(k)) for k in _REPORT_FIELDS}
            writer.writerow(row)
