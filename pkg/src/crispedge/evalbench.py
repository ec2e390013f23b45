"""Boundary-detection scoring: post-processing, tolerance matching, and
precision/recall summaries under three criteria.

A detection is judged three ways from the same probability map: at the
standard tolerance after non-maximum suppression and thinning (correctness),
at a quarter of that tolerance with the same post-processing (localness), and
at the standard tolerance with no post-processing at all (thickness), which
penalizes maps that are only thin because a cleanup pass made them so.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.spatial import cKDTree

from .errors import ContractError, DomainError, ShapeError
from .losses import AnnotationSet


def fmt(x: float) -> str:
    """Fixed 6-significant-digit rendering used by every text output."""
    return f"{x:.6g}"


def as_probability_map(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"probability map must be 2-D, got shape {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise DomainError(f"probabilities must lie in [0, 1], range is [{arr.min()}, {arr.max()}]")
    return arr


def as_boundary_map(b) -> np.ndarray:
    arr = np.asarray(b)
    if arr.ndim != 2:
        raise ShapeError(f"boundary map must be 2-D, got shape {arr.shape}")
    if arr.dtype != bool:
        vals = np.unique(arr)
        if not np.all(np.isin(vals, (0, 1))):
            raise DomainError(f"boundary map must be binary, found values {vals[:5]}")
        arr = arr.astype(bool)
    return arr


# ---------------------------------------------------------------------------
# tolerances


def tolerance_pixels(h: int, w: int, max_dist_fraction: float) -> float:
    """Matching radius in pixels: the stated fraction of the image diagonal."""
    if h < 1 or w < 1:
        raise ContractError(f"image dims must be >= 1, got {h}x{w}")
    if max_dist_fraction <= 0.0:
        raise ContractError(f"tolerance fraction must be positive, got {max_dist_fraction}")
    return max_dist_fraction * math.sqrt(h * h + w * w)


@dataclass(frozen=True)
class Tolerance:
    max_dist_fraction: float
    pixels: float

    @classmethod
    def for_image(cls, h: int, w: int, max_dist_fraction: float) -> "Tolerance":
        return cls(max_dist_fraction, tolerance_pixels(h, w, max_dist_fraction))


# ---------------------------------------------------------------------------
# post-processing


def thin_binary(mask: np.ndarray) -> np.ndarray:
    """Two-subiteration morphological thinning to unit width.

    Classic pattern-table scheme: a pixel is deletable when it has 2..6 set
    neighbors, exactly one 0->1 transition around its ring, and the
    subiteration's two 3-neighbor products vanish; flagged pixels of each
    subiteration are removed simultaneously, so the result is deterministic.
    """
    img = as_boundary_map(mask).astype(np.uint8)
    while True:
        changed = False
        for step in (0, 1):
            p = np.pad(img, 1)
            p2 = p[:-2, 1:-1]
            p3 = p[:-2, 2:]
            p4 = p[1:-1, 2:]
            p5 = p[2:, 2:]
            p6 = p[2:, 1:-1]
            p7 = p[2:, :-2]
            p8 = p[1:-1, :-2]
            p9 = p[:-2, :-2]
            ring = (p2, p3, p4, p5, p6, p7, p8, p9)
            b = np.zeros(img.shape, dtype=np.int32)
            for q in ring:
                b += q
            a = np.zeros(img.shape, dtype=np.int32)
            for q, r in zip(ring, ring[1:] + (p2,)):
                a += ((q == 0) & (r == 1))
            if step == 0:
                extra = (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
            else:
                extra = (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
            kill = (img == 1) & (b >= 2) & (b <= 6) & (a == 1) & extra
            if kill.any():
                img[kill] = 0
                changed = True
        if not changed:
            return img.astype(bool)


_DIR_OFFSETS = ((0, 1), (1, 1), (1, 0), (1, -1))  # E-W, SE-NW, S-N, SW-NE axes


def nms_thin(p) -> np.ndarray:
    """Suppress non-maxima across the local edge, then thin to unit width.

    Orientation comes from the gradient of a sigma=1 Gaussian-smoothed copy,
    quantized to four axes. A pixel survives unless a neighbor along its axis
    is strictly greater, so ties (and flat ridges) are kept and the thinning
    pass resolves them toward the lexicographically smaller index. Surviving
    pixels keep their original values.
    """
    p = as_probability_map(p)
    if not p.any():
        return p.copy()
    h, w = p.shape
    smooth = gaussian_filter(p, sigma=1.0, mode="nearest")
    gy, gx = np.gradient(smooth)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.floor(((theta + np.pi / 8) % np.pi) / (np.pi / 4)).astype(np.int64)
    padded = np.pad(p, 1)
    keep = p > 0.0
    for b, (dy, dx) in enumerate(_DIR_OFFSETS):
        fwd = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        bwd = padded[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        keep &= (bins != b) | ((fwd <= p) & (bwd <= p))
    support = thin_binary(keep & (p > 0.0))
    return np.where(support, p, 0.0)


# ---------------------------------------------------------------------------
# matching


def _matched_rows(det_pts: np.ndarray, gt_pts: np.ndarray, tol_px: float) -> np.ndarray:
    """Indices into det_pts matched by a maximum-cardinality assignment to
    gt_pts under the distance cap. Deterministic for fixed inputs."""
    if len(det_pts) == 0 or len(gt_pts) == 0:
        return np.empty(0, dtype=np.int64)
    tree = cKDTree(gt_pts)
    neighbor_lists = tree.query_ball_point(det_pts, r=tol_px)
    indptr = [0]
    indices = []
    for lst in neighbor_lists:
        indices.extend(sorted(lst))
        indptr.append(len(indices))
    if not indices:
        return np.empty(0, dtype=np.int64)
    graph = csr_matrix(
        (np.ones(len(indices), dtype=np.int8), np.asarray(indices, dtype=np.int64), np.asarray(indptr)),
        shape=(len(det_pts), len(gt_pts)))
    col_of_row = maximum_bipartite_matching(graph, perm_type="column")
    return np.flatnonzero(col_of_row != -1)


def match_boundaries(detected, gt, tol_px: float) -> tuple[int, int]:
    """Count one-to-one correspondences within ``tol_px`` Euclidean distance,
    maximizing the number of pairs; both returned counts are equal."""
    det = as_boundary_map(detected)
    gtm = as_boundary_map(gt)
    if det.shape != gtm.shape:
        raise ShapeError(f"detected {det.shape} and ground truth {gtm.shape} differ in shape")
    matched = len(_matched_rows(np.argwhere(det), np.argwhere(gtm), tol_px))
    return matched, matched


# ---------------------------------------------------------------------------
# counting and curves


@dataclass(frozen=True)
class MatchCounts:
    threshold: float
    matched_detected: int
    total_detected: int
    matched_gt: int
    total_gt: int

    @property
    def precision(self) -> float:
        return self.matched_detected / self.total_detected if self.total_detected else 1.0

    @property
    def recall(self) -> float:
        return self.matched_gt / self.total_gt if self.total_gt else 1.0

    @property
    def f_measure(self) -> float:
        p, r = self.precision, self.recall
        return 2.0 * p * r / (p + r) if p + r > 0.0 else 0.0


def default_thresholds(n: int = 33) -> list[float]:
    """n uniform thresholds strictly inside (0, 1)."""
    if n < 1:
        raise ContractError(f"threshold count must be >= 1, got {n}")
    return [k / (n + 1) for k in range(1, n + 1)]


def _counts_for_binary(det: np.ndarray, annotations: AnnotationSet, t: float, tol_px: float) -> MatchCounts:
    # the full detected map is matched against every annotator in file order;
    # recall sums each annotator's matches, while a detected pixel counts
    # toward precision once no matter how many annotators it satisfies
    det_pts = np.argwhere(det)
    total_detected = len(det_pts)
    matched_union = np.zeros(total_detected, dtype=bool)
    matched_gt = 0
    total_gt = 0
    for k in range(annotations.n):
        gt_pts = np.argwhere(annotations.maps[k] > 0.5)
        total_gt += len(gt_pts)
        rows = _matched_rows(det_pts, gt_pts, tol_px)
        matched_gt += len(rows)
        matched_union[rows] = True
    return MatchCounts(t, int(matched_union.sum()), total_detected, matched_gt, total_gt)


def pr_at_threshold(p, annotations: AnnotationSet, t: float, tol_px: float,
                    post_process: bool) -> MatchCounts:
    """Binarize at ``p >= t`` (after post-processing when requested) and
    match against every annotator in order."""
    if not 0.0 < t < 1.0:
        raise ContractError(f"threshold must be in (0, 1), got {t}")
    p = as_probability_map(p)
    base = nms_thin(p) if post_process else p
    return _counts_for_binary(base >= t, annotations, t, tol_px)


@dataclass(frozen=True)
class BenchmarkScores:
    ods: float
    ois: float
    ap: float
    criterion: str


def _aggregate_prf(per_image: Sequence[MatchCounts]) -> tuple[float, float, float]:
    md = sum(c.matched_detected for c in per_image)
    td = sum(c.total_detected for c in per_image)
    mg = sum(c.matched_gt for c in per_image)
    tg = sum(c.total_gt for c in per_image)
    p = md / td if td else 1.0
    r = mg / tg if tg else 1.0
    f = 2.0 * p * r / (p + r) if p + r > 0.0 else 0.0
    return p, r, f


def average_precision(points: Sequence[tuple[float, float]]) -> float:
    """Area under the precision envelope over recall.

    ``points`` are (recall, precision) pairs; precision is first made
    non-increasing in recall by a running max, then step-integrated down to
    recall 0.
    """
    by_recall: dict[float, float] = {}
    for r, p in points:
        by_recall[r] = max(p, by_recall.get(r, 0.0))
    recalls = sorted(by_recall, reverse=True)
    area = 0.0
    best = 0.0
    for i, r in enumerate(recalls):
        best = max(best, by_recall[r])
        lower = recalls[i + 1] if i + 1 < len(recalls) else 0.0
        area += (r - lower) * best
    return area


def summarize(all_counts: Sequence[Sequence[MatchCounts]],
              criterion: str = "correctness") -> tuple[BenchmarkScores, list]:
    """Reduce per-image, per-threshold counts to dataset scores.

    The best-threshold F over dataset-aggregated counts, the mean of each
    image's own best F, the area under the aggregated PR curve, and that
    curve as (threshold, precision, recall, f) rows.
    """
    images = [list(rows) for rows in all_counts]
    if not images:
        raise ContractError("summarize needs at least one image")
    grids = {tuple(c.threshold for c in rows) for rows in images}
    if len(grids) != 1:
        raise ContractError("images were scored on different threshold grids")
    grid = grids.pop()
    if not grid:
        raise ContractError("empty threshold grid")

    curve = []
    for k, t in enumerate(grid):
        p, r, f = _aggregate_prf([rows[k] for rows in images])
        curve.append((t, p, r, f))
    curve.sort(key=lambda row: row[0])
    ods = max(row[3] for row in curve)
    ois = sum(max(c.f_measure for c in rows) for rows in images) / len(images)
    ap = average_precision([(r, p) for (_, p, r, _) in curve])
    return BenchmarkScores(ods=ods, ois=ois, ap=ap, criterion=criterion), curve


# ---------------------------------------------------------------------------
# the three criteria


@dataclass(frozen=True)
class CriterionResult:
    scores: BenchmarkScores
    curve: list


@dataclass(frozen=True)
class EvalReport:
    correctness: CriterionResult
    localness: CriterionResult
    thickness: CriterionResult

    def results(self) -> list[CriterionResult]:
        return [self.correctness, self.localness, self.thickness]


def eval_criteria(preds: Sequence, annotations_per_image: Sequence[AnnotationSet],
                  base_fraction: float, n_thresholds: int = 33, jobs: int = 1) -> EvalReport:
    """Score every prediction three ways: standard tolerance with
    post-processing, quarter tolerance with post-processing, and standard
    tolerance on the raw map."""
    preds = [as_probability_map(p) for p in preds]
    anns = list(annotations_per_image)
    if not preds:
        raise ContractError("no predictions to evaluate")
    if len(preds) != len(anns):
        raise ContractError(f"{len(preds)} predictions but {len(anns)} annotation sets")
    for p, a in zip(preds, anns):
        if p.shape != a.spatial_shape:
            raise ShapeError(f"prediction {p.shape} does not match annotations {a.spatial_shape}")
    thresholds = default_thresholds(n_thresholds)

    def score_image(args):
        p, ann = args
        tol = tolerance_pixels(p.shape[0], p.shape[1], base_fraction)
        thin = nms_thin(p)
        rows = {"correctness": [], "localness": [], "thickness": []}
        for t in thresholds:
            rows["correctness"].append(_counts_for_binary(thin >= t, ann, t, tol))
            rows["localness"].append(_counts_for_binary(thin >= t, ann, t, tol / 4.0))
            rows["thickness"].append(_counts_for_binary(p >= t, ann, t, tol))
        return rows

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_image = list(pool.map(score_image, zip(preds, anns)))
    else:
        per_image = [score_image(x) for x in zip(preds, anns)]

    out = {}
    for name in ("correctness", "localness", "thickness"):
        scores, curve = summarize([rows[name] for rows in per_image], criterion=name)
        out[name] = CriterionResult(scores=scores, curve=curve)
    return EvalReport(**out)


# ---------------------------------------------------------------------------
# text emission


def pr_curve_csv(curve: Sequence[tuple]) -> str:
    lines = ["threshold,precision,recall,f"]
    for t, p, r, f in curve:
        lines.append(f"{fmt(t)},{fmt(p)},{fmt(r)},{fmt(f)}")
    return "\n".join(lines) + "\n"


def score_block(report: EvalReport) -> str:
    suffix = {"correctness": "c", "localness": "l", "thickness": "t"}
    lines = []
    for res in report.results():
        s = res.scores
        tag = suffix[s.criterion]
        lines.append(f"ods_{tag}={fmt(s.ods)}")
        lines.append(f"ois_{tag}={fmt(s.ois)}")
        lines.append(f"ap_{tag}={fmt(s.ap)}")
    return "\n".join(lines) + "\n"
