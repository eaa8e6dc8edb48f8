"""Class-level, instance-level and detection metrics for 3D segmentations.

Instance volumes are integer arrays with 0 for background and positive ids
for instances. Ids need not be contiguous; ties are always broken towards
the lower id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

SWEEP_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(8))   # 0.50 .. 0.85


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"volume shapes differ: {a.shape} vs {b.shape}")


def _ratio(num, den, empty=1.0):
    return float(num) / float(den) if den else empty


# ---------------------------------------------------------------------------
# components
# ---------------------------------------------------------------------------

def connected_components(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Label foreground components; ids follow the first voxel in C scan order."""
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    rank = 1 if connectivity == 6 else 3
    structure = ndimage.generate_binary_structure(3, rank)
    labels, _ = ndimage.label(np.asarray(mask, dtype=bool), structure=structure)
    return labels.astype(np.int32)


def relabel_sequential(labels: np.ndarray) -> np.ndarray:
    """Map ids onto 1..K in order of first appearance in scan order."""
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids != 0
    order = ids[keep][np.argsort(first[keep], kind="stable")]
    lut = np.zeros(int(flat.max(initial=0)) + 1, dtype=np.int32)
    lut[order] = np.arange(1, order.size + 1, dtype=np.int32)
    return lut[labels]


# ---------------------------------------------------------------------------
# overlap bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class Overlap:
    gt_ids: np.ndarray
    pred_ids: np.ndarray
    gt_sizes: np.ndarray
    pred_sizes: np.ndarray
    inter: np.ndarray          # (len(gt_ids), len(pred_ids))

    @property
    def union(self) -> np.ndarray:
        return self.gt_sizes[:, None] + self.pred_sizes[None, :] - self.inter

    @property
    def jac(self) -> np.ndarray:
        u = self.union
        return np.divide(self.inter, u, out=np.zeros(u.shape), where=u > 0)


def overlap(gt: np.ndarray, pred: np.ndarray) -> Overlap:
    _check_same(gt, pred)
    g = np.asarray(gt).ravel().astype(np.int64)
    p = np.asarray(pred).ravel().astype(np.int64)
    if g.size and (g.min() < 0 or p.min() < 0):
        raise ValueError("instance ids must be non-negative")
    gids = np.unique(g[g > 0])
    pids = np.unique(p[p > 0])
    gi = np.searchsorted(gids, g)           # only meaningful where g > 0
    pi = np.searchsorted(pids, p)
    both = (g > 0) & (p > 0)
    inter = np.zeros((gids.size, pids.size), dtype=np.int64)
    np.add.at(inter, (gi[both], pi[both]), 1)
    gsz = np.bincount(gi[g > 0], minlength=gids.size).astype(np.int64)
    psz = np.bincount(pi[p > 0], minlength=pids.size).astype(np.int64)
    return Overlap(gids, pids, gsz, psz, inter)


@dataclass
class InstanceMatchResult:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    fp_pred_ids: list[int] = field(default_factory=list)
    fn_gt_ids: list[int] = field(default_factory=list)

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.fp_pred_ids)

    @property
    def fn(self) -> int:
        return len(self.fn_gt_ids)


def match_instances(gt, pred, t: float = 0.5, strict: bool = False,
                    ov: Overlap | None = None) -> InstanceMatchResult:
    """One-to-one matching of instances whose JAC is >= ``t`` (> ``t`` when
    ``strict``). Candidates are taken greedily by descending JAC; for
    ``t >= 0.5`` at most one candidate per instance exists except on exact ties."""
    if t < 0.5:
        raise ValueError(f"overlap threshold must be >= 0.5, got {t}")
    ov = ov or overlap(gt, pred)
    jac = ov.jac
    ok = jac > t if strict else jac >= t
    gi, pi = np.nonzero(ok & (ov.inter > 0))
    order = sorted(range(gi.size), key=lambda n: (-jac[gi[n], pi[n]], gi[n], pi[n]))
    used_g, used_p = set(), set()
    res = InstanceMatchResult()
    for n in order:
        a, b = int(gi[n]), int(pi[n])
        if a in used_g or b in used_p:
            continue
        used_g.add(a)
        used_p.add(b)
        res.pairs.append((int(ov.gt_ids[a]), int(ov.pred_ids[b]), float(jac[a, b])))
    res.pairs.sort()
    res.fn_gt_ids = [int(v) for k, v in enumerate(ov.gt_ids) if k not in used_g]
    res.fp_pred_ids = [int(v) for k, v in enumerate(ov.pred_ids) if k not in used_p]
    return res


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def dsc_jac(p: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Dice and Jaccard of two binary volumes; both empty counts as perfect."""
    _check_same(p, y)
    p = np.asarray(p, dtype=bool)
    y = np.asarray(y, dtype=bool)
    inter = int(np.count_nonzero(p & y))
    sp, sy = int(p.sum()), int(y.sum())
    if sp + sy == 0:
        return 1.0, 1.0
    return 2.0 * inter / (sp + sy), inter / (sp + sy - inter)


def aji(gt: np.ndarray, pred: np.ndarray) -> float:
    """Aggregated Jaccard index.

    Each GT instance takes the prediction of highest JAC with it (lower id on
    ties; a prediction may serve several GT instances). A GT instance that
    overlaps nothing adds only its own size to the denominator. Predictions
    never selected add their size to the denominator.
    """
    ov = overlap(gt, pred)
    if ov.gt_ids.size == 0:
        return 1.0 if ov.pred_ids.size == 0 else 0.0
    num = den = 0
    used = np.zeros(ov.pred_ids.size, dtype=bool)
    jac = ov.jac
    for j in range(ov.gt_ids.size):
        if ov.pred_ids.size == 0 or ov.inter[j].max() == 0:
            den += int(ov.gt_sizes[j])
            continue
        k = int(np.argmax(jac[j]))
        used[k] = True
        num += int(ov.inter[j, k])
        den += int(ov.gt_sizes[j] + ov.pred_sizes[k] - ov.inter[j, k])
    den += int(ov.pred_sizes[~used].sum())
    return num / den


def pq(gt: np.ndarray, pred: np.ndarray) -> tuple[float, float, float]:
    """Panoptic quality ``(pq, sq, dq)`` with matches at JAC > 0.5."""
    m = match_instances(gt, pred, 0.5, strict=True)
    if m.tp + m.fp + m.fn == 0:
        return 1.0, 1.0, 1.0
    sq = float(np.mean([j for _, _, j in m.pairs])) if m.pairs else 0.0
    dq = m.tp / (m.tp + 0.5 * m.fp + 0.5 * m.fn)
    return sq * dq, sq, dq


def f1_at(gt: np.ndarray, pred: np.ndarray, t: float) -> tuple[float, float, float]:
    """``(f1, sen, spe_as_ppv)`` with matches at JAC >= t.

    The third value is TP/(TP+FP): instance-level true negatives do not
    exist, so the "specificity" column is reported as positive predictive value.
    """
    m = match_instances(gt, pred, t)
    return _f1_from(m)


def _f1_from(m: InstanceMatchResult):
    f1 = _ratio(m.tp, m.tp + 0.5 * m.fp + 0.5 * m.fn)
    return f1, _ratio(m.tp, m.tp + m.fn), _ratio(m.tp, m.tp + m.fp)


def f1_sweep(gt, pred, thresholds=SWEEP_THRESHOLDS) -> list[tuple[float, float, float, float]]:
    """``(t, f1, sen, ppv)`` for every threshold."""
    ov = overlap(gt, pred)
    return [(t,) + _f1_from(match_instances(gt, pred, t, ov=ov)) for t in thresholds]


def bounding_boxes(labels: np.ndarray) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Inclusive ``(lo, hi)`` voxel corners per instance id."""
    out = {}
    for i, sl in enumerate(ndimage.find_objects(np.asarray(labels, dtype=np.int64)), 1):
        if sl is None:
            continue
        out[i] = (np.array([s.start for s in sl]), np.array([s.stop - 1 for s in sl]))
    return out


def box_iou(a, b) -> float:
    lo = np.maximum(a[0], b[0])
    hi = np.minimum(a[1], b[1])
    inter = float(np.prod(np.clip(hi - lo + 1, 0, None)))
    va = float(np.prod(a[1] - a[0] + 1))
    vb = float(np.prod(b[1] - b[0] + 1))
    return inter / (va + vb - inter)


def instance_scores(pred: np.ndarray, prob: np.ndarray) -> dict[int, float]:
    """Mean probability inside every predicted instance."""
    _check_same(pred, prob)
    ids = np.unique(pred[pred > 0])
    means = ndimage.mean(prob, labels=pred, index=ids)
    return {int(i): float(m) for i, m in zip(ids, np.atleast_1d(means))}


def precision_recall(gt, pred, scores: dict[int, float], iou_t: float):
    """Precision and recall after each score-ranked detection."""
    gboxes = bounding_boxes(gt)
    pboxes = bounding_boxes(pred)
    if set(scores) != set(pboxes):
        raise ValueError(f"need exactly one score per predicted instance: got {len(scores)} "
                         f"scores for {len(pboxes)} instances")
    order = sorted(pboxes, key=lambda i: (-scores[i], i))
    gids = sorted(gboxes)
    matched = set()
    tp = np.zeros(len(order))
    for n, pid in enumerate(order):
        best, best_g = -1.0, None
        for gid in gids:
            if gid in matched:
                continue
            iou = box_iou(pboxes[pid], gboxes[gid])
            if iou >= iou_t and iou > best:
                best, best_g = iou, gid
        if best_g is not None:
            matched.add(best_g)
            tp[n] = 1
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(order) + 1)
    recall = ctp / len(gids) if gids else np.zeros(len(order))
    return precision, recall, len(gids)


def ap_bbox(gt: np.ndarray, pred: np.ndarray, scores: dict[int, float], iou_t: float) -> float:
    """Average precision over 3D bounding boxes, all-point interpolation."""
    _check_same(gt, pred)
    precision, recall, n_gt = precision_recall(gt, pred, scores, iou_t)
    if n_gt == 0:
        return 1.0 if precision.size == 0 else 0.0
    if precision.size == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    # precision envelope: best precision at any recall at or beyond this one
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))


# ---------------------------------------------------------------------------
# whole-volume evaluation and reports
# ---------------------------------------------------------------------------

def evaluate(gt_instances: np.ndarray, prob: np.ndarray, threshold: float = 0.5,
             connectivity: int = 26, sweep: bool = False) -> dict[str, float]:
    """All metrics for one probability (or binary) volume against GT instances."""
    _check_same(gt_instances, prob)
    prob = np.asarray(prob, dtype=np.float64)
    binary = prob >= threshold
    pred = connected_components(binary, connectivity)
    out = {}
    out["dsc"], out["jac"] = dsc_jac(binary, gt_instances > 0)
    out["aji"] = aji(gt_instances, pred)
    out["pq"], out["sq"], out["dq"] = pq(gt_instances, pred)
    scores = instance_scores(pred, prob)
    thresholds = SWEEP_THRESHOLDS if sweep else (0.5, 0.75)
    for t, f1, sen, ppv in f1_sweep(gt_instances, pred, thresholds):
        tag = f"{int(round(t * 100))}"
        out[f"f1_{tag}"] = f1
        out[f"sen_{tag}"] = sen
        out[f"spe_as_ppv_{tag}"] = ppv
        out[f"ap_{tag}"] = ap_bbox(gt_instances, pred, scores, t)
    out["n_gt"] = float(len(np.unique(gt_instances[gt_instances > 0])))
    out["n_pred"] = float(pred.max(initial=0))
    return out


def format_table(metrics: dict[str, float]) -> str:
    labels = [k.replace("spe_as_ppv", "SPE (as PPV)") for k in metrics]
    width = max(len(k) for k in labels + ["metric"])
    lines = [f"{'metric':<{width}}  value", "-" * (width + 12)]
    for label, v in zip(labels, metrics.values()):
        lines.append(f"{label:<{width}}  {v:.6f}")
    return "\n".join(lines)


def format_kv(metrics: dict[str, float]) -> str:
    return "".join(f"{k}={v!r}\n" for k, v in metrics.items())


def parse_kv(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = float(v)
    return out
