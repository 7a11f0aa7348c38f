"""Video segmentation metrics at desk scale: tube AP, VPQ, mVC, mIoU.

Conventions (pinned here, cross-checked in tests):

* tube IoU pools intersections and unions over frames before dividing;
* AP follows COCO semantics: IoU thresholds 0.50:0.05:0.95, score-descending
  greedy matching to the best unmatched same-class tube, 101-point
  interpolated precision, averaged over thresholds and GT classes;
* VPQ slides windows of {1, 2, 4, 6} frames, pools classes inside a window,
  and averages per-window PQ over positions, then over window sizes;
* mVC_k averages, over k-frame windows and classes with nonempty GT
  intersection, the fraction of that intersection kept by the prediction;
* mIoU averages video-pooled IoU over the classes present in GT
  (class 0 is background/void and excluded).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

AP_THRESHOLDS = np.arange(0.50, 0.955, 0.05)
VPQ_WINDOWS = (1, 2, 4, 6)
VPQ_MATCH_IOU = 0.5


class MetricError(ValueError):
    pass


@dataclass
class TubePrediction:
    masks: np.ndarray   # (t, h, w) bool
    label: int
    score: float
    video: int = 0
    tube_id: int = 0


@dataclass
class TubeGroundTruth:
    masks: np.ndarray   # (t, h, w) bool
    label: int
    video: int = 0


@dataclass
class MetricReport:
    name: str
    value: float
    breakdown: dict[str, float] = field(default_factory=dict)
    extras: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "metric": self.name,
                "value": self.value,
                "breakdown": self.breakdown,
                "extras": self.extras,
            },
            sort_keys=True,
            indent=2,
        )


def tube_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Frame-pooled IoU; two entirely empty tubes count as identical."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise MetricError(f"tube shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


# ---------------------------------------------------------------------------
# Tube average precision


def video_ap(
    preds: list[TubePrediction],
    gts: list[TubeGroundTruth],
    thresholds: np.ndarray = AP_THRESHOLDS,
) -> MetricReport:
    classes = sorted({g.label for g in gts})
    if not classes:
        raise MetricError("video_ap: no ground-truth tubes")
    per_thresh: dict[float, list[float]] = {float(t): [] for t in thresholds}
    recalls_at = {1: [], 10: []}
    for cls in classes:
        cls_preds = sorted(
            [p for p in preds if p.label == cls],
            key=lambda p: (-p.score, p.video, p.tube_id),
        )
        cls_gts = [g for g in gts if g.label == cls]
        iou = np.zeros((len(cls_preds), len(cls_gts)))
        for i, p in enumerate(cls_preds):
            for j, g in enumerate(cls_gts):
                iou[i, j] = tube_iou(p.masks, g.masks) if p.video == g.video else 0.0
        for t in thresholds:
            tp_flags = _greedy_match(iou, float(t))
            per_thresh[float(t)].append(_interpolated_ap(tp_flags, len(cls_gts)))
            for k in recalls_at:
                kept = _topk_flags(cls_preds, tp_flags, k)
                recalls_at[k].append(kept / len(cls_gts))
    ap_by_thresh = {f"AP@{t:.2f}": float(np.mean(v)) for t, v in per_thresh.items()}
    value = float(np.mean(list(ap_by_thresh.values())))
    return MetricReport(
        "video_ap",
        value,
        breakdown=ap_by_thresh,
        extras={
            "AP50": ap_by_thresh["AP@0.50"],
            "AP75": ap_by_thresh["AP@0.75"],
            "AR@1": float(np.mean(recalls_at[1])),
            "AR@10": float(np.mean(recalls_at[10])),
        },
    )


def _greedy_match(iou: np.ndarray, thresh: float) -> list[bool]:
    """Score order is the row order; each row takes its highest-IoU
    unmatched GT at or above the threshold (first index wins ties)."""
    taken: set[int] = set()
    flags = []
    for i in range(iou.shape[0]):
        best_j, best_iou = -1, 0.0
        for j in range(iou.shape[1]):
            if j in taken or iou[i, j] < thresh:
                continue
            if iou[i, j] > best_iou:
                best_j, best_iou = j, iou[i, j]
        if best_j >= 0:
            taken.add(best_j)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _topk_flags(cls_preds, tp_flags, k: int) -> int:
    """TPs among the top-k scoring predictions per video."""
    seen: dict[int, int] = {}
    hits = 0
    for p, flag in zip(cls_preds, tp_flags):
        seen[p.video] = seen.get(p.video, 0) + 1
        if seen[p.video] <= k and flag:
            hits += 1
    return hits


def _interpolated_ap(tp_flags: list[bool], n_gt: int) -> float:
    if n_gt == 0:
        return 0.0
    if not tp_flags:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum([not f for f in tp_flags])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


# ---------------------------------------------------------------------------
# Video panoptic quality


def vpq(
    pred_tubes: list[TubePrediction],
    gt_tubes: list[TubeGroundTruth],
    windows=VPQ_WINDOWS,
    thing_classes: set[int] | None = None,
) -> MetricReport:
    """Single-video VPQ over sliding windows.

    Per-frame prediction masks must be disjoint (panoptic discipline);
    overlaps are an error. Within a window each tube needs IoU > 0.5 with a
    same-class GT tube to count as TP.
    """
    frames = gt_tubes[0].masks.shape[0] if gt_tubes else (
        pred_tubes[0].masks.shape[0] if pred_tubes else 0
    )
    _check_disjoint(pred_tubes, frames)
    breakdown = {}
    per_window_values = []
    for w in windows:
        w = int(w)
        positions = range(max(1, frames - w + 1)) if frames >= w else []
        pqs = []
        for start in positions:
            stats = _window_pq(pred_tubes, gt_tubes, start, start + w)
            if stats is not None:
                pqs.append(stats)
        value = float(np.mean(pqs)) if pqs else 1.0
        breakdown[f"PQ@{w}"] = value
        per_window_values.append(value)
    headline = float(np.mean(per_window_values)) if per_window_values else 1.0
    extras = {}
    if thing_classes is not None:
        things = [p for p in pred_tubes if p.label in thing_classes]
        stuff = [p for p in pred_tubes if p.label not in thing_classes]
        gt_things = [g for g in gt_tubes if g.label in thing_classes]
        gt_stuff = [g for g in gt_tubes if g.label not in thing_classes]
        if gt_things or things:
            extras["VPQ_thing"] = vpq(things, gt_things, windows).value
        if gt_stuff or stuff:
            extras["VPQ_stuff"] = vpq(stuff, gt_stuff, windows).value
    return MetricReport("vpq", headline, breakdown=breakdown, extras=extras)


def _check_disjoint(tubes: list[TubePrediction], frames: int) -> None:
    if not tubes:
        return
    total = np.zeros(tubes[0].masks.shape[1:], dtype=np.int64)
    for t in range(frames):
        total[:] = 0
        for tube in tubes:
            total += tube.masks[t]
        if (total > 1).any():
            raise MetricError(f"overlapping prediction segments at frame {t}")


def _window_pq(pred_tubes, gt_tubes, start: int, stop: int) -> float | None:
    preds = [
        (p.label, p.masks[start:stop]) for p in pred_tubes if p.masks[start:stop].any()
    ]
    gts = [
        (g.label, g.masks[start:stop]) for g in gt_tubes if g.masks[start:stop].any()
    ]
    if not preds and not gts:
        return None
    tp_iou, tp = 0.0, 0
    matched_pred: set[int] = set()
    matched_gt: set[int] = set()
    for i, (pl, pm) in enumerate(preds):
        for j, (gl, gm) in enumerate(gts):
            if pl != gl or j in matched_gt:
                continue
            iou = tube_iou(pm, gm)
            if iou > VPQ_MATCH_IOU:
                tp += 1
                tp_iou += iou
                matched_pred.add(i)
                matched_gt.add(j)
                break
    fp = len(preds) - len(matched_pred)
    fn = len(gts) - len(matched_gt)
    return tp_iou / (tp + 0.5 * fp + 0.5 * fn)


# ---------------------------------------------------------------------------
# Semantic metrics


def mvc(pred_maps: np.ndarray, gt_maps: np.ndarray, k: int) -> float:
    """Video consistency over k-frame windows on semantic class maps."""
    if k < 1:
        raise MetricError(f"mvc window must be >= 1, got {k}")
    frames = gt_maps.shape[0]
    if k > frames:
        raise MetricError(f"mvc window {k} exceeds video length {frames}")
    if pred_maps.shape != gt_maps.shape:
        raise MetricError(f"shape mismatch: {pred_maps.shape} vs {gt_maps.shape}")
    ratios = []
    for start in range(frames - k + 1):
        gw = gt_maps[start : start + k]
        pw = pred_maps[start : start + k]
        for cls in np.unique(gw):
            gt_common = np.all(gw == cls, axis=0)
            if not gt_common.any():
                continue
            pred_common = np.all(pw == cls, axis=0)
            ratios.append((gt_common & pred_common).sum() / gt_common.sum())
    return float(np.mean(ratios)) if ratios else 1.0


def miou(pred_maps: np.ndarray, gt_maps: np.ndarray, void_class: int = 0) -> float:
    """Mean over GT-present classes of video-pooled IoU; void excluded."""
    if pred_maps.shape != gt_maps.shape:
        raise MetricError(f"shape mismatch: {pred_maps.shape} vs {gt_maps.shape}")
    classes = [c for c in np.unique(gt_maps) if c != void_class]
    if not classes:
        return 1.0
    ious = []
    for cls in classes:
        inter = np.logical_and(pred_maps == cls, gt_maps == cls).sum()
        union = np.logical_or(pred_maps == cls, gt_maps == cls).sum()
        ious.append(inter / union if union else 1.0)
    return float(np.mean(ious))


# ---------------------------------------------------------------------------
# Desk-scale helpers used by the behavioral acceptance checks


def rasterize_semantic(tubes: list[dict], classes_offset: int, frames: int, canvas) -> np.ndarray:
    """Semantic maps from tubes: pixel takes the class (+offset) of the
    highest-scoring covering tube; background stays 0."""
    h, w = canvas
    out = np.zeros((frames, h, w), dtype=np.int64)
    for tube in sorted(tubes, key=lambda tb: tb["score"]):
        for t in range(frames):
            out[t][tube["masks"][t]] = tube["class"] + classes_offset
    return out


def association_accuracy(tube_masks: dict[int, np.ndarray], video) -> float:
    """Identity stability of predictions against ground truth.

    For each GT object and each visible frame after its first appearance,
    the claimed slot (max-IoU tube in that frame) must equal the slot
    claimed at the first appearance. Objects visible in fewer than two
    frames are skipped.
    """
    correct, total = 0, 0
    slots = sorted(tube_masks)
    for obj in range(video.object_count):
        visible = [
            t for t in range(video.frames) if video.visible_area(obj, t) > 0
        ]
        if len(visible) < 2:
            continue
        anchor = _best_slot(tube_masks, slots, video.masks[obj], visible[0])
        for t in visible[1:]:
            total += 1
            if _best_slot(tube_masks, slots, video.masks[obj], t) == anchor:
                correct += 1
    return correct / total if total else 1.0


def _best_slot(tube_masks, slots, gt_masks, frame: int) -> int:
    gt = gt_masks[frame].astype(bool)
    best_slot, best = -1, 0.0
    for s in slots:
        pred = tube_masks[s][frame]
        union = np.logical_or(pred, gt).sum()
        iou = np.logical_and(pred, gt).sum() / union if union else 0.0
        if iou > best:
            best_slot, best = s, iou
    return best_slot


def tube_mean_iou(tubes: list[dict], video) -> float:
    """Class-agnostic Hungarian matching of predicted tubes to GT tubes on
    tube IoU; mean over GT tubes, unmatched GT scoring zero."""
    from .matching import hungarian

    gt = [video.masks[i].astype(bool) for i in range(video.object_count)]
    if not gt:
        return 1.0
    if not tubes:
        return 0.0
    cost = np.zeros((len(tubes), len(gt)))
    for i, tube in enumerate(tubes):
        for j, g in enumerate(gt):
            cost[i, j] = -tube_iou(tube["masks"], g)
    assignment = hungarian(cost)
    total = sum(-cost[p, g] for p, g in assignment.pairs)
    return float(total / len(gt))
