"""Hungarian assignment, matching costs, and the staged training objectives.

The assignment cost side works on detached numpy values (matching is not
differentiated through); the loss side is built from autodiff ops so the
staged objectives backpropagate into whichever stage is being trained.
Masks are handled flattened, shape (rows, pixels).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    cl: float = 2.0
    cls: float = 2.0
    dice: float = 5.0
    ce: float = 5.0

    def __post_init__(self):
        if min(self.cl, self.cls, self.dice, self.ce) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class Assignment:
    """Injective map from prediction rows to ground-truth indices."""

    pairs: tuple[tuple[int, int], ...]
    n_pred: int
    n_gt: int

    def __post_init__(self):
        preds = [p for p, _ in self.pairs]
        gts = [g for _, g in self.pairs]
        if len(set(preds)) != len(preds) or len(set(gts)) != len(gts):
            raise ValueError("assignment is not injective")

    @property
    def pred_indices(self) -> list[int]:
        return [p for p, _ in self.pairs]

    @property
    def gt_indices(self) -> list[int]:
        return [g for _, g in self.pairs]

    def gt_for_pred(self) -> dict[int, int]:
        return {p: g for p, g in self.pairs}

    def total_cost(self, cost: np.ndarray) -> float:
        return float(sum(cost[p, g] for p, g in self.pairs))


def hungarian(cost: np.ndarray) -> Assignment:
    """Exact minimum-cost injective assignment (rows -> columns).

    Shortest-augmenting-path formulation with potentials; matches
    min(n_rows, n_cols) pairs for any finite rectangular cost matrix.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0 or m == 0:
        return Assignment((), n, m)
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    transposed = n > m
    work = cost.T if transposed else cost
    pairs = _solve_rectangular(work)
    if transposed:
        pairs = [(j, i) for i, j in pairs]
    pairs.sort()
    return Assignment(tuple(pairs), n, m)


def _solve_rectangular(cost: np.ndarray) -> list[tuple[int, int]]:
    # 1-indexed potentials; column 0 is the virtual root of each search tree.
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = np.nonzero(~used[1:])[0] + 1
            cur = cost[i0 - 1, free - 1] - u[i0] - v[free]
            better = cur < minv[free]
            minv[free[better]] = cur[better]
            way[free[better]] = j0
            k = int(np.argmin(minv[free]))
            delta = minv[free][k]
            j1 = int(free[k])
            u[match[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = int(way[j0])
            match[j0] = match[j1]
            j0 = j1
    return [(int(match[j]) - 1, j - 1) for j in range(1, m + 1) if match[j] != 0]


# ---------------------------------------------------------------------------
# Cost side (detached numpy)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _bce_elements(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    return np.maximum(logits, 0.0) - logits * target + np.log1p(np.exp(-np.abs(logits)))


DICE_EPS = 1.0


def match_cost_matrix(
    class_logits: np.ndarray,
    mask_logits: np.ndarray,
    gt_classes,
    gt_masks: np.ndarray,
    weights: LossWeights = LossWeights(),
) -> np.ndarray:
    """(n_pred, n_gt) matching costs; same lambda weights as the loss."""
    class_logits = np.asarray(class_logits, dtype=np.float64)
    mask_logits = np.asarray(mask_logits, dtype=np.float64)
    gt_masks = np.asarray(gt_masks, dtype=np.float64)
    n = class_logits.shape[0]
    g = len(gt_classes)
    if g == 0:
        return np.zeros((n, 0))
    probs = _softmax_rows(class_logits)
    cost_cls = -probs[:, list(gt_classes)]

    p = _sigmoid(mask_logits)
    inter = p @ gt_masks.T
    num = 2.0 * inter + DICE_EPS
    den = p.sum(axis=1, keepdims=True) + gt_masks.sum(axis=1)[None, :] + DICE_EPS
    cost_dice = 1.0 - num / den

    # Pairwise mean BCE decomposes into a target-independent part plus a
    # linear term in the target mask.
    base = np.maximum(mask_logits, 0.0) + np.log1p(np.exp(-np.abs(mask_logits)))
    npix = mask_logits.shape[1]
    cost_ce = (base.sum(axis=1, keepdims=True) - mask_logits @ gt_masks.T) / npix

    return weights.cls * cost_cls + weights.ce * cost_ce + weights.dice * cost_dice


def match_cost(
    class_logits_row: np.ndarray,
    mask_logits_row: np.ndarray,
    gt_class: int,
    gt_mask: np.ndarray,
    weights: LossWeights = LossWeights(),
) -> float:
    """Matching cost for a single (prediction, ground truth) pair."""
    m = match_cost_matrix(
        np.asarray(class_logits_row)[None],
        np.asarray(mask_logits_row)[None],
        [gt_class],
        np.asarray(gt_mask)[None],
        weights,
    )
    return float(m[0, 0])


# ---------------------------------------------------------------------------
# Loss side (autodiff)


def dice_loss(mask_logits: Tensor, gt_masks: np.ndarray) -> Tensor:
    """Mean soft-dice loss over rows; eps=1 keeps empty-vs-empty at zero."""
    gt = ad.constant(np.asarray(gt_masks, dtype=np.float64))
    if mask_logits.shape != gt.shape:
        raise ad.ShapeMismatchError("dice_loss", mask_logits.shape, gt.shape)
    flat_rows = mask_logits.shape[0] if mask_logits.ndim == 2 else 1
    if mask_logits.ndim == 1:
        mask_logits = ad.reshape(mask_logits, (1, mask_logits.size))
        gt = ad.reshape(gt, (1, gt.size))
    p = ad.sigmoid(mask_logits)
    eps = ad.constant(np.full(flat_rows, DICE_EPS))
    num = ad.scale(ad.reduce_sum(ad.mul(p, gt), axis=1), 2.0) + eps
    den = ad.reduce_sum(p, axis=1) + ad.reduce_sum(gt, axis=1) + eps
    ones = ad.constant(np.ones(flat_rows))
    return ad.reduce_mean(ones - ad.div(num, den))


def mask_ce_loss(mask_logits: Tensor, gt_masks: np.ndarray) -> Tensor:
    """Sigmoid cross-entropy averaged over every pixel of every row."""
    gt = ad.constant(np.asarray(gt_masks, dtype=np.float64))
    return ad.reduce_mean(ad.bce_with_logits(mask_logits, gt))


def classification_loss(class_logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy against integer class targets."""
    targets = np.asarray(targets, dtype=np.int64)
    n, k = class_logits.shape
    if targets.shape != (n,):
        raise ad.ShapeMismatchError("classification_loss", class_logits.shape, targets.shape)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), targets] = 1.0
    # Log-sum-exp with a detached per-row shift; the shift cancels in the
    # gradient, so backprop stays exact.
    shift = class_logits.data.max(axis=-1, keepdims=True)
    shifted = class_logits - ad.constant(np.broadcast_to(shift, (n, k)).copy())
    lse = ad.log(ad.reduce_sum(ad.exp(shifted), axis=1)) + ad.constant(shift[:, 0])
    picked = ad.reduce_sum(ad.mul(class_logits, ad.constant(onehot)), axis=1)
    return ad.reduce_mean(lse - picked)


def _zero() -> Tensor:
    return ad.constant(np.zeros(()))


def segmenter_loss(
    class_logits: Tensor,
    mask_logits: Tensor,
    gt_classes,
    gt_masks: np.ndarray,
    assignment: Assignment,
    contrastive_items=None,
    weights: LossWeights = LossWeights(),
    background_class: int | None = None,
) -> Tensor:
    """Eq.-13-shaped objective for one frame under a fixed assignment.

    Matched rows get mask + class supervision; unmatched rows are pushed to
    the background class only. ``background_class`` defaults to the last
    class channel.
    """
    n, k = class_logits.shape
    if background_class is None:
        background_class = k - 1
    targets = np.full(n, background_class, dtype=np.int64)
    for p, g in assignment.pairs:
        targets[p] = int(gt_classes[g])
    loss = ad.scale(classification_loss(class_logits, targets), weights.cls)

    if assignment.pairs:
        pred_rows = ad.take_rows(mask_logits, assignment.pred_indices)
        gt_rows = np.asarray(gt_masks, dtype=np.float64)[assignment.gt_indices]
        loss = loss + ad.scale(mask_ce_loss(pred_rows, gt_rows), weights.ce)
        loss = loss + ad.scale(dice_loss(pred_rows, gt_rows), weights.dice)
    if contrastive_items:
        from .contrastive import contrastive_loss

        loss = loss + ad.scale(contrastive_loss(contrastive_items), weights.cl)
    return loss


@dataclass
class ClipTargets:
    """Ground truth for a clip: one video-level class and per-frame masks."""

    classes: list[int]
    masks: np.ndarray  # (n_objects, n_frames, pixels) in {0, 1}

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float64)
        if self.masks.ndim != 3 or self.masks.shape[0] != len(self.classes):
            raise ValueError(f"bad target shapes: {self.masks.shape} vs {len(self.classes)} classes")

    @property
    def n_objects(self) -> int:
        return len(self.classes)

    @property
    def n_frames(self) -> int:
        return self.masks.shape[1]

    def first_appearance(self) -> dict[int, int]:
        """GT index -> first frame with any visible pixel; invisible objects omitted."""
        out = {}
        for i in range(self.n_objects):
            visible = np.nonzero(self.masks[i].sum(axis=1) > 0)[0]
            if visible.size:
                out[i] = int(visible[0])
        return out


@dataclass
class TrackerMatch:
    assignment: Assignment
    source: str  # "segmenter" or "tracker"
    frames_used: dict[int, int] = field(default_factory=dict)


def tracker_matching(
    pred_class_logits,
    pred_mask_logits,
    targets: ClipTargets,
    iteration: int,
    max_iteration: int,
    segmenter_class_logits,
    segmenter_mask_logits,
    weights: LossWeights = LossWeights(),
) -> TrackerMatch:
    """First-appearance matching with the warm-start source switch.

    Each ground-truth object is matched once, on the frame where it first
    appears; predictions come from the frozen segmenter while
    iteration < max_iteration/2 and from the tracker itself afterwards.
    The resulting slot assignment supervises every frame of the clip.
    """
    use_tracker = iteration >= max_iteration / 2
    cls_src = pred_class_logits if use_tracker else segmenter_class_logits
    mask_src = pred_mask_logits if use_tracker else segmenter_mask_logits
    first = targets.first_appearance()
    gt_ids = sorted(first)
    n = _as_array(cls_src[0]).shape[0]
    cost = np.zeros((n, len(gt_ids)))
    for col, g in enumerate(gt_ids):
        f = first[g]
        cost[:, col : col + 1] = match_cost_matrix(
            _as_array(cls_src[f]),
            _as_array(mask_src[f]),
            [targets.classes[g]],
            targets.masks[g, f][None],
            weights,
        )
    assign = hungarian(cost)
    pairs = tuple((p, gt_ids[c]) for p, c in assign.pairs)
    return TrackerMatch(
        Assignment(pairs, n, targets.n_objects),
        "tracker" if use_tracker else "segmenter",
        {g: first[g] for g in gt_ids},
    )


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def tracker_loss(
    frame_class_logits: list[Tensor],
    frame_mask_logits: list[Tensor],
    targets: ClipTargets,
    assignment: Assignment,
    weights: LossWeights = LossWeights(),
) -> Tensor:
    """Eq.-13 loss per frame under one fixed assignment, summed over frames."""
    if len(frame_class_logits) != targets.n_frames:
        raise ValueError("frame count mismatch between predictions and targets")
    total = _zero()
    for t in range(targets.n_frames):
        total = total + segmenter_loss(
            frame_class_logits[t],
            frame_mask_logits[t],
            targets.classes,
            targets.masks[:, t],
            assignment,
            contrastive_items=None,
            weights=weights,
        )
    return total


def refiner_loss(
    video_class_logits: Tensor,
    frame_mask_logits: list[Tensor],
    targets: ClipTargets,
    weights: LossWeights = LossWeights(),
    contrastive_items=None,
) -> tuple[Tensor, Assignment]:
    """Whole-video objective: masks stacked frame-over-frame into one tall
    image, matched and supervised once with a single tube class."""
    stacked_pred = ad.concat(list(frame_mask_logits), axis=1)
    m = targets.n_objects
    stacked_gt = targets.masks.reshape(m, -1) if m else np.zeros((0, stacked_pred.shape[1]))
    cost = match_cost_matrix(
        video_class_logits.data, stacked_pred.data, targets.classes, stacked_gt, weights
    )
    assignment = hungarian(cost)
    loss = segmenter_loss(
        video_class_logits,
        stacked_pred,
        targets.classes,
        stacked_gt,
        assignment,
        contrastive_items=contrastive_items,
        weights=weights,
    )
    return loss, assignment
