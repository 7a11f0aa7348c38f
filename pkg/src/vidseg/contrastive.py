"""Contrastive items, momentum-averaged positives, and the memory bank.

Items hold autodiff tensors so the loss backpropagates into whichever
stage built them; memory-bank entries are detached by construction.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else ad.constant(np.asarray(x, dtype=np.float64))


@dataclass
class ContrastiveItem:
    anchor: Tensor
    positives: list[Tensor]
    negatives: list[Tensor]

    @property
    def degenerate(self) -> bool:
        return not self.positives or not self.negatives


class DegenerateItemsError(ValueError):
    pass


def contrastive_loss(items: list[ContrastiveItem]) -> Tensor:
    """Softmax-ratio form: mean over items of
    -log( sum_+ exp(v.k+) / (sum_+ exp(v.k+) + sum_- exp(v.k-)) ).

    Items without at least one positive and one negative are skipped;
    if everything is degenerate that is an error.
    """
    live = [it for it in items if not it.degenerate]
    if not live:
        raise DegenerateItemsError("no contrastive item has both positives and negatives")
    total = ad.constant(np.zeros(()))
    for it in live:
        v = ad.reshape(_as_tensor(it.anchor), (1, it.anchor.size))
        pos = ad.concat([ad.reshape(_as_tensor(p), (1, v.shape[1])) for p in it.positives], axis=0)
        neg = ad.concat([ad.reshape(_as_tensor(n), (1, v.shape[1])) for n in it.negatives], axis=0)
        sp = ad.reduce_sum(ad.exp(ad.matmul(v, ad.transpose(pos))))
        sn = ad.reduce_sum(ad.exp(ad.matmul(v, ad.transpose(neg))))
        total = total + (ad.log(sp + sn) - ad.log(sp))
    return ad.scale(total, 1.0 / len(live))


# ---------------------------------------------------------------------------
# Momentum average (similarity-gated running mean of one object's history)


def _normalize_rows(q: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    out = np.zeros_like(q)
    np.divide(q, norms, out=out, where=norms > 0)
    return out


@dataclass
class MomentumState:
    q_ma: np.ndarray            # (n, c) running average
    beta: np.ndarray | None     # last gate per object; None until first update
    unit_history_sum: np.ndarray  # sum of normalized past frames
    frames_seen: int

    @classmethod
    def initialize(cls, q_first: np.ndarray) -> "MomentumState":
        q = np.asarray(q_first, dtype=np.float64)
        return cls(q.copy(), None, _normalize_rows(q), 1)


def momentum_average(state: MomentumState, q_t: np.ndarray) -> MomentumState:
    """One recursion step of the gated average.

    The gate is max(0, mean cosine between the new frame and every past
    frame), maintained incrementally via the sum of normalized history.
    """
    q = np.asarray(q_t, dtype=np.float64)
    unit = _normalize_rows(q)
    mean_cos = (unit * state.unit_history_sum).sum(axis=-1) / state.frames_seen
    beta = np.maximum(0.0, mean_cos)
    q_ma = (1.0 - beta)[:, None] * state.q_ma + beta[:, None] * q
    return MomentumState(q_ma, beta, state.unit_history_sum + unit, state.frames_seen + 1)


# ---------------------------------------------------------------------------
# Item builders for the three stages


def build_ci_segmenter(
    q_prev, q_cur, q_ma, correspondence
) -> list[ContrastiveItem]:
    """One item per matched object.

    ``correspondence`` lists (cur_row, prev_row_or_None) pairs in object
    order; the momentum average is indexed by the current row. Objects
    absent in the previous frame keep only the momentum positive.
    """
    q_prev = _as_tensor(q_prev)
    q_cur = _as_tensor(q_cur)
    q_ma = _as_tensor(q_ma)
    rows = [c for c, _ in correspondence]
    items = []
    for cur_row, prev_row in correspondence:
        positives = [ad.take_rows(q_ma, [cur_row])]
        if prev_row is not None:
            positives.append(ad.take_rows(q_prev, [prev_row]))
        negatives = [ad.take_rows(q_cur, [r]) for r in rows if r != cur_row]
        items.append(
            ContrastiveItem(ad.take_rows(q_cur, [cur_row]), positives, negatives)
        )
    return items


def build_ci_tracker(
    ref_prev: Tensor | None, ref_cur: Tensor, ref_next: Tensor | None, rows=None
) -> list[ContrastiveItem]:
    """Between-frame reference consistency items; boundary frames use the
    neighbors that exist."""
    ref_cur = _as_tensor(ref_cur)
    if rows is None:
        rows = list(range(ref_cur.shape[0]))
    items = []
    for i in rows:
        positives = []
        if ref_prev is not None:
            positives.append(ad.take_rows(_as_tensor(ref_prev), [i]))
        if ref_next is not None:
            positives.append(ad.take_rows(_as_tensor(ref_next), [i]))
        negatives = [ad.take_rows(ref_cur, [j]) for j in rows if j != i]
        items.append(ContrastiveItem(ad.take_rows(ref_cur, [i]), positives, negatives))
    return items


class MemoryBank:
    """Fixed-capacity FIFO of (embedding, class) pairs from past steps."""

    def __init__(self, capacity: int = 256):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._entries: deque[tuple[np.ndarray, int]] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, embedding: np.ndarray, label: int) -> None:
        self._entries.append((np.asarray(embedding, dtype=np.float64).copy(), int(label)))

    def embeddings_for_class(self, label: int) -> list[np.ndarray]:
        return [e for e, c in self._entries if c == int(label)]

    def all_entries(self) -> list[tuple[np.ndarray, int]]:
        return list(self._entries)


def build_ci_refiner(
    q_tr: Tensor, classes, bank: MemoryBank, rows=None, push: bool = True
) -> list[ContrastiveItem]:
    """Items for spatio-temporal representations, one per (object, frame).

    q_tr is (n, t, c). Negatives combine same-frame other objects with
    bank entries sharing the anchor's class; positives are the same
    object at every other frame. After building, each object's temporal
    mean embedding is pushed to the bank.
    """
    q_tr = _as_tensor(q_tr)
    n, t, c = q_tr.shape
    if rows is None:
        rows = list(range(n))
    flat = ad.reshape(q_tr, (n * t, c))
    items = []
    for i in rows:
        bank_negs = [ad.constant(e) for e in bank.embeddings_for_class(int(classes[i]))]
        for frame in range(t):
            anchor = ad.take_rows(flat, [i * t + frame])
            positives = [ad.take_rows(flat, [i * t + s]) for s in range(t) if s != frame]
            negatives = [ad.take_rows(flat, [j * t + frame]) for j in rows if j != i]
            negatives += [ad.reshape(b, (1, c)) for b in bank_negs]
            items.append(ContrastiveItem(anchor, positives, negatives))
    if push:
        means = q_tr.data.mean(axis=1)
        for i in rows:
            bank.push(means[i], int(classes[i]))
    return items


# ---------------------------------------------------------------------------
# Batched equivalents used by the training loops (graph-size friendly)


def tracker_contrastive_loss(projected_refs: list[Tensor], rows=None) -> Tensor | None:
    """Equal to contrastive_loss over build_ci_tracker items across every
    frame of the clip, computed with batched ops."""
    t = len(projected_refs)
    if t < 2:
        return None
    n = projected_refs[0].shape[0]
    if rows is None:
        rows = list(range(n))
    if len(rows) < 2:
        return None
    total = ad.constant(np.zeros(()))
    count = 0
    sel = list(rows)
    for cur in range(t):
        r = ad.take_rows(projected_refs[cur], sel)
        sims = ad.exp(ad.matmul(r, ad.transpose(r)))
        off_diag = ad.constant(1.0 - np.eye(len(sel)))
        sn = ad.reduce_sum(ad.mul(sims, off_diag), axis=1)
        pos_terms = []
        for nb in (cur - 1, cur + 1):
            if 0 <= nb < t:
                other = ad.take_rows(projected_refs[nb], sel)
                pos_terms.append(ad.exp(ad.reduce_sum(ad.mul(r, other), axis=1)))
        sp = pos_terms[0] if len(pos_terms) == 1 else pos_terms[0] + pos_terms[1]
        total = total + ad.reduce_sum(ad.log(sp + sn) - ad.log(sp))
        count += len(sel)
    return ad.scale(total, 1.0 / count)


def refiner_contrastive_loss(
    projected: Tensor, classes, bank: MemoryBank, rows=None, push: bool = True
) -> Tensor | None:
    """Equal to contrastive_loss over build_ci_refiner items, batched.

    projected is (n, t, c), already projection-headed and normalized.
    """
    n, t, c = projected.shape
    if rows is None:
        rows = list(range(n))
    if t < 2 or len(rows) < 2:
        return None
    sel = list(rows)
    k = len(sel)
    sub = ad.take_rows(ad.reshape(projected, (n * t, c)), [i * t + s for i in sel for s in range(t)])
    sims = ad.exp(ad.matmul(sub, ad.transpose(sub)))  # (k*t, k*t)

    same_object = np.kron(np.eye(k), np.ones((t, t)))
    pos_mask = same_object - np.eye(k * t)
    same_frame = np.kron(np.ones((k, k)), np.eye(t))
    neg_mask = same_frame - same_object * same_frame

    sp = ad.reduce_sum(ad.mul(sims, ad.constant(pos_mask)), axis=1)
    sn = ad.reduce_sum(ad.mul(sims, ad.constant(neg_mask)), axis=1)

    entries = bank.all_entries()
    if entries:
        bank_mat = np.stack([e for e, _ in entries])  # (b, c)
        bank_cls = np.array([cls for _, cls in entries])
        match = np.zeros((k * t, len(entries)))
        for row, i in enumerate(sel):
            match[row * t : (row + 1) * t, :] = (bank_cls == int(classes[i])).astype(float)
        bdots = ad.exp(ad.matmul(sub, ad.constant(bank_mat.T)))
        sn = sn + ad.reduce_sum(ad.mul(bdots, ad.constant(match)), axis=1)

    loss = ad.reduce_mean(ad.log(sp + sn) - ad.log(sp))
    if push:
        means = projected.data.mean(axis=1)
        for i in sel:
            bank.push(means[i], int(classes[i]))
    return loss
