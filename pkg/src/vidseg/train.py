"""Staged training: tracker first (frozen stub segmenter), then refiner
(frozen stub and tracker). Plain gradient descent with the step decay
schedule from the config.
"""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from . import contrastive as cl
from .autodiff import NonFiniteError, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, learning_rate_at
from .contrastive import MemoryBank
from .fileio import config_hash
from .matching import ClipTargets, refiner_loss, tracker_loss, tracker_matching
from .nn import load_values, set_requires_grad, zero_grads
from .refiner import TemporalRefiner
from .scene import SyntheticVideo, frame_rng, stub_segment
from .tracker import ReferringTracker, track_video

logger = logging.getLogger("vidseg.train")


class TrainingDivergedError(RuntimeError):
    pass


class DatasetError(FileNotFoundError):
    pass


def load_dataset_dir(path) -> list[SyntheticVideo]:
    from pathlib import Path

    from .fileio import read_video

    files = sorted(Path(path).glob("*.vseg"))
    if not files:
        raise DatasetError(f"no dataset files (*.vseg) under {path}")
    return [read_video(f) for f in files]


def stub_frames(video: SyntheticVideo, start: int, stop: int):
    cfg = video.config
    return [
        stub_segment(video, t, cfg, frame_rng(cfg, t)) for t in range(start, stop)
    ]


def clip_targets(video: SyntheticVideo, start: int, stop: int) -> ClipTargets:
    masks = video.masks[:, start:stop].astype(np.float64)
    flat = masks.reshape(video.object_count, stop - start, -1)
    return ClipTargets(list(video.classes), flat)


HEAD_LR_SCALE = 0.1
_HEAD_PREFIXES = ("mask_head", "class_head")


def _clip_scale(params: dict[str, Tensor], clip_norm: float | None) -> float:
    if clip_norm is None:
        return 1.0
    total = np.sqrt(
        sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None)
    )
    return clip_norm / total if total > clip_norm else 1.0


def sgd_step(params: dict[str, Tensor], lr: float, clip_norm: float | None = 1.0) -> None:
    """One plain descent step; gradients are jointly rescaled to clip_norm
    when their global norm exceeds it (plain GD explodes otherwise at this
    loss scale). Decode heads step at a reduced rate: they start
    near-optimal by construction."""
    scale = _clip_scale(params, clip_norm)
    for name, p in params.items():
        if p.grad is not None:
            step = lr * scale * (HEAD_LR_SCALE if name.startswith(_HEAD_PREFIXES) else 1.0)
            p.data = p.data - step * p.grad
    zero_grads(params)


class AdamState:
    """Adaptive-moment optimizer; state is ephemeral (not checkpointed,
    training never resumes mid-run)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], lr: float, clip_norm: float | None = 1.0) -> None:
        scale = _clip_scale(params, clip_norm)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction = np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.m[name] = m
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            head = HEAD_LR_SCALE if name.startswith(_HEAD_PREFIXES) else 1.0
            p.data = p.data - (lr * head * correction) * m / (np.sqrt(v) + self.eps)
        zero_grads(params)


def train_tracker(config: TrainConfig, dataset: list[SyntheticVideo] | None = None):
    """Optimize the tracker on noised clips; returns (tracker, history)."""
    if config.stage != "tracker":
        raise ValueError("train_tracker needs a tracker-stage config")
    if dataset is None:
        dataset = load_dataset_dir(config.dataset_dir)
    scene_cfg = dataset[0].config
    init_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x7121)))
    tracker = ReferringTracker(
        init_rng,
        channels=config.channels,
        heads=config.heads,
        block_count=config.block_count,
        class_count=scene_cfg.class_count,
    )
    params = tracker.params()
    optimizer = AdamState() if config.optimizer == "adam" else None
    sample_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x5A5A)))
    history = []
    for iteration in range(config.iterations):
        video = dataset[int(sample_rng.integers(0, len(dataset)))]
        clip = min(config.clip_length, video.frames)
        start = int(sample_rng.integers(0, video.frames - clip + 1))
        frames = stub_frames(video, start, start + clip)
        targets = clip_targets(video, start, start + clip)
        try:
            loss_value = _tracker_step(
                tracker, params, frames, targets, config, iteration, sample_rng
            )
        except NonFiniteError as e:
            raise TrainingDivergedError(
                f"non-finite loss at iteration {iteration} ({e})"
            ) from e
        lr = learning_rate_at(iteration, config)
        if optimizer is not None:
            optimizer.step(params, lr, config.clip_grad_norm)
        else:
            sgd_step(params, lr, config.clip_grad_norm)
        history.append({"iteration": iteration, "loss": loss_value, "lr": lr})
        if iteration % 200 == 0:
            logger.info("tracker iter %d loss %.4f lr %.4g", iteration, loss_value, lr)
    meta = {
        "iteration": config.iterations,
        "seed": config.seed,
        "config_hash": config_hash(config.to_dict()),
        "class_count": scene_cfg.class_count,
        "loss_curve": [h["loss"] for h in history[:: max(1, len(history) // 100)]],
    }
    save_checkpoint(config.out_checkpoint, "tracker", params, meta)
    return tracker, history


def _tracker_step(tracker, params, frames, targets, config, iteration, rng) -> float:
    result = track_video(tracker, frames, "train", config.noise, rng)
    aligned_cls = [
        f.class_logits[result.row_for_slot[t]] for t, f in enumerate(frames)
    ]
    aligned_msk = [
        f.flat_mask_logits()[result.row_for_slot[t]] for t, f in enumerate(frames)
    ]
    match = tracker_matching(
        result.class_logits,
        result.mask_logits,
        targets,
        iteration,
        config.iterations,
        aligned_cls,
        aligned_msk,
        config.weights,
    )
    loss = tracker_loss(
        result.class_logits, result.mask_logits, targets, match.assignment, config.weights
    )
    if config.weights.cl > 0:
        projected = [tracker.project_refs(st.refs) for st in result.refs]
        closs = cl.tracker_contrastive_loss(projected, match.assignment.pred_indices)
        if closs is not None:
            loss = loss + ad.scale(closs, config.weights.cl)
    loss.backward()
    return loss.item()


def train_refiner(config: TrainConfig, dataset: list[SyntheticVideo] | None = None):
    """Optimize the refiner on whole clips with the tracker frozen."""
    if config.stage != "refiner":
        raise ValueError("train_refiner needs a refiner-stage config")
    if dataset is None:
        dataset = load_dataset_dir(config.dataset_dir)
    scene_cfg = dataset[0].config
    stage, table, meta = load_checkpoint(config.tracker_checkpoint)
    if stage != "tracker":
        raise ValueError(f"expected a tracker checkpoint, got stage {stage!r}")
    init_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x7122)))
    tracker = ReferringTracker(
        init_rng,
        channels=config.channels,
        heads=config.heads,
        block_count=config.block_count,
        class_count=scene_cfg.class_count,
    )
    tracker_params = tracker.params()
    load_values(tracker_params, table)
    set_requires_grad(tracker_params, False)

    refiner = TemporalRefiner(
        np.random.default_rng(np.random.SeedSequence((config.seed, 0x7123))),
        channels=config.channels,
        heads=config.heads,
        block_count=config.block_count,
        class_count=scene_cfg.class_count,
    )
    # Refinement starts from the tracker's solution: identity blocks plus
    # the tracker's own decode heads.
    refiner.mask_head.w.data = tracker.mask_head.w.data.copy()
    refiner.mask_head.b.data = tracker.mask_head.b.data.copy()
    refiner.class_head.w.data = tracker.class_head.w.data.copy()
    refiner.class_head.b.data = tracker.class_head.b.data.copy()
    params = refiner.params()

    bank = MemoryBank(config.memory_bank_capacity)
    optimizer = AdamState() if config.optimizer == "adam" else None
    sample_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x5A5B)))
    history = []
    for iteration in range(config.iterations):
        video = dataset[int(sample_rng.integers(0, len(dataset)))]
        clip = min(config.clip_length, video.frames)
        start = int(sample_rng.integers(0, video.frames - clip + 1))
        frames = stub_frames(video, start, start + clip)
        targets = clip_targets(video, start, start + clip)
        try:
            loss_value = _refiner_step(refiner, tracker, frames, targets, config, bank)
        except NonFiniteError as e:
            raise TrainingDivergedError(
                f"non-finite loss at iteration {iteration} ({e})"
            ) from e
        lr = learning_rate_at(iteration, config)
        if optimizer is not None:
            optimizer.step(params, lr, config.clip_grad_norm)
        else:
            sgd_step(params, lr, config.clip_grad_norm)
        history.append({"iteration": iteration, "loss": loss_value, "lr": lr})
        if iteration % 200 == 0:
            logger.info("refiner iter %d loss %.4f lr %.4g", iteration, loss_value, lr)
    meta = {
        "iteration": config.iterations,
        "seed": config.seed,
        "config_hash": config_hash(config.to_dict()),
        "class_count": scene_cfg.class_count,
        "tracker_checkpoint": str(config.tracker_checkpoint),
        "loss_curve": [h["loss"] for h in history[:: max(1, len(history) // 100)]],
    }
    save_checkpoint(config.out_checkpoint, "refiner", params, meta)
    return refiner, history


def _refiner_step(refiner, tracker, frames, targets, config, bank) -> float:
    # The frozen tracker runs its inference path; its outputs enter the
    # refiner as plain constants, so no gradient can reach it.
    result = track_video(tracker, frames, "infer")
    q_rt = ad.constant(np.stack([q.data for q in result.q_rt], axis=1))  # (n, t, c)
    q_seg = ad.constant(np.stack(result.aligned_queries))  # (t, n, c)
    tube = refiner.refine(q_rt, q_seg)
    n, t, c = tube.q_tr.shape
    frame_logits = []
    for f in range(t):
        q_f = ad.reshape(ad.slice_axis(tube.q_tr, 1, f, f + 1), (n, c))
        frame_logits.append(refiner.decode_frame(q_f, frames[f].mask_features))
    video_cls = refiner.video_class_logits(tube.video_repr)
    loss, assignment = refiner_loss(video_cls, frame_logits, targets, config.weights)
    if config.weights.cl > 0 and assignment.pairs:
        slot_classes = {p: targets.classes[g] for p, g in assignment.pairs}
        rows = assignment.pred_indices
        classes = [slot_classes.get(i, 0) for i in range(n)]
        closs = cl.refiner_contrastive_loss(refiner.project(tube.q_tr), classes, bank, rows)
        if closs is not None:
            loss = loss + ad.scale(closs, config.weights.cl)
    loss.backward()
    return loss.item()
