"""Inference and evaluation entry points.

Online mode: stub segmenter + pre-matching + tracker, class aggregated
over frames. Offline mode additionally runs the temporal refiner over the
whole video; single-frame videos carry no temporal information, so offline
falls back to the online path there.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint
from .fileio import read_prediction, read_video, write_prediction
from .metrics import (
    MetricReport,
    TubeGroundTruth,
    TubePrediction,
    miou,
    mvc,
    rasterize_semantic,
    tube_mean_iou,
    video_ap,
    vpq,
)
from .nn import load_values, set_requires_grad
from .refiner import TemporalRefiner, predict_video
from .scene import SyntheticVideo, frame_rng, stub_segment
from .tracker import ReferringTracker, track_video

DEFAULT_METRICS = ("ap", "vpq", "mvc", "miou")


def build_tracker_from_checkpoint(path, channels=64, heads=8, block_count=6) -> ReferringTracker:
    stage, table, meta = load_checkpoint(path)
    if stage != "tracker":
        raise ValueError(f"expected tracker checkpoint, got {stage!r}")
    tracker = ReferringTracker(
        np.random.default_rng(0),
        channels=channels,
        heads=heads,
        block_count=block_count,
        class_count=int(meta.get("class_count", 5)),
    )
    params = tracker.params()
    load_values(params, table)
    set_requires_grad(params, False)
    return tracker


def build_refiner_from_checkpoint(path, channels=64, heads=8, block_count=6) -> TemporalRefiner:
    stage, table, meta = load_checkpoint(path)
    if stage != "refiner":
        raise ValueError(f"expected refiner checkpoint, got {stage!r}")
    refiner = TemporalRefiner(
        np.random.default_rng(0),
        channels=channels,
        heads=heads,
        block_count=block_count,
        class_count=int(meta.get("class_count", 5)),
    )
    params = refiner.params()
    load_values(params, table)
    set_requires_grad(params, False)
    return refiner


def run_stub(video: SyntheticVideo):
    cfg = video.config
    return [stub_segment(video, t, cfg, frame_rng(cfg, t)) for t in range(video.frames)]


def online_tubes(tracker: ReferringTracker, frames, canvas) -> tuple[list[dict], dict[int, np.ndarray]]:
    """Decode tracker outputs into tubes.

    Returns (tubes for scoring, all-slot masks for association analysis).
    The tube class is the argmax of the frame-averaged class distribution;
    background tubes are dropped from the scored list.
    """
    result = track_video(tracker, frames, "infer")
    assert result.noise_stats.applied == 0, "noiser must not fire at inference"
    t = len(frames)
    n = frames[0].n
    h, w = canvas
    probs = np.zeros((n, tracker.class_count + 1))
    slot_masks: dict[int, np.ndarray] = {s: np.zeros((t, h, w), dtype=bool) for s in range(n)}
    for f in range(t):
        logits = result.class_logits[f].data
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs += e / e.sum(axis=1, keepdims=True)
        masks = result.mask_logits[f].data > 0.0
        for s in range(n):
            slot_masks[s][f] = masks[s].reshape(h, w)
    probs /= t
    tubes = []
    for s in range(n):
        cls = int(np.argmax(probs[s]))
        if cls == tracker.class_count:
            continue
        tubes.append(
            {"id": s, "class": cls, "score": float(probs[s, cls]), "masks": slot_masks[s]}
        )
    return tubes, slot_masks


def offline_tubes(
    tracker: ReferringTracker, refiner: TemporalRefiner, frames, canvas
) -> tuple[list[dict], dict[int, np.ndarray]]:
    if len(frames) == 1:
        # A single frame has no temporal structure to refine.
        return online_tubes(tracker, frames, canvas)
    result = track_video(tracker, frames, "infer")
    assert result.noise_stats.applied == 0, "noiser must not fire at inference"
    q_rt = ad.constant(np.stack([q.data for q in result.q_rt], axis=1))
    q_seg = ad.constant(np.stack(result.aligned_queries))
    tube = refiner.refine(q_rt, q_seg)
    features = [f.mask_features for f in frames]
    tubes = predict_video(refiner, tube, features, canvas)
    # Per-slot masks for association analysis (all slots, background too).
    n, t, c = tube.q_tr.shape
    h, w = canvas
    slot_masks = {s: np.zeros((t, h, w), dtype=bool) for s in range(n)}
    for f in range(t):
        q_f = ad.reshape(ad.slice_axis(tube.q_tr, 1, f, f + 1), (n, c))
        frame = refiner.decode_frame(q_f, features[f]).data > 0
        for s in range(n):
            slot_masks[s][f] = frame[s].reshape(h, w)
    return tubes, slot_masks


def infer_video(video: SyntheticVideo, tracker, refiner=None, mode: str = "online"):
    if mode not in ("online", "offline"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "offline" and refiner is None:
        raise ValueError("offline mode requires a refiner checkpoint")
    frames = run_stub(video)
    canvas = video.config.canvas
    if mode == "online":
        return online_tubes(tracker, frames, canvas)
    return offline_tubes(tracker, refiner, frames, canvas)


def infer_to_file(dataset_path, out_path, tracker_ckpt, refiner_ckpt=None, mode="online") -> None:
    video = read_video(dataset_path)
    tracker = build_tracker_from_checkpoint(tracker_ckpt)
    refiner = build_refiner_from_checkpoint(refiner_ckpt) if refiner_ckpt else None
    tubes, _ = infer_video(video, tracker, refiner, mode)
    write_prediction(
        out_path,
        tubes,
        video.frames,
        video.config.canvas,
        meta={"mode": mode, "dataset": str(dataset_path)},
    )


# ---------------------------------------------------------------------------
# Evaluation


def gt_tubes_of(video: SyntheticVideo, video_id: int = 0) -> list[TubeGroundTruth]:
    return [
        TubeGroundTruth(video.masks[i].astype(bool), video.classes[i], video_id)
        for i in range(video.object_count)
    ]


def pred_tubes_of(tubes: list[dict], video_id: int = 0) -> list[TubePrediction]:
    return [
        TubePrediction(t["masks"], t["class"], t["score"], video_id, t["id"]) for t in tubes
    ]


def sanitize_panoptic(tubes: list[dict], frames: int, canvas) -> list[dict]:
    """Resolve overlapping tube masks by score (higher score wins pixels)."""
    h, w = canvas
    owner = np.full((frames, h, w), -1, dtype=np.int64)
    order = sorted(range(len(tubes)), key=lambda i: tubes[i]["score"])
    for i in order:
        owner[tubes[i]["masks"]] = i
    out = []
    for i, tube in enumerate(tubes):
        masks = owner == i
        out.append({**tube, "masks": masks})
    return out


def evaluate_video(video: SyntheticVideo, tubes: list[dict], metric_names=DEFAULT_METRICS):
    reports: dict[str, MetricReport] = {}
    gts = gt_tubes_of(video)
    clean = sanitize_panoptic(tubes, video.frames, video.config.canvas)
    for name in metric_names:
        if name == "ap":
            reports[name] = video_ap(pred_tubes_of(tubes), gts)
        elif name == "vpq":
            reports[name] = vpq(pred_tubes_of(clean), gts)
        elif name == "mvc":
            gt_sem = rasterize_semantic(
                [
                    {"masks": video.masks[i].astype(bool), "class": video.classes[i], "score": 1.0}
                    for i in range(video.object_count)
                ],
                1,
                video.frames,
                video.config.canvas,
            )
            pred_sem = rasterize_semantic(clean, 1, video.frames, video.config.canvas)
            k = min(8, video.frames)
            reports[name] = MetricReport(f"mvc@{k}", mvc(pred_sem, gt_sem, k))
        elif name == "miou":
            gt_sem = rasterize_semantic(
                [
                    {"masks": video.masks[i].astype(bool), "class": video.classes[i], "score": 1.0}
                    for i in range(video.object_count)
                ],
                1,
                video.frames,
                video.config.canvas,
            )
            pred_sem = rasterize_semantic(clean, 1, video.frames, video.config.canvas)
            reports[name] = MetricReport("miou", miou(pred_sem, gt_sem))
        elif name == "tube_miou":
            reports[name] = MetricReport("tube_miou", tube_mean_iou(tubes, video))
        else:
            raise ValueError(f"unknown metric {name!r}")
    return reports


def evaluate_files(pred_path, dataset_path, metric_names=DEFAULT_METRICS) -> dict:
    video = read_video(dataset_path)
    tubes, meta = read_prediction(pred_path)
    reports = evaluate_video(video, tubes, metric_names)
    return {
        "dataset": str(dataset_path),
        "prediction": str(pred_path),
        "metrics": {
            name: {
                "value": r.value,
                "breakdown": r.breakdown,
                "extras": r.extras,
            }
            for name, r in reports.items()
        },
    }
