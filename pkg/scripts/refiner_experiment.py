"""Offline-vs-online comparison for the refiner stage (tuning tool)."""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from vidseg.config import TrainConfig
from vidseg.inference import build_tracker_from_checkpoint, gt_tubes_of, infer_video, pred_tubes_of
from vidseg.metrics import association_accuracy, tube_mean_iou, video_ap
from vidseg.noiser import NoiseConfig
from vidseg.scene import generate_video
from vidseg.train import train_refiner, train_tracker

from seed_experiment import scene


def suite_metrics(tracker, refiner, videos):
    """Per-mode aggregate metrics over a suite."""
    out = {}
    for mode in ("online", "offline"):
        mious, accs = [], []
        preds, gts = [], []
        for vid, video in enumerate(videos):
            tubes, slot_masks = infer_video(
                video, tracker, refiner if mode == "offline" else None, mode
            )
            mious.append(tube_mean_iou(tubes, video))
            accs.append(association_accuracy(slot_masks, video))
            preds.extend(pred_tubes_of(tubes, vid))
            gts.extend(gt_tubes_of(video, vid))
        ap = video_ap(preds, gts).value if gts else 1.0
        out[mode] = {
            "tube_miou": float(np.mean(mious)),
            "ap": ap,
            "assoc": float(np.mean(accs)),
        }
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tracker-iterations", type=int, default=2000)
    ap.add_argument("--refiner-iterations", type=int, default=600)
    ap.add_argument("--train-videos", type=int, default=60)
    ap.add_argument("--eval-videos", type=int, default=15)
    ap.add_argument("--tracker-ckpt", default=None)
    args = ap.parse_args()

    train_set = [generate_video(scene(100 + i)) for i in range(args.train_videos)]
    eval_set = [generate_video(scene(9000 + i)) for i in range(args.eval_videos)]

    tracker_ckpt = args.tracker_ckpt or f"/tmp/ref_trk_{args.seed}.ckpt"
    if args.tracker_ckpt is None:
        cfg = TrainConfig(
            stage="tracker",
            dataset_dir="unused",
            out_checkpoint=tracker_ckpt,
            iterations=args.tracker_iterations,
            seed=args.seed,
            noise=NoiseConfig("weighted_average", 0.8, 0),
        )
        t0 = time.time()
        train_tracker(cfg, dataset=train_set)
        print(f"tracker trained in {time.time()-t0:.0f}s", flush=True)

    rcfg = TrainConfig(
        stage="refiner",
        dataset_dir="unused",
        out_checkpoint=f"/tmp/ref_ref_{args.seed}.ckpt",
        tracker_checkpoint=tracker_ckpt,
        iterations=args.refiner_iterations,
        seed=args.seed,
    )
    t0 = time.time()
    refiner, hist = train_refiner(rcfg, dataset=train_set)
    print(
        f"refiner trained in {time.time()-t0:.0f}s "
        f"loss {hist[0]['loss']:.1f}->{np.mean([h['loss'] for h in hist[-20:]]):.1f}"
        if hist
        else "refiner at init",
        flush=True,
    )

    tracker = build_tracker_from_checkpoint(tracker_ckpt)
    hazard = [v for v in eval_set if v.hazard_pairs]
    calm = [v for v in eval_set if not v.hazard_pairs]
    for name, subset in (("full", eval_set), ("swap-subset", hazard), ("calm", calm)):
        if not subset:
            continue
        m = suite_metrics(tracker, refiner, subset)
        print(
            f"{name:12s} online: miou {m['online']['tube_miou']:.4f} ap {m['online']['ap']:.4f} assoc {m['online']['assoc']:.4f}",
            flush=True,
        )
        print(
            f"{name:12s} offline: miou {m['offline']['tube_miou']:.4f} ap {m['offline']['ap']:.4f} assoc {m['offline']['assoc']:.4f}",
            flush=True,
        )


if __name__ == "__main__":
    main()
