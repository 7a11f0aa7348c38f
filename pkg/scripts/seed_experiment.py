"""Seed-sweep experiment for the criterion-4 margins (tuning tool)."""

import argparse
import time

import numpy as np

from vidseg.config import TrainConfig
from vidseg.inference import infer_video
from vidseg.metrics import association_accuracy
from vidseg.noiser import NoiseConfig
from vidseg.scene import SceneConfig, frame_rng, generate_video, stub_segment
from vidseg.tracker import cosine_chain_tubes
from vidseg.train import train_tracker


def scene(seed, frames=36, objects=6, sigma=0.1):
    return SceneConfig(
        frames=frames,
        object_count=objects,
        occlusion_rate=0.4,
        swap_hazard_rate=0.5,
        query_noise_sigma=sigma,
        permute_queries=True,
        seed=seed,
    )


def baseline_accuracy(videos):
    accs = []
    for video in videos:
        cfg = video.config
        fr = [stub_segment(video, t, cfg, frame_rng(cfg, t)) for t in range(video.frames)]
        rows = cosine_chain_tubes(fr)
        tube_masks = {
            s: np.stack([fr[t].mask_logits[rows[t, s]] > 0 for t in range(video.frames)])
            for s in range(fr[0].n)
        }
        accs.append(association_accuracy(tube_masks, video))
    return float(np.mean(accs))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--train-videos", type=int, default=60)
    ap.add_argument("--eval-videos", type=int, default=15)
    ap.add_argument("--probabilities", type=float, nargs="+", default=[0.8, 0.0])
    args = ap.parse_args()

    train_set = [generate_video(scene(100 + i)) for i in range(args.train_videos)]
    eval_set = [generate_video(scene(9000 + i)) for i in range(args.eval_videos)]
    base = baseline_accuracy(eval_set)
    print(f"baseline: {base:.4f}", flush=True)

    def run(p, seed):
        cfg = TrainConfig(
            stage="tracker",
            dataset_dir="unused",
            out_checkpoint=f"/tmp/sweep_{seed}_{p}.ckpt",
            iterations=args.iterations,
            seed=seed,
            noise=NoiseConfig("weighted_average", p, 0),
        )
        t0 = time.time()
        tracker, _ = train_tracker(cfg, dataset=train_set)
        accs = []
        for v in eval_set:
            _, slot_masks = infer_video(v, tracker, mode="online")
            accs.append(association_accuracy(slot_masks, v))
        return float(np.mean(accs)), time.time() - t0

    for seed in args.seeds:
        results = {}
        for p in args.probabilities:
            acc, dt = run(p, seed)
            results[p] = (acc, dt)
        a8 = results[0.8][0]
        a0 = results.get(0.0, (None,))[0]
        extra = f" vs p0 {a8 - a0:+.4f}" if a0 is not None else ""
        times = "+".join(f"{results[p][1]:.0f}s" for p in args.probabilities)
        print(f"seed {seed}: p08 {a8:.4f} p0 {a0} | vs base {a8 - base:+.4f}{extra} | {times}", flush=True)


if __name__ == "__main__":
    main()
