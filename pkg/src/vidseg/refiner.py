"""Offline spatio-temporal refinement of pre-aligned object representations.

Each temporal decoder block applies, with pre-norm residuals: a short-term
temporal convolution, long-term self-attention along time (with sinusoidal
positions on queries and keys), per-frame self-attention across objects,
per-frame cross-attention onto the segmenter queries, and an FFN. All
residual-branch output layers start at zero, so an untrained refiner is
the identity on its input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv1d, FeedForward, LayerNorm, Linear, MultiHeadAttention, sinusoidal_encoding


@dataclass
class TubeRepresentation:
    q_tr: Tensor          # (n, t, c) refined per-frame representations
    video_repr: Tensor    # (n, c) temporally weighted category representation
    weights: Tensor       # (n, t) temporal weighting distribution


class TemporalDecoderBlock:
    def __init__(self, rng: np.random.Generator, channels: int, heads: int, kernel: int = 3):
        self.ln_conv = LayerNorm(channels)
        self.conv = Conv1d(rng, channels, channels, kernel=kernel, zero=True)
        self.ln_time = LayerNorm(channels)
        self.attn_time = MultiHeadAttention(rng, channels, heads, zero_out=True)
        self.ln_obj = LayerNorm(channels)
        self.attn_obj = MultiHeadAttention(rng, channels, heads, zero_out=True)
        self.ln_cross = LayerNorm(channels)
        self.attn_cross = MultiHeadAttention(rng, channels, heads, zero_out=True)
        self.ln_ffn = LayerNorm(channels)
        self.ffn = FeedForward(rng, channels, 2 * channels, zero_out=True)

    def __call__(self, x: Tensor, q_seg: Tensor, pe: np.ndarray) -> Tensor:
        """x: (n, t, c) tubes; q_seg: (t, n, c) per-frame segmenter queries."""
        n, t, c = x.shape
        pe_t = ad.constant(np.broadcast_to(pe, (n, t, c)).copy())

        x = x + self.conv(self.ln_conv(x))

        h = self.ln_time(x)
        qk = h + pe_t
        x = x + self.attn_time(qk, qk, h)

        h = ad.transpose(self.ln_obj(x), (1, 0, 2))  # (t, n, c)
        x = x + ad.transpose(self.attn_obj(h, h, h), (1, 0, 2))

        h = ad.transpose(self.ln_cross(x), (1, 0, 2))
        x = x + ad.transpose(self.attn_cross(h, q_seg, q_seg), (1, 0, 2))

        return x + self.ffn(self.ln_ffn(x))

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for name, mod in (
            ("ln_conv", self.ln_conv),
            ("conv", self.conv),
            ("ln_time", self.ln_time),
            ("attn_time", self.attn_time),
            ("ln_obj", self.ln_obj),
            ("attn_obj", self.attn_obj),
            ("ln_cross", self.ln_cross),
            ("attn_cross", self.attn_cross),
            ("ln_ffn", self.ln_ffn),
            ("ffn", self.ffn),
        ):
            out.update(mod.params(f"{prefix}.{name}"))
        return out


class TemporalRefiner:
    def __init__(
        self,
        rng: np.random.Generator,
        channels: int = 64,
        heads: int = 8,
        block_count: int = 6,
        class_count: int = 5,
        kernel: int = 3,
    ):
        if block_count < 1:
            raise ValueError("block_count must be >= 1")
        if kernel % 2 == 0:
            raise ValueError("conv kernel width must be odd")
        self.channels = channels
        self.class_count = class_count
        self.block_count = block_count
        self.blocks = [
            TemporalDecoderBlock(rng, channels, heads, kernel) for _ in range(block_count)
        ]
        self.temporal_weight = Linear(rng, channels, 1, zero=True)
        self.mask_head = Linear(rng, channels, channels + 1)
        self.class_head = Linear(rng, channels, class_count + 1)
        self.contrast_proj = Linear(rng, channels, channels)
        self.counters = {"blocks": 0}

    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"blocks.{i}"))
        out.update(self.temporal_weight.params("temporal_weight"))
        out.update(self.mask_head.params("mask_head"))
        out.update(self.class_head.params("class_head"))
        out.update(self.contrast_proj.params("contrast_proj"))
        return out

    def refine(self, q_rt: Tensor, q_seg: Tensor, pe: np.ndarray | None = None) -> TubeRepresentation:
        """q_rt: (n, t, c) pre-aligned tubes; q_seg: (t, n, c)."""
        if q_rt.ndim != 3 or q_seg.ndim != 3 or q_rt.shape[1] != q_seg.shape[0]:
            raise ad.ShapeMismatchError("refine", q_rt.shape, q_seg.shape)
        if q_rt.shape[1] < 1:
            raise ValueError("refine: empty video")
        if pe is None:
            pe = sinusoidal_encoding(q_rt.shape[1], self.channels)
        x = q_rt
        for block in self.blocks:
            x = block(x, q_seg, pe)
            self.counters["blocks"] += 1
        video_repr, weights = temporal_weighting(x, self.temporal_weight)
        return TubeRepresentation(x, video_repr, weights)

    def decode_frame(self, q_tr_frame: Tensor, mask_features: np.ndarray) -> Tensor:
        feats = np.concatenate([mask_features, np.ones((mask_features.shape[0], 1))], axis=1)
        return ad.matmul(self.mask_head(q_tr_frame), ad.constant(feats.T))

    def video_class_logits(self, video_repr: Tensor) -> Tensor:
        return self.class_head(video_repr)

    def project(self, q_tr: Tensor) -> Tensor:
        return ad.l2_normalize(self.contrast_proj(q_tr))


def temporal_weighting(q_tr: Tensor, lin: Linear) -> tuple[Tensor, Tensor]:
    """Softmax-weighted temporal pooling: one category embedding per tube."""
    n, t, c = q_tr.shape
    logits = ad.reshape(lin(q_tr), (n, t))
    weights = ad.softmax(logits, axis=1)
    pooled = ad.matmul(ad.reshape(weights, (n, 1, t)), q_tr)  # (n, 1, c)
    return ad.reshape(pooled, (n, c)), weights


def predict_video(
    refiner: TemporalRefiner,
    tube: TubeRepresentation,
    mask_features: list[np.ndarray],
    canvas: tuple[int, int],
    background_class: int | None = None,
) -> list[dict]:
    """Decode tubes: per-frame masks from q_tr, one class per tube from the
    video representation; background tubes are dropped."""
    n, t, c = tube.q_tr.shape
    if len(mask_features) != t:
        raise ValueError(f"expected {t} frames of mask features, got {len(mask_features)}")
    k = refiner.class_count + 1
    if background_class is None:
        background_class = k - 1
    class_logits = refiner.video_class_logits(tube.video_repr).data
    probs = np.exp(class_logits - class_logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    h, w = canvas
    frame_masks = []
    for f in range(t):
        q_f = ad.reshape(ad.slice_axis(tube.q_tr, 1, f, f + 1), (n, c))
        frame_masks.append((refiner.decode_frame(q_f, mask_features[f]).data > 0.0).reshape(n, h, w))
    tubes = []
    for slot in range(n):
        cls = int(np.argmax(probs[slot]))
        if cls == background_class:
            continue
        masks = np.stack([frame_masks[f][slot] for f in range(t)])
        tubes.append(
            {"id": slot, "class": cls, "score": float(probs[slot, cls]), "masks": masks}
        )
    return tubes
