"""Synthetic multi-object videos with scripted occlusions and swap hazards.

Objects are axis-aligned squares moving in horizontal lanes (one lane per
object, so unscheduled objects never touch). Two scripted maneuvers create
the interesting events:

* occlusion: a lane neighbor temporarily slides over a scheduled object,
  covering ~83% of it for a few frames (never all of it);
* swap hazard: a same-class pair shares one lane and crosses slowly, with
  the back object fully hidden for one frame at the crossing point.

Frames are rendered back-to-front, so ground-truth masks are disjoint by
construction, and the event log is derived from the rendered visibility
ratios, which makes it consistent with the masks by definition.

The mock segmenter emits, per frame, a fixed budget of query rows: visible
objects carry their per-identity canonical embedding plus Gaussian noise,
surplus rows carry background content, and mask/class logits are signed
margins with boundary jitter. Pixel features for the mask-decode pathway
are the canonical embedding of the covering object plus noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SceneError(ValueError):
    pass


@dataclass
class SceneConfig:
    frames: int = 24
    canvas: tuple[int, int] = (64, 64)
    object_count: int = 4
    class_count: int = 5
    query_budget: int = 10
    channels: int = 64
    motion: tuple[float, float] = (0.5, 1.5)
    occlusion_rate: float = 0.0
    swap_hazard_rate: float = 0.0
    query_noise_sigma: float = 0.1
    permute_queries: bool = False
    seed: int = 0
    # Stub-segmenter knobs.
    class_logit_margin: float = 4.0
    mask_logit_margin: float = 4.0
    boundary_jitter: float = 0.1
    feature_noise_sigma: float = 0.05

    def __post_init__(self):
        if self.frames < 1:
            raise SceneError("frames must be >= 1")
        if self.object_count < 1:
            raise SceneError("object_count must be >= 1")
        if self.object_count > self.query_budget:
            raise SceneError(
                f"object_count {self.object_count} exceeds query budget {self.query_budget}"
            )
        for name in ("occlusion_rate", "swap_hazard_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SceneError(f"{name} must be in [0, 1], got {v}")


@dataclass
class SyntheticVideo:
    config: SceneConfig
    masks: np.ndarray          # (objects, frames, h, w) uint8, disjoint per frame
    solo_areas: np.ndarray     # (objects, frames) unoccluded pixel counts
    classes: list[int]
    embeddings: np.ndarray     # (objects, channels) canonical identity embeddings
    events: list[dict]
    hazard_pairs: list[tuple[int, int]]

    def feature_noise(self) -> np.ndarray:
        """Per-video pixel-feature noise (cached; a deterministic function
        of the scene seed, shared by every frame)."""
        cached = getattr(self, "_feature_noise", None)
        if cached is None:
            h, w = self.config.canvas
            g = np.random.default_rng(np.random.SeedSequence((self.config.seed, 0xFEA7)))
            cached = g.normal(0.0, 1.0, size=(h * w, self.config.channels))
            self._feature_noise = cached
        return cached

    @property
    def frames(self) -> int:
        return self.masks.shape[1]

    @property
    def object_count(self) -> int:
        return self.masks.shape[0]

    def visible_area(self, obj: int, frame: int) -> int:
        return int(self.masks[obj, frame].sum())

    def visibility_intervals(self, obj: int) -> list[tuple[int, int]]:
        """Maximal runs of frames where the object has visible pixels."""
        visible = self.masks[obj].reshape(self.frames, -1).sum(axis=1) > 0
        runs = []
        start = None
        for t, v in enumerate(visible):
            if v and start is None:
                start = t
            elif not v and start is not None:
                runs.append((start, t - 1))
                start = None
        if start is not None:
            runs.append((start, self.frames - 1))
        return runs

    def first_visible_frame(self, obj: int) -> int:
        return self.visibility_intervals(obj)[0][0]


@dataclass
class ObjectQuerySet:
    """One frame of mock segmenter output: a fixed budget of query rows."""

    queries: np.ndarray        # (n, c)
    class_logits: np.ndarray   # (n, class_count + 1); last channel = background
    mask_logits: np.ndarray    # (n, h, w)
    mask_features: np.ndarray  # (h*w, c) pixel features for mask decoding
    row_object_ids: np.ndarray  # (n,) object id per row, -1 for background rows

    @property
    def n(self) -> int:
        return self.queries.shape[0]

    def flat_mask_logits(self) -> np.ndarray:
        return self.mask_logits.reshape(self.n, -1)


OCCLUSION_VISIBILITY_THRESHOLD = 0.3
SWAP_OVERLAP_THRESHOLD = 0.8
_HOVER_FRAMES = 3
_TRANSIT_FRAMES = 2


def _plan_lanes(config: SceneConfig) -> tuple[int, list[int]]:
    """Object size and per-lane y origins; error when they cannot fit."""
    h = config.canvas[0]
    count = config.object_count
    lane_h = (h - 2) // count
    size = min(12, lane_h - 1)
    if size < 4:
        raise SceneError(
            f"canvas height {h} too small for {count} non-overlapping objects"
        )
    ys = [1 + i * lane_h + (lane_h - size) // 2 for i in range(count)]
    return size, ys


def _bounce(x: float, lo: float, hi: float) -> float:
    """Reflect x into [lo, hi]."""
    if hi <= lo:
        return lo
    span = hi - lo
    x = (x - lo) % (2 * span)
    return lo + (span - abs(x - span) if x > span else x)  # triangle wave


def generate_video(config: SceneConfig) -> SyntheticVideo:
    """Deterministic per seed; see module docstring for the choreography."""
    rng = np.random.default_rng(config.seed)
    h, w = config.canvas
    count, frames = config.object_count, config.frames
    size, lane_y = _plan_lanes(config)
    if w < size + 2:
        raise SceneError(f"canvas width {w} too small for object size {size}")

    classes = [int(rng.integers(0, config.class_count)) for _ in range(count)]

    # Swap hazards: one Bernoulli draw per disjoint candidate pair.
    hazard_pairs: list[tuple[int, int]] = []
    for a in range(0, count - 1, 2):
        if rng.uniform() < config.swap_hazard_rate:
            hazard_pairs.append((a, a + 1))
            classes[a + 1] = classes[a]
    hazard_members = {o for pair in hazard_pairs for o in pair}

    # Base paths: horizontal bounce inside the lane.
    xs = np.zeros((count, frames))
    ys = np.zeros((count, frames))
    x_lo, x_hi = 1.0, float(w - size - 1)
    for i in range(count):
        speed = rng.uniform(*config.motion) * (1 if rng.uniform() < 0.5 else -1)
        start = rng.uniform(x_lo, x_hi)
        for t in range(frames):
            xs[i, t] = _bounce(start + speed * t, x_lo, x_hi)
            ys[i, t] = lane_y[i]

    # Hazard pairs share the first member's lane and meet repeatedly at ~1
    # px/frame relative speed: passes at t1, t2, t3 with reversals between
    # them. The back member is fully hidden at each pass, so a memoryless
    # appearance chain breaks several times per hazard.
    for a, b in hazard_pairs:
        t1 = int(rng.integers(max(2, int(0.15 * frames)), max(3, int(0.25 * frames) + 1)))
        t2 = int(rng.integers(int(0.45 * frames), max(int(0.45 * frames) + 1, int(0.55 * frames) + 1)))
        t3 = int(rng.integers(int(0.75 * frames), max(int(0.75 * frames) + 1, int(0.85 * frames) + 1)))
        m1, m2 = (t1 + t2) / 2.0, (t2 + t3) / 2.0
        x_c = rng.uniform(w / 2 - 6, w / 2 + 6)
        for t in range(frames):
            if t <= m1:
                rel = t - t1
            elif t <= m2:
                rel = t2 - t
            else:
                rel = t - t3
            xs[a, t] = _bounce(x_c + rel / 2.0, x_lo, x_hi)
            xs[b, t] = _bounce(x_c - rel / 2.0, x_lo, x_hi)
            ys[b, t] = lane_y[a]

    # Occlusion maneuvers: scheduled per object; the lane neighbor slides
    # over the scheduled object for a few frames. Planned in time order so
    # a busy occluder's edited path is what later maneuvers see.
    scheduled = []
    for i in range(count):
        draw = rng.uniform()
        if i in hazard_members or count == 1:
            continue
        if draw < config.occlusion_rate:
            scheduled.append(i)
    maneuvers = []
    for i in scheduled:
        partner = i - 1 if i > 0 else i + 1
        if partner in hazard_members and count > 2:
            alt = i + 1 if i > 0 and i + 1 < count else partner
            partner = alt if alt not in hazard_members else partner
        center = int(round((i + 0.5) * frames / count))
        center = min(max(center, _TRANSIT_FRAMES + 1), frames - _TRANSIT_FRAMES - 2)
        maneuvers.append((center, i, partner))
    maneuvers.sort()

    depth = np.tile(np.arange(count, dtype=np.float64)[:, None], (1, frames))
    for a, b in hazard_pairs:
        depth[a] += 500.0  # front member of the crossing pair
    dy = max(2, int(round(0.17 * size)))
    for center, target, occ in maneuvers:
        hover_y = lane_y[target] - dy if occ < target else lane_y[target] + dy
        t0 = center - _HOVER_FRAMES // 2
        t1 = center + _HOVER_FRAMES // 2
        for t in range(max(0, t0 - _TRANSIT_FRAMES), min(frames, t1 + _TRANSIT_FRAMES + 1)):
            if t < t0:  # transit in
                frac = (t - (t0 - _TRANSIT_FRAMES) + 1) / (_TRANSIT_FRAMES + 1)
            elif t > t1:  # transit out
                frac = (t1 + _TRANSIT_FRAMES + 1 - t) / (_TRANSIT_FRAMES + 1)
            else:
                frac = 1.0
            xs[occ, t] = (1 - frac) * xs[occ, t] + frac * xs[target, t]
            ys[occ, t] = (1 - frac) * ys[occ, t] + frac * hover_y
            depth[occ, t] = 1000.0 + occ
    xs = np.clip(xs, 0, w - size)
    ys = np.clip(ys, 0, h - size)

    # Render back-to-front; higher depth wins a pixel.
    masks = np.zeros((count, frames, h, w), dtype=np.uint8)
    solo = np.zeros((count, frames), dtype=np.int64)
    for t in range(frames):
        owner = np.full((h, w), -1, dtype=np.int64)
        for i in sorted(range(count), key=lambda o: depth[o, t]):
            x0, y0 = int(round(xs[i, t])), int(round(ys[i, t]))
            owner[y0 : y0 + size, x0 : x0 + size] = i
            solo[i, t] = size * size
        for i in range(count):
            masks[i, t] = owner == i

    events = _derive_events(masks, solo, hazard_pairs, xs, ys, size)

    embeddings = _canonical_embeddings(rng, count, config.channels, classes)

    video = SyntheticVideo(config, masks, solo, classes, embeddings, events, hazard_pairs)
    for i in range(count):
        if not video.visibility_intervals(i):
            raise SceneError(f"object {i} is never visible; invalid scene")
    return video


def _derive_events(masks, solo, hazard_pairs, xs, ys, size) -> list[dict]:
    count, frames = solo.shape
    events: list[dict] = []
    visible = masks.reshape(count, frames, -1).sum(axis=2)
    ratio = visible / np.maximum(solo, 1)

    for i in range(count):
        occluded = ratio[i] < OCCLUSION_VISIBILITY_THRESHOLD
        for start, end in _runs(occluded):
            events.append({"type": "occlusion", "object": i, "start": start, "end": end})

    for a, b in hazard_pairs:
        ox = np.maximum(0, size - np.abs(xs[a] - xs[b]))
        oy = np.maximum(0, size - np.abs(ys[a] - ys[b]))
        mutual = (ox * oy) / float(size * size) >= SWAP_OVERLAP_THRESHOLD
        for start, end in _runs(mutual):
            if end - start + 1 >= 2:
                events.append(
                    {"type": "swap_hazard", "objects": [a, b], "start": start, "end": end}
                )

    for i in range(count):
        frames_visible = np.nonzero(visible[i] > 0)[0]
        if frames_visible.size == 0:
            continue
        if frames_visible[0] > 0:
            events.append({"type": "entry", "object": i, "start": int(frames_visible[0])})
        if frames_visible[-1] < frames - 1:
            events.append({"type": "exit", "object": i, "start": int(frames_visible[-1])})
    return events


def _runs(flags: np.ndarray) -> list[tuple[int, int]]:
    out = []
    start = None
    for t, f in enumerate(flags):
        if f and start is None:
            start = t
        elif not f and start is not None:
            out.append((start, t - 1))
            start = None
    if start is not None:
        out.append((start, len(flags) - 1))
    return out


_IDENTITY_OFFSET_SCALE = 1.2


def class_anchor(label: int, channels: int) -> np.ndarray:
    """Global unit direction for a class; identical across videos so class
    structure in the queries is learnable."""
    g = np.random.default_rng(np.random.SeedSequence((int(label), channels, 0xC1A55)))
    v = g.normal(size=channels)
    return v / np.linalg.norm(v)


def _canonical_embeddings(
    rng: np.random.Generator, count: int, channels: int, classes: list[int]
) -> np.ndarray:
    """Unit-norm identity embeddings: a shared class anchor plus a random
    per-identity offset, rejection-sampled to pairwise cos < 0.9. Same-class
    identities stay moderately similar (the hazard pairs look alike)."""
    out = np.zeros((count, channels))
    for i in range(count):
        anchor = class_anchor(classes[i], channels)
        for _ in range(1000):
            u = rng.normal(size=channels)
            u /= np.linalg.norm(u)
            v = anchor + _IDENTITY_OFFSET_SCALE * u
            v /= np.linalg.norm(v)
            if i == 0 or np.max(out[:i] @ v) < 0.9:
                out[i] = v
                break
        else:
            raise SceneError("could not sample sufficiently distinct embeddings")
    return out


# ---------------------------------------------------------------------------
# Mock segmenter


def frame_rng(config: SceneConfig, frame: int, salt: int = 0) -> np.random.Generator:
    """The conventional per-(video, frame) stream: a real segmenter is a
    deterministic function of the frame, so stub noise is too."""
    return np.random.default_rng(np.random.SeedSequence((config.seed, frame, salt, 0x5E6)))


def stub_segment(
    video: SyntheticVideo, frame: int, config: SceneConfig, rng: np.random.Generator
) -> ObjectQuerySet:
    """Mock per-frame segmenter output over the fixed query budget."""
    if not 0 <= frame < video.frames:
        raise SceneError(f"frame {frame} out of range [0, {video.frames})")
    n = config.query_budget
    c = config.channels
    h, w = config.canvas
    k = config.class_count + 1
    sigma = config.query_noise_sigma

    visible_ids = [
        i for i in range(video.object_count) if video.visible_area(i, frame) > 0
    ]

    queries = rng.normal(0.0, 1.0, size=(n, c)) * sigma
    class_logits = np.zeros((n, k))
    class_logits[:, -1] = config.class_logit_margin  # background rows dominate bg
    mask_logits = np.full((n, h, w), -config.mask_logit_margin)
    row_ids = np.full(n, -1, dtype=np.int64)

    for row, obj in enumerate(visible_ids):
        queries[row] += video.embeddings[obj]
        class_logits[row] = 0.0
        class_logits[row, video.classes[obj]] = config.class_logit_margin
        gt = video.masks[obj, frame].astype(bool)
        logits = np.where(gt, config.mask_logit_margin, -config.mask_logit_margin)
        band = _boundary_band(gt)
        flips = band & (rng.uniform(size=gt.shape) < config.boundary_jitter)
        logits = np.where(flips, -logits, logits)
        mask_logits[row] = logits
        row_ids[row] = obj

    # The multiply allocates a fresh buffer, so scattering is safe.
    features = video.feature_noise() * config.feature_noise_sigma
    for obj in visible_ids:
        flat = video.masks[obj, frame].reshape(-1).astype(bool)
        features[flat] += video.embeddings[obj]

    if config.permute_queries:
        perm = rng.permutation(n)
        queries, class_logits = queries[perm], class_logits[perm]
        mask_logits, row_ids = mask_logits[perm], row_ids[perm]

    return ObjectQuerySet(queries, class_logits, mask_logits, features, row_ids)


def _boundary_band(mask: np.ndarray) -> np.ndarray:
    """Pixels within one 4-neighborhood step of the mask edge (both sides)."""
    pad = np.pad(mask, 1)
    neighbors = (
        pad[:-2, 1:-1],
        pad[2:, 1:-1],
        pad[1:-1, :-2],
        pad[1:-1, 2:],
    )
    interior = mask & neighbors[0] & neighbors[1] & neighbors[2] & neighbors[3]
    dilated = mask | neighbors[0] | neighbors[1] | neighbors[2] | neighbors[3]
    return (mask & ~interior) | (dilated & ~mask)
