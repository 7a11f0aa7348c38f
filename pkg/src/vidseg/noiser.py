"""Training-time corruption of tracker inputs.

Three strategies over a bank of N object rows: convex weighted averaging
with a random partner row, channel crop-and-concat with a partner row, and
full row shuffling. A Bernoulli gate decides per (sample, frame) whether a
strategy fires; when it does not, the caller feeds the clean pre-matched
rows through instead. Test hooks allow pinning every random draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRATEGIES = ("weighted_average", "crop_concat", "shuffle")


@dataclass
class NoiseConfig:
    strategy: str = "weighted_average"
    probability: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {self.probability}")


class NoiseStats:
    """Counts how often the gate fired; inference asserts it never does."""

    def __init__(self):
        self.decisions = 0
        self.applied = 0

    def record(self, applied: bool) -> None:
        self.decisions += 1
        self.applied += int(applied)


def weighted_average_noise(
    q: np.ndarray,
    rng: np.random.Generator,
    alphas: np.ndarray | None = None,
    partners: np.ndarray | None = None,
) -> np.ndarray:
    """Row i becomes alpha*q[i] + (1-alpha)*q[j], fresh alpha and j per row."""
    n = q.shape[0]
    if alphas is None:
        alphas = rng.uniform(0.0, 1.0, size=n)
    if partners is None:
        partners = rng.integers(0, n, size=n)
    alphas = np.asarray(alphas, dtype=np.float64).reshape(n, 1)
    return alphas * q + (1.0 - alphas) * q[np.asarray(partners, dtype=np.int64)]


def crop_concat_noise(
    q: np.ndarray,
    rng: np.random.Generator,
    cuts: np.ndarray | None = None,
    partners: np.ndarray | None = None,
) -> np.ndarray:
    """Row i keeps channels [:k] and takes [k:] from row j, fresh k, j per row."""
    n, c = q.shape
    if cuts is None:
        cuts = rng.integers(0, c, size=n)
    if partners is None:
        partners = rng.integers(0, n, size=n)
    out = q.copy()
    for i in range(n):
        k = int(cuts[i])
        out[i, k:] = q[int(partners[i]), k:]
    return out


def shuffle_noise(
    q: np.ndarray, rng: np.random.Generator, permutation: np.ndarray | None = None
) -> np.ndarray:
    if permutation is None:
        permutation = rng.permutation(q.shape[0])
    return q[np.asarray(permutation, dtype=np.int64)].copy()


def apply(
    q: np.ndarray,
    config: NoiseConfig,
    rng: np.random.Generator,
    stats: NoiseStats | None = None,
    force: bool | None = None,
) -> tuple[np.ndarray, bool]:
    """One Bernoulli draw; on success the configured strategy corrupts q.

    q must already be in pre-matched row order; the pass-through branch
    returns it untouched (the inference-path input).
    """
    fired = (rng.uniform() < config.probability) if force is None else bool(force)
    if stats is not None:
        stats.record(fired)
    if not fired:
        return q.copy(), False
    if config.strategy == "weighted_average":
        return weighted_average_noise(q, rng), True
    if config.strategy == "crop_concat":
        return crop_concat_noise(q, rng), True
    return shuffle_noise(q, rng), True
