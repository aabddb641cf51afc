"""Span masking over downsampled frames."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import UsageError
from .validation import check_positive_int, check_probability


@dataclass(frozen=True, eq=False)
class MaskSpec:
    frame_count: int
    masked: np.ndarray
    p: float
    span: int

    def __post_init__(self):
        masked = np.unique(np.asarray(self.masked, dtype=np.int64))
        if masked.size and (masked[0] < 0 or masked[-1] >= self.frame_count):
            raise UsageError(f"mask indices must lie in [0, {self.frame_count})")
        masked.setflags(write=False)
        object.__setattr__(self, "masked", masked)

    def __len__(self) -> int:
        return int(self.masked.size)

    def __contains__(self, t) -> bool:
        i = np.searchsorted(self.masked, t)
        return bool(i < self.masked.size and self.masked[i] == t)

    def __eq__(self, other):
        if not isinstance(other, MaskSpec):
            return NotImplemented
        return self.frame_count == other.frame_count and np.array_equal(self.masked, other.masked)

    __hash__ = None

    def as_bool(self, length: int | None = None) -> np.ndarray:
        out = np.zeros(self.frame_count if length is None else length, dtype=bool)
        out[self.masked] = True
        return out

    @property
    def coverage(self) -> float:
        return len(self) / self.frame_count if self.frame_count else 0.0

    @classmethod
    def empty(cls, frame_count: int) -> "MaskSpec":
        return cls(frame_count, np.empty(0, dtype=np.int64), 0.0, 1)

    @classmethod
    def full(cls, frame_count: int) -> "MaskSpec":
        return cls(frame_count, np.arange(frame_count), 1.0, 1)


def span_starts_to_mask(starts: np.ndarray, frame_count: int, span: int) -> np.ndarray:
    """Boolean mask covering ``[start, start + span)`` for each start flag, clipped at the end."""
    # running count of active spans: +1 at each start, -1 span frames later
    delta = np.zeros(frame_count + span, dtype=np.int64)
    idx = np.flatnonzero(starts)
    np.add.at(delta, idx, 1)
    np.add.at(delta, idx + span, -1)
    return np.cumsum(delta)[:frame_count] > 0


def sample_mask(frame_count: int, p: float, span: int, rng: np.random.Generator) -> MaskSpec:
    """Mask spans of ``span`` frames, each frame independently starting a span with probability ``p``."""
    frame_count = check_positive_int(frame_count, "frame_count", minimum=0)
    p = check_probability(p, "p")
    span = check_positive_int(span, "span")
    starts = rng.random(frame_count) < p
    mask = span_starts_to_mask(starts, frame_count, span)
    return MaskSpec(frame_count, np.flatnonzero(mask), p, span)


def expected_coverage(p: float, span: int) -> float:
    """Stationary probability that a frame at least ``span - 1`` frames from the start is masked."""
    p = check_probability(p, "p")
    span = check_positive_int(span, "span")
    return 1.0 - (1.0 - p) ** span


def empirical_coverage(frame_count: int, p: float, span: int, seeds, rng_factory=None) -> float:
    """Fraction of masked frames pooled over one mask per seed."""
    total = masked = 0
    for seed in seeds:
        rng = rng_factory(seed) if rng_factory else np.random.default_rng(seed)
        m = sample_mask(frame_count, p, span, rng)
        masked += len(m)
        total += frame_count
    return masked / total
