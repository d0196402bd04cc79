"""Frame probabilities to event lists: threshold, median filter, run extraction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .events import EventAnnotation

DEFAULT_THRESHOLD = 0.5
DEFAULT_TAG_THRESHOLD = 0.5
DEFAULT_WINDOW = 27  # frames, about 0.54 s at a 20 ms hop
MIN_WINDOW = 3
MAX_WINDOW = 51


@dataclass
class PostConfig:
    """Threshold plus per-class median window sizes (odd frame counts).

    tag_threshold gates detection on the clip-level output: classes whose
    clip probability does not exceed it emit no events. 0.0 disables the
    gate for practical purposes since sigmoid outputs are strictly positive.
    """

    threshold: float = DEFAULT_THRESHOLD
    median_windows: dict[str, int] = field(default_factory=dict)
    default_window: int = DEFAULT_WINDOW
    tag_threshold: float = DEFAULT_TAG_THRESHOLD

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not 0.0 <= self.tag_threshold < 1.0:
            raise ValueError(f"tag_threshold must lie in [0, 1), got {self.tag_threshold}")
        for label, window in list(self.median_windows.items()) + [("", self.default_window)]:
            if window < 1 or window % 2 == 0:
                raise ValueError(
                    f"median window must be odd and positive, got {window}"
                    + (f" for {label!r}" if label else "")
                )

    def window_for(self, label: str) -> int:
        return self.median_windows.get(label, self.default_window)


def round_up_to_odd(x: float) -> int:
    """Smallest odd integer >= round-down of x; even values round up."""
    return max(1, 2 * int(np.floor(x / 2.0)) + 1)


def adaptive_window(median_duration_seconds: float, hop_seconds: float) -> int:
    """Window of about a third of the typical event, clamped to [3, 51]."""
    if median_duration_seconds <= 0.0 or hop_seconds <= 0.0:
        raise ValueError("durations must be positive")
    frames = median_duration_seconds / hop_seconds / 3.0
    return int(np.clip(round_up_to_odd(frames), MIN_WINDOW, MAX_WINDOW))


def binarize(frame_probs: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """1 where probability strictly exceeds the threshold."""
    probs = np.asarray(frame_probs, dtype=np.float64)
    if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    return (probs > threshold).astype(np.int8)


def _median_pass(seq: np.ndarray, window: int) -> np.ndarray:
    half = window // 2
    padded = np.pad(seq, half, mode="edge")
    strided = np.lib.stride_tricks.sliding_window_view(padded, window)
    return np.median(strided, axis=1).astype(seq.dtype)


def median_filter(binary: np.ndarray, window: int) -> np.ndarray:
    """Centered running median, edge-replicated, repeated until stable.

    A single pass is not idempotent (an alternating run like 1,0,1,0,1
    keeps changing), so passes are repeated until the sequence is a fixed
    point of the filter; this always happens within len(seq) passes.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and positive, got {window}")
    seq = np.asarray(binary)
    if seq.ndim != 1:
        raise ValueError(f"median_filter expects a 1-D sequence, got shape {seq.shape}")
    if window == 1 or len(seq) == 0:
        return seq.copy()
    current = seq
    for _ in range(max(1, len(seq))):
        filtered = _median_pass(current, window)
        if np.array_equal(filtered, current):
            return filtered
        current = filtered
    raise RuntimeError("median filter failed to reach a fixed point")


def extract_events(
    binary: np.ndarray, hop_seconds: float, label: str, clip_id: str
) -> list[EventAnnotation]:
    """Each maximal run of ones [i..j] becomes the event [i*hop, (j+1)*hop)."""
    seq = np.asarray(binary).astype(bool)
    if seq.ndim != 1:
        raise ValueError(f"extract_events expects a 1-D sequence, got shape {seq.shape}")
    edges = np.flatnonzero(np.diff(np.concatenate(([False], seq, [False])).astype(np.int8)))
    starts, ends = edges[0::2], edges[1::2]
    return [
        EventAnnotation(clip_id, label, i * hop_seconds, j * hop_seconds)
        for i, j in zip(starts, ends)
    ]


def probs_to_events(
    frame_probs: np.ndarray,
    hop_seconds: float,
    labels: list[str],
    config: PostConfig | None = None,
    clip_id: str = "",
) -> list[EventAnnotation]:
    """Full post-processing of a T x C probability matrix into events."""
    config = config or PostConfig()
    probs = np.asarray(frame_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != len(labels):
        raise ValueError(
            f"expected frame probabilities of shape (T, {len(labels)}), got {probs.shape}"
        )
    events = []
    for c, label in enumerate(labels):
        active = binarize(probs[:, c], config.threshold)
        smoothed = median_filter(active, config.window_for(label))
        events.extend(extract_events(smoothed, hop_seconds, label, clip_id))
    return sorted(events, key=lambda e: (e.onset, e.offset, e.label))
