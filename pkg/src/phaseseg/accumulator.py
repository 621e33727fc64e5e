"""Counter-based post-processing that enforces a forward-only phase timeline.

Raw per-frame predictions flicker; surgical phases do not. The smoother walks
the prediction stream with a counter: it opens when a frame predicts the
phase directly following the current one, increments on consecutive such
frames, resets on anything else, and commits the transition once the counter
reaches the configured threshold. Committed output therefore never regresses
and (with skipping disabled) only advances one phase at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AccumulatorConfig:
    """threshold: consecutive supporting frames required to commit a transition.

    retroactive=True relabels back to the first frame of the committing run,
    minimizing boundary lag. allow_skip permits transitions to any later
    phase (for incomplete procedures); off by default, which also guarantees
    unit-step output.
    """

    threshold: int = 30
    allow_skip: bool = False
    retroactive: bool = True

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError(f"threshold must be >= 1, got {self.threshold}")


@dataclass(frozen=True)
class PhaseTimeline:
    """Hard per-frame phase ids over a fixed ordered ontology."""

    labels: np.ndarray
    n_classes: int = 4

    def __post_init__(self):
        arr = np.asarray(self.labels, dtype=np.int64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError(f"labels must be a non-empty 1-D array, got shape {arr.shape}")
        if np.any(arr < 0) or np.any(arr >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "labels", arr)

    def __len__(self):
        return self.labels.size


def _initial_phase(preds: np.ndarray, window: int) -> int:
    """Majority vote over the first `window` frames; ties pick the lower id."""
    head = preds[:window]
    counts = np.bincount(head)
    return int(np.argmax(counts))


def smooth(predictions, cfg: AccumulatorConfig = AccumulatorConfig()) -> np.ndarray:
    """Convert a noisy prediction stream into a monotone phase timeline.

    Accepts a PhaseTimeline or a 1-D integer array; returns an int64 array of
    the same length. Raises on empty input.
    """
    preds = predictions.labels if isinstance(predictions, PhaseTimeline) else \
        np.asarray(predictions, dtype=np.int64)
    if preds.ndim != 1:
        raise ValueError(f"predictions must be 1-D, got shape {preds.shape}")
    if preds.size == 0:
        raise ValueError("cannot smooth an empty prediction stream")
    if np.any(preds < 0):
        raise ValueError("predictions must be nonnegative phase ids")

    out = np.empty_like(preds)
    current = _initial_phase(preds, cfg.threshold)
    count = 0
    run_start = 0
    candidate = -1  # phase the open counter is accumulating toward
    for t, p in enumerate(preds):
        supports = (p == current + 1) if not cfg.allow_skip else (p > current)
        if supports and (count == 0 or p == candidate):
            if count == 0:
                run_start = t
                candidate = int(p)
            count += 1
            if count >= cfg.threshold:
                current = candidate
                if cfg.retroactive:
                    out[run_start:t] = current
                count = 0
                candidate = -1
        else:
            count = 0
            candidate = -1
            if supports:  # a different forward phase restarts the counter
                run_start = t
                candidate = int(p)
                count = 1
        out[t] = current
    return out


def argmax_decode(probs) -> np.ndarray:
    """Per-frame argmax of a probability matrix; ties go to the lower phase id."""
    p = np.asarray(getattr(probs, "data", probs))
    if p.ndim != 2:
        raise ValueError(f"probabilities must be 2-D, got shape {p.shape}")
    return np.argmax(p, axis=1).astype(np.int64)
