"""Adaptive-depth forward and threshold calibration."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .config import ModelConfig
from .model import ForwardResult, Params, run


def adaptive_forward(
    config: ModelConfig, params: Params, token_ids, schedule: Sequence[float]
) -> ForwardResult:
    """Forward pass where pass ``i`` admits ``floor(c_i * S)`` tokens per sequence."""
    if not config.adaptive:
        raise ValueError("adaptive_forward needs an adaptive model")
    return run(config, params, token_ids, schedule=schedule)


@dataclass
class Calibration:
    threshold: float
    capacities: list[float]
    entry_counts: list[int]
    n_tokens: int
    bin_edges: list[float]
    bin_counts: list[int]
    meta: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "threshold": self.threshold,
            "capacities": self.capacities,
            "entry_counts": self.entry_counts,
            "n_tokens": self.n_tokens,
            "histogram": {"bins": self.bin_edges, "counts": self.bin_counts},
            **self.meta,
        }


def threshold_participation(config: ModelConfig, params: Params, window, threshold: float) -> np.ndarray:
    """``[R, S]`` map of which passes each token enters under threshold halting."""
    with torch.no_grad():
        res = run(config, params, np.asarray(window)[None], threshold=threshold)
    return res.state.participation[0].numpy()


def last_repeat_scores(config: ModelConfig, params: Params, windows: Iterable) -> np.ndarray:
    """Router weights of the final router with every token running every pass."""
    R = config.n_repeat
    out = []
    if R < 2:
        return np.zeros(0)
    with torch.no_grad():
        for w in windows:
            res = run(config, params, np.asarray(w)[None])
            out.append(res.decision.scores[R].reshape(-1).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def calibrate_capacities(
    config: ModelConfig,
    params: Params,
    windows: Sequence,
    threshold: float,
    bins: int = 20,
) -> Calibration:
    """Capacities equal to the fraction of tokens entering each pass when
    tokens continue only while their router score exceeds ``threshold``.
    """
    if not config.adaptive:
        raise ValueError("calibration needs an adaptive model")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    windows = list(windows)
    if not windows:
        raise ValueError("empty corpus sample")
    counts = np.zeros(config.n_repeat, dtype=np.int64)
    n_tokens = 0
    for w in windows:
        part = threshold_participation(config, params, w, threshold)
        counts += part.sum(axis=1)
        n_tokens += part.shape[1]
    caps = np.minimum.accumulate(counts / n_tokens)
    caps[0] = 1.0
    scores = last_repeat_scores(config, params, windows)
    hist, edges = np.histogram(scores, bins=bins, range=(0.0, 1.0))
    return Calibration(
        threshold=float(threshold),
        capacities=[float(c) for c in caps],
        entry_counts=[int(c) for c in counts],
        n_tokens=int(n_tokens),
        bin_edges=[float(e) for e in edges],
        bin_counts=[int(c) for c in hist],
    )

