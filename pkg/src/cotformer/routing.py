"""Mixture-of-repeats routing primitives.

A learned vector ``e_i`` scores each token after pass ``i``; the highest scoring
tokens (a fixed fraction ``c_{i+1}`` of the sequence) run pass ``i + 1`` and
their new state is blended with the old one by the score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .autodiff import Array, sigmoid

# floor(c * S) tolerance for capacities that are themselves ratios k / S
_FLOOR_SLACK = 1e-9


@dataclass
class RouterDecision:
    scores: dict[int, Array] = field(default_factory=dict)
    eligible: dict[int, Array] = field(default_factory=dict)
    selected: dict[int, Array] = field(default_factory=dict)

    def record(self, r: int, scores: Array, eligible: Array, selected: Array) -> None:
        self.scores[r] = scores
        self.eligible[r] = eligible
        self.selected[r] = selected

    @property
    def k(self) -> dict[int, int]:
        return {r: int(s.shape[1]) for r, s in self.selected.items()}


def router_score(e: Array, x: Array) -> Array:
    """``sigmoid(e . x)`` over the last axis of ``x``."""
    if e.shape[-1] != x.shape[-1]:
        raise ValueError(f"router embedding size {e.shape[-1]} != state size {x.shape[-1]}")
    return sigmoid((x * e).sum(-1))


def validate_schedule(schedule: Sequence[float], n_repeat: int) -> list[float]:
    c = [float(v) for v in schedule]
    if len(c) != n_repeat:
        raise ValueError(f"schedule has {len(c)} capacities, model has {n_repeat} repeats")
    if c[0] != 1.0:
        raise ValueError("first capacity must be 1")
    if any(not 0.0 <= v <= 1.0 for v in c):
        raise ValueError("capacities must lie in [0, 1]")
    if any(b > a for a, b in zip(c, c[1:])):
        raise ValueError("capacities must be non-increasing")
    return c


def sample_capacities(n_repeat: int, rng: np.random.Generator) -> list[float]:
    """``[1]`` followed by ``n_repeat - 1`` uniform draws sorted descending."""
    if n_repeat < 1:
        raise ValueError("n_repeat must be positive")
    draws = np.sort(rng.uniform(0.0, 1.0, size=n_repeat - 1))[::-1]
    return [1.0] + [float(v) for v in draws]


def capacity_count(c: float, seq_len: int) -> int:
    return int(math.floor(c * seq_len + _FLOOR_SLACK))


def select_top_k(scores: Array, eligible: Array, capacity: float, seq_len: int) -> tuple[Array, Array]:
    """Pick ``min(floor(c * S), n_eligible)`` tokens per sequence by score.

    ``scores`` and ``eligible`` are ``[B, m]`` with ``eligible`` in ascending
    token order; ties go to the lower token index. Returns the selected token
    indices (ascending) and their scores.
    """
    k = min(capacity_count(capacity, seq_len), eligible.shape[-1])
    order = torch.sort(scores.detach(), dim=-1, descending=True, stable=True).indices[..., :k]
    order = torch.sort(order, dim=-1).values
    return eligible.gather(-1, order), scores.gather(-1, order)


def select_threshold(scores: Array, eligible: Array, threshold: float) -> tuple[Array, Array]:
    """Tokens whose score exceeds ``threshold`` continue.

    Each sequence of a batch must keep the same number of tokens.
    """
    keep = scores.detach() > threshold
    counts = keep.sum(-1)
    if counts.numel() and (counts != counts[0]).any():
        raise ValueError("threshold routing of a batch needs equal per-sequence counts; use batch size 1")
    b = eligible.shape[0]
    return eligible[keep].view(b, -1), scores[keep].view(b, -1)


def interpolate_update(x_prev: Array, x_new: Array, s: Array | float) -> Array:
    """``(1 - s) * x_prev + s * x_new``; differentiable in ``s``."""
    return (1 - s) * x_prev + s * x_new


def copy_forward_keys(participation: Array) -> Array:
    """Pass whose output state represents each token at each pass.

    ``participation[..., r-1, t]`` marks token ``t`` in pass ``r``. The result
    holds ``r`` where the token ran pass ``r`` and otherwise the last pass it
    ran, i.e. the state copied forward for a halted token.
    """
    R = participation.shape[-2]
    passes = torch.arange(1, R + 1).view(R, 1)
    return torch.cummax(passes * participation.long(), dim=-2).values
