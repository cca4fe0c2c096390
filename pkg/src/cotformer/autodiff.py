"""Numeric primitives on top of torch autograd.

torch supplies the array storage and the reverse-mode tape. The primitives the
models are built from (matmul, layer_norm, softmax_rows, ...) are defined here so
that every matrix product can be counted and the finite-difference oracle stays
independent of the tape.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

Array = torch.Tensor

MASK_FILL = -1e9
LN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


# --------------------------------------------------------------------------
# multiply-accumulate instrumentation


class MacCounter:
    def __init__(self) -> None:
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


_counters: list[MacCounter] = []


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count the multiplies performed by every :func:`matmul` inside the block."""
    counter = MacCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _check_finite(x: Array, name: str) -> Array:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    return x


# --------------------------------------------------------------------------
# primitives


def matmul(a: Array, b: Array) -> Array:
    """Batched matrix product ``a @ b`` with broadcasting over leading dims."""
    if a.dim() < 2 or b.dim() < 2:
        raise ValueError(f"matmul needs at least 2-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    if _counters:
        batch = torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        n = math.prod(batch) * a.shape[-2] * a.shape[-1] * b.shape[-1]
        for c in _counters:
            c.add(n)
    return a @ b


def layer_norm(x: Array, gain: Array, bias: Array, eps: float = LN_EPS) -> Array:
    if eps <= 0:
        raise ValueError("eps must be positive")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ValueError(f"layer_norm affine shape {tuple(gain.shape)} does not match {tuple(x.shape)}")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gain + bias


def softmax_rows(x: Array, allowed: Array | None = None) -> Array:
    """Row softmax over the last axis.

    Disallowed entries get an additive ``MASK_FILL`` before normalisation, so
    their weight and their gradient are exactly zero.
    """
    if allowed is not None:
        x = x + (~allowed).to(x.dtype) * MASK_FILL
    x = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(x)
    return e / e.sum(dim=-1, keepdim=True)


def gelu(x: Array) -> Array:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def sigmoid(x: Array) -> Array:
    return torch.sigmoid(x)


def cross_entropy(logits: Array, targets: Array) -> Array:
    """Mean next-token negative log-likelihood over all positions."""
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return nll.mean()


# --------------------------------------------------------------------------
# gradients


def reverse_grad(loss: Array, leaves: Sequence[Array], create_graph: bool = False) -> list[Array]:
    """Exact reverse-mode gradients of a scalar ``loss`` w.r.t. ``leaves``.

    Leaves that do not influence the loss get a zero gradient.
    """
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    grads = torch.autograd.grad(
        loss.reshape(()), list(leaves), allow_unused=True, create_graph=create_graph
    )
    return [torch.zeros_like(p) if g is None else g for p, g in zip(leaves, grads)]


def numeric_grad(
    f: Callable[[Sequence[Array]], Array],
    params: Sequence[Array],
    eps: float = 1e-5,
    components: dict[int, np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Central differences of ``f`` w.r.t. each parameter component.

    ``components`` optionally restricts, per parameter index, the flat indices
    to difference; other entries of the result are NaN.
    """
    base = [p.detach().clone() for p in params]
    out = []
    with torch.no_grad():
        for i, p in enumerate(base):
            flat = p.reshape(-1)
            g = np.full(flat.numel(), np.nan)
            idx = range(flat.numel()) if components is None else components.get(i, [])
            for j in idx:
                old = flat[j].item()
                flat[j] = old + eps
                fp = float(f(base))
                flat[j] = old - eps
                fm = float(f(base))
                flat[j] = old
                g[j] = (fp - fm) / (2 * eps)
            out.append(g.reshape(tuple(p.shape)))
    return out


def finite_diff_check(
    f: Callable[[Sequence[Array]], Array],
    params: Sequence[Array],
    eps: float = 1e-5,
    max_components: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The relative error of a component is ``|a - b| / max(|a|, |b|, 1e-8)``.
    With ``max_components`` only that many randomly chosen entries of each
    parameter are differenced.
    """
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("finite_diff_check needs 64-bit parameters")
    leaves = [p.detach().clone().requires_grad_(True) for p in params]
    analytic = [g.detach().numpy() for g in reverse_grad(f(leaves), leaves)]

    components = None
    if max_components is not None:
        rng = rng or np.random.default_rng(0)
        components = {
            i: rng.choice(p.numel(), size=min(max_components, p.numel()), replace=False)
            for i, p in enumerate(params)
        }
    numeric = numeric_grad(f, params, eps, components)

    worst = 0.0
    for a, n in zip(analytic, numeric):
        sel = ~np.isnan(n)
        if not sel.any():
            continue
        a, n = a[sel], n[sel]
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(err.max()))
    return worst


def clip_grad_norm(grads: Sequence[Array], max_norm: float) -> tuple[list[Array], float]:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if max_norm <= 0 or total <= max_norm:
        return list(grads), total
    scale = max_norm / (total + 1e-6)
    return [g * scale for g in grads], total


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    exp_avg: list[Array]
    exp_avg_sq: list[Array]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Array]) -> "OptimizerState":
        return cls(
            [torch.zeros_like(p, requires_grad=False) for p in params],
            [torch.zeros_like(p, requires_grad=False) for p in params],
        )


def adamw_step(
    params: Sequence[Array],
    grads: Sequence[Array],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    decay_mask: Sequence[bool] | None = None,
) -> tuple[list[Array], OptimizerState]:
    """One AdamW update; returns new parameter tensors and the advanced state.

    Weight decay is decoupled: ``p <- p * (1 - lr * wd)`` is applied to the
    parameter directly and never enters the moment estimates.
    """
    if not (len(params) == len(grads) == len(state.exp_avg) == len(state.exp_avg_sq)):
        raise ValueError("params, grads and optimizer state differ in length")
    step = state.step + 1
    bc1 = 1 - beta1**step
    bc2 = 1 - beta2**step
    new_params, new_m, new_v = [], [], []
    with torch.no_grad():
        for i, (p, g, m, v) in enumerate(zip(params, grads, state.exp_avg, state.exp_avg_sq)):
            if not (p.shape == g.shape == m.shape == v.shape):
                raise ValueError(f"shape mismatch for parameter {i}: {tuple(p.shape)} vs {tuple(g.shape)}")
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            wd = weight_decay if decay_mask is None or decay_mask[i] else 0.0
            q = p * (1 - lr * wd) if wd else p.clone()
            q = q - lr * (m / bc1) / (torch.sqrt(v / bc2) + eps)
            new_params.append(_check_finite(q, "adamw_step"))
            new_m.append(m)
            new_v.append(v)
    return new_params, OptimizerState(new_m, new_v, step)
