"""Standard, Block Universal and CoTFormer forward passes.

All three share one Pre-LN block implementation. They differ only in which
keys a query of repeat ``r`` may attend to:

* standard: one pass, plain causal attention;
* block_universal: pass ``r`` sees the pass-``r`` states of tokens ``u <= t``;
* cotformer: pass ``r`` sees every earlier-or-equal pass of tokens ``u < t``,
  its own pass-``r`` state and (with ``self_history``) its own earlier passes.

Token representations are laid out ``[batch, seq, d_model]``. Rotary positions
use the original token index, so all repeats of a token share a position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import routing
from .autodiff import Array, gelu, layer_norm, matmul, softmax_rows
from .config import ModelConfig

Params = dict[str, Array]


# --------------------------------------------------------------------------
# parameters


def layer_prefixes(config: ModelConfig) -> tuple[list[str], list[str], list[str]]:
    return (
        [f"begin.{i}" for i in range(config.n_begin)],
        [f"middle.{i}" for i in range(config.n_middle)],
        [f"end.{i}" for i in range(config.n_end)],
    )


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in serialization order."""
    d, f = config.d_model, config.d_ff
    shapes: list[tuple[str, tuple[int, ...]]] = [("tok_emb", (config.vocab_size, d))]
    for prefix in sum(layer_prefixes(config), []):
        shapes += [
            (f"{prefix}.ln1.weight", (d,)),
            (f"{prefix}.ln1.bias", (d,)),
            (f"{prefix}.attn.wq", (d, d)),
            (f"{prefix}.attn.wk", (d, d)),
            (f"{prefix}.attn.wv", (d, d)),
            (f"{prefix}.attn.wo", (d, d)),
            (f"{prefix}.ln2.weight", (d,)),
            (f"{prefix}.ln2.bias", (d,)),
            (f"{prefix}.mlp.w1", (d, f)),
            (f"{prefix}.mlp.w2", (f, d)),
        ]
    if config.ln_per_repeat:
        shapes += [("repeat_ln.weight", (d,)), ("repeat_ln.bias", (d,))]
    shapes += [("ln_f.weight", (d,)), ("ln_f.bias", (d,)), ("unembed", (d, config.vocab_size))]
    if config.adaptive and config.n_repeat > 1:
        shapes.append(("router.halt", (config.n_repeat - 1, d)))
    if config.depth_embedding:
        shapes.append(("router.depth", (d,)))
    return shapes


def init_params(
    config: ModelConfig,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
    std: float = 0.02,
    router_std: float = 0.0,
) -> Params:
    """Truncated-normal weights, unit LN gains, zero biases.

    Router halt embeddings default to zero so every initial score is 0.5.
    """
    gen = torch.Generator().manual_seed(seed)
    params: Params = {}
    for name, shape in param_shapes(config):
        if name.endswith(".weight"):
            t = torch.ones(shape, dtype=dtype)
        elif name.endswith(".bias"):
            t = torch.zeros(shape, dtype=dtype)
        elif name.startswith("router."):
            t = torch.zeros(shape, dtype=dtype)
            if router_std:
                torch.nn.init.trunc_normal_(t, 0.0, router_std, -2 * router_std, 2 * router_std, generator=gen)
        else:
            t = torch.empty(shape, dtype=dtype)
            torch.nn.init.trunc_normal_(t, 0.0, std, -2 * std, 2 * std, generator=gen)
        params[name] = t
    return params


def check_params(config: ModelConfig, params: Params) -> None:
    expected = dict(param_shapes(config))
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter names do not match config (missing={missing}, extra={extra})")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"{name}: shape {tuple(params[name].shape)} != {shape}")


def count_params(params: Params, prefix: str = "") -> int:
    return sum(p.numel() for n, p in params.items() if n.startswith(prefix))


def to_standard(config: ModelConfig, params: Params) -> tuple[ModelConfig, Params]:
    """Flatten begin/middle/end layers into an untied standard transformer."""
    cfg = ModelConfig(
        variant="standard",
        n_middle=config.n_layers,
        n_repeat=1,
        d_model=config.d_model,
        n_heads=config.n_heads,
        d_ff=config.d_ff,
        vocab_size=config.vocab_size,
        max_seq_len=config.max_seq_len,
        rope_base=config.rope_base,
    )
    out = {"tok_emb": params["tok_emb"]}
    for j, old in enumerate(sum(layer_prefixes(config), [])):
        for name, p in params.items():
            if name.startswith(old + "."):
                out[f"middle.{j}" + name[len(old):]] = p
    for name in ("ln_f.weight", "ln_f.bias", "unembed"):
        out[name] = params[name]
    return cfg, out


# --------------------------------------------------------------------------
# block pieces


def rotary(x: Array, pos: Array, base: float) -> Array:
    """Rotate ``x[B, H, T, dh]`` by angles of token positions ``pos[B, T]``."""
    dh = x.shape[-1]
    inv = base ** (-torch.arange(0, dh, 2, dtype=torch.float64) / dh)
    ang = pos.to(torch.float64)[:, None, :, None] * inv
    cos, sin = torch.cos(ang).to(x.dtype), torch.sin(ang).to(x.dtype)
    x1, x2 = x[..., : dh // 2], x[..., dh // 2 :]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def _heads(x: Array, n_heads: int) -> Array:
    b, t, d = x.shape
    return x.view(b, t, n_heads, d // n_heads).transpose(1, 2)


def project_kv(config: ModelConfig, params: Params, prefix: str, x: Array, pos: Array) -> tuple[Array, Array]:
    """Keys and values a layer derives from its residual input ``x``."""
    h = layer_norm(x, params[f"{prefix}.ln1.weight"], params[f"{prefix}.ln1.bias"])
    k = _heads(matmul(h, params[f"{prefix}.attn.wk"]), config.n_heads)
    v = _heads(matmul(h, params[f"{prefix}.attn.wv"]), config.n_heads)
    return rotary(k, pos, config.rope_base), v


class CausalStore:
    """Keys are exactly the current tokens (fixed layers, standard model)."""

    def extend(self, config, params, layer, prefix, k, v):
        return k, v


class CoTStore:
    """Accumulates every pass's keys per repeated layer."""

    def __init__(self, n_layers: int) -> None:
        self.keys: list[list[Array]] = [[] for _ in range(n_layers)]
        self.values: list[list[Array]] = [[] for _ in range(n_layers)]

    def extend(self, config, params, layer, prefix, k, v):
        self.keys[layer].append(k)
        self.values[layer].append(v)
        return torch.cat(self.keys[layer], dim=2), torch.cat(self.values[layer], dim=2)


class SamePassStore:
    """Block Universal keys: this pass's tokens plus copy-forward keys of halted ones."""

    def __init__(self, seq_len: int, idx: Array, halted_idx: Array, halted_x: Array) -> None:
        self.seq_len = seq_len
        self.idx = idx
        self.halted_idx = halted_idx
        self.halted_x = halted_x

    def extend(self, config, params, layer, prefix, k, v):
        if self.halted_idx.shape[1] == 0:
            return k, v
        kh, vh = project_kv(config, params, prefix, self.halted_x, self.halted_idx)
        b, h, _, dh = k.shape
        shape = (b, h, self.seq_len, dh)
        sel = self.idx[:, None, :, None].expand(b, h, -1, dh)
        hal = self.halted_idx[:, None, :, None].expand(b, h, -1, dh)
        K = k.new_zeros(shape).scatter(2, sel, k).scatter(2, hal, kh)
        V = v.new_zeros(shape).scatter(2, sel, v).scatter(2, hal, vh)
        return K, V


def block_stack_forward(
    config: ModelConfig,
    params: Params,
    prefixes: Sequence[str],
    x: Array,
    pos: Array,
    allowed: Array,
    store=None,
) -> Array:
    """Apply the Pre-LN blocks named by ``prefixes`` once.

    ``x`` is ``[B, T, d]`` with token positions ``pos[B, T]``. ``store`` turns
    the layer's fresh keys/values into the full key set the queries see, and
    ``allowed[B, T, n_keys]`` says which of those keys each query may use.
    """
    store = store or CausalStore()
    nh = config.n_heads
    scale = 1.0 / math.sqrt(config.head_dim)
    for layer, prefix in enumerate(prefixes):
        h = layer_norm(x, params[f"{prefix}.ln1.weight"], params[f"{prefix}.ln1.bias"])
        q = rotary(_heads(matmul(h, params[f"{prefix}.attn.wq"]), nh), pos, config.rope_base)
        k = rotary(_heads(matmul(h, params[f"{prefix}.attn.wk"]), nh), pos, config.rope_base)
        v = _heads(matmul(h, params[f"{prefix}.attn.wv"]), nh)
        K, V = store.extend(config, params, layer, prefix, k, v)
        if allowed.shape[-1] != K.shape[2]:
            raise ValueError(f"mask covers {allowed.shape[-1]} keys but {K.shape[2]} are stored")
        w = softmax_rows(matmul(q, K.transpose(-1, -2)) * scale, allowed[:, None])
        a = matmul(w, V).transpose(1, 2).reshape(x.shape)
        x = x + matmul(a, params[f"{prefix}.attn.wo"])
        h = layer_norm(x, params[f"{prefix}.ln2.weight"], params[f"{prefix}.ln2.bias"])
        x = x + matmul(gelu(matmul(h, params[f"{prefix}.mlp.w1"])), params[f"{prefix}.mlp.w2"])
    return x


# --------------------------------------------------------------------------
# masks


def validate_participation(participation: Array) -> None:
    if participation.dtype != torch.bool:
        raise ValueError("participation must be boolean")
    if not participation[..., 0, :].all():
        raise ValueError("every token must take part in the first pass")
    if (participation[..., 1:, :] & ~participation[..., :-1, :]).any():
        raise ValueError("participation must be non-increasing over passes")


def build_mask(
    variant: str,
    seq_len: int,
    n_repeat: int,
    r: int,
    participation: Array | None = None,
    self_history: bool = True,
) -> Array:
    """Dense allowed-key mask for the queries of pass ``r`` (1-based).

    Returns a boolean array ``[..., S, R*S]``: row ``t`` is query ``(t, r)``,
    column ``(r' - 1) * S + u`` is key ``(u, r')``. Rows of tokens that do not
    take part in pass ``r`` are empty.
    """
    S, R = seq_len, n_repeat
    if not 1 <= r <= R:
        raise ValueError(f"pass {r} outside 1..{R}")
    if variant == "standard" and R != 1:
        raise ValueError("standard variant has a single pass")
    if participation is None:
        participation = torch.ones(R, S, dtype=torch.bool)
    if tuple(participation.shape[-2:]) != (R, S):
        raise ValueError(f"participation shape {tuple(participation.shape)} != (..., {R}, {S})")
    validate_participation(participation)

    t = torch.arange(S)[:, None]
    u = torch.arange(S)[None, :]
    lead = participation.shape[:-2]
    blocks = []
    for rk in range(1, R + 1):
        if variant == "cotformer":
            if rk > r:
                rel = torch.zeros(S, S, dtype=torch.bool)
            elif rk == r or self_history:
                rel = u <= t
            else:
                rel = u < t
            blk = rel & participation[..., rk - 1, None, :]
        elif variant in ("block_universal", "standard"):
            blk = (u <= t) if rk == r else torch.zeros(S, S, dtype=torch.bool)
            blk = blk.expand(*lead, S, S)
        else:
            raise ValueError(f"unknown variant {variant!r}")
        blocks.append(blk)
    return torch.cat(blocks, dim=-1) & participation[..., r - 1, :, None]


def causal_mask(batch: int, seq_len: int) -> Array:
    return torch.ones(seq_len, seq_len, dtype=torch.bool).tril().expand(batch, seq_len, seq_len)


def apply_depth_embedding(x: Array, r: int, n_repeat: int, e_depth: Array) -> Array:
    """Add ``(R - r) * e_depth``: the number of repeats still available."""
    if not 1 <= r <= n_repeat:
        raise ValueError(f"pass {r} outside 1..{n_repeat}")
    coeff = n_repeat - r
    if coeff == 0:
        return x
    return x + coeff * e_depth


# --------------------------------------------------------------------------
# forward engine


@dataclass
class PassState:
    """Per-pass token states.

    ``states[0]`` is the input to pass 1; ``states[r]`` holds every token's
    representation after pass ``r`` (tokens that skipped the pass carry their
    previous value). ``participation[..., r-1, t]`` marks token ``t`` in pass ``r``.
    """

    states: list[Array]
    participation: Array
    kv_entries: dict[int, int] = field(default_factory=dict)


@dataclass
class ForwardResult:
    logits: Array
    state: PassState
    decision: routing.RouterDecision | None = None


def _gather(x: Array, idx: Array) -> Array:
    return x.gather(1, idx[..., None].expand(-1, -1, x.shape[-1]))


def _embed(config: ModelConfig, params: Params, ids: Array) -> Array:
    if ids.dim() != 2:
        raise ValueError("token ids must be [batch, seq]")
    if ids.shape[1] > config.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if ids.numel() and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError("token id outside vocabulary")
    return params["tok_emb"][ids]


def _head(params: Params, x: Array) -> Array:
    x = layer_norm(x, params["ln_f.weight"], params["ln_f.bias"])
    return matmul(x, params["unembed"])


def _as_batch(token_ids) -> tuple[Array, bool]:
    ids = torch.as_tensor(np.asarray(token_ids), dtype=torch.long)
    if ids.dim() == 1:
        return ids[None], True
    return ids, False


def run(
    config: ModelConfig,
    params: Params,
    token_ids,
    schedule: Sequence[float] | None = None,
    depth: int | None = None,
    threshold: float | None = None,
) -> ForwardResult:
    """Batched forward for any variant.

    ``depth`` truncates to the first ``depth`` passes. For adaptive models,
    ``schedule`` gives per-pass capacities (top-k routing) and ``threshold``
    switches to per-token halting (``s > threshold`` continues); without
    either every token runs every pass, still interpolated by its score.
    """
    ids, squeeze = _as_batch(token_ids)
    B, S = ids.shape
    R = config.n_repeat
    begin, middle, end = layer_prefixes(config)
    if depth is not None and not 1 <= depth <= R:
        raise ValueError(f"depth {depth} outside 1..{R}")
    if (schedule is not None or threshold is not None) and not config.adaptive:
        raise ValueError("routing schedules and thresholds need an adaptive model")
    if schedule is not None and threshold is not None:
        raise ValueError("give either a schedule or a threshold")
    if schedule is not None:
        schedule = routing.validate_schedule(schedule, R)
    n_pass = depth or R

    x = _embed(config, params, ids)
    full = torch.arange(S).expand(B, S)
    if begin:
        x = block_stack_forward(config, params, begin, x, full, causal_mask(B, S))

    states = [x]
    part = torch.zeros(B, R, S, dtype=torch.bool)
    decision = routing.RouterDecision() if config.adaptive else None
    cot = CoTStore(len(middle))
    key_tok: list[Array] = []
    key_pass: list[Array] = []
    idx = full
    for r in range(1, n_pass + 1):
        s_sel = None
        if r > 1 and config.adaptive:
            eligible = idx
            scores = routing.router_score(params["router.halt"][r - 2], _gather(x, eligible))
            if threshold is not None:
                idx, s_sel = routing.select_threshold(scores, eligible, threshold)
            elif schedule is not None:
                idx, s_sel = routing.select_top_k(scores, eligible, schedule[r - 1], S)
            else:
                idx, s_sel = eligible, scores
            decision.record(r, scores, eligible, idx)
        if idx.shape[1] == 0:
            break
        part[:, r - 1] = part[:, r - 1].scatter(1, idx, True)

        x_prev = _gather(x, idx)
        h = x_prev
        if config.depth_embedding:
            h = apply_depth_embedding(h, r, R, params["router.depth"])

        mask = build_mask(config.variant, S, R, r, part, config.self_history)
        rows = mask.gather(1, idx[..., None].expand(-1, -1, R * S))
        if config.variant == "cotformer":
            key_tok.append(idx)
            key_pass.append(torch.full_like(idx, r))
            cols = (torch.cat(key_pass, 1) - 1) * S + torch.cat(key_tok, 1)
            store = cot
        else:
            cols = (r - 1) * S + full
            src = routing.copy_forward_keys(part[:, :r])[:, r - 1]
            halted = torch.nonzero(src != r)[:, 1].view(B, -1) if idx.shape[1] < S else idx[:, :0]
            halted_x = _gather(x, halted)
            store = SamePassStore(S, idx, halted, halted_x)
        allowed = rows.gather(2, cols[:, None, :].expand(-1, idx.shape[1], -1))

        y = block_stack_forward(config, params, middle, h, idx, allowed, store)
        if config.ln_per_repeat:
            y = layer_norm(y, params["repeat_ln.weight"], params["repeat_ln.bias"])
        if s_sel is not None:
            y = routing.interpolate_update(x_prev, y, s_sel[..., None])
        if idx.shape[1] == S:
            x = y
        else:
            x = x.scatter(1, idx[..., None].expand(-1, -1, x.shape[-1]), y)
        states.append(x)

    while len(states) < R + 1:
        states.append(x)
    if end:
        x = block_stack_forward(config, params, end, x, full, causal_mask(B, S))
    logits = _head(params, x)
    state = PassState(states, part)
    if squeeze:
        logits = logits[0]
    return ForwardResult(logits, state, decision)


def cotformer_forward(config: ModelConfig, params: Params, token_ids, **kw) -> ForwardResult:
    if config.variant != "cotformer":
        raise ValueError("cotformer_forward needs variant='cotformer'")
    return run(config, params, token_ids, **kw)


def but_forward(config: ModelConfig, params: Params, token_ids, **kw) -> ForwardResult:
    if config.variant != "block_universal":
        raise ValueError("but_forward needs variant='block_universal'")
    return run(config, params, token_ids, **kw)


def standard_forward(config: ModelConfig, params: Params, token_ids) -> Array:
    if config.variant != "standard":
        raise ValueError("standard_forward needs variant='standard'")
    return run(config, params, token_ids).logits


def forward(config: ModelConfig, params: Params, token_ids, **kw) -> Array:
    """Logits for any variant."""
    return run(config, params, token_ids, **kw).logits
