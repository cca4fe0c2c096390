"""Token-at-a-time decoding with explicit key/value caches.

Each token runs through every pass before the next token is admitted, and the
keys it may read are enumerated directly from the recurrences rather than from
a dense mask. This is the reference the batched forward is checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .autodiff import Array, gelu, layer_norm
from .config import ModelConfig
from .model import Params, layer_prefixes, rotary


@dataclass
class DecodeResult:
    ids: list[int]
    logits: Array  # [len(ids), vocab]
    participation: np.ndarray  # [R, len(ids)] bool
    kv_entries: dict[int, int]  # token -> number of passes with cached keys


class _Layer:
    def __init__(self, config: ModelConfig, params: Params, prefix: str) -> None:
        self.c = config
        self.p = {k[len(prefix) + 1 :]: v for k, v in params.items() if k.startswith(prefix + ".")}

    def kv(self, x: Array, pos: int) -> tuple[Array, Array]:
        h = layer_norm(x, self.p["ln1.weight"], self.p["ln1.bias"])
        k = (h @ self.p["attn.wk"]).view(self.c.n_heads, self.c.head_dim)
        v = (h @ self.p["attn.wv"]).view(self.c.n_heads, self.c.head_dim)
        return self._rot(k, pos), v

    def _rot(self, x: Array, pos: int) -> Array:
        return rotary(x[None, :, None, :], torch.tensor([[pos]]), self.c.rope_base)[0, :, 0, :]

    def step(self, x: Array, pos: int, keys: list[tuple[Array, Array]]) -> Array:
        """One block for a single query vector; ``keys`` excludes the query's own entry."""
        h = layer_norm(x, self.p["ln1.weight"], self.p["ln1.bias"])
        q = self._rot((h @ self.p["attn.wq"]).view(self.c.n_heads, self.c.head_dim), pos)
        k_own, v_own = self.kv(x, pos)
        K = torch.stack([k for k, _ in keys] + [k_own], dim=1)  # [H, n, dh]
        V = torch.stack([v for _, v in keys] + [v_own], dim=1)
        w = torch.softmax((K * q[:, None, :]).sum(-1) / math.sqrt(self.c.head_dim), dim=-1)
        a = (w[..., None] * V).sum(1).reshape(-1)
        x = x + a @ self.p["attn.wo"]
        h = layer_norm(x, self.p["ln2.weight"], self.p["ln2.bias"])
        return x + gelu(h @ self.p["mlp.w1"]) @ self.p["mlp.w2"]


class IncrementalDecoder:
    """Sequential state for one growing sequence."""

    def __init__(
        self,
        config: ModelConfig,
        params: Params,
        participation: np.ndarray | None = None,
        threshold: float | None = None,
    ) -> None:
        self.c = config
        self.params = params
        begin, middle, end = layer_prefixes(config)
        self.begin = [_Layer(config, params, p) for p in begin]
        self.middle = [_Layer(config, params, p) for p in middle]
        self.end = [_Layer(config, params, p) for p in end]
        self.forced = None if participation is None else np.asarray(participation, dtype=bool)
        self.threshold = threshold
        self.begin_kv: list[list[tuple[Array, Array]]] = [[] for _ in self.begin]
        self.end_kv: list[list[tuple[Array, Array]]] = [[] for _ in self.end]
        self.mid_kv: dict[tuple[int, int, int], tuple[Array, Array]] = {}
        self.ran: list[list[bool]] = []  # ran[t][r-1]
        self.final: list[Array] = []
        self.tokens: list[int] = []
        self.logits: list[Array] = []

    # which passes' keys a query (t, r) of the repeated stack may read
    def _keys(self, layer: int, t: int, r: int) -> list[tuple[Array, Array]]:
        c = self.c
        out = []
        if c.variant == "cotformer":
            for u in range(t):
                for rk in range(1, r + 1):
                    if self.ran[u][rk - 1]:
                        out.append(self.mid_kv[(u, rk, layer)])
            if c.self_history:
                for rk in range(1, r):
                    out.append(self.mid_kv[(t, rk, layer)])
        else:
            for u in range(t):
                if self.ran[u][r - 1]:
                    out.append(self.mid_kv[(u, r, layer)])
                else:
                    # halted: keys come from the token's last output state
                    out.append(self.middle[layer].kv(self.final[u], u))
        return out

    def _continues(self, t: int, r: int, x: Array) -> tuple[bool, Array | None]:
        if r == 1:
            return True, None
        if not self.c.adaptive:
            return True, None
        s = torch.sigmoid(torch.dot(self.params["router.halt"][r - 2], x))
        if self.forced is not None:
            go = bool(self.forced[r - 1, t])
        elif self.threshold is not None:
            go = bool(s > self.threshold)
        else:
            go = True
        return go, s

    def push(self, token: int) -> Array:
        c = self.c
        t = len(self.tokens)
        if t >= c.max_seq_len:
            raise ValueError(f"sequence longer than max_seq_len {c.max_seq_len}")
        if not 0 <= token < c.vocab_size:
            raise ValueError("token id outside vocabulary")
        self.tokens.append(token)
        x = self.params["tok_emb"][token]
        for i, layer in enumerate(self.begin):
            x_new = layer.step(x, t, self.begin_kv[i])
            self.begin_kv[i].append(layer.kv(x, t))
            x = x_new

        self.ran.append([False] * c.n_repeat)
        for r in range(1, c.n_repeat + 1):
            go, s = self._continues(t, r, x)
            if not go:
                break
            self.ran[t][r - 1] = True
            h = x
            if c.depth_embedding and c.n_repeat - r:
                h = h + (c.n_repeat - r) * self.params["router.depth"]
            for i, layer in enumerate(self.middle):
                keys = self._keys(i, t, r)
                self.mid_kv[(t, r, i)] = layer.kv(h, t)
                h = layer.step(h, t, keys)
            if c.ln_per_repeat:
                h = layer_norm(h, self.params["repeat_ln.weight"], self.params["repeat_ln.bias"])
            x = h if s is None else (1 - s) * x + s * h
        self.final.append(x)

        for i, layer in enumerate(self.end):
            x_new = layer.step(x, t, self.end_kv[i])
            self.end_kv[i].append(layer.kv(x, t))
            x = x_new
        x = layer_norm(x, self.params["ln_f.weight"], self.params["ln_f.bias"])
        logits = x @ self.params["unembed"]
        self.logits.append(logits)
        return logits

    def kv_entries(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for (t, r, layer) in self.mid_kv:
            if layer == 0:
                counts[t] = counts.get(t, 0) + 1
        return counts


def incremental_decode(
    config: ModelConfig,
    params: Params,
    prompt_ids,
    n_new: int = 0,
    participation: np.ndarray | None = None,
    threshold: float | None = None,
) -> DecodeResult:
    """Greedy decoding one token at a time.

    Logits are returned for every position of the final sequence. Adaptive
    models either follow a given ``participation[R, L]`` map or halt a token
    once its score is at most ``threshold``; with neither, every token runs
    every pass.
    """
    prompt = [int(i) for i in np.asarray(prompt_ids).reshape(-1)]
    if not prompt:
        raise ValueError("empty prompt")
    if len(prompt) + n_new > config.max_seq_len:
        raise ValueError(f"prompt plus {n_new} new tokens exceeds max_seq_len {config.max_seq_len}")
    dec = IncrementalDecoder(config, params, participation, threshold)
    with torch.no_grad():
        for tok in prompt:
            last = dec.push(tok)
        for _ in range(n_new):
            last = dec.push(int(torch.argmax(last)))
    part = np.array(dec.ran, dtype=bool).T
    return DecodeResult(dec.tokens, torch.stack(dec.logits), part, dec.kv_entries())
