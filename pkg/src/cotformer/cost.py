"""Analytic multiply-accumulate counts.

Only matrix-product multiplies are counted: Q/K/V/O projections, attention
score and value products, feed-forward matmuls and the unembedding. Layer
norms, softmax, activations and residual adds are free. Head count does not
change any total.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from .config import ModelConfig
from .routing import capacity_count

CROSSOVER_HEADER = ["S", "macs_a", "macs_b", "ratio"]
PARETO_HEADER = ["label", "macs", "ppl"]


@dataclass(frozen=True)
class CostReport:
    macs_qkvo_projections: int = 0
    macs_attention_scores: int = 0
    macs_attention_values: int = 0
    macs_feedforward: int = 0
    macs_embedding_unembedding: int = 0

    @property
    def total(self) -> int:
        return (
            self.macs_qkvo_projections
            + self.macs_attention_scores
            + self.macs_attention_values
            + self.macs_feedforward
            + self.macs_embedding_unembedding
        )

    def __add__(self, other: "CostReport") -> "CostReport":
        a, b = asdict(self), asdict(other)
        return CostReport(**{k: a[k] + b[k] for k in a})

    def as_dict(self) -> dict[str, int]:
        return {**asdict(self), "total": self.total}


def macs_pass(d: int, d_ff: int, n_layers: int, s_q: int, s_kv: int, s_new: int) -> CostReport:
    """One application of ``n_layers`` blocks.

    ``s_q`` queries attend to ``s_kv`` keys, of which ``s_new`` are projected
    in this pass.
    """
    if s_new > s_kv:
        raise ValueError("cannot project more new keys than there are keys")
    return CostReport(
        macs_qkvo_projections=n_layers * (2 * s_q * d * d + 2 * s_new * d * d),
        macs_attention_scores=n_layers * s_q * s_kv * d,
        macs_attention_values=n_layers * s_q * s_kv * d,
        macs_feedforward=n_layers * 2 * s_q * d * d_ff,
    )


def pass_sizes(config: ModelConfig, seq_len: int, schedule: Sequence[float] | None = None) -> list[int]:
    """Tokens entering each pass: ``min(floor(c_r * S), previous)``."""
    R = config.n_repeat
    schedule = [1.0] * R if schedule is None else list(schedule)
    if len(schedule) != R:
        raise ValueError(f"schedule has {len(schedule)} entries, model has {R} repeats")
    ks = [seq_len]
    for c in schedule[1:]:
        ks.append(min(capacity_count(c, seq_len), ks[-1]))
    return ks


def macs_model(
    config: ModelConfig,
    seq_len: int,
    schedule: Sequence[float] | None = None,
    variant: str | None = None,
) -> CostReport:
    """MACs to process one sequence of ``seq_len`` tokens.

    Block Universal passes read all ``S`` tokens' keys but only project the
    participating ones (halted tokens reuse copied states). CoTFormer pass
    ``r`` reads the keys of every participating token of passes ``1..r``.
    """
    variant = variant or config.variant
    d, f, S = config.d_model, config.d_ff, seq_len
    rep = CostReport(macs_embedding_unembedding=S * d * config.vocab_size)
    rep += macs_pass(d, f, config.n_begin + config.n_end, S, S, S)
    if variant == "standard":
        return rep + macs_pass(d, f, config.n_middle, S, S, S)
    seen = 0
    for k in pass_sizes(config, S, schedule):
        seen += k
        s_kv = seen if variant == "cotformer" else S
        rep += macs_pass(d, f, config.n_middle, k, s_kv, k)
    return rep


def crossover_scan(
    config_a: ModelConfig,
    config_b: ModelConfig,
    seq_lens: Iterable[int],
    schedule_a: Sequence[float] | None = None,
    schedule_b: Sequence[float] | None = None,
) -> list[tuple[int, int, int, float]]:
    """Rows ``(S, macs_a, macs_b, macs_a / macs_b)`` sorted by ``S``."""
    seq_lens = sorted(set(int(s) for s in seq_lens))
    if not seq_lens:
        raise ValueError("need at least one sequence length")
    rows = []
    for S in seq_lens:
        a = macs_model(config_a, S, schedule_a).total
        b = macs_model(config_b, S, schedule_b).total
        rows.append((S, a, b, a / b))
    return rows


def pareto_table(
    entries: Iterable[tuple[str, ModelConfig, float]], seq_len: int = 256
) -> list[tuple[str, int, float]]:
    """``(label, MACs at seq_len, perplexity)`` rows; perplexities are given."""
    return [(label, macs_model(cfg, seq_len).total, float(ppl)) for label, cfg, ppl in entries]


def pareto_front(rows: Sequence[tuple[str, int, float]]) -> list[str]:
    """Labels no other row beats on both cost and perplexity."""
    front = []
    for label, m, p in rows:
        dominated = any(
            m2 <= m and p2 <= p and (m2 < m or p2 < p) for l2, m2, p2 in rows if l2 != label
        )
        if not dominated:
            front.append(label)
    return front


def to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()
