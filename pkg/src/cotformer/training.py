"""Training loop, learning-rate schedule, perplexity evaluation."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from . import checkpoint, data
from .autodiff import OptimizerState, adamw_step, clip_grad_norm, cross_entropy, reverse_grad
from .config import ModelConfig
from .model import Params, init_params, run
from .routing import sample_capacities

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    steps: int = 200
    warmup_steps: int = 20
    max_lr: float = 1e-3
    batch_size: int = 8
    seq_len: int = 64
    seed: int = 0
    eval_interval: int = 0
    checkpoint_interval: int = 0
    corpus: str | None = None
    eval_corpus: str | None = None
    precision: str = "float32"
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    lr_decay: str = "constant"
    init_std: float = 0.02
    eval_batch_size: int = 16
    eval_max_windows: int | None = 64

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ValueError("warmup_steps must lie in [0, steps]")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("batch_size and seq_len must be positive")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")
        if self.lr_decay not in ("constant", "cosine"):
            raise ValueError("lr_decay must be 'constant' or 'cosine'")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step: int, warmup_steps: int, max_lr: float, total_steps: int | None = None, decay: str = "constant") -> float:
    """Linear warmup reaching ``max_lr`` at step ``warmup_steps - 1``, then flat
    (or cosine to zero when ``decay='cosine'``)."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if warmup_steps and step < warmup_steps:
        return max_lr * (step + 1) / warmup_steps
    if decay == "cosine" and total_steps:
        span = max(total_steps - warmup_steps, 1)
        frac = min((step - warmup_steps) / span, 1.0)
        return 0.5 * max_lr * (1 + math.cos(math.pi * frac))
    return max_lr


@dataclass
class MetricsRecord:
    step: int
    loss: float
    lr: float
    capacities: list[float]
    participation: list[float]
    seconds: float


def metrics_header(n_repeat: int) -> list[str]:
    return (
        ["step", "loss", "lr"]
        + [f"c{i}" for i in range(1, n_repeat + 1)]
        + [f"p{i}" for i in range(1, n_repeat + 1)]
        + ["seconds"]
    )


def metrics_csv(records: Sequence[MetricsRecord], n_repeat: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics_header(n_repeat))
    for m in records:
        w.writerow([m.step, repr(m.loss), repr(m.lr), *map(repr, m.capacities), *map(repr, m.participation), f"{m.seconds:.3f}"])
    return buf.getvalue()


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainResult:
    params: Params
    metrics: list[MetricsRecord]
    evals: list[tuple[int, float]] = field(default_factory=list)
    checkpoint: Path | None = None


def decay_mask(names: Sequence[str], params: Params) -> list[bool]:
    """Weight decay applies to matrices only (not LN, biases or router vectors)."""
    return [params[n].dim() >= 2 and not n.startswith("router.") for n in names]


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    corpus: np.ndarray | None = None,
    out_dir: str | Path | None = None,
    eval_corpus: np.ndarray | None = None,
) -> TrainResult:
    """Next-token training with AdamW.

    Adaptive models draw a fresh capacity schedule for every batch. The run is
    deterministic for a fixed seed; only the ``seconds`` column of the log
    depends on the machine.
    """
    tc = train_config
    if corpus is None:
        if tc.corpus is None:
            raise ValueError("no training corpus given")
        corpus = data.load_corpus(tc.corpus)
    if eval_corpus is None and tc.eval_corpus:
        eval_corpus = data.load_corpus(tc.eval_corpus)
    if tc.seq_len > model_config.max_seq_len:
        raise ValueError(f"seq_len {tc.seq_len} exceeds the model's max_seq_len {model_config.max_seq_len}")
    dtype = DTYPES[tc.precision]
    R = model_config.n_repeat
    out = Path(out_dir) if out_dir is not None else None

    params = init_params(model_config, seed=data.derive_seed(tc.seed, "init"), dtype=dtype, std=tc.init_std)
    names = list(params)
    leaves = [params[n].clone().requires_grad_(True) for n in names]
    wd_mask = decay_mask(names, params)
    opt = OptimizerState.zeros_like(leaves)
    batches = data.make_batches(corpus, tc.seq_len, tc.batch_size, data.derive_rng(tc.seed, "batches"))
    cap_rng = data.derive_rng(tc.seed, "capacities")

    metrics: list[MetricsRecord] = []
    evals: list[tuple[int, float]] = []
    t0 = time.perf_counter()

    def current() -> Params:
        return {n: p.detach() for n, p in zip(names, leaves)}

    def save(name: str) -> Path | None:
        if out is None:
            return None
        return checkpoint.save_checkpoint(current(), model_config, out / name)

    for step in range(tc.steps):
        lr = lr_schedule(step, tc.warmup_steps, tc.max_lr, tc.steps, tc.lr_decay)
        x, y = next(batches)
        schedule = sample_capacities(R, cap_rng) if model_config.adaptive else None
        p = dict(zip(names, leaves))
        res = run(model_config, p, torch.from_numpy(x), schedule=schedule)
        loss = cross_entropy(res.logits, torch.from_numpy(y))
        if not torch.isfinite(loss):
            path = save("diverged.ckpt")
            if out is not None:
                (out / "metrics.csv").write_text(metrics_csv(metrics, R))
            raise TrainingDiverged(f"non-finite loss at step {step}; state written to {path}")
        grads = reverse_grad(loss, leaves)
        grads, _ = clip_grad_norm(grads, tc.grad_clip)
        new, opt = adamw_step(
            leaves, grads, opt, lr, tc.beta1, tc.beta2, tc.eps, tc.weight_decay, wd_mask
        )
        leaves = [q.requires_grad_(True) for q in new]
        part = res.state.participation.double().mean(dim=(0, 2)).tolist()
        metrics.append(
            MetricsRecord(
                step=step,
                loss=loss.item(),
                lr=lr,
                capacities=list(schedule) if schedule else [1.0] * R,
                participation=[float(v) for v in part],
                seconds=time.perf_counter() - t0,
            )
        )
        if step % 50 == 0:
            log.info("step %d loss %.4f lr %.2e", step, loss.item(), lr)
        done = step + 1
        if eval_corpus is not None and tc.eval_interval and done % tc.eval_interval == 0:
            model = LanguageModel(model_config, current())
            evals.append((done, eval_perplexity(model, eval_corpus, tc.seq_len, FixedDepth(R), tc.eval_batch_size, tc.eval_max_windows)))
        if tc.checkpoint_interval and done % tc.checkpoint_interval == 0 and done != tc.steps:
            save(f"step{done}.ckpt")

    final = save("checkpoint.ckpt")
    if out is not None:
        (out / "metrics.csv").write_text(metrics_csv(metrics, R))
        if evals:
            (out / "eval.csv").write_text("step,ppl\n" + "".join(f"{s},{v!r}\n" for s, v in evals))
    return TrainResult(current(), metrics, evals, final)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class LanguageModel:
    config: ModelConfig
    params: Params

    def logits(self, ids, schedule=None, depth=None) -> torch.Tensor:
        with torch.no_grad():
            return run(self.config, self.params, ids, schedule=schedule, depth=depth).logits


@dataclass(frozen=True)
class FixedDepth:
    depth: int

    def label(self) -> str:
        return f"fixed:{self.depth}"


@dataclass(frozen=True)
class RouterBudget:
    schedule: tuple[float, ...]
    threshold: float | None = None

    def label(self) -> str:
        if self.threshold is not None:
            return f"router:{self.threshold:g}"
        return "router:" + ",".join(f"{c:g}" for c in self.schedule)


def mode_schedule(config: ModelConfig, mode) -> tuple[list[float] | None, int | None]:
    """(schedule, depth) arguments that realise an evaluation mode."""
    R = config.n_repeat
    if isinstance(mode, FixedDepth):
        if not 1 <= mode.depth <= R:
            raise ValueError(f"fixed depth {mode.depth} outside 1..{R}")
        if config.adaptive:
            return [1.0] * mode.depth + [0.0] * (R - mode.depth), None
        return None, mode.depth
    if isinstance(mode, RouterBudget):
        if not config.adaptive:
            raise ValueError("router mode needs an adaptive model")
        return list(mode.schedule), None
    raise TypeError(f"unknown evaluation mode {mode!r}")


def mode_capacities(config: ModelConfig, mode) -> list[float]:
    """Per-pass capacities a mode amounts to, for cost accounting."""
    R = config.n_repeat
    if isinstance(mode, FixedDepth):
        return [1.0] * mode.depth + [0.0] * (R - mode.depth)
    return list(mode.schedule)


def parse_mode(text: str):
    kind, _, arg = text.partition(":")
    if kind == "fixed":
        return FixedDepth(int(arg))
    if kind == "router":
        return RouterBudget(tuple(float(v) for v in arg.split(",")))
    raise ValueError(f"mode must be 'fixed:<r>' or 'router:<c1,...,cR>', got {text!r}")


def eval_perplexity(
    model,
    corpus: np.ndarray,
    seq_len: int,
    mode=None,
    batch_size: int = 16,
    max_windows: int | None = None,
) -> float:
    """``exp`` of the mean token NLL over non-overlapping windows."""
    if len(corpus) == 0:
        raise ValueError("empty eval corpus")
    x, y = data.eval_windows(corpus, seq_len)
    if max_windows is not None:
        x, y = x[:max_windows], y[:max_windows]
    cfg = model.config
    schedule, depth = mode_schedule(cfg, mode or FixedDepth(cfg.n_repeat))
    total = 0.0
    count = 0
    for i in range(0, len(x), batch_size):
        logits = model.logits(torch.from_numpy(x[i : i + batch_size]), schedule=schedule, depth=depth)
        logp = torch.log_softmax(logits.double(), dim=-1)
        tgt = torch.from_numpy(y[i : i + batch_size])
        total += float(-logp.gather(-1, tgt[..., None]).sum())
        count += tgt.numel()
    return math.exp(total / count)
