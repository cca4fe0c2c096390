"""Command line entry point: ``cotformer {train,eval,cost,calibrate,sweep,generate}``."""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import adaptive, checkpoint, cost, data
from .config import ModelConfig
from .decode import incremental_decode
from .training import (
    FixedDepth,
    LanguageModel,
    RouterBudget,
    TrainConfig,
    eval_perplexity,
    mode_capacities,
    parse_mode,
    train,
)

log = logging.getLogger("cotformer")


class ConfigError(ValueError):
    pass


@dataclass
class EvalSection:
    checkpoint: str | None = None
    corpus: str | None = None
    seq_len: int = 64
    batch_size: int = 16
    max_windows: int | None = None
    calib_windows: int = 16
    mode: str | None = None
    thresholds: list[float] = dataclasses.field(default_factory=lambda: [0.0, 0.1, 0.3, 0.5, 0.7, 1.0])
    bins: int = 20
    prompt: str = ""
    n_new: int = 32


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "eval": EvalSection}


def _defaults(cls) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def effective_config(raw: dict[str, Any], overrides: list[str], seed: int | None) -> dict[str, Any]:
    """File contents + defaults + ``key=value`` overrides (dotted keys)."""
    cfg: dict[str, Any] = {}
    for name, cls in SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be an object")
        unknown = set(section) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
        cfg[name] = {**_defaults(cls), **section}
    for key in set(raw) - set(SECTIONS):
        cfg[key] = copy.deepcopy(raw[key])

    seen: dict[str, Any] = {}
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        if key in seen and seen[key] != value:
            raise ConfigError(f"conflicting overrides for {key!r}")
        seen[key] = value
        *path, leaf = key.split(".")
        node = cfg
        for part in path:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"override {key!r} does not name a config key")
            node = node[part]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"override {key!r} does not name a config key")
        node[leaf] = value
    if seed is not None:
        cfg["train"]["seed"] = seed
    return cfg


def _model_config(d: dict[str, Any]) -> ModelConfig:
    try:
        return ModelConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid model config: {e}") from None


def _load_model(ev: EvalSection, args) -> tuple[LanguageModel, str]:
    path = args.checkpoint or ev.checkpoint
    if not path:
        raise ConfigError("no checkpoint given (--checkpoint or eval.checkpoint)")
    params, config = checkpoint.load_checkpoint(path)
    return LanguageModel(config, params), checkpoint.checkpoint_id(path)


def _load_corpus(ev: EvalSection, args) -> np.ndarray:
    path = args.corpus or ev.corpus
    if not path:
        raise ConfigError("no corpus given (--corpus or eval.corpus)")
    return data.load_corpus(path)


def _write(out: Path, name: str, text: str) -> Path:
    path = out / name
    path.write_text(text)
    return path


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# subcommands


def cmd_train(cfg: dict, args, out: Path) -> None:
    mc = _model_config(cfg["model"])
    tc = TrainConfig.from_dict(cfg["train"])
    corpus = args.corpus or tc.corpus
    if not corpus:
        raise ConfigError("no training corpus (train.corpus or --corpus)")
    tc = dataclasses.replace(tc, corpus=str(corpus))
    res = train(mc, tc, out_dir=out)
    log.info("final loss %.4f; checkpoint %s", res.metrics[-1].loss if res.metrics else float("nan"), res.checkpoint)


def cmd_eval(cfg: dict, args, out: Path) -> None:
    ev = EvalSection(**cfg["eval"])
    model, ckpt_id = _load_model(ev, args)
    ids = _load_corpus(ev, args)
    mode = parse_mode(args.mode or ev.mode) if (args.mode or ev.mode) else FixedDepth(model.config.n_repeat)
    ppl = eval_perplexity(model, ids, ev.seq_len, mode, ev.batch_size, ev.max_windows)
    macs = cost.macs_model(model.config, ev.seq_len, mode_capacities(model.config, mode)).total
    record = {"mode": mode.label(), "ppl": ppl, "macs": macs, "checkpoint_id": ckpt_id, "corpus_id": data.corpus_id(ids)}
    _write(out, "eval.json", _json(record))
    print(f"{mode.label()} ppl={ppl:.4f} macs={macs}")


def cmd_cost(cfg: dict, args, out: Path) -> None:
    section = cfg.get("cost", {})
    seq_lens = section.get("seq_lens", [256, 512, 1024, 2048, 4096, 8192])
    if "a" in section and "b" in section:
        a, b = _model_config(section["a"]), _model_config(section["b"])
        rows = [(S, ma, mb, ratio) for S, ma, mb, ratio in cost.crossover_scan(a, b, seq_lens)]
        # keep the caller's S order in the file
        order = {S: i for i, S in enumerate(dict.fromkeys(int(s) for s in seq_lens))}
        rows.sort(key=lambda r: order[r[0]])
        _write(out, "crossover.csv", cost.to_csv(cost.CROSSOVER_HEADER, rows))
    entries = section.get("pareto")
    if entries is None:
        entries = [{"label": cfg["model"].get("variant", "model"), "model": cfg["model"], "ppl": float("nan")}]
    rows = cost.pareto_table(
        [(e["label"], _model_config(e["model"]), e.get("ppl", float("nan"))) for e in entries],
        section.get("seq_len", 256),
    )
    _write(out, "pareto.csv", cost.to_csv(cost.PARETO_HEADER, rows))


def _thresholds(ev: EvalSection, args) -> list[float]:
    ts = args.threshold if args.threshold else ev.thresholds
    return [float(t) for t in ts]


def _calibration_windows(ids: np.ndarray, ev: EvalSection) -> np.ndarray:
    x, _ = data.eval_windows(ids, ev.seq_len)
    return x[: ev.calib_windows]


def cmd_calibrate(cfg: dict, args, out: Path) -> None:
    ev = EvalSection(**cfg["eval"])
    model, ckpt_id = _load_model(ev, args)
    if not model.config.adaptive:
        raise ConfigError("calibrate needs an adaptive checkpoint")
    ids = _load_corpus(ev, args)
    windows = _calibration_windows(ids, ev)
    cid = data.corpus_id(ids)
    hist = None
    for i, tau in enumerate(_thresholds(ev, args)):
        cal = adaptive.calibrate_capacities(model.config, model.params, windows, tau, ev.bins)
        cal.meta = {"corpus_id": cid, "checkpoint_id": ckpt_id}
        _write(out, f"calibration_{i:02d}.json", _json(cal.to_record()))
        hist = cal
        print(f"threshold {tau:g}: capacities " + " ".join(f"{c:.4f}" for c in cal.capacities))
    if hist is not None:
        edges = hist.bin_edges
        rows = [(repr(edges[j]), repr(edges[j + 1]), c) for j, c in enumerate(hist.bin_counts)]
        _write(out, "histogram.csv", cost.to_csv(["bin_lo", "bin_hi", "count"], rows))


def sweep_rows(model: LanguageModel, ids: np.ndarray, ev: EvalSection, thresholds: list[float]) -> list[tuple[str, int, float]]:
    cfg = model.config
    R = cfg.n_repeat
    rows = []
    for r in range(1, R + 1):
        mode = FixedDepth(r)
        ppl = eval_perplexity(model, ids, ev.seq_len, mode, ev.batch_size, ev.max_windows)
        rows.append((mode.label(), cost.macs_model(cfg, ev.seq_len, mode_capacities(cfg, mode)).total, ppl))
    if cfg.adaptive:
        windows = _calibration_windows(ids, ev)
        for tau in thresholds:
            cal = adaptive.calibrate_capacities(cfg, model.params, windows, tau, ev.bins)
            mode = RouterBudget(tuple(cal.capacities), tau)
            ppl = eval_perplexity(model, ids, ev.seq_len, mode, ev.batch_size, ev.max_windows)
            rows.append((mode.label(), cost.macs_model(cfg, ev.seq_len, cal.capacities).total, ppl))
    return rows


def cmd_sweep(cfg: dict, args, out: Path) -> None:
    ev = EvalSection(**cfg["eval"])
    model, _ = _load_model(ev, args)
    ids = _load_corpus(ev, args)
    rows = sweep_rows(model, ids, ev, _thresholds(ev, args))
    _write(out, "sweep.csv", cost.to_csv(["mode", "macs", "ppl"], rows))


def cmd_generate(cfg: dict, args, out: Path) -> None:
    ev = EvalSection(**cfg["eval"])
    model, _ = _load_model(ev, args)
    prompt = args.prompt if args.prompt is not None else ev.prompt
    n_new = args.n_new if args.n_new is not None else ev.n_new
    ids = data.encode(prompt)
    if len(ids) == 0:
        raise ConfigError("empty prompt")
    res = incremental_decode(model.config, model.params, ids, n_new)
    text = data.decode(res.ids)
    _write(out, "generated.txt", text.decode("utf-8", errors="replace"))
    sys.stdout.write(text.decode("utf-8", errors="replace") + "\n")


def cmd_make_corpus(cfg: dict, args, out: Path) -> None:
    seed = args.seed if args.seed is not None else 0
    n = args.bytes
    blob = data.synthetic_corpus(n + max(n // 16, 1024), seed)
    (out / "train.txt").write_bytes(blob[:n])
    (out / "valid.txt").write_bytes(blob[n:])


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "cost": cmd_cost,
    "calibrate": cmd_calibrate,
    "sweep": cmd_sweep,
    "generate": cmd_generate,
    "make-corpus": cmd_make_corpus,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cotformer", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", default="out", help="output directory (created if absent)")
        s.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        s.add_argument("--threshold", action="append", type=float, default=[])
        s.add_argument("--checkpoint")
        s.add_argument("--corpus")
        s.add_argument("--mode", help="fixed:<r> or router:<c1,...,cR>")
        s.add_argument("--prompt")
        s.add_argument("--n-new", type=int, dest="n_new")
        s.add_argument("--bytes", type=int, default=1 << 20, help="make-corpus size")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        raw: dict[str, Any] = {}
        if args.config:
            path = Path(args.config)
            if not path.is_file():
                raise ConfigError(f"config file {path} not found")
            try:
                raw = json.loads(path.read_text())
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
            if not isinstance(raw, dict):
                raise ConfigError("config file must hold a JSON object")
        cfg = effective_config(raw, args.override, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write(out, "config.json", _json(cfg))
        COMMANDS[args.command](cfg, args, out)
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
