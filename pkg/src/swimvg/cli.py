"""Command-line entry points: train, eval, inspect-params, export-attention, gen-data.

Failures print exactly one JSON line to stderr, e.g.
``{"error": "InvalidValue", "exit": 2, "key": "lr", "message": "..."}``.
Exit codes: 0 ok, 1 self-check failure, 2 config/load/data errors, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .backbone import Role
from .budget import budget_diff, closed_form_budget, param_budget
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ModelConfig, PROFILES, apply_overrides, validate_config
from .data import GenConfig, export_dataset, generate_sample, load_dataset, make_split
from .model import SwimVG
from .trainer import (
    DEFAULT_THRESHOLDS,
    EmptyDataset,
    MetricsReport,
    NonFiniteLoss,
    evaluate,
    init_state,
    torch_dtype,
    train,
)

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_NONFINITE = 0, 1, 2, 3
REFERENCE_TUNABLE_FRACTION = 0.0204
MANIFEST_NAME = "manifest.json"


class UsageError(ValueError):
    pass


def _fail(code: int, exc: BaseException, **extra) -> int:
    record = {"error": type(exc).__name__, "exit": code, "message": str(exc)}
    if isinstance(exc, ConfigError):
        record["key"] = exc.key
    record.update(extra)
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def resolve_config(path: Optional[str], profile_name: Optional[str], overrides: Sequence[str]) -> ModelConfig:
    """Config file (or named profile) with ``--set`` overrides applied on top."""
    if path and profile_name:
        raise UsageError("give either --config or --profile, not both")
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"malformed JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("<file>", "config must be a JSON object")
    else:
        name = profile_name or "toy"
        if name not in PROFILES:
            raise ConfigError("profile", f"unknown profile {name!r}")
        raw = dict(PROFILES[name])
    return validate_config(apply_overrides(raw, list(overrides)))


def _parse_thresholds(text: str) -> tuple[float, ...]:
    try:
        taus = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise UsageError(f"bad --iou list {text!r}") from None
    if not taus or any(not 0.0 < t <= 1.0 for t in taus):
        raise UsageError("--iou thresholds must lie in (0, 1]")
    return taus


def _samples_for(cfg: ModelConfig, data_dir: Optional[str], n: Optional[int], seed: Optional[int], split: str):
    if data_dir:
        if not os.path.exists(os.path.join(data_dir, "manifest.jsonl")):
            raise EmptyDataset(f"no manifest.jsonl under {data_dir}")
        samples = load_dataset(data_dir)
    else:
        n = cfg.n_eval if n is None else n
        if n < 1:
            raise EmptyDataset("dataset must contain at least one sample")
        gen = GenConfig.from_model_config(cfg)
        seed = cfg.data_seed if seed is None else seed
        samples = make_split(gen, 1, n, seed)["eval"] if split == "eval" else make_split(gen, n, 1, seed)["train"]
    if not samples:
        raise EmptyDataset("dataset is empty")
    return samples


# -- train ---------------------------------------------------------------------

def _metrics_record(epoch: int, step: int, report: MetricsReport) -> dict:
    rec = {"epoch": epoch, "step": step, "mean_iou": report.mean_iou}
    for tau, v in report.precision.items():
        rec[f"pr@{tau:g}"] = v
    rec.update({f"loss_{k}": v for k, v in report.loss.items()})
    for name, sub in report.subsets.items():
        rec[f"{name}_pr@0.5"] = sub.get("pr@0.5")
    return rec


def cmd_train(args) -> int:
    try:
        cfg = resolve_config(args.config, args.profile, args.set)
    except (ConfigError, UsageError) as exc:
        return _fail(EXIT_INPUT, exc)
    out = args.out
    os.makedirs(out, exist_ok=True)
    manifest = {
        "version": __version__,
        "command": "train",
        "config": cfg.to_dict(),
        "overrides": list(args.set),
        "config_source": args.config or f"profile:{args.profile or 'toy'}",
        "dataset": {
            "source": args.data or "generated",
            "data_seed": cfg.data_seed,
            "n_train": cfg.n_train,
            "n_eval": cfg.n_eval,
        },
        "layout": {
            "manifest": MANIFEST_NAME,
            "metrics": "metrics.jsonl",
            "last": "last.ckpt",
            "best": "best.ckpt",
        },
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    with open(os.path.join(out, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    try:
        if args.data:
            train_set = _samples_for(cfg, os.path.join(args.data, "train"), None, None, "train")
            eval_set = _samples_for(cfg, os.path.join(args.data, "eval"), None, None, "eval")
        else:
            split = make_split(GenConfig.from_model_config(cfg), cfg.n_train, cfg.n_eval, cfg.data_seed)
            train_set, eval_set = split["train"], split["eval"]
    except (EmptyDataset, ValueError, OSError) as exc:
        return _fail(EXIT_INPUT, exc)

    torch.manual_seed(cfg.seed)
    model = SwimVG(cfg)
    state = init_state(model, cfg)
    metrics_path = os.path.join(out, "metrics.jsonl")
    open(metrics_path, "w").close()

    def on_eval(epoch, report, st):
        with open(metrics_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(_metrics_record(epoch, st.step, report), sort_keys=True) + "\n")
        if report.pr(0.5) > st.best_eval:
            st.best_eval = report.pr(0.5)
            save_checkpoint(model, st, os.path.join(out, "best.ckpt"))

    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    try:
        train(model, train_set, eval_set, state, cfg.epochs, on_eval, log)
    except NonFiniteLoss as exc:
        save_checkpoint(model, state, os.path.join(out, "last.ckpt"))
        return _fail(EXIT_NONFINITE, exc, step=exc.step)
    save_checkpoint(model, state, os.path.join(out, "last.ckpt"))
    return EXIT_OK


# -- eval ------------------------------------------------------------------------

def cmd_eval(args) -> int:
    try:
        thresholds = _parse_thresholds(args.iou) if args.iou else DEFAULT_THRESHOLDS
        model, _ = load_checkpoint(args.checkpoint)
        samples = _samples_for(model.cfg, args.data, args.n, args.seed, "eval")
    except (CheckpointError, EmptyDataset, UsageError, ValueError, OSError) as exc:
        return _fail(EXIT_INPUT, exc)
    report = evaluate(model, samples, thresholds)
    text = report.to_json()
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


# -- inspect-params ----------------------------------------------------------------

def budget_table(cfg: ModelConfig) -> tuple[str, bool]:
    """Render the budget table; second value is the enumeration/formula agreement."""
    with torch.device("meta"):
        model = SwimVG(cfg)
    enum = param_budget(model)
    formula = closed_form_budget(cfg)
    diff = budget_diff(enum, formula)
    lines = [f"{'group':<10} {'enumerated':>14} {'closed-form':>14}"]
    for group in sorted(set(enum.per_group) | set(formula.per_group)):
        lines.append(f"{group:<10} {enum.per_group.get(group, 0):>14,d} {formula.per_group.get(group, 0):>14,d}")
    lines.append(f"{'tunable':<10} {enum.tunable_count:>14,d} {formula.tunable_count:>14,d}")
    lines.append(f"{'frozen':<10} {enum.frozen_count:>14,d} {formula.frozen_count:>14,d}")
    lines.append(
        f"tunable fraction: {100 * enum.tunable_fraction:.3f}% "
        f"(reference: {100 * REFERENCE_TUNABLE_FRACTION:.2f}% reported for the full-scale model; "
        f"delta {100 * (enum.tunable_fraction - REFERENCE_TUNABLE_FRACTION):+.3f} points)"
    )
    groups = sorted(g for g, n in enum.per_group.items() if n)
    lines.append(f"tunable groups: {', '.join(groups)}")
    if diff:
        lines.append("cross-check: MISMATCH")
        lines.extend(f"  {d}" for d in diff)
    else:
        lines.append("cross-check: enumeration == closed form")
    return "\n".join(lines) + "\n", not diff


def cmd_inspect_params(args) -> int:
    try:
        if args.checkpoint:
            model, _ = load_checkpoint(args.checkpoint)
            cfg = model.cfg
        else:
            cfg = resolve_config(args.config, args.profile, args.set)
    except (ConfigError, CheckpointError, UsageError) as exc:
        return _fail(EXIT_INPUT, exc)
    table, ok = budget_table(cfg)
    sys.stdout.write(table)
    if not ok:
        return _fail(EXIT_CHECK, RuntimeError("parameter enumeration disagrees with closed form"))
    return EXIT_OK


# -- export-attention ------------------------------------------------------------

@torch.no_grad()
def attention_grid(model: SwimVG, image: np.ndarray, word_ids: np.ndarray, query: Optional[str] = None) -> np.ndarray:
    """Final-layer attention from the query token(s) to PATCH keys, head-averaged, as a grid."""
    cfg = model.cfg
    query = query or cfg.attention_query
    model.eval()
    dtype = torch_dtype(cfg)
    out = model(torch.from_numpy(image[None]).to(dtype), torch.from_numpy(np.asarray(word_ids)[None]))
    attn = out.vision_trace.final_attention[0].mean(dim=0)  # [T, T]
    roles = out.vision_trace.final_roles[0]
    rows = roles == (Role.REG if query == "reg" else Role.SWIP)
    if not rows.any():
        raise ValueError(f"no {query!r} tokens in the final vision layer")
    row = attn[rows].mean(dim=0)
    patch = row[roles == Role.PATCH]
    return patch.reshape(cfg.grid_size, cfg.grid_size).double().numpy()


def write_csv(path: str, grid: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in grid:
            fh.write(",".join(repr(float(v)) for v in r) + "\n")


def write_pgm(path: str, grid: np.ndarray) -> None:
    lo, hi = float(grid.min()), float(grid.max())
    scaled = np.zeros_like(grid) if hi <= lo else (grid - lo) / (hi - lo)
    pixels = np.rint(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def cmd_export_attention(args) -> int:
    try:
        model, _ = load_checkpoint(args.checkpoint)
        if args.data:
            samples = load_dataset(args.data)
            if not 0 <= args.index < len(samples):
                raise EmptyDataset(f"index {args.index} outside dataset of {len(samples)}")
            sample = samples[args.index]
        else:
            sample = generate_sample(args.seed, GenConfig.from_model_config(model.cfg))
        grid = attention_grid(model, sample.image, sample.word_ids, args.query)
    except (CheckpointError, EmptyDataset, ValueError, OSError) as exc:
        return _fail(EXIT_INPUT, exc)
    prefix = args.out[:-4] if args.out.endswith(".csv") else args.out
    write_csv(prefix + ".csv", grid)
    write_pgm(prefix + ".pgm", grid)
    print(json.dumps({"csv": prefix + ".csv", "pgm": prefix + ".pgm",
                      "expression": " ".join(sample.expression), "mass": float(grid.sum())}))
    return EXIT_OK


# -- gen-data --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    try:
        cfg = resolve_config(args.config, args.profile, args.set)
    except (ConfigError, UsageError) as exc:
        return _fail(EXIT_INPUT, exc)
    split = make_split(GenConfig.from_model_config(cfg), cfg.n_train, cfg.n_eval, cfg.data_seed)
    for name in ("train", "eval"):
        export_dataset(split[name], os.path.join(args.out, name))
    print(json.dumps({"out": args.out, "train": len(split["train"]), "eval": len(split["eval"]),
                      "eval_ambiguous": len(split["eval_ambiguous"])}))
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------

def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (flat keys)")
    p.add_argument("--profile", choices=sorted(PROFILES), help="named profile (default: toy)")
    p.add_argument("--set", action="append", default=[], metavar="GROUP.KEY=VALUE",
                   help="override a config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swimvg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoints + metrics")
    _config_args(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--data", help="directory written by gen-data (default: generate in memory)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory with manifest.jsonl")
    p.add_argument("--n", type=int, help="number of generated eval samples (default: config n_eval)")
    p.add_argument("--seed", type=int, help="data seed for generated samples")
    p.add_argument("--iou", help="comma-separated IoU thresholds (default 0.5,0.6,0.8)")
    p.add_argument("--out", help="also write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-params", help="print the parameter budget")
    _config_args(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_inspect_params)

    p = sub.add_parser("export-attention", help="dump final-layer attention as CSV + PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory; use with --index")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--seed", type=int, default=0, help="sample seed when --data is not given")
    p.add_argument("--query", choices=("reg", "swip"), help="query rows (default: config attention_query)")
    p.add_argument("--out", required=True, help="output prefix; writes PREFIX.csv and PREFIX.pgm")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("gen-data", help="export a synthetic train/eval split")
    _config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
