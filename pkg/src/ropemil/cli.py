"""Command-line entry point.

Subcommands: synth, gridify, train, eval, bench-attention. Configuration
comes from an INI file with sections per module ([synth], [model],
[train]) layered under --override section.key=value pairs; CLI flags win.
Unknown sections or keys are rejected. The resolved configuration is
echoed into the results file of any command that produces one, so a run
can be reproduced from its outputs alone.

Exit codes: 0 success, 2 usage, 3 configuration, 4 data format,
5 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .attention import AttentionWorkspace, attend_naive, attend_streaming
from .data import (SynthConfig, load_dataset, load_manifest, load_model,
                   read_bag_files, save_dataset, save_model, synth_generate,
                   write_attention_csv, write_bag_files, write_fold_csv,
                   write_manifest, write_results)
from .errors import (ConfigurationError, DataFormatError, DimensionError,
                     NumericFailure, RopemilError, ValidationError)
from .grid import GridConfig, build_bag, quantize_coords
from .mil import ARM_PRESETS, ModelConfig, arm_config, model_fwd
from .training import TrainConfig, ap_macro, auroc_macro, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5


class UsageError(RopemilError):
    """Malformed command line (bad override syntax, unknown arm...)."""


# keys the [model] section may set; the rest of ModelConfig is fixed by the
# arm preset or derived from the dataset
_MODEL_KEYS = ("d_model", "n_heads", "pool_heads", "n_layers", "ffn_expansion",
               "hidden_layers", "rope_base", "ln_eps", "dropout", "dtype")
_SECTION_FIELDS = {
    "synth": tuple(f.name for f in fields(SynthConfig)),
    "train": tuple(f.name for f in fields(TrainConfig)),
    "model": _MODEL_KEYS,
}
_TYPE_EXAMPLES = {
    "synth": SynthConfig(),
    "train": TrainConfig(),
    "model": ModelConfig(feature_dim=1, n_classes=2),
}


def _coerce(section: str, key: str, raw: str):
    example = getattr(_TYPE_EXAMPLES[section], key)
    if isinstance(example, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigurationError(f"{section}.{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(example, int):
            return int(raw)
        if isinstance(example, float):
            return float(raw)
    except ValueError:
        kind = "an integer" if isinstance(example, int) else "a number"
        raise ConfigurationError(f"{section}.{key}: expected {kind}, got {raw!r}")
    return raw


def load_layered_config(config_path, overrides):
    """Merge config-file sections with --override pairs into typed dicts."""
    raw: dict[str, dict[str, str]] = {name: {} for name in _SECTION_FIELDS}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigurationError(f"{path}: {exc}")
        for section in parser.sections():
            if section not in raw:
                raise ConfigurationError(
                    f"{path}: unknown config section [{section}]; "
                    f"expected one of {sorted(raw)}")
            for key, value in parser.items(section):
                raw[section][key] = value
    for item in overrides or ():
        head, sep, value = item.partition("=")
        section, dot, key = head.partition(".")
        if not sep or not dot or not section or not key:
            raise UsageError(
                f"override {item!r} is not of the form section.key=value")
        if section not in raw:
            raise ConfigurationError(f"override {item!r}: unknown section {section!r}")
        raw[section][key] = value

    resolved: dict[str, dict] = {}
    for section, pairs in raw.items():
        allowed = _SECTION_FIELDS[section]
        typed = {}
        for key, value in pairs.items():
            if key not in allowed:
                raise ConfigurationError(
                    f"unknown key {key!r} in [{section}]; allowed: {', '.join(allowed)}")
            typed[key] = _coerce(section, key, value)
        resolved[section] = typed
    return resolved


def _echo_config(prefix: str, cfg) -> list[tuple[str, object]]:
    return [(f"{prefix}.{k}", v) for k, v in asdict(cfg).items()]


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    layers = load_layered_config(args.config, args.override)
    synth_kwargs = layers["synth"]
    if args.seed is not None:
        synth_kwargs["seed"] = args.seed
    cfg = SynthConfig(**synth_kwargs)
    bags, labels, label_names = synth_generate(cfg)
    out = Path(args.out)
    manifest = save_dataset(bags, labels, out, label_names)
    write_results(out / "synth_config.txt",
                  [("command", "synth")] + _echo_config("synth", cfg))
    per_class = np.bincount(labels, minlength=2)
    print(f"wrote {len(bags)} bags ({per_class[0]}/{per_class[1]} per class) "
          f"to {manifest}")
    return EXIT_OK


def cmd_gridify(args) -> int:
    if args.patch_size < 1:
        raise UsageError("--patch-size must be >= 1")
    entries, label_names = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid_cfg = GridConfig(patch_size_px=args.patch_size)
    rows = []
    problems = []
    for entry in entries:
        meta, features, pixel_coords = read_bag_files(entry.path)
        try:
            grid = quantize_coords(pixel_coords, grid_cfg)
            build_bag(features, grid, bag_id=meta["bag_id"])
        except (ValidationError, ValueError) as exc:
            msg = str(exc)
            if repr(meta["bag_id"]) not in msg:
                msg = f"bag {meta['bag_id']!r}: {msg}"
            problems.append(msg)
            continue
        rel = f"bags/{meta['bag_id']}"
        write_bag_files(out / rel, meta["bag_id"], features, pixel_coords,
                        args.patch_size)
        rows.append((meta["bag_id"], label_names[entry.label], rel))
    if problems:
        raise DataFormatError(
            f"gridify at patch_size={args.patch_size} rejected "
            f"{len(problems)} bag(s): " + "; ".join(problems))
    manifest = out / "manifest.csv"
    write_manifest(manifest, rows)
    print(f"gridified {len(rows)} bags at patch_size={args.patch_size} "
          f"into {manifest}")
    return EXIT_OK


def _resolve_arm(arm: str) -> str:
    key = arm.lower()
    if key not in ARM_PRESETS:
        raise UsageError(
            f"unknown arm {arm!r}; valid arms: {', '.join(sorted(ARM_PRESETS))}")
    return key


def cmd_train(args) -> int:
    arm = _resolve_arm(args.arm)
    layers = load_layered_config(args.config, args.override)
    train_kwargs = layers["train"]
    if args.seed is not None:
        train_kwargs["seed"] = args.seed
    train_cfg = TrainConfig(**train_kwargs)

    bags, labels, label_names = load_dataset(args.manifest)
    model_cfg = arm_config(arm, feature_dim=bags[0].feature_dim,
                           n_classes=len(label_names), **layers["model"])

    run = train(bags, labels, model_cfg, train_cfg,
                parallel_folds=args.parallel_folds)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items: list[tuple[str, object]] = [
        ("command", "train"),
        ("arm", arm),
        ("manifest", str(args.manifest)),
        ("n_bags", len(bags)),
        ("label_names", ",".join(label_names)),
    ]
    items += _echo_config("model", model_cfg)
    items += _echo_config("train", train_cfg)
    for rec in run.folds:
        items.append((f"fold_{rec.fold}_auroc", rec.test_auroc))
        items.append((f"fold_{rec.fold}_ap", rec.test_ap))
        items.append((f"fold_{rec.fold}_stopped_epoch", rec.stopped_epoch))
        items.append((f"fold_{rec.fold}_best_epoch", rec.best_epoch))
    items += [
        ("auroc_mean", run.auroc_mean), ("auroc_std", run.auroc_std),
        ("ap_mean", run.ap_mean), ("ap_std", run.ap_std),
    ]
    write_results(out / "results.txt", items)
    write_fold_csv(out / "folds.csv", run.folds)
    for rec in run.folds:
        save_model(out / f"model_fold{rec.fold}.npz", rec.best_params,
                   model_cfg, label_names)

    header = f"{'fold':>4}  {'stopped':>7}  {'best':>4}  {'auroc':>8}  {'ap':>8}"
    print(header)
    for rec in run.folds:
        print(f"{rec.fold:>4}  {rec.stopped_epoch:>7}  {rec.best_epoch:>4}  "
              f"{rec.test_auroc:>8.4f}  {rec.test_ap:>8.4f}")
    print(f"auroc {run.auroc_mean:.4f} +/- {run.auroc_std:.4f}   "
          f"ap {run.ap_mean:.4f} +/- {run.ap_std:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, model_cfg, label_names = load_model(args.model)
    bags, labels, _ = load_dataset(args.manifest, label_names=label_names)
    out = Path(args.out)
    att_dir = out / "attention"
    att_dir.mkdir(parents=True, exist_ok=True)

    probs = np.zeros((len(bags), model_cfg.n_classes))
    for i, bag in enumerate(bags):
        pool_out, _ = model_fwd(params, model_cfg, bag.features,
                                bag.grid_coords, bag.mask)
        z = pool_out.logits.astype(np.float64)
        z -= z.max()
        e = np.exp(z)
        probs[i] = e / e.sum()
        write_attention_csv(att_dir / f"{bag.bag_id}.csv", bag,
                            pool_out.attention)
    auroc = auroc_macro(labels, probs)
    ap = ap_macro(labels, probs)

    items: list[tuple[str, object]] = [
        ("command", "eval"),
        ("model", str(args.model)),
        ("manifest", str(args.manifest)),
        ("n_bags", len(bags)),
        ("label_names", ",".join(label_names)),
    ]
    items += _echo_config("model", model_cfg)
    items += [("auroc", auroc), ("ap", ap)]
    write_results(out / "eval_results.txt", items)
    print(f"auroc {auroc:.4f}   ap {ap:.4f}   ({len(bags)} bags)")
    return EXIT_OK


_NAIVE_LIMIT = 2048  # beyond this the quadratic reference is not evaluated


def _parse_sizes(text: str) -> list[int]:
    try:
        sizes = [int(tok) for tok in text.split(",") if tok]
    except ValueError:
        raise UsageError(f"--sizes: expected comma-separated integers, got {text!r}")
    if not sizes or any(n < 1 for n in sizes):
        raise UsageError("--sizes: need integers >= 1")
    return sizes


def _parse_chunks(text: str) -> list[tuple[int, int]]:
    pairs = []
    for tok in text.split(","):
        if not tok:
            continue
        head, sep, tail = tok.partition("x")
        try:
            pairs.append((int(head), int(tail)))
        except ValueError:
            raise UsageError(f"--chunks: expected BQxBK pairs, got {tok!r}")
    if not pairs or any(q < 1 or k < 1 for q, k in pairs):
        raise UsageError("--chunks: need chunk sizes >= 1")
    return pairs


def cmd_bench_attention(args) -> int:
    sizes = _parse_sizes(args.sizes)
    chunks = _parse_chunks(args.chunks)
    if args.head_dim < 1:
        raise UsageError("--head-dim must be >= 1")
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    lines = ["n,query_chunk,key_chunk,peak_scratch_bytes,wall_ms,max_abs_deviation"]
    scale = 1.0 / np.sqrt(args.head_dim)
    for n in sizes:
        q = rng.standard_normal((n, args.head_dim)).astype(np.float32)
        k = rng.standard_normal((n, args.head_dim)).astype(np.float32)
        v = rng.standard_normal((n, args.head_dim)).astype(np.float32)
        mask = np.ones(n, dtype=bool)
        reference = attend_naive(q, k, v, mask, scale) if n <= _NAIVE_LIMIT else None
        for bq, bk in chunks:
            ws = AttentionWorkspace(query_chunk=bq, key_chunk=bk)
            t0 = time.perf_counter()
            out = attend_streaming(q, k, v, mask, scale, ws)
            wall_ms = (time.perf_counter() - t0) * 1e3
            if reference is None:
                deviation = "skipped"
            else:
                deviation = repr(float(np.max(np.abs(out - reference))))
            lines.append(f"{n},{bq},{bk},{ws.peak_scratch_bytes},"
                         f"{wall_ms:.3f},{deviation}")
    report = "\n".join(lines) + "\n"
    if args.out is not None:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report)
        print(f"wrote {len(lines) - 1} rows to {args.out}")
    else:
        print(report, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ropemil",
        description="Position-aware multiple-instance learning on patch bags.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None,
                       help="seed override (wins over config)")
        p.add_argument("--override", action="append", default=[],
                       metavar="SECTION.KEY=VALUE",
                       help="config override; repeatable")
        if out_required:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic spatial-bag dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gridify", help="quantize raw pixel-coordinate bags")
    p.add_argument("--manifest", required=True)
    p.add_argument("--patch-size", type=int, required=True)
    common(p)
    p.set_defaults(func=cmd_gridify)

    p = sub.add_parser("train", help="k-fold training of an ablation arm")
    p.add_argument("--manifest", required=True)
    p.add_argument("--arm", required=True,
                   help=f"one of: {', '.join(sorted(ARM_PRESETS))}")
    p.add_argument("--parallel-folds", action="store_true",
                   help="run folds in threads (results identical)")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model snapshot")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True, help="model .npz from train")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-attention",
                       help="scratch-memory and timing report for the kernels")
    p.add_argument("--sizes", default="256,1024,4096",
                   help="comma-separated sequence lengths")
    p.add_argument("--chunks", default="128x128",
                   help="comma-separated BQxBK chunk pairs")
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--config", default=None, help=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_bench_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, ValidationError, DimensionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
