"""Command-line interface: ``rsym gen|match|fuse|interpolate|distance|equiv-check|eval``.

Exit status is 0 on success, 2 on usage errors (bad flags, missing input
files) and 1 on runtime errors. Output files are only written once all
computation has finished.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import equivalence_check, interpolate_losses, param_distance
from .errors import RsymError
from .fusion import FUSION_KINDS, FusionMethod, fuse
from .matching import MatchOptions, MatchReport, match_model
from .model import TransformerConfig, accuracy, gen_synthetic, loss, map_tensors, random_model
from .persistence import (
    atomic_write,
    encode_dataset,
    encode_model,
    load_dataset,
    load_model,
    save_report,
)
from .symmetry import apply_model_symmetry, random_symmetry

log = logging.getLogger("rsym")

DEFAULT_CONFIG = dict(n_layers=2, n_heads=2, d_model=8, d_head=4, d_ff=16, vocab_size=16, n_classes=3, seq_len=6)


class UsageError(Exception):
    pass


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {path}")
    return p


def _paths(csv: str) -> list[Path]:
    return [_existing(p) for p in csv.split(",") if p]


def _out_dir_parent(path: str) -> Path:
    p = Path(path)
    if not p.parent.exists():
        raise UsageError(f"output directory does not exist: {p.parent}")
    return p


def _parse_config(text: str | None) -> TransformerConfig:
    if text is None:
        return TransformerConfig(**DEFAULT_CONFIG)
    try:
        data = json.loads(text) if text.lstrip().startswith("{") else json.loads(_existing(text).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config is not valid JSON: {exc}") from exc
    try:
        return TransformerConfig.from_dict(data)
    except RsymError as exc:
        raise UsageError(f"invalid --config: {exc}") from exc


def _parse_layers(text: str) -> frozenset[int]:
    try:
        return frozenset(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise UsageError(f"--layers expects comma-separated integers, got {text!r}") from exc


def _match_options(args, n_layers: int) -> MatchOptions:
    subset = None
    if args.layers is not None:
        subset = _parse_layers(args.layers)
    elif args.tail is not None:
        if not 0 <= args.tail <= n_layers:
            raise UsageError(f"--tail must lie in [0, {n_layers}]")
        subset = frozenset(range(n_layers - args.tail, n_layers))
    if subset is not None and any(not 0 <= i < n_layers for i in subset):
        raise UsageError(f"--layers indices must lie in [0, {n_layers})")
    if args.parallel < 1:
        raise UsageError("--parallel must be >= 1")
    return MatchOptions(
        enable_ffn=not args.no_ffn,
        enable_attn=not args.no_attn,
        enable_rescale=not args.no_rescale,
        layer_subset=subset,
        parallel_degree=args.parallel,
    )


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.6g}"


def _print_match_summary(report: MatchReport, label: str = "") -> None:
    prefix = f"[{label}] " if label else ""
    print(f"{prefix}distance before={report.distance_before:.10g} after={report.distance_after:.10g}")
    print(f"{prefix}layer  ffn_before  ffn_after  attn_before  attn_after  rescale_before  rescale_after")
    for lr in report.layers:
        print(
            f"{prefix}{lr.layer:5d}  {_fmt(lr.ffn_before):>10}  {_fmt(lr.ffn_after):>9}  "
            f"{_fmt(lr.attn_before):>11}  {_fmt(lr.attn_after):>10}  "
            f"{_fmt(lr.rescale_before):>14}  {_fmt(lr.rescale_after):>13}"
        )
    print(f"{prefix}wall time {report.wall_time:.4f}s")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(args) -> int:
    config = _parse_config(args.config)
    if args.n_models < 1 or args.n_items < 1 or args.n_heldout < 1:
        raise UsageError("--n-models, --n-items and --n-heldout must be >= 1")
    if args.noise < 0 or args.scale < 0:
        raise UsageError("--noise and --scale must be non-negative")
    out = Path(args.out)
    seeds = np.random.SeedSequence(args.seed).generate_state(2 * args.n_models + 3, dtype=np.uint64)
    base = random_model(config, int(seeds[0]), args.scale)
    files = {"base.rsym": encode_model(base)}
    for i in range(args.n_models):
        t = random_symmetry(config, int(seeds[3 + 2 * i]))
        end = apply_model_symmetry(base, t)
        if args.noise > 0:
            rng = np.random.default_rng(int(seeds[4 + 2 * i]))
            end = map_tensors(lambda x: x + args.noise * rng.standard_normal(x.shape), end)
        files[f"end_{i}.rsym"] = encode_model(end)
    files["data.rsds"] = encode_dataset(gen_synthetic(config, base, args.n_items, int(seeds[1])))
    files["heldout.rsds"] = encode_dataset(gen_synthetic(config, base, args.n_heldout, int(seeds[2])))

    out.mkdir(parents=True, exist_ok=True)
    for name, blob in files.items():
        atomic_write(out / name, blob)
    print(f"wrote {len(files)} files to {out}: {', '.join(files)}")
    return 0


def cmd_match(args) -> int:
    src_path, anchor_path = _existing(args.src), _existing(args.anchor)
    out = _out_dir_parent(args.out)
    report_path = _out_dir_parent(args.report) if args.report else None
    src, anchor = load_model(src_path), load_model(anchor_path)
    opts = _match_options(args, src.config.n_layers)
    matched, report = match_model(src, anchor, opts)
    _print_match_summary(report)
    atomic_write(out, encode_model(matched))
    if report_path is not None:
        save_report(report.to_dict(include_timing=args.timing), report_path)
    return 0


def cmd_fuse(args) -> int:
    model_paths = _paths(args.models)
    if len(model_paths) < 2:
        raise UsageError("--models needs at least two files")
    data_paths = _paths(args.data) if args.data else []
    if args.method != "simple" and len(data_paths) != len(model_paths):
        raise UsageError(f"--method {args.method} needs one --data file per model")
    if not 0 <= args.anchor_index < len(model_paths):
        raise UsageError("--anchor-index out of range")
    weights = None
    if args.weights:
        try:
            weights = tuple(float(w) for w in args.weights.split(","))
        except ValueError as exc:
            raise UsageError("--weights expects comma-separated numbers") from exc
        if len(weights) != len(model_paths):
            raise UsageError("--weights needs one value per model")
    out = _out_dir_parent(args.out)
    report_path = _out_dir_parent(args.report) if args.report else None
    try:
        method = FusionMethod(
            kind=args.method,
            weights=weights,
            fisher_items=args.fisher_items,
            ridge=args.ridge,
            off_diag=args.off_diag,
        )
    except RsymError as exc:
        raise UsageError(str(exc)) from exc

    models = [load_model(p) for p in model_paths]
    datasets = [load_dataset(p) for p in data_paths] or None
    opts = _match_options(args, models[0].config.n_layers)
    merged, reports = fuse(models, datasets, method, args.match, opts, args.anchor_index)
    for i, rep in enumerate(reports):
        if rep is not None:
            _print_match_summary(rep, label=f"model {i}")
    print(f"fused {len(models)} models with {args.method}{' +match' if args.match else ''}")
    atomic_write(out, encode_model(merged))
    if report_path is not None:
        payload = {"reports": [None if r is None else r.to_dict(include_timing=args.timing) for r in reports]}
        save_report(payload, report_path)
    return 0


def cmd_interpolate(args) -> int:
    a, b, d = _existing(args.a), _existing(args.b), _existing(args.data)
    if args.points < 3:
        raise UsageError("--points must be >= 3")
    out = _out_dir_parent(args.out)
    curve = interpolate_losses(load_model(a), load_model(b), load_dataset(d), args.points)
    print(f"loss(a)={curve.loss_a:.10g} loss(b)={curve.loss_b:.10g} barrier={curve.barrier:.10g}")
    save_report(curve, out)
    return 0


def cmd_distance(args) -> int:
    a, b = load_model(_existing(args.a)), load_model(_existing(args.b))
    print(f"{param_distance(a, b):.17g}")
    return 0


def cmd_equiv(args) -> int:
    a, b = load_model(_existing(args.a)), load_model(_existing(args.b))
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    rep = equivalence_check(a, b, args.n, args.seed)
    print(f"max_abs_logit_diff={rep.max_abs_logit_diff:.6e} mean_abs_diff={rep.mean_abs_diff:.6e} n_inputs={rep.n_inputs}")
    if args.tol is not None and rep.max_abs_logit_diff > args.tol:
        print(f"not equivalent within {args.tol:g}")
        return 1
    return 0


def cmd_eval(args) -> int:
    model, data = load_model(_existing(args.model)), load_dataset(_existing(args.data))
    print(f"loss={loss(model, data):.10g} accuracy={accuracy(model, data):.6f}")
    return 0


# ---------------------------------------------------------------------------


def _add_match_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--no-ffn", action="store_true", help="skip FFN permutation matching")
    p.add_argument("--no-attn", action="store_true", help="skip attention rotation matching")
    p.add_argument("--no-rescale", action="store_true", help="skip Q/K and V/O rescaling")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--layers", help="comma-separated layer indices to match")
    group.add_argument("--tail", type=int, help="match only the last K layers")
    p.add_argument("--parallel", type=int, default=1, help="number of layers matched concurrently")
    p.add_argument("--timing", action="store_true", help="include wall time in JSON reports")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsym", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a base model, symmetric end models and a labelled dataset")
    p.add_argument("--config", help="JSON file or inline JSON object with the transformer config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.0, help="std of Gaussian noise added to each end model")
    p.add_argument("--n-models", type=int, default=2)
    p.add_argument("--n-items", type=int, default=256)
    p.add_argument("--n-heldout", type=int, default=256)
    p.add_argument("--scale", type=float, default=0.5, help="std of the base model's weights")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("match", help="match a source model to an anchor")
    p.add_argument("--src", required=True)
    p.add_argument("--anchor", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    _add_match_flags(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("fuse", help="merge models, optionally matching them first")
    p.add_argument("--models", required=True, help="comma-separated model files")
    p.add_argument("--method", choices=FUSION_KINDS, default="simple")
    p.add_argument("--match", action="store_true")
    p.add_argument("--anchor-index", type=int, default=0)
    p.add_argument("--data", help="comma-separated dataset files, one per model")
    p.add_argument("--weights", help="comma-separated averaging weights (simple)")
    p.add_argument("--fisher-items", type=int)
    p.add_argument("--ridge", type=float)
    p.add_argument("--off-diag", type=float, default=0.9)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    _add_match_flags(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("interpolate", help="loss along the segment between two models")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--points", type=int, default=25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("distance", help="L2 distance between two models' parameters")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("equiv-check", help="compare the logits of two models on random inputs")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, help="exit 1 if the max logit difference exceeds this")
    p.set_defaults(func=cmd_equiv)

    p = sub.add_parser("eval", help="loss and accuracy of a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rsym {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (RsymError, OSError) as exc:
        print(f"rsym {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
