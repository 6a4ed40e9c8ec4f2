"""Command-line frontend.

Exit codes: 0 success, 1 operational failure, 2 usage error. Reports go
to ``--report`` or stdout; progress and errors go to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import dataclass

from . import __version__
from .criteria import Criterion, avg_abs, score
from .errors import FapmError
from .masking import Scope
from .pipelines import (
    BasePolicy,
    OneDimPolicy,
    PruneConfig,
    dumps,
    lora_prune_merge,
    prune_merge,
    sequential_merge,
    sweep,
    wise_ft,
    write_sweep_csv,
)
from .reporting import HeatmapSource, as_matrix, emit_heatmap, heatmap, score_quantiles, sentinel_counts
from .synthlab import DemoConfig, SynthSpec, gen_checkpoint, run_cf_demo
from .taskvector import TaskVector, TensorFilter, apply, diff, select_names, split_adapter
from .tensorstore import DType, load_checkpoint, save_checkpoint


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


@dataclass
class Command:
    name: str
    args: argparse.Namespace


def _unit_interval(label):
    def parse(text):
        try:
            value = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{label} must be a number, got {text!r}") from None
        if not 0.0 <= value <= 1.0:
            raise argparse.ArgumentTypeError(f"{label} {value} outside [0, 1]")
        return value
    return parse


def _sparsity_list(text):
    parse = _unit_interval("sparsity")
    return [parse(t) for t in text.split(",") if t.strip()]


def _u64(text):
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed {value} is not an unsigned 64-bit integer")
    return value


def _grid(text):
    try:
        gh, gw = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 32x32, got {text!r}") from None
    if gh < 1 or gw < 1:
        raise argparse.ArgumentTypeError("grid dimensions must be >= 1")
    return gh, gw


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--report", help="write the JSON report here instead of stdout")
    common.add_argument("--json-errors", action="store_true", help="emit failures as JSON on stderr")
    common.add_argument("--threads", type=_nonneg_int, default=None,
                        help="per-tensor worker threads (0 = all cores; default $TASKVEC_THREADS or 1)")
    common.add_argument("--timing", action="store_true", help="include wall-clock timings in reports")

    filt = _Parser(add_help=False)
    filt.add_argument("--include", action="append", default=[], metavar="GLOB")
    filt.add_argument("--exclude", action="append", default=[], metavar="GLOB")
    filt.add_argument("--min-rank", type=_nonneg_int, default=2)

    prune = _Parser(add_help=False)
    prune.add_argument("--criterion", choices=[c.value for c in Criterion], default="fapm")
    prune.add_argument("--sparsity", type=_unit_interval("sparsity"), default=0.9)
    prune.add_argument("--scope", choices=[s.value for s in Scope], default="local")
    prune.add_argument("--norms", help="activation column norms checkpoint (wanda only)")
    prune.add_argument("--seed", type=_u64, default=0)
    prune.add_argument("--one-dim", choices=[p.value for p in OneDimPolicy], default="ft")

    parser = _Parser(prog="fapm", description="Forgetting-aware pruning of task vectors.", allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_text, parents=()):
        return sub.add_parser(name, help=help_text, parents=[common, *parents], allow_abbrev=False)

    p = add("diff", "write the task vector ft - pre", [filt])
    p.add_argument("--pre", required=True)
    p.add_argument("--ft", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dtype", choices=[d.value for d in DType], default="F32")

    p = add("merge", "add a stored task vector onto a base checkpoint")
    p.add_argument("--pre", required=True)
    p.add_argument("--tv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strict-fingerprint", action="store_true",
                   help="fail instead of warning when the base differs from the task vector's")

    p = add("prune", "prune the task vector and merge it onto pre", [filt, prune])
    p.add_argument("--pre", required=True)
    p.add_argument("--ft", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--export-mask", metavar="PATH", help="also write keep masks as F32 0/1 tensors")

    p = add("lora-merge", "prune a LoRA adapter's B@A and merge it onto pre", [filt, prune])
    p.add_argument("--pre", required=True)
    p.add_argument("--adapter", required=True, help="checkpoint holding <target>.lora_A / <target>.lora_B")
    p.add_argument("--out", required=True)
    p.add_argument("--lora-scale", type=float, default=1.0)
    p.add_argument("--a-suffix", default=".lora_A")
    p.add_argument("--b-suffix", default=".lora_B")

    p = add("wise-ft", "linear interpolation between pre and ft")
    p.add_argument("--pre", required=True)
    p.add_argument("--ft", required=True)
    p.add_argument("--alpha", type=_unit_interval("alpha"), required=True)
    p.add_argument("--out", required=True)

    p = add("sequential", "chain prune-and-merge over several fine-tuning stages", [filt, prune])
    p.add_argument("--base", required=True)
    p.add_argument("--stage", action="append", required=True, metavar="FT", help="repeat in stage order")
    p.add_argument("--base-policy", choices=[b.value for b in BasePolicy], default="previous_merged")
    p.add_argument("--out", required=True)

    p = add("sweep", "kept-mass table across sparsities", [filt, prune])
    p.add_argument("--pre", required=True)
    p.add_argument("--ft", required=True)
    p.add_argument("--sparsities", type=_sparsity_list, default=[0.55, 0.65, 0.75, 0.85, 0.95])
    p.add_argument("--csv", help="write the sweep table as CSV")
    p.add_argument("--out-dir", help="also write each merged checkpoint here")

    p = add("stats", "per-tensor statistics of a checkpoint or a task vector", [filt])
    p.add_argument("--ckpt")
    p.add_argument("--pre")
    p.add_argument("--ft")
    p.add_argument("--criterion", choices=[c.value for c in Criterion if c is not Criterion.WANDA],
                   default="fapm")

    p = add("heatmap", "block-averaged heatmap of one weight matrix")
    p.add_argument("--pre", required=True)
    p.add_argument("--ft")
    p.add_argument("--tensor", required=True)
    p.add_argument("--source", choices=[s.value for s in HeatmapSource], default="abs_pre")
    p.add_argument("--grid", type=_grid, default=(32, 32))
    p.add_argument("--format", choices=["csv", "pgm"], default="csv")
    p.add_argument("--out", required=True)

    p = add("gen", "generate a synthetic checkpoint from a JSON spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)

    p = add("demo", "two-task linear-regression forgetting demo")
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--sparsities", type=_sparsity_list, default=[0.5, 0.7, 0.9])
    p.add_argument("--criteria", default="fapm,magnitude,relative")
    p.add_argument("--csv-prefix", help="write <prefix><criterion>.csv sweep tables")

    p = add("verify", "validate a checkpoint file")
    p.add_argument("--ckpt", required=True)
    return parser


def parse_args(argv) -> Command:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("prune", "lora-merge", "sequential", "sweep"):
        if args.criterion == "wanda" and not args.norms:
            parser.error("--criterion wanda requires --norms")
        if args.norms and args.criterion != "wanda":
            parser.error("--norms is only valid with --criterion wanda")
    if args.command == "stats" and not (args.ckpt or (args.pre and args.ft)):
        parser.error("stats needs --ckpt, or both --pre and --ft")
    if args.command == "demo":
        try:
            args.criteria = [Criterion(c.strip()) for c in args.criteria.split(",") if c.strip()]
        except ValueError as exc:
            parser.error(f"--criteria: {exc}")
        if Criterion.WANDA in args.criteria:
            parser.error("--criteria: the demo has no activation norms for wanda")
    if args.threads is None:
        env = os.environ.get("TASKVEC_THREADS", "1")
        try:
            args.threads = _nonneg_int(env)
        except (ValueError, argparse.ArgumentTypeError):
            parser.error(f"TASKVEC_THREADS={env!r} is not a non-negative integer")
    return Command(args.command, args)


def _filter(args) -> TensorFilter:
    return TensorFilter(tuple(args.include), tuple(args.exclude), args.min_rank)


def _config(args) -> PruneConfig:
    return PruneConfig(
        criterion=args.criterion,
        sparsity=args.sparsity,
        scope=args.scope,
        filter=_filter(args),
        seed=args.seed,
        norms_path=args.norms,
        lora_scale=getattr(args, "lora_scale", 1.0),
        one_dim_policy=args.one_dim,
    )


def _load(path):
    return load_checkpoint(path, use_mmap=True)


def _emit(args, payload: str) -> None:
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(payload)
    else:
        sys.stdout.write(payload)


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _run_report(args, report) -> None:
    _emit(args, report.to_json(include_timing=args.timing))


def _cmd_diff(args):
    tv = diff(_load(args.ft), _load(args.pre), _filter(args))
    save_checkpoint(tv.to_checkpoint(DType(args.dtype)), args.out)
    _emit(args, dumps({"tensors": tv.names(), "base_fingerprint": tv.base_fingerprint}))


def _cmd_merge(args):
    pre = _load(args.pre)
    tv = TaskVector.from_checkpoint(_load(args.tv))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = apply(pre, tv, strict=args.strict_fingerprint)
    for w in caught:
        _log(f"warning: {w.message}")
    save_checkpoint(out, args.out)
    _emit(args, dumps({"tensors_applied": tv.names(), "fingerprint_match": not caught}))


def _cmd_prune(args):
    pre, ft = _load(args.pre), _load(args.ft)
    if not args.json_errors:
        _log(f"pruning {args.ft} against {args.pre} ({args.criterion}, s={args.sparsity})")
    if args.export_mask:
        merged, report, masks = prune_merge(pre, ft, _config(args), threads=args.threads, return_masks=True)
        save_checkpoint(masks.to_checkpoint(), args.export_mask)
    else:
        merged, report = prune_merge(pre, ft, _config(args), threads=args.threads)
    save_checkpoint(merged, args.out)
    _run_report(args, report)


def _cmd_lora(args):
    pre = _load(args.pre)
    a, b = split_adapter(_load(args.adapter), args.a_suffix, args.b_suffix)
    merged, report = lora_prune_merge(pre, a, b, _config(args), threads=args.threads)
    save_checkpoint(merged, args.out)
    _run_report(args, report)


def _cmd_wise(args):
    save_checkpoint(wise_ft(_load(args.pre), _load(args.ft), args.alpha), args.out)
    _emit(args, dumps({"alpha": args.alpha}))


def _cmd_sequential(args):
    cfg = _config(args)
    stages = [(_load(path), cfg) for path in args.stage]
    merged, reports = sequential_merge(stages, _load(args.base), args.base_policy, threads=args.threads)
    save_checkpoint(merged, args.out)
    _emit(args, dumps({"base_policy": args.base_policy,
                       "stages": [r.to_dict(include_timing=args.timing) for r in reports]}))


def _cmd_sweep(args):
    pre, ft = _load(args.pre), _load(args.ft)
    rows = sweep(pre, ft, args.criterion, args.sparsities, _config(args), write_dir=args.out_dir,
                 threads=args.threads)
    if args.csv:
        write_sweep_csv(rows, args.csv, include_timing=args.timing)
    payload = []
    for row in rows:
        d = dict(row.__dict__)
        d.pop("masks")
        if not args.timing:
            d["wall_ms"] = None
        payload.append(d)
    _emit(args, dumps({"criterion": args.criterion, "rows": payload}))


def _cmd_stats(args):
    out = {}
    if args.ckpt:
        ckpt = _load(args.ckpt)
        for name, t in ckpt.items():
            v = t.to_f64()
            entry = {"dtype": t.dtype.value, "shape": list(t.shape), "elements": t.size}
            if t.size:
                entry.update(mean=float(v.mean()), std=float(v.std()), avg_abs=avg_abs(v),
                             min=float(v.min()), max=float(v.max()))
            out[name] = entry
    else:
        pre, ft = _load(args.pre), _load(args.ft)
        for name in select_names(ft, pre, _filter(args)):
            w = pre[name].to_f64()
            delta = ft[name].to_f64() - w
            s = score(args.criterion, name, delta, w)
            pos, neg = sentinel_counts(s)
            entry = {"shape": list(delta.shape), "elements": int(delta.size), "pos_inf": pos, "neg_inf": neg}
            if delta.size:
                entry.update(avg_abs_pre=avg_abs(w), mean_abs_delta=float(abs(delta).mean()),
                             score_quantiles=score_quantiles(s) if (pos + neg) < s.size else None)
            out[name] = entry
    _emit(args, dumps(out))


def _cmd_heatmap(args):
    pre = _load(args.pre)
    if args.tensor not in pre:
        raise KeyError(f"tensor {args.tensor!r} not in {args.pre}")
    w_ft = None
    if args.ft:
        ft = _load(args.ft)
        if args.tensor not in ft:
            raise KeyError(f"tensor {args.tensor!r} not in {args.ft}")
        w_ft = ft[args.tensor].to_f64()
    grid = heatmap(args.tensor, args.source, args.grid, pre[args.tensor].to_f64(), w_ft)
    emit_heatmap(grid, args.out, args.format)
    _emit(args, dumps({"tensor": args.tensor, "source": args.source, "rows": grid.rows, "cols": grid.cols,
                       "matrix_shape": list(as_matrix(pre[args.tensor].to_f64()).shape)}))


def _cmd_gen(args):
    with open(args.spec) as fh:
        spec = SynthSpec.from_dict(json.load(fh))
    ckpt = gen_checkpoint(spec)
    save_checkpoint(ckpt, args.out)
    _emit(args, dumps({"tensors": len(ckpt), "elements": ckpt.num_elements(), "fingerprint": ckpt.fingerprint()}))


def _cmd_demo(args):
    report = run_cf_demo(DemoConfig(seed=args.seed, sparsities=tuple(args.sparsities),
                                    criteria=tuple(args.criteria)))
    if args.csv_prefix:
        report.write_csvs(args.csv_prefix)
    _emit(args, report.to_json())


def _cmd_verify(args):
    ckpt = load_checkpoint(args.ckpt)
    _emit(args, dumps({"tensors": len(ckpt), "elements": ckpt.num_elements(), "metadata_keys": sorted(ckpt.metadata),
                       "fingerprint": ckpt.fingerprint()}))


_HANDLERS = {
    "diff": _cmd_diff,
    "merge": _cmd_merge,
    "prune": _cmd_prune,
    "lora-merge": _cmd_lora,
    "wise-ft": _cmd_wise,
    "sequential": _cmd_sequential,
    "sweep": _cmd_sweep,
    "stats": _cmd_stats,
    "heatmap": _cmd_heatmap,
    "gen": _cmd_gen,
    "demo": _cmd_demo,
    "verify": _cmd_verify,
}


def _fail(args, kind: str, message: str) -> int:
    if getattr(args, "json_errors", False):
        print(json.dumps({"error": kind, "message": message}, sort_keys=True), file=sys.stderr)
    else:
        print(f"{kind}: {message}", file=sys.stderr)
    return 1


def run(cmd: Command) -> int:
    try:
        _HANDLERS[cmd.name](cmd.args)
    except FapmError as exc:
        return _fail(cmd.args, type(exc).__name__, str(exc))
    except KeyError as exc:
        return _fail(cmd.args, "KeyError", str(exc.args[0]) if exc.args else "")
    except OSError as exc:
        return _fail(cmd.args, "IoError", str(exc))
    return 0


def main(argv=None) -> int:
    try:
        cmd = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    return run(cmd)


if __name__ == "__main__":
    sys.exit(main())
