"""Command line interface: ``skillvec {diff,apply,cosim,ortho,refine,inspect}``.

Exit status is 0 on success, 1 for a domain error (bad checkpoint, failed hook,
incompatible inputs...) and 2 for a usage error (bad flags, malformed config).
With ``--json`` the machine-readable result goes to stdout and every
human-readable line goes to stderr. Set SKILLVEC_LOG_LEVEL (e.g. ``INFO``) for
progress logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__
from .checkpoint_store import NameSchema, open_checkpoint, tensor_digest
from .delta_arith import MANIFEST_FORMAT, apply_delta, delta_norms, extract_delta, load_manifest
from .exceptions import ConfigInvalid, SchemaInvalid, SkillVecError
from .numerics import resolve_threads

log = logging.getLogger("skillvec")


class Output:
    """Routes human text to stdout, or to stderr when JSON owns stdout."""

    def __init__(self, as_json: bool):
        self.as_json = as_json
        self.human = sys.stderr if as_json else sys.stdout

    def say(self, text: str = "") -> None:
        print(text, file=self.human)

    def result(self, obj: dict) -> None:
        if self.as_json:
            print(json.dumps(obj, indent=2, sort_keys=True))


def _min_count(minimum: int):
    def parse(text: str) -> int:
        try:
            n = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
        if n < minimum:
            raise argparse.ArgumentTypeError(f"must be at least {minimum}, got {n}")
        return n

    return parse


def _finite(text: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if x != x or x in (float("inf"), float("-inf")):
        raise argparse.ArgumentTypeError("must be finite")
    return x


def _dims(values: list[str]) -> list[int]:
    out = set()
    for v in values:
        for part in v.split(","):
            if part.strip():
                out.add(_min_count(2)(part.strip()))
    return sorted(out)


# ---------------------------------------------------------------- commands


def cmd_diff(args, out: Output) -> int:
    threads = resolve_threads(args.threads)
    d = extract_delta(args.a, args.b, mode=args.mode, exclude=args.exclude, dtype=args.dtype,
                      name=args.name, threads=threads)
    digest = d.save(args.out, threads=threads)
    norms = delta_norms(d)
    width = max([len(n) for n in d.names()] + [6])
    out.say(f"{'tensor':<{width}}  {'shape':<16} norm")
    rows = []
    for n in d.names():
        shape = list(d.shape(n))
        out.say(f"{n:<{width}}  {str(shape):<16} {norms.per_tensor[n]:.6g}")
        rows.append({"name": n, "shape": shape, "dtype": d.dtype(n).value, "norm": norms.per_tensor[n]})
    for n in d.excluded:
        out.say(f"excluded: {n}")
    out.say(f"global norm {norms.global_norm:.6g} over {len(rows)} tensors")
    out.say(f"wrote {args.out} ({digest})")
    out.result({
        "command": "diff", "out": str(args.out), "digest": digest, "minuend_digest": d.minuend_digest,
        "subtrahend_digest": d.subtrahend_digest, "mode": args.mode, "excluded": list(d.excluded),
        "global_norm": norms.global_norm, "tensors": rows,
    })
    return 0


def cmd_apply(args, out: Output) -> int:
    base = open_checkpoint(args.base)
    res = apply_delta(base, args.manifest, args.lam, args.out, fail_fast=not args.allow_nonfinite,
                      threads=resolve_threads(args.threads))
    history = json.loads(res.metadata["lambda_history"])
    td = tensor_digest(res)
    out.say(f"wrote {args.out}")
    out.say(f"file digest    {res.content_digest}")
    out.say(f"tensor digest  {td}" + ("  (same tensors as base)" if td == tensor_digest(base) else ""))
    out.result({
        "command": "apply", "out": str(args.out), "digest": res.content_digest, "tensor_digest": td,
        "base_tensor_digest": tensor_digest(base), "lambda": args.lam, "lambda_history": history,
    })
    return 0


def cmd_cosim(args, out: Output) -> int:
    from .similarity import emit_heatmap, grid_compute

    schema = NameSchema.from_file(args.schema) if args.schema else None
    kw = {"schema": schema} if schema else {}
    lo, hi = args.range
    if not lo < 0 < hi:
        raise ConfigInvalid(f"--range must straddle 0, got {lo} {hi}")
    grid = grid_compute(load_manifest(args.a), load_manifest(args.b), threads=resolve_threads(args.threads), **kw)
    if args.csv:
        emit_heatmap(grid, "csv", args.csv, (lo, hi))
    if args.svg:
        emit_heatmap(grid, "svg", args.svg, (lo, hi))
    cos = grid.cosines()
    mean = sum(cos) / len(cos) if cos else None
    peak = max(abs(c) for c in cos) if cos else None
    out.say(f"{len(grid)} cells over {len(grid.layers)} layers x {len(grid.modules)} modules, "
            f"{len(grid) - len(cos)} null")
    if cos:
        out.say(f"mean cosine {mean:.6g}, max |cosine| {peak:.6g}")
    out.result({
        "command": "cosim", "manifest_a": grid.digest_a, "manifest_b": grid.digest_b, "layers": grid.layers,
        "modules": grid.modules, "cells": len(grid), "null_cells": len(grid) - len(cos), "mean_cosine": mean,
        "max_abs_cosine": peak, "csv": str(args.csv) if args.csv else None,
        "svg": str(args.svg) if args.svg else None,
    })
    return 0


def cmd_ortho(args, out: Output) -> int:
    from threadpoolctl import threadpool_limits

    from .numerics import ordered_map
    from .ortho_lab import (
        IsotropicSampler,
        concentration_sweep,
        experiment_record,
        make_pair,
        mc_overlap,
        parse_construction,
        write_report,
    )

    try:
        parse_construction(args.construction)
    except ValueError as e:
        raise ConfigInvalid(str(e)) from e
    threads = resolve_threads(args.threads)
    dims = args.dims
    if dims[-1] > 4096:
        raise ConfigInvalid("--dims must lie within [2, 4096]")

    def one(d):
        pair = make_pair(d, args.construction, args.seed)
        s = IsotropicSampler(d, args.sigma, args.distribution, args.seed)
        return pair, mc_overlap(pair, s, args.n, args.method)

    with threadpool_limits(1):
        results = list(ordered_map(one, dims, threads))
        profile = None
        if args.sweep_n:
            template = IsotropicSampler(dims[0], args.sigma, args.distribution, args.seed)
            profile = concentration_sweep(dims, args.construction, template, args.sweep_n, args.t_grid,
                                          args.method, threads)
    records = []
    for pair, est in results:
        rec = experiment_record(pair, est)
        if profile is not None:
            rec["tail_table"] = [row for row in profile.tail_table() if row["d"] == pair.dim]
        records.append(rec)
    write_report(records, args.report, args.csv)
    ok = all(abs(r["mc_mean"] - r["analytic"]) <= 4 * r["mc_stderr"] for r in records)
    out.say(f"{'d':>6} {'mc_mean':>14} {'stderr':>11} {'analytic':>14} {'z':>8}")
    for r in records:
        out.say(f"{r['d']:>6} {r['mc_mean']:>14.6g} {r['mc_stderr']:>11.4g} {r['analytic']:>14.6g} "
                f"{r['z_score']:>8.3f}")
    if profile is not None:
        out.say("normalized overlap std: " + ", ".join(f"d={d}: {s:.4g}" for d, s in zip(profile.dims, profile.stds)))
        flagged = [row for row in profile.tail_table() if row["exceeds_bound"]]
        if flagged:
            out.say(f"note: {len(flagged)} tail rows exceed the c=1/8 bound (reported, not an error)")
    out.say(f"wrote {args.report}")
    out.result({
        "command": "ortho", "report": str(args.report), "records": records, "all_within_4_stderr": ok,
        "std_strictly_decreasing": profile.strictly_decreasing() if profile is not None else None,
    })
    return 0


def cmd_refine(args, out: Output) -> int:
    from .refine_orchestrator import STATE_FILE, load_config, plan_rounds, resume, run_pipeline

    config = load_config(args.config)
    state_path = os.path.join(config["workdir"], STATE_FILE)
    if args.resume:
        state = resume(state_path, config)
    elif os.path.exists(state_path):
        raise ConfigInvalid(f"{state_path} already exists; pass --resume to continue that pipeline")
    else:
        state = plan_rounds(config)[1]
    run_pipeline(state, args.max_steps, resolve_threads(args.threads))
    v_star = v_digest = None
    if state.done:
        key = f"v_{state.rounds}"
        v_star, v_digest = str(state.artifact_path(key)), state.artifacts[key]["digest"]
    events = [e["event"] for e in state.log]
    for e in events:
        out.say(e)
    out.say(f"pipeline {state.phase.value}" + (f"; final skill vector {v_star}" if v_star else ""))
    out.result({
        "command": "refine", "state": str(state.path), "phase": state.phase.value,
        "current_round": state.current_round, "rounds": state.rounds, "v_star": v_star,
        "v_star_digest": v_digest, "events": events,
    })
    return 0


def cmd_inspect(args, out: Output) -> int:
    idx = open_checkpoint(args.path)
    dtypes: dict[str, int] = {}
    for m in idx.tensors.values():
        dtypes[m.dtype.value] = dtypes.get(m.dtype.value, 0) + 1
    total = sum(m.numel for m in idx.tensors.values())
    is_manifest = (idx.metadata or {}).get("format") == MANIFEST_FORMAT
    res = {
        "command": "inspect", "path": str(args.path), "kind": "manifest" if is_manifest else "checkpoint",
        "digest": idx.content_digest, "tensor_count": len(idx), "total_params": total,
        "dtypes": dict(sorted(dtypes.items())), "metadata": idx.metadata,
    }
    out.say(f"{args.path}: {res['kind']}, {len(idx)} tensors, {total} parameters")
    out.say("dtypes: " + ", ".join(f"{k}={v}" for k, v in res["dtypes"].items()))
    out.say(f"digest {idx.content_digest}")
    if is_manifest:
        m = load_manifest(args.path)
        res["manifest"] = {
            "name": m.name, "lambda_history": m.lambda_history, "minuend_digest": m.minuend_digest,
            "subtrahend_digest": m.subtrahend_digest, "created_at": m.created_at, "excluded": m.excluded,
        }
        out.say(f"name {m.name}, lambda history {m.lambda_history}")
        out.say(f"minuend {m.minuend_digest}")
        out.say(f"subtrahend {m.subtrahend_digest}")
    elif idx.metadata:
        for k, v in sorted(idx.metadata.items()):
            out.say(f"  {k} = {v}")
    out.result(res)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_min_count(1), default=None,
                        help="worker threads (default: all cores); results do not depend on it")
    common.add_argument("--json", action="store_true", help="machine-readable result on stdout")

    ap = argparse.ArgumentParser(prog="skillvec", description="Skill-vector arithmetic for safetensors checkpoints.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("diff", parents=[common], help="extract a delta manifest a - b")
    p.add_argument("a", help="minuend checkpoint (e.g. the RL model)")
    p.add_argument("b", help="subtrahend checkpoint (e.g. the SFT model)")
    p.add_argument("--out", required=True, help="manifest path; a .json sidecar is written next to it")
    p.add_argument("--mode", choices=["strict", "intersect"], default="strict",
                   help="strict: names, shapes and dtypes must agree; intersect: use the shared tensors")
    p.add_argument("--exclude", action="append", default=[], metavar="PATTERN",
                   help="fnmatch pattern of tensors to leave out, matched against every dotted tail (repeatable)")
    p.add_argument("--name", default="delta")
    p.add_argument("--dtype", choices=["F32", "F64"], default=None, help="storage dtype (default: by input dtype)")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("apply", parents=[common], help="write base + lambda * manifest")
    p.add_argument("base")
    p.add_argument("manifest")
    p.add_argument("--lambda", dest="lam", type=_finite, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--allow-nonfinite", action="store_true", help="write inf/nan results instead of failing")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("cosim", parents=[common], help="layer-wise cosine similarity of two manifests")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--schema", help='JSON file {"pattern": regex with (?P<layer>) and (?P<module>) groups}')
    p.add_argument("--csv")
    p.add_argument("--svg")
    p.add_argument("--range", nargs=2, type=_finite, default=[-0.2, 0.2], metavar=("LO", "HI"),
                   help="color scale limits (default -0.2 0.2)")
    p.set_defaults(func=cmd_cosim)

    p = sub.add_parser("ortho", parents=[common], help="Monte-Carlo check of the isotropic overlap identity")
    p.add_argument("--dims", nargs="+", required=True, help="dimensions, space or comma separated")
    p.add_argument("--construction", default="independent_gaussian",
                   help="independent_gaussian, exactly_orthogonal or correlated(RHO)")
    p.add_argument("--sigma", type=_finite, default=1.0)
    p.add_argument("--n", type=_min_count(100), default=10_000, help="samples per dimension (>= 100)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distribution", choices=["gaussian", "rademacher_scaled"], default="gaussian")
    p.add_argument("--method", choices=["auto", "direct", "spectral"], default="auto")
    p.add_argument("--sweep-n", type=int, default=1000,
                   help="samples per dimension for the concentration table (>= 1000, 0 to skip)")
    p.add_argument("--t-grid", nargs="+", type=_finite, default=[0.1, 0.2, 0.5])
    p.add_argument("--report", required=True, help="JSON report path")
    p.add_argument("--csv", help="optional flat CSV of the report")
    p.set_defaults(func=cmd_ortho)

    p = sub.add_parser("refine", parents=[common], help="run or resume an iterative refinement pipeline")
    p.add_argument("--config", required=True, help="JSON or TOML pipeline config")
    p.add_argument("--resume", action="store_true", help="continue the pipeline recorded in the workdir")
    p.add_argument("--max-steps", type=_min_count(1), default=None, help="stop after this many phases")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("inspect", parents=[common], help="summarise a checkpoint or manifest")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("SKILLVEC_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "ortho":
        if args.sweep_n and args.sweep_n < 1000:
            parser.error("--sweep-n must be 0 or at least 1000")
        try:
            args.dims = args.dims and _dims(args.dims)
        except argparse.ArgumentTypeError as e:
            parser.error(f"--dims: {e}")
    out = Output(args.json)
    try:
        return args.func(args, out)
    except (ConfigInvalid, SchemaInvalid) as e:
        print(f"skillvec: error: {e}", file=sys.stderr)
        return 2
    except SkillVecError as e:
        print(f"skillvec: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"skillvec: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
