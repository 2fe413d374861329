"""``lora-jd`` command-line front end.

Commands
--------
compress        bundle -> ``.jdc`` artifact plus a JSON (or CSV) report
eval            reconstruction errors and accounting for an existing artifact
select-hparams  rank rule of thumb or an exponential cluster sweep
audit-bounds    check an artifact against the energy sandwich
apply           run the compressed forward pass on an activation container

Reports go to stdout (or ``--out`` for ``eval`` / ``select-hparams`` /
``audit-bounds``) and are byte-identical across runs with the same seed;
wall time is written to stderr only. Exit codes: 0 success, 1 usage or
input error, 2 audit failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import _linalg as la
from .adapter_store import (CompressedGroup, FormatError, Mode, Sigma, list_modules, load_activations,
                            load_collection, load_compressed, save_activations, save_compressed,
                            storage_roundtrip)
from .clustering import ClusterOptions, cluster_solve
from .jd_core import Algorithm, SolveOptions, compress
from .metrics import (BASELINE_RANK, CompressionSetting, Setting, gpu_usage_ratio, param_count,
                      relative_recon_error, saved_ratio, setting_for, svd_compress, theorem_bounds)
from .serving import Batch, flop_estimate, forward_compressed

ERROR_THRESHOLD = 0.6
AUDIT_RTOL = 1e-8
# stored sigmas must match U^T B A V up to float32 rounding of U, V and sigma
SIGMA_CONSISTENCY_RTOL = 1e-5


class UsageError(Exception):
    pass


class AuditFailure(Exception):
    pass


# ----------------------------------------------------------------- output

def _num(x):
    """Round floats to 9 significant digits for reports."""
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if not np.isfinite(x) else float(f"{x:.9g}")
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, dict):
        return {k: _num(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_num(v) for v in x]
    return x


def _json(report: dict) -> str:
    return json.dumps(_num(report), indent=2, sort_keys=True) + "\n"


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in _num(row).items()})
    return buf.getvalue()


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ----------------------------------------------------------------- parsing

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["full", "diag", "svd"], default="full")
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--clusters", type=int, default=1)
    p.add_argument("--algorithm", choices=["alt", "eig"], default="alt")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--out", default=None)
    p.add_argument("--csv", action="store_true")
    p.add_argument("--module", default=None, help="layer module of a multi-module bundle")
    p.add_argument("--probe-module", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lora-jd", description="Joint compression of LoRA adapter collections.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="compress a bundle into a .jdc artifact")
    p.add_argument("bundle")
    _common(p)

    p = sub.add_parser("eval", help="evaluate an artifact against its bundle")
    p.add_argument("bundle")
    p.add_argument("artifact")
    p.add_argument("--batch", type=int, default=8, help="batch size for the flop estimate")
    p.add_argument("--seq", type=int, default=1, help="sequence length for the flop estimate")
    _common(p)

    p = sub.add_parser("select-hparams", help="recommend rank / number of clusters")
    p.add_argument("bundle")
    p.add_argument("--no-clusters", action="store_true")
    _common(p)

    p = sub.add_parser("audit-bounds", help="check a JD-Full artifact against the energy bounds")
    p.add_argument("bundle")
    p.add_argument("artifact")
    _common(p)

    p = sub.add_parser("apply", help="run the compressed forward pass on an activation container")
    p.add_argument("artifact")
    p.add_argument("activations")
    _common(p)
    return parser


def _validate(args) -> None:
    if args.rank is not None and args.rank < 0:
        raise UsageError("--rank must be nonnegative")
    if args.clusters < 1:
        raise UsageError("--clusters must be positive")
    if args.threads < 1:
        raise UsageError("--threads must be positive")
    if args.iters is not None and args.iters < 1:
        raise UsageError("--iters must be positive")
    if args.tol < 0:
        raise UsageError("--tol must be nonnegative")
    if args.algorithm == "eig" and args.clusters > 1:
        raise UsageError("--algorithm eig cannot be combined with --clusters > 1")
    if args.algorithm == "eig" and args.mode == "diag":
        raise UsageError("--algorithm eig is only defined for --mode full")
    if args.mode == "svd" and args.clusters > 1:
        raise UsageError("--mode svd is per-adapter; --clusters does not apply")


def _solve_options(args, rank: int) -> SolveOptions:
    return SolveOptions(rank=rank, mode=Mode(args.mode), max_iters=args.iters, tolerance=args.tol,
                        algorithm=Algorithm(args.algorithm), seed=args.seed, normalize=not args.no_normalize)


# ----------------------------------------------------------------- commands

def run_compression(adapters, args, rank: int, clusters: int):
    """Compress ``adapters``; returns the collection and a trace dict."""
    if args.mode == "svd":
        return svd_compress(adapters, rank, normalize=not args.no_normalize), {}
    opts = _solve_options(args, rank)
    if clusters == 1:
        col, rep = compress(adapters, opts)
        return col, {"objective_trace": rep.objective_trace, "iterations": rep.iterations_run,
                     "converged": rep.converged}
    if clusters > len(adapters):
        raise UsageError(f"--clusters {clusters} exceeds the number of adapters ({len(adapters)})")
    copts = ClusterOptions(k=clusters, per_cluster=opts, seed=args.seed, workers=args.threads)
    col, rep = cluster_solve(adapters, copts)
    return col, {"objective_trace": rep.total_objective_trace, "iterations": rep.outer_iterations,
                 "converged": rep.converged, "assignment_history_hash": rep.assignment_history_hash}


def _accounting(col, d_A: int, d_B: int) -> dict:
    s = setting_for(col, d_A, d_B)
    base = CompressionSetting(Setting.BASELINE16, s.adapter_count, s.hidden_dim, d_A=d_A, d_B=d_B)
    return {"setting": s.mode.value, "param_count": param_count(s), "baseline_param_count": param_count(base),
            "saved_ratio": saved_ratio(s), "gpu_usage_ratio": gpu_usage_ratio(s)}


def _error_rows(adapters, col) -> tuple[list[dict], float]:
    per, mean = relative_recon_error(adapters, col)
    rows = [{"id": i, "cluster": col.assignment[i], "relative_error": per[i]} for i in adapters.ids]
    return rows, mean


def cmd_compress(args) -> int:
    adapters = load_collection(args.bundle, args.module)
    rank = args.rank if args.rank is not None else BASELINE_RANK
    if not args.out:
        raise UsageError("compress needs --out PATH for the artifact")
    t0 = time.perf_counter()
    col, trace = run_compression(adapters, args, rank, args.clusters)
    wall = time.perf_counter() - t0
    save_compressed(col, args.out)
    # report what was written, not the in-memory float64 solution
    stored = storage_roundtrip(col)
    rows, mean = _error_rows(adapters, stored)
    if args.csv:
        sys.stdout.write(_csv(rows))
    else:
        report = {"command": "compress", "artifact": str(args.out), "mode": args.mode, "rank": rank,
                  "clusters": len(col.groups), "n": len(adapters), "seed": args.seed,
                  "per_adapter": rows, "mean_relative_error": mean, **trace,
                  **_accounting(col, adapters.d_A, adapters.d_B)}
        sys.stdout.write(_json(report))
    print(f"wall_time_s={wall:.3f}", file=sys.stderr)
    return 0


def _check_ids(adapters, col) -> None:
    a, c = set(adapters.ids), set(col.assignment)
    if a != c:
        missing, extra = sorted(a - c), sorted(c - a)
        raise UsageError(f"id mismatch between bundle and artifact: missing {missing}, unexpected {extra}")


def cmd_eval(args) -> int:
    adapters = load_collection(args.bundle, args.module)
    col = load_compressed(args.artifact)
    _check_ids(adapters, col)
    if col.groups[0].u.shape[0] != adapters.d_B or col.groups[0].v.shape[0] != adapters.d_A:
        raise UsageError("artifact dimensions do not match the bundle")
    rows, mean = _error_rows(adapters, col)
    rng = np.random.default_rng(args.seed)
    ids = [adapters.ids[j] for j in rng.integers(len(adapters), size=args.batch)]
    batch = Batch(np.zeros((args.batch, args.seq, adapters.d_A)), ids)
    flops = flop_estimate(batch, col)
    if args.csv:
        _emit(_csv(rows), args.out)
    else:
        report = {"command": "eval", "per_adapter": rows, "mean_relative_error": mean,
                  "flops": flops, **_accounting(col, adapters.d_A, adapters.d_B)}
        _emit(_json(report), args.out)
    return 0


def _probe_module(bundle, requested) -> str | None:
    modules = list_modules(bundle)
    if requested is not None:
        if requested not in modules:
            raise UsageError(f"bundle {bundle} has no module {requested!r}")
        return requested
    if len(modules) <= 1:
        return None
    return modules[len(modules) // 2]


def cluster_grid(n: int) -> list[int]:
    """1, 2, 4, ... below ``n``, then ``n`` itself."""
    grid, c = [], 1
    while c < n:
        grid.append(c)
        c *= 2
    grid.append(n)
    return grid


def recommended_rank(n: int) -> int:
    """Half the adapter count plus seven, halves rounded up."""
    return (n + 1) // 2 + 7


def cmd_select_hparams(args) -> int:
    module = args.module if args.module is not None else _probe_module(args.bundle, args.probe_module)
    adapters = load_collection(args.bundle, module)
    n = len(adapters)
    if n <= 100 and args.no_clusters:
        rank = min(recommended_rank(n), adapters.d_A, adapters.d_B)
        report = {"command": "select-hparams", "n": n, "mode": "full", "rank": rank, "clusters": 1}
        _emit(_json(report), args.out)
        return 0
    if args.mode == "svd":
        raise UsageError("the cluster sweep needs --mode full or diag")
    rank = min(args.rank if args.rank is not None else BASELINE_RANK, adapters.d_A, adapters.d_B)
    sweep = []
    for c in cluster_grid(n):
        col, _ = run_compression(adapters, args, rank, c)
        _, mean = relative_recon_error(adapters, col)
        sweep.append({"clusters": c, "rank": rank, "mean_relative_error": mean})
    under = [row for row in sweep if row["mean_relative_error"] < ERROR_THRESHOLD]
    if under:
        best, warning = under[0], None
    else:
        best = min(sweep, key=lambda row: row["mean_relative_error"])
        warning = f"no cluster count reached mean error < {ERROR_THRESHOLD}; reporting the best"
        print(f"warning: {warning}", file=sys.stderr)
    if args.csv:
        _emit(_csv(sweep), args.out)
    else:
        report = {"command": "select-hparams", "n": n, "module": module, "mode": args.mode, "rank": rank,
                  "clusters": best["clusters"], "sweep": sweep, "warning": warning}
        _emit(_json(report), args.out)
    return 0


def audit(adapters, col) -> dict:
    """Bounds report per group of a FULL artifact plus a sigma consistency check.

    The sandwich is evaluated with the optimal sigmas of the stored bases
    (re-orthonormalized to undo float32 rounding). Stored sigmas must agree
    with those to ``SIGMA_CONSISTENCY_RTOL``, which catches edited artifacts
    whose energy still happens to lie inside the bounds.
    """
    if col.mode is not Mode.FULL:
        raise UsageError("bounds defined for JD-Full only")
    _check_ids(adapters, col)
    groups, ok = [], True
    for j, g in enumerate(col.groups):
        members = adapters.subset(g.ids)
        u, v = la.orthonormalize(g.u), la.orthonormalize(g.v)
        opt = {}
        mismatch = []
        for ad in members:
            s = (u.T @ ad.b) @ (ad.a @ v)
            opt[ad.id] = s
            stored = col.sigma(ad.id, original_scale=True).matrix()
            if np.linalg.norm(stored - s) > SIGMA_CONSISTENCY_RTOL * max(ad.norm, 1e-300):
                mismatch.append(ad.id)
        group = CompressedGroup(u, v, {i: Sigma(Mode.FULL, s) for i, s in opt.items()})
        rep = theorem_bounds(members, group)
        stored_energy = sum(float(np.sum(col.sigma(i, original_scale=True).matrix() ** 2)) for i in g.ids)
        violations = rep.violations(AUDIT_RTOL) + [f"stored sigma inconsistent for {i}" for i in mismatch]
        ok = ok and not violations
        groups.append({"group": j, **rep.as_dict(), "stored_energy": stored_energy, "violations": violations})
    return {"command": "audit-bounds", "pass": ok, "groups": groups}


def cmd_audit_bounds(args) -> int:
    adapters = load_collection(args.bundle, args.module)
    col = load_compressed(args.artifact)
    report = audit(adapters, col)
    if args.csv:
        rows = [{k: v for k, v in g.items() if k != "violations"} | {"violations": ";".join(g["violations"])}
                for g in report["groups"]]
        _emit(_csv(rows), args.out)
    else:
        _emit(_json(report), args.out)
    if not report["pass"]:
        raise AuditFailure("energy sandwich violated")
    return 0


def cmd_apply(args) -> int:
    if not args.out:
        raise UsageError("apply needs --out PATH for the output container")
    col = load_compressed(args.artifact)
    x, ids, base = load_activations(args.activations)
    y = forward_compressed(Batch(x, ids), col, base_output=base, dtype=np.float32)
    save_activations(args.out, y, ids, name="y")
    return 0


COMMANDS = {"compress": cmd_compress, "eval": cmd_eval, "select-hparams": cmd_select_hparams,
            "audit-bounds": cmd_audit_bounds, "apply": cmd_apply}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors; 2 is reserved for audits
        return 0 if e.code == 0 else 1
    try:
        _validate(args)
        return COMMANDS[args.command](args)
    except AuditFailure as e:
        print(f"lora-jd: audit failed: {e}", file=sys.stderr)
        return 2
    except (UsageError, FormatError, FileNotFoundError, KeyError, ValueError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"lora-jd: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
