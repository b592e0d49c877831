"""``ttt-la``: equivalence checks, benchmarks, the reduction ladder and a demo."""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

import numpy as np

from ..errors import TTTError
from ..fastweight import FastWeightConfig, UpdateSchedule, init_state, random_chunks, recurrent_forward
from ..linear_form import effective_terms_from_trajectory, linear_eval, rebuild_outputs
from ..numerics import make_rng, max_abs_diff_list
from ..variants import reduction_report
from .bench import BENCH_STRATEGIES, PRECISIONS, BenchSpec, run_bench, speedups
from .report import FORMATS, emit_report, write_text
from .suites import SUITES, Sizes, run_suite


def _dims(text: str) -> tuple:
    try:
        dims = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected dk,dh,dv integers, got {text!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive integers dk,dh,dv, got {text!r}")
    return dims


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _names(text: str, allowed, what: str) -> list:
    names = list(allowed) if text == "all" else [x for x in text.split(",") if x]
    bad = [n for n in names if n not in allowed]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown {what} {bad}; choose from {sorted(allowed)} or 'all'")
    return names


def _size_args(p: argparse.ArgumentParser, dims_default=None, chunks_default=None, len_default=None):
    p.add_argument("--dims", type=_dims, default=dims_default, help="dk,dh,dv")
    p.add_argument("--chunks", type=_positive, default=chunks_default, help="number of chunks N")
    p.add_argument("--chunk-len", type=_positive, default=len_default, help="tokens per chunk L")
    p.add_argument("--config", help="fast-weight config JSON; supplies dims and chunk length")


def _apply_config(args) -> Optional[FastWeightConfig]:
    if not getattr(args, "config", None):
        return None
    cfg = FastWeightConfig.load(args.config)
    if args.dims is None:
        args.dims = (cfg.d_k, cfg.d_h, cfg.d_v)
    if args.chunk_len is None:
        args.chunk_len = cfg.chunk_len
    return cfg


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ttt-la", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="run equivalence / gradient / invariant suites")
    p.add_argument("--suite", default="all", help=f"comma list of {', '.join(SUITES)} or 'all'")
    p.add_argument("--seeds", type=_positive, default=20, help="run seeds 0..n-1")
    p.add_argument("--seed-offset", type=int, default=0, help="first seed")
    p.add_argument("--tol", type=float, default=None, help="override each suite's default tolerance")
    _size_args(p)
    p.add_argument("--out", help="report path (stdout if omitted)")
    p.add_argument("--format", choices=FORMATS, default="text")
    p.add_argument("--timing", action="store_true", help="include wall time (breaks byte-determinism)")

    p = sub.add_parser("bench", help="tokens/sec of recurrent and parallel strategies")
    p.add_argument("--strategy", default="all", help=f"comma list of {', '.join(BENCH_STRATEGIES)} or 'all'")
    _size_args(p, (64, 256, 64), 64, 64)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--precision", choices=sorted(PRECISIONS), default="f64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--format", choices=FORMATS, default="text")

    p = sub.add_parser("reduce", help="walk the variant ladder on shared inputs")
    p.add_argument("--seed", type=int, default=0)
    _size_args(p, (4, 8, 4), 4, 2)
    p.add_argument("--out")
    p.add_argument("--format", choices=("json", "text"), default="text")

    sub.add_parser("demo", help="print a worked single-chunk example")
    return ap


def cmd_check(args) -> int:
    _apply_config(args)
    names = _names(args.suite, SUITES, "suite")
    sizes = Sizes(args.dims, args.chunks, args.chunk_len)
    seeds = range(args.seed_offset, args.seed_offset + args.seeds)
    results = [run_suite(n, seeds, args.tol, sizes) for n in names]
    ok = all(r.passed for r in results)
    text = emit_report(results, args.format, args.out, kind="suite",
                       summary={"all_passed": ok, "seeds": args.seeds, "seed_offset": args.seed_offset},
                       timing=args.timing)
    if args.out is None:
        sys.stdout.write(text)
    return 0 if ok else 1


def cmd_bench(args) -> int:
    cfg = _apply_config(args)
    spec = BenchSpec(
        strategies=_names(args.strategy, BENCH_STRATEGIES, "strategy"),
        dims=args.dims, n_chunks=args.chunks, chunk_len=args.chunk_len,
        repeats=args.repeats, precision=args.precision, warmup=args.warmup,
        seed=args.seed, config=cfg,
    )
    records = run_bench(spec)
    summary = {f"speedup_{k}": v for k, v in speedups(records).items()}
    text = emit_report(records, args.format, args.out, kind="bench", summary=summary)
    if args.out is None:
        sys.stdout.write(text)
    return 0


def cmd_reduce(args) -> int:
    _apply_config(args)
    rep = reduction_report(args.seed, args.dims, args.chunks, args.chunk_len)
    if args.format == "json":
        text = emit_report([rep.to_dict()], "json", args.out, kind="reduce",
                           summary={"parallel_ok": rep.parallel_ok()})
    else:
        text = rep.to_table() + "\n"
        if args.out:
            write_text(args.out, text)
    if args.out is None:
        sys.stdout.write(text)
    return 0


def cmd_demo(args) -> int:
    np.set_printoptions(precision=6, suppress=True)
    cfg = FastWeightConfig(d_k=2, d_v=2, d_h=3, chunk_len=2, update_gate_weights=False)
    rng = make_rng(0)
    state0 = init_state(cfg, rng)
    chunks = random_chunks(rng, 1, 2, 2, 2, 0.5)
    sched = UpdateSchedule((0.1,), (0.0,))
    out, traj = recurrent_forward(chunks, state0, sched, cfg)
    lin = effective_terms_from_trajectory(traj, sched, cfg, 0)
    rebuilt = rebuild_outputs(traj, sched, cfg, "theorem1")
    term = lin.terms[0]
    print("one chunk, static SwiGLU kernel, eta = 0.1, loss -<f(k), v>")
    print("Q =\n", chunks[0].q, "\nK =\n", chunks[0].k, "\nV =\n", chunks[0].v)
    print("\nrecurrent: take a gradient step on W1, then read out f(Q) with the new weights")
    print("O =\n", out[0])
    print("\nlinear attention: O = q_hat (W1_0 + k_hat^T v_hat)")
    print("q_hat = phi(Q) =\n", traj.phi_q_next[0])
    print("k_hat = phi(K) =\n", term.k_hat)
    print("v_hat = eta * V =\n", term.v_hat)
    print("O_lin =\n", linear_eval(lin, traj.phi_q_next[0]))
    print(f"\nmax |O - O_lin| = {max_abs_diff_list(out, rebuilt):.3e}")
    return 0


COMMANDS = {"check": cmd_check, "bench": cmd_bench, "reduce": cmd_reduce, "demo": cmd_demo}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except argparse.ArgumentTypeError as exc:
        parser.error(str(exc))
    except (TTTError, ValueError) as exc:
        print(f"ttt-la {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
