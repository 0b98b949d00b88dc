"""Command-line entry point, ``shufflehist``.

Exit status is 0 on success, 2 when parameters are infeasible or out of
range, and 1 on I/O or input-format errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from shufflehist import compact, params
from shufflehist.adversary import AttackSpec, had_params
from shufflehist.exceptions import (
    CorpusError,
    DomainError,
    InfeasibleParametersError,
    OutOfRegimeError,
    ResourceLimitError,
)
from shufflehist.harness.corpus import load_corpus, synth_zipf
from shufflehist.harness.experiment import (
    ExperimentConfig,
    _json_safe,
    run_experiment,
    topk_metrics,
    write_results,
)
from shufflehist.privacy_audit import DEFAULT_CAP, SLACK, audit_b, bmq_hypothesis

PARAMETER_ERRORS = (InfeasibleParametersError, OutOfRegimeError, ResourceLimitError, DomainError)
INPUT_ERRORS = (OSError, CorpusError, json.JSONDecodeError, KeyError)

ATTACK_COLUMNS = ("trial", "protocol", "strategy", "m", "z_target_honest", "z_target_corrupt", "bias", "bound")
AUDIT_COLUMNS = ("m", "q", "eps", "delta_target", "delta_tight", "pass", "hypothesis")
TOPK_COLUMNS = ("sweep", "trial", "t", "alpha_observed", "alpha_bound", "f1")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _k_list(text: str) -> list[int | None]:
    return [None if v.strip() in ("auto", "") else int(v) for v in text.split(",")]


def _zipf(text: str) -> tuple[int, int, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("--zipf takes N,D,S")
    try:
        return int(float(parts[0])), int(float(parts[1])), float(parts[2])
    except ValueError:
        raise argparse.ArgumentTypeError(f"could not parse --zipf {text!r}") from None


def parse_grid(text: str) -> dict[str, list[float]]:
    """Parse ``q=0.2,0.3,eps=1,2,delta=0.01`` into lists keyed by name.

    A comma starts a new key only when the next chunk contains ``=``.
    """
    grid: dict[str, list[float]] = {}
    key = None
    for chunk in text.split(","):
        chunk = chunk.strip()
        if "=" in chunk:
            key, _, chunk = chunk.partition("=")
            key = key.strip()
            if key not in ("q", "eps", "delta"):
                raise argparse.ArgumentTypeError(f"unknown grid key {key!r}")
            grid.setdefault(key, [])
        if key is None:
            raise argparse.ArgumentTypeError(f"grid must start with key=, got {text!r}")
        if chunk:
            try:
                grid[key].append(float(chunk))
            except ValueError:
                raise argparse.ArgumentTypeError(f"bad grid value {chunk!r}") from None
    missing = {"q", "eps", "delta"} - {k for k, v in grid.items() if v}
    if missing:
        raise argparse.ArgumentTypeError(f"grid is missing values for {sorted(missing)}")
    return grid


def _add_data_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--zipf", type=_zipf, metavar="N,D,S", help="synthetic Zipf data")
    src.add_argument("--vocab", help="vocabulary file, one token per line")
    p.add_argument("--records", help="records file, one token per line (with --vocab)")
    p.add_argument("--lenient", action="store_true", help="skip unknown tokens instead of failing")
    p.add_argument("--data-seed", type=int, default=None, help="seed of the Zipf data (default: --seed)")


def _load_data(args):
    if args.zipf is not None:
        n, d, s = args.zipf
        seed = args.seed if args.data_seed is None else args.data_seed
        return synth_zipf(n, d, s, seed), {"source": "zipf", "n": n, "d": d, "s": s, "seed": seed}
    if not args.records:
        raise CorpusError("--vocab needs --records")
    corpus = load_corpus(args.vocab, args.records, lenient=args.lenient)
    if corpus.skipped:
        print(f"skipped {corpus.skipped} records with unknown tokens", file=sys.stderr)
    info = {"source": "corpus", "vocab": args.vocab, "records": args.records, "skipped": corpus.skipped}
    return corpus.dataset(), info


def _write_csv(path: str | None, columns, rows) -> None:
    handle = open(path, "w", newline="", encoding="utf-8") if path else sys.stdout
    try:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)
    finally:
        if path:
            handle.close()


def cmd_solve_params(args) -> int:
    protocol = args.protocol.replace("-", "_")
    if protocol in ("flip", "flip2"):
        k = args.k if args.k is not None else params.min_k(args.eps, args.delta, args.n, args.mode, d=args.d)
        out = params.solve_q(args.eps, args.delta, args.n, k, args.mode, d=args.d, beta=args.beta).as_dict()
    elif protocol == "flip3":
        if args.d is None:
            raise DomainError("flip3 needs --d")
        out = compact.solve_cm(args.eps, args.delta, args.n, args.d, V=args.V, k=args.k).as_dict()
    elif protocol == "had":
        if args.d is None:
            raise DomainError("had needs --d")
        hp = had_params(args.eps, args.delta, args.n, args.d)
        out = {"d": hp.d, "D": hp.D, "tau": hp.tau, "k": hp.k, "n": hp.n}
    else:
        if args.d is None:
            raise DomainError("flip-amplified needs --d")
        out = params.amplification_params(args.eps, args.delta, args.n, args.d).as_dict()
    print(json.dumps(_json_safe(out), indent=1))
    return 0


def cmd_run(args) -> int:
    data, info = _load_data(args)
    config = ExperimentConfig(
        protocol=args.protocol, eps=args.eps, delta=args.delta, k=tuple(args.k), V=args.V,
        d_hat=args.d_hat, hash_seed=args.hash_seed, q=args.q, mode=args.mode, trials=args.trials,
        seed=args.seed, t=tuple(args.t or ()), simulation=args.simulation, n_jobs=args.n_jobs,
        keep_estimates=args.keep_estimates,
    )
    result = run_experiment(config, data)
    csv_path, json_path = write_results(result, args.out, extra_meta={"data": info})
    for sweep in result.sweeps:
        errs = result.column("max_error", sweep["sweep"])
        bound = result.rows[sweep["sweep"] * config.trials].bound
        print(
            f"sweep {sweep['sweep']}: k={sweep.get('k')} median max error {np.median(errs):.6g}, "
            f"bound {bound:.6g}, {np.mean(errs <= bound):.0%} of trials within"
        )
    print(f"wrote {csv_path} and {json_path}")
    return 0


def cmd_attack(args) -> int:
    data, info = _load_data(args)
    protocol = {"flip": "flip2"}.get(args.protocol, args.protocol)
    spec = AttackSpec(args.target, args.m, args.strategy)
    if (protocol == "had") != (spec.strategy == "had_flood"):
        raise DomainError("had-flood goes with --protocol had, and only with it")
    config = ExperimentConfig(
        protocol=protocol, eps=args.eps, delta=args.delta, k=(args.k,), mode=args.mode,
        trials=args.trials, seed=args.seed, attack=spec,
    )
    result = run_experiment(config, data)
    rows = []
    for r in result.rows:
        a = r.attack
        rows.append([
            r.trial, args.protocol, a["strategy"], a["m"], repr(a["z_target_honest"]),
            repr(a["z_target_corrupt"]), repr(a["bias"]), repr(a["bound"]),
        ])
    out = None
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        out = args.out + ".csv"
    _write_csv(out, ATTACK_COLUMNS, rows)
    bias = np.array([r.attack["bias"] for r in result.rows])
    bound = result.rows[0].attack["bound"]
    msg = f"mean bias {bias.mean():.6g} over {bias.size} trials"
    if not math.isnan(bound):
        msg += f", bound {bound:.6g}, {np.mean(np.abs(bias) <= bound * (1 + 1e-12)):.0%} within"
    print(msg, file=sys.stderr)
    return 0


def _audit_ms(args) -> list[int]:
    if args.m:
        ms = args.m
    elif args.m_step:
        ms = list(range(args.m_step, args.m_max + 1, args.m_step))
    else:
        ms = [args.m_max]
    too_big = [m for m in ms if m > args.m_max or m < 1]
    if too_big:
        raise DomainError(f"m values {too_big} fall outside [1, --m-max={args.m_max}]")
    return ms


def cmd_audit_privacy(args) -> int:
    grid = args.grid
    rows = []
    failures = 0
    for m in _audit_ms(args):
        for q in grid["q"]:
            for eps in grid["eps"]:
                tight = audit_b(m, q, eps, cap=args.cap)
                for delta in grid["delta"]:
                    ok = tight <= delta + SLACK
                    hyp = bmq_hypothesis(m, q, eps, delta)
                    failures += hyp and not ok
                    rows.append([m, q, eps, delta, repr(tight), ok, hyp])
    _write_csv(args.out + ".csv" if args.out else None, AUDIT_COLUMNS, rows)
    if failures:
        print(f"{failures} grid points satisfy the hypothesis but fail the audit", file=sys.stderr)
    return 0


def cmd_topk(args) -> int:
    with open(args.input, encoding="utf-8") as fh:
        doc = json.load(fh)
    if "estimates" not in doc:
        raise CorpusError(f"{args.input} holds no estimates; rerun with --keep-estimates")
    hist = np.asarray(doc["histogram"], dtype=float)
    sweeps = {s["sweep"]: s for s in doc["meta"]["sweeps"]}
    n = int(doc["meta"]["n"])
    out = []
    for row, z in zip(doc["rows"], doc["estimates"]):
        q = math.nan if row["q"] is None else row["q"]
        protocol = sweeps[row["sweep"]]["protocol"]
        for m in topk_metrics(z, hist, protocol, n, row["k"], q, args.t):
            out.append([row["sweep"], row["trial"], m["t"], repr(m["alpha_observed"]), repr(m["alpha_bound"]), repr(m["f1"])])
    _write_csv(args.out + ".csv" if args.out else None, TOPK_COLUMNS, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shufflehist", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve-params", help="solve q and the error bound for a privacy target")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--n", type=lambda v: int(float(v)), required=True)
    p.add_argument("--k", type=int, default=None, help="fabricated messages (default: smallest admissible)")
    p.add_argument("--mode", choices=["per-bin", "per_bin", "max"], default="per-bin")
    p.add_argument("--d", type=lambda v: int(float(v)), default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--protocol", choices=["flip", "flip2", "flip3", "had", "flip-amplified"], default="flip")
    p.add_argument("--V", type=int, default=None)
    p.set_defaults(func=cmd_solve_params)

    p = sub.add_parser("run", help="simulate a protocol over many trials")
    p.add_argument("--protocol", choices=["flip", "flip2", "flip3", "had", "flip-amplified"], required=True)
    p.add_argument("--eps", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=1e-6)
    p.add_argument("--k", type=_k_list, default=[None], help="comma-separated sweep; 'auto' for the default")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    _add_data_args(p)
    p.add_argument("--out", required=True, metavar="PREFIX")
    p.add_argument("--mode", choices=["per-bin", "per_bin", "max"], default="max")
    p.add_argument("--q", type=float, default=None, help="explicit flip probability (no privacy)")
    p.add_argument("--V", type=int, default=None)
    p.add_argument("--d-hat", type=int, default=None)
    p.add_argument("--hash-seed", type=int, default=0)
    p.add_argument("--t", type=_int_list, default=None, help="top-t sizes to score")
    p.add_argument("--simulation", choices=["messages", "counts"], default="messages")
    p.add_argument("--n-jobs", type=int, default=1)
    p.add_argument("--keep-estimates", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("attack", help="measure the bias a corrupt coalition causes")
    p.add_argument("--protocol", choices=["flip", "flip2", "had"], required=True)
    p.add_argument("--strategy", choices=["honest-lie", "flood-bit", "had-flood"], required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--eps", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=1e-6)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--mode", choices=["per-bin", "per_bin", "max"], default="max")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    _add_data_args(p)
    p.add_argument("--out", default=None, metavar="PREFIX", help="write PREFIX.csv (default: stdout)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("audit-privacy", help="exact privacy audit of the reduced mechanism")
    p.add_argument("--m-max", type=int, default=DEFAULT_CAP)
    p.add_argument("--grid", type=parse_grid, required=True, metavar="q=...,eps=...,delta=...")
    m = p.add_mutually_exclusive_group()
    m.add_argument("--m", type=_int_list, default=None, help="explicit m values")
    m.add_argument("--m-step", type=int, default=None, help="audit m = step, 2 step, ... up to --m-max")
    p.add_argument("--cap", type=int, default=DEFAULT_CAP, help="enumeration cap on m")
    p.add_argument("--out", default=None, metavar="PREFIX", help="write PREFIX.csv (default: stdout)")
    p.set_defaults(func=cmd_audit_privacy)

    p = sub.add_parser("topk", help="score top-t selection on a prior run's JSON")
    p.add_argument("--t", type=_int_list, required=True)
    p.add_argument("--in", dest="input", required=True, metavar="JSON")
    p.add_argument("--out", default=None, metavar="PREFIX", help="write PREFIX.csv (default: stdout)")
    p.set_defaults(func=cmd_topk)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PARAMETER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
