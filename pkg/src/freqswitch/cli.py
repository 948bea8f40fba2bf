"""Command-line interface: verification suites, decorrelation analysis,
rank sweeps, gradient checking, toy training, and the relative-improvement
metric. All outputs are deterministic given the flags/config; CSV and JSON
are the only emission formats (plotting is left to downstream tools).

Exit codes: 0 success, 1 check failure or divergence, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .numerics import ContractViolation, RandomStream
from .analysis import gaussian_corr_oracle, monte_carlo_corr, rank_report
from .trainer import DivergenceError, TrainConfig, train
from .verify import SUITES, model_gradcheck_errors, run_suites
from . import trainer as trainer_mod


def _parse_float_list(text: str) -> list[float]:
    """Comma lists ("1,2.5,7") or inclusive integer ranges ("1:10")."""
    if ":" in text:
        lo, hi = text.split(":", 1)
        return [float(v) for v in range(int(lo), int(hi) + 1)]
    return [float(v) for v in text.split(",") if v != ""]


def _parse_int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v != ""]


def _write_text(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _format_delta_m(value: float) -> str:
    rendered = f"{value:+.2f}"
    return "0.00" if rendered in ("+0.00", "-0.00") else rendered


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_verify(args) -> int:
    try:
        summary = run_suites(args.suite or None, seed=args.seed)
    except KeyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    text = json.dumps(summary, sort_keys=True, indent=2) + "\n"
    _write_text(args.out, text)
    if args.out is not None:
        print("PASS" if summary["all_passed"] else "FAIL")
    return 0 if summary["all_passed"] else 1


def cmd_analyze_corr(args) -> int:
    rows = ["omega_s,omega_t,sigma,mc_mean,mc_stderr,oracle,abs_gap"]
    trial = 0
    for sigma in _parse_float_list(args.sigma):
        for ws in _parse_float_list(args.omega_s):
            for wt in _parse_float_list(args.omega_t):
                stream = RandomStream(args.seed, 90_000 + trial)
                trial += 1
                oracle = gaussian_corr_oracle(ws, wt, sigma)
                est = monte_carlo_corr(ws, wt, sigma, args.samples, stream)
                gap = abs(est.mean - oracle)
                rows.append(f"{ws!r},{wt!r},{sigma!r},{est.mean!r},"
                            f"{est.stderr!r},{oracle!r},{gap!r}")
    _write_text(args.out, "\n".join(rows) + "\n")
    return 0


def cmd_analyze_rank(args) -> int:
    rows = ["rank,omega,seed,base_eps_rank,sine_eps_rank,sine_stable_rank"]
    for r in _parse_int_list(args.ranks):
        for omega in _parse_float_list(args.omegas):
            for seed in range(args.seeds):
                stream = RandomStream(args.seed, 80_000 + 1000 * seed + r)
                a = stream.normal((args.size, r))
                b = stream.normal((args.size, r))
                base = a @ b.T
                base_rep = rank_report(base, args.epsilon)
                sine_rep = rank_report(np.sin(omega * base), args.epsilon)
                rows.append(f"{r},{omega!r},{seed},{base_rep.eps_rank},"
                            f"{sine_rep.eps_rank},{sine_rep.stable_rank!r}")
    _write_text(args.out, "\n".join(rows) + "\n")
    return 0


def _load_train_config(path: str | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    data = json.loads(Path(path).read_text())
    return TrainConfig.from_dict(data)


def cmd_gradcheck(args) -> int:
    if args.config is not None:
        cfg = _load_train_config(args.config)
        _, tasks = trainer_mod.make_toy_suite(cfg)
        model_config = cfg.model_config(tuple(t.out_channels for t in tasks))
    else:
        model_config = None
    errors = model_gradcheck_errors(seed=args.seed, config=model_config, h=args.h)
    worst = max(errors.values())
    for name in sorted(errors):
        print(f"{name},{errors[name]!r}")
    print(f"max_rel_error,{worst!r}")
    if worst > args.tol:
        print(f"FAIL: max relative error {worst:g} exceeds tolerance {args.tol:g} "
              f"(seed {args.seed})", file=sys.stderr)
        return 1
    return 0


def cmd_train(args) -> int:
    config = _load_train_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    baselines = None
    if args.baselines is not None:
        baselines = [float(v) for v in json.loads(Path(args.baselines).read_text())]
    try:
        report = train(config, baselines=baselines)
    except DivergenceError as exc:
        diag = json.dumps(exc.diagnostics, sort_keys=True, indent=2)
        (out / "divergence.json").write_text(diag + "\n")
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    (out / "report.json").write_bytes(report.to_json_bytes())
    (out / "metrics.csv").write_text(report.metrics_csv())
    (out / "gradsim.csv").write_text(report.gradsim_csv())
    resolved = json.dumps(report.config, sort_keys=True, indent=2) + "\n"
    (out / "resolved-config.json").write_text(resolved)
    if report.baseline_metrics is not None and args.baselines is None:
        (out / "baselines.json").write_text(
            json.dumps(report.baseline_metrics) + "\n")
    # Non-primary diagnostics: excluded from the determinism contract.
    (out / "timing.json").write_text(
        json.dumps({"wall_clock_s": report.wall_clock_s}) + "\n")
    print(f"wrote report to {out}")
    return 0


def cmd_delta_m(args) -> int:
    st = _parse_float_list(args.st)
    mtl = _parse_float_list(args.mtl)
    signs = _parse_int_list(args.signs)
    if not len(st) == len(mtl) == len(signs):
        print("error: --st, --mtl, and --signs must have equal lengths", file=sys.stderr)
        return 2
    value = trainer_mod.delta_m(mtl, st, signs)
    print(_format_delta_m(value))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freqswitch",
        description="frequency-switched low-rank kernel adapters: verification, "
                    "analysis, and desk-scale multi-task training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the invariant/property suites")
    p.add_argument("--suite", action="append", choices=sorted(SUITES),
                   help="run only this suite (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the JSON summary here instead of stdout")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("analyze-corr",
                       help="Monte-Carlo vs closed-form correlation of sine transforms")
    p.add_argument("--omega-s", required=True, help="value, comma list, or a:b range")
    p.add_argument("--omega-t", required=True, help="value, comma list, or a:b range")
    p.add_argument("--sigma", default="1.0", help="value or comma list")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_analyze_corr)

    p = sub.add_parser("analyze-rank", help="effective-rank sweep of sine-mapped low-rank bases")
    p.add_argument("--ranks", default="1,2,4", help="comma list of ranks")
    p.add_argument("--omegas", default="1:8", help="value, comma list, or a:b range")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_analyze_rank)

    p = sub.add_parser("gradcheck", help="full-model finite-difference gradient check")
    p.add_argument("--config", help="training config JSON (default: compact check model)")
    p.add_argument("--h", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="run the toy multi-task training loop")
    p.add_argument("--config", help="training config JSON (default config if omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--baselines", help="JSON list of stored single-task metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("delta-m", help="average relative improvement over baselines")
    p.add_argument("--st", required=True, help="comma list of single-task metrics")
    p.add_argument("--mtl", required=True, help="comma list of multi-task metrics")
    p.add_argument("--signs", required=True,
                   help="comma list of lower-is-better flags (0/1) per task")
    p.set_defaults(func=cmd_delta_m)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
