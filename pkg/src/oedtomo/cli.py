"""Command-line front end: ``oedtomo <command> [options]``.

Commands: generate, landscape, oed-a, oed-b, alpha-sweep. Options can also be
read from a ``key = value`` file (``--config``); flags given on the command
line take precedence. Exit status is 0 on success, 2 for usage errors and 3
for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from pathlib import Path

import numpy as np

from .bayesrisk import RankDeficientError, sample_covariance_factor
from .datagen import NoiseSpec, generate, read_tomoset, write_tomoset
from .oed import (
    DesignVector,
    OedConfig,
    OedError,
    OverRegularizedError,
    ProblemA,
    beta_sweep,
    landscape_scan,
    alpha_sweep,
    solve_oed_a,
    solve_oed_b,
)
from .qp import ConstraintSpec, QpError
from .sensitivity import SensitivityError
from .tomo import Grid

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
WORKERS_ENV = "OEDTOMO_WORKERS"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# small writers

def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path: Path, header, rows) -> str:
    text = csv_text(header, rows)
    path.write_text(text)
    return text


def write_pgm(path: Path, image) -> None:
    """ASCII PGM scaled to 0..255; the value range goes to ``<path>.meta``."""
    a = np.asarray(image, dtype=float)
    finite = np.isfinite(a)
    lo = float(a[finite].min()) if finite.any() else 0.0
    hi = float(a[finite].max()) if finite.any() else 0.0
    span = hi - lo
    scaled = np.zeros(a.shape) if span == 0 else (np.where(finite, a, lo) - lo) / span * 255.0
    pix = np.rint(scaled).astype(int)
    lines = ["P2", f"{a.shape[1]} {a.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pix]
    path.write_text("\n".join(lines) + "\n")
    meta = [f"min = {lo!r}", f"max = {hi!r}", f"masked = {int((~finite).sum())}"]
    Path(str(path) + ".meta").write_text("\n".join(meta) + "\n")


# ---------------------------------------------------------------------------
# config handling

def read_config(path) -> dict:
    values = {}
    for num, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{num}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise UsageError(f"{path}:{num}: empty key")
        values[key.replace("_", "-")] = value
    return values


def _config_tokens(parser: argparse.ArgumentParser, config: dict) -> list[str]:
    known = {opt for action in parser._actions for opt in action.option_strings}
    tokens = []
    for key, value in config.items():
        flag = "--" + key
        if flag not in known or flag in ("--config", "--help"):
            raise UsageError(f"unknown config key {key!r}")
        tokens += [flag, value]
    return tokens


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _constraint(text: str) -> ConstraintSpec:
    try:
        return ConstraintSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# ---------------------------------------------------------------------------
# parser

def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value file; command-line flags override it")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--workers", type=_positive_int, default=None,
                   help=f"parallel workers (default ${WORKERS_ENV} or 1)")
    p.add_argument("--seed", type=int, default=0, help="random seed")


def _model(p: argparse.ArgumentParser, constraint="box"):
    p.add_argument("--data", help="TOMOSET training file")
    p.add_argument("--constraint", type=_constraint, default=_constraint(constraint),
                   help="unconstrained | equality | nonneg | box[:lo:hi]")
    p.add_argument("--alpha", type=float, default=1e-1, help="regularization parameter")
    p.add_argument("--sigma", type=float, default=1.0, help="noise standard deviation (Bayes risk)")
    p.add_argument("--noise", type=float, default=1e-3, help="relative noise level")
    p.add_argument("--inner-tol", type=float, default=1e-10)
    p.add_argument("--outer-tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=50, help="outer iterations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oedtomo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a training set")
    g.add_argument("dataset", choices=["rectangles", "pentagons", "shapes", "phantom"])
    g.add_argument("--count", type=_positive_int, default=20)
    g.add_argument("--size", type=int, default=40)
    g.add_argument("-o", "--output", help="TOMOSET path (default <out>/<dataset>.tomoset)")
    _common(g)

    s = sub.add_parser("landscape", help="objective over all two-angle designs")
    _model(s, "unconstrained")
    s.add_argument("--mode", choices=["bayes", "empirical"], default="empirical")
    s.add_argument("--step", type=float, default=1.0, help="scan step in degrees")
    s.add_argument("--size", type=int, default=None, help="grid size for bayes mode without data")
    s.add_argument("--prior", choices=["identity", "sample"], default="identity",
                   help="bayes mode: L = I or from the sample covariance of --data")
    s.add_argument("--ridge", type=float, default=1e-2, help="sample covariance ridge")
    _common(s)

    a = sub.add_parser("oed-a", help="sparsified weights on a fine angle grid")
    _model(a)
    a.add_argument("--angle-step", type=float, default=10.0)
    a.add_argument("--beta", type=float, default=1e-4)
    a.add_argument("--betas", type=_float_list, default=None, help="comma-separated beta sweep")
    a.add_argument("--samples", type=_positive_int, default=4, help="reconstructions to write")
    _common(a)

    b = sub.add_parser("oed-b", help="placement of a fixed number of angles")
    _model(b)
    b.add_argument("--ell", type=_positive_int, default=2, help="number of angles")
    b.add_argument("--starts", type=_positive_int, default=10, help="random starts")
    b.add_argument("--start", type=_float_list, default=None, help="explicit start angles")
    _common(b)

    w = sub.add_parser("alpha-sweep", help="MSE versus alpha at a fixed design")
    _model(w)
    w.add_argument("--design", type=_float_list, required=False, help="angles in degrees")
    w.add_argument("--constraints", default="unconstrained,equality,nonneg,box")
    w.add_argument("--alphas", type=_float_list, default=None,
                   help="alpha values (default 20 log-spaced in [1e-4, 1e3])")
    _common(w)
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    argv = list(argv)
    args = parser.parse_args(argv)
    if args.config:
        try:
            config = read_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        tokens = _config_tokens(subparser, config)
        idx = argv.index(args.command)
        args = parser.parse_args(argv[:idx + 1] + tokens + argv[idx + 1:])
    if args.workers is None:
        env = os.environ.get(WORKERS_ENV)
        try:
            args.workers = int(env) if env else 1
        except ValueError:
            raise UsageError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
        if args.workers < 1:
            raise UsageError(f"{WORKERS_ENV} must be positive")
    return args


# ---------------------------------------------------------------------------
# commands

def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    if not args.data:
        raise UsageError("--data is required")
    try:
        return read_tomoset(args.data)
    except OSError as exc:
        raise UsageError(f"cannot read {args.data}: {exc}") from None


def _config(args, **extra) -> OedConfig:
    return OedConfig(alpha=args.alpha, sigma=args.sigma, constraint=args.constraint,
                     inner_tol=args.inner_tol, outer_tol=args.outer_tol,
                     max_outer_iter=args.max_iter, noise=NoiseSpec(args.noise, args.seed),
                     parallel_workers=args.workers, **extra)


def cmd_generate(args) -> int:
    ts = generate(args.dataset, args.count, args.size, args.seed)
    path = Path(args.output) if args.output else _outdir(args) / f"{args.dataset}.tomoset"
    try:
        write_tomoset(ts, path)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from None
    print(f"wrote {len(ts)} images of {args.size}x{args.size} to {path} "
          f"(min {ts.data.min():g}, max {ts.data.max():g})")
    return EXIT_OK


def cmd_landscape(args) -> int:
    if not args.step > 0:
        raise UsageError("--step must be positive")
    ts = _load(args) if (args.data or args.mode == "empirical" or args.prior == "sample") else None
    extra = {}
    if args.mode == "bayes" and args.prior == "sample":
        extra["L"] = sample_covariance_factor(ts, args.ridge)
    cfg = _config(args, **extra)
    grid = ts.grid if ts is not None else Grid.square(args.size or 64)
    res = landscape_scan(ts, cfg, step=args.step, mode=args.mode, grid=grid)
    out = _outdir(args)
    label = "bayes_risk" if args.mode == "bayes" else "J_N_half_mean_sq_error"
    write_csv(out / "landscape.csv", ["p1_deg", "p2_deg", label], res.cells())
    write_pgm(out / "landscape.pgm", res.values)
    for rank, (p1, p2, v) in enumerate(res.best(2), 1):
        print(f"best {rank}: p = ({p1:g}, {p2:g}) deg, objective {v:.6g}")
    return EXIT_OK


def _write_samples(out: Path, ts, recon, count: int, prefix: str):
    size = ts.grid.width
    for i in range(min(count, len(ts))):
        write_pgm(out / f"{prefix}_recon_{i}.pgm", recon[i].reshape(size, size))
        write_pgm(out / f"{prefix}_error_{i}.pgm", (recon[i] - ts.data[i]).reshape(size, size))


def cmd_oed_a(args) -> int:
    if not args.angle_step > 0:
        raise UsageError("--angle-step must be positive")
    ts = _load(args)
    angles = np.arange(0.0, 180.0 - 1e-9, args.angle_step)
    cfg = _config(args, beta=args.beta)
    out = _outdir(args)
    betas = args.betas if args.betas else [args.beta]
    prob = ProblemA(ts, angles, cfg)
    rows = beta_sweep(ts, angles, cfg, betas, problem=prob)
    write_csv(out / "oed_a.csv",
              ["beta", "support_size", "support_angles_deg", "mse_per_pixel"],
              [(r["beta"], r["support"], " ".join(_fmt(a) for a in r["angles"]), r["mse"])
               for r in rows])
    chosen = [r for r in rows if r["result"] is not None]
    if not chosen:
        raise OverRegularizedError("every beta removed all angles")
    best = chosen[-1]
    res = best["result"]
    lines = ["angle_deg,weight"] + [f"{_fmt(angles[k])},{_fmt(res.p_opt.values[k])}"
                                    for k in res.phase1_support]
    (out / "design.csv").write_text("\n".join(lines) + "\n")
    ev = prob.evaluate(res.p_opt.values, need_grad=False, keep=True, beta=0.0)
    _write_samples(out, ts, ev.reconstructions, args.samples, "oed_a")
    for r in rows:
        print(f"beta {r['beta']:g}: {r['support']} angles "
              f"[{', '.join(f'{a:g}' for a in r['angles'])}], MSE {r['mse']:.6g}")
    return EXIT_OK


def cmd_oed_b(args) -> int:
    ts = _load(args)
    cfg = _config(args)
    if args.start is not None:
        start = np.asarray(args.start, dtype=float)
        if start.size != args.ell:
            raise UsageError(f"--start has {start.size} angles, --ell is {args.ell}")
        starts = [start]
    else:
        rng = np.random.default_rng(args.seed)
        starts = [np.sort(rng.uniform(0.0, 180.0, args.ell)) for _ in range(args.starts)]
    for s in starts:
        if not DesignVector.angles(s).is_feasible():
            raise UsageError(f"infeasible start {s.tolist()}: angles must be ascending in [0, 180]")
    rows, best = [], None
    for k, s in enumerate(starts):
        res = solve_oed_b(ts, s, cfg)
        J = res.objective_trace[-1]
        rows.append((k, " ".join(_fmt(a) for a in s), " ".join(_fmt(a) for a in res.p_opt.values),
                     res.iterations, J, res.mse))
        if best is None or J < best[0]:
            best = (J, res)
    out = _outdir(args)
    write_csv(out / "oed_b.csv", ["start", "start_angles_deg", "final_angles_deg", "iterations",
                                  "J_N_half_mean_sq_error", "mse_per_pixel"], rows)
    J, res = best
    print(f"best design: [{', '.join(f'{a:.4f}' for a in res.p_opt.values)}] deg, J_N {J:.6g}")
    return EXIT_OK


def cmd_alpha_sweep(args) -> int:
    ts = _load(args)
    if not args.design:
        raise UsageError("--design is required")
    try:
        cons = [ConstraintSpec.parse(c.strip()) for c in args.constraints.split(",") if c.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = _config(args)
    rows = alpha_sweep(ts, args.design, cfg, args.alphas, cons)
    write_csv(_outdir(args) / "alpha_sweep.csv", ["alpha", "constraint", "mse_per_pixel"],
              [(r["alpha"], r["constraint"], r["mse"]) for r in rows])
    print(f"{len(rows)} rows")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "landscape": cmd_landscape,
    "oed-a": cmd_oed_a,
    "oed-b": cmd_oed_b,
    "alpha-sweep": cmd_alpha_sweep,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"oedtomo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (QpError, OedError, SensitivityError, RankDeficientError, np.linalg.LinAlgError) as exc:
        print(f"oedtomo: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"oedtomo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
