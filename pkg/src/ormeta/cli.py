"""Command-line front end.

Three subcommands: ``analyze`` runs the full estimator roster on a real
study-level CSV, ``simulate`` executes a deterministic sweep over a
factorial sub-grid and writes raw replicate records, and ``report``
aggregates raw records into figure-ready panel CSVs.

Exit codes: 0 on success, 2 on malformed input or an invalid grid,
3 when too few usable studies remain.  Every file-producing run also
writes a flat key=value manifest alongside its outputs; manifests avoid
timestamps and execution-only knobs (worker count, paths) so identical
invocations produce byte-identical files.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from . import __version__
from .data import ZeroCellPolicy, build_effect_sample, read_study_csv
from .effects import hksj_interval, iv_interval, iv_point, ssw_interval, ssw_point
from .errors import EmptyCell, SchemaError, TooFewStudies, UnsupportedK
from .qstats import KDCorrected
from .report import aggregate, emit_panels
from .simulate import (
    ALL_METHODS,
    EQUAL_N_MENU,
    K_MENU,
    PC_MENU,
    Q_MENU,
    SimConfig,
    TAU2_EXTENDED,
    TAU2_MENU,
    THETA_MENU,
    UNEQUAL_BASES,
    expand_sizes,
    read_raw_csv,
    run_sweep,
    write_raw_csv,
)
from .tau_interval import (
    bj_interval,
    jackson_interval,
    kd_interval,
    pl_interval,
    qp_interval,
)
from .tau_point import (
    dl_estimate,
    jackson_estimate,
    kd_estimate,
    mp_estimate,
    reml_estimate,
)

# user-facing method tokens are the roster tokens, lowercased
_TOKEN_BY_LOWER = {t.lower(): t for t in ALL_METHODS}

_ANALYZE_ORDER = (
    "DL", "MP", "REML", "J", "KD",
    "QP", "BJ", "J_ci", "PL", "KD_ci",
    "IV_DL", "IV_MP", "IV_REML", "IV_J", "IV_KD",
    "HKSJ_DL", "HKSJ_KD", "SSW", "SSW_KD",
)

_TABLE_COLUMNS = ("method", "tau2", "tau2_lo", "tau2_hi",
                  "theta", "theta_lo", "theta_hi")


def _parse_methods(spec: str | None) -> frozenset[str] | None:
    if spec is None:
        return None
    chosen = set()
    for raw in spec.split(","):
        token = raw.strip().lower()
        if not token:
            continue
        if token not in _TOKEN_BY_LOWER:
            raise ValueError(
                f"unknown method {raw.strip()!r}; choose from "
                f"{','.join(sorted(_TOKEN_BY_LOWER))}"
            )
        chosen.add(_TOKEN_BY_LOWER[token])
    if not chosen:
        raise ValueError("empty method list")
    return frozenset(chosen)


# ---------------------------------------------------------------- analyze

def _analyze_rows(tokens, std, alw, model):
    """One wide-table row per requested token; None cells = failed method."""
    memo: dict[str, object] = {}

    def tau_of(src):
        if src not in memo:
            if src == "KD":
                memo[src] = kd_estimate(alw, model)
            else:
                fn = {"DL": dl_estimate, "MP": mp_estimate,
                      "REML": reml_estimate, "J": jackson_estimate}[src]
                memo[src] = fn(std)
        return memo[src]

    tau_interval_fns = {
        "QP": lambda: qp_interval(std),
        "BJ": lambda: bj_interval(std),
        "J_ci": lambda: jackson_interval(std),
        "PL": lambda: pl_interval(std),
        "KD_ci": lambda: kd_interval(alw, model),
    }

    rows = []
    for token in _ANALYZE_ORDER:
        if token not in tokens:
            continue
        cells: dict[str, float] | None = {}
        try:
            if token in ("DL", "MP", "REML", "J", "KD"):
                cells["tau2"] = tau_of(token).value
            elif token in tau_interval_fns:
                ci = tau_interval_fns[token]()
                cells["tau2_lo"], cells["tau2_hi"] = ci.lower, ci.upper
            elif token.startswith("IV_"):
                src = token[3:]
                t = tau_of(src)
                sample = alw if src == "KD" else std
                cells["tau2"] = t.value
                cells["theta"] = iv_point(sample, t.value, method=token).value
                ci = iv_interval(sample, t.value, token)
                cells["theta_lo"], cells["theta_hi"] = ci.lower, ci.upper
            elif token.startswith("HKSJ_"):
                src = token[5:]
                t = tau_of(src)
                sample = alw if src == "KD" else std
                ci = hksj_interval(sample, t.value, token)
                cells["tau2"] = t.value
                cells["theta"] = ci.center
                cells["theta_lo"], cells["theta_hi"] = ci.lower, ci.upper
            elif token == "SSW":
                cells["theta"] = ssw_point(alw).value
            else:  # SSW_KD
                t = tau_of("KD")
                cells["tau2"] = t.value
                cells["theta"] = ssw_point(alw).value
                ci = ssw_interval(alw, t.value)
                cells["theta_lo"], cells["theta_hi"] = ci.lower, ci.upper
        except TooFewStudies:
            raise
        except Exception:
            cells = None
        rows.append((token, cells))
    return rows


def _cell_text(cells, col):
    if cells is None:
        return "NA"
    if col not in cells:
        return "-"
    return f"{cells[col]:.6g}"


def _cell_csv(cells, col):
    if cells is None:
        return "NA"
    if col not in cells:
        return ""
    return "%.17g" % cells[col]


def _cmd_analyze(args) -> int:
    try:
        _, tables = read_study_csv(args.input)
    except FileNotFoundError as exc:
        print(f"ormeta analyze: error: {exc}", file=sys.stderr)
        return 2
    except SchemaError as exc:
        print(f"ormeta analyze: error: {exc}", file=sys.stderr)
        return 2

    try:
        tokens = _parse_methods(args.methods) or frozenset(_ANALYZE_ORDER)
    except ValueError as exc:
        print(f"ormeta analyze: error: {exc}", file=sys.stderr)
        return 2

    policy = ZeroCellPolicy(args.policy)
    try:
        std = build_effect_sample(tables, policy, a=args.a)
        alw = build_effect_sample(tables, ZeroCellPolicy.ALWAYS_HALF, a=args.a)
    except TooFewStudies as exc:
        print(f"ormeta analyze: error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"ormeta analyze: error: {exc}", file=sys.stderr)
        return 2

    rows = _analyze_rows(tokens, std, alw, KDCorrected())

    excluded = len(tables) - std.k
    print(f"k={std.k} studies retained ({excluded} excluded)")
    table = [_TABLE_COLUMNS]
    for token, cells in rows:
        table.append((token,) + tuple(_cell_text(cells, c)
                                      for c in _TABLE_COLUMNS[1:]))
    widths = [max(len(r[i]) for r in table) for i in range(len(_TABLE_COLUMNS))]
    for r in table:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())

    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(_TABLE_COLUMNS) + "\n")
            for token, cells in rows:
                fh.write(",".join(
                    [token] + [_cell_csv(cells, c) for c in _TABLE_COLUMNS[1:]]
                ) + "\n")
        _write_manifest(args.out + ".manifest", [
            ("command", "analyze"),
            ("version", __version__),
            ("input", args.input),
            ("policy", args.policy),
            ("a", f"{args.a:g}"),
            ("methods", _methods_key(args.methods)),
            ("k_retained", str(std.k)),
            ("excluded", str(excluded)),
        ])
    return 0


# --------------------------------------------------------------- simulate

def _float_list(spec: str) -> list[float]:
    vals = [float(v) for v in spec.split(",") if v.strip() != ""]
    if not vals:
        raise ValueError("empty value list")
    return list(dict.fromkeys(vals))


def _int_list(spec: str) -> list[int]:
    vals = [int(v) for v in spec.split(",") if v.strip() != ""]
    if not vals:
        raise ValueError("empty value list")
    return list(dict.fromkeys(vals))


def _scheme_list(spec: str) -> list[str]:
    vals = [v.strip() for v in spec.split(",") if v.strip()]
    for v in vals:
        if v not in ("equal", "unequal"):
            raise ValueError(f"unknown size scheme {v!r}")
    if not vals:
        raise ValueError("empty scheme list")
    return list(dict.fromkeys(vals))


def _snap(values, menu):
    """Replace near-menu floats by the exact menu value (parse jitter guard)."""
    out = []
    for v in values:
        for m in menu:
            if math.isclose(v, m, rel_tol=0.0, abs_tol=1e-9):
                v = m
                break
        out.append(v)
    return out


def _fmt_vals(values):
    return ",".join(f"{v:g}" for v in values)


def _methods_key(spec: str | None) -> str:
    if spec is None:
        return "all"
    return ",".join(sorted(t.lower() for t in _parse_methods(spec)))


def _grid_error(msg: str) -> int:
    print(f"ormeta simulate: error: {msg} (pass --allow-custom to override "
          "menu checks)", file=sys.stderr)
    return 2


def _cmd_simulate(args) -> int:
    try:
        methods = _parse_methods(args.methods)
    except ValueError as exc:
        print(f"ormeta simulate: error: {exc}", file=sys.stderr)
        return 2

    tau2_menu = TAU2_MENU + TAU2_EXTENDED
    ks = args.k if args.k is not None else list(K_MENU)
    qs = _snap(args.q, Q_MENU) if args.q is not None else list(Q_MENU)
    thetas = (_snap(args.theta, THETA_MENU)
              if args.theta is not None else list(THETA_MENU))
    tau2s = (_snap(args.tau2, tau2_menu)
             if args.tau2 is not None else list(TAU2_MENU))
    pcs = _snap(args.pc, PC_MENU) if args.pc is not None else list(PC_MENU)

    if not args.allow_custom:
        for name, vals, menu in (
            ("--k", ks, K_MENU),
            ("--q", qs, Q_MENU),
            ("--theta", thetas, THETA_MENU),
            ("--tau2", tau2s, tau2_menu),
            ("--pc", pcs, PC_MENU),
        ):
            off = [v for v in vals if v not in menu]
            if off:
                return _grid_error(
                    f"{name} value(s) {_fmt_vals(off)} not on the design menu "
                    f"{_fmt_vals(menu)}"
                )

    # resolve (scheme, n) pairs; each scheme has its own size menu
    if args.scheme is not None:
        schemes = args.scheme
    elif args.n is not None:
        # infer: keep the schemes whose menu accepts every requested size
        schemes = [
            s for s in ("equal", "unequal")
            if all(n in (EQUAL_N_MENU if s == "equal" else tuple(UNEQUAL_BASES))
                   for n in args.n)
            or (args.allow_custom and s == "equal")
        ]
        if not schemes:
            return _grid_error(
                f"--n {_fmt_vals(args.n)} fits neither size menu "
                f"(equal: {_fmt_vals(EQUAL_N_MENU)}; unequal: "
                f"{_fmt_vals(sorted(UNEQUAL_BASES))}); pass --scheme explicitly"
            )
    else:
        schemes = ["equal", "unequal"]

    pairs = []
    for scheme in schemes:
        menu = EQUAL_N_MENU if scheme == "equal" else tuple(sorted(UNEQUAL_BASES))
        ns = args.n if args.n is not None else list(menu)
        for n in ns:
            if n not in menu:
                # the unequal engine only knows the fixed base sets
                if scheme == "unequal":
                    return _grid_error(
                        f"--n {n} has no unequal base set; choose from "
                        f"{_fmt_vals(sorted(UNEQUAL_BASES))}"
                    )
                if not args.allow_custom:
                    return _grid_error(
                        f"--n {n} not on the equal-size menu "
                        f"{_fmt_vals(EQUAL_N_MENU)}"
                    )
            pairs.append((scheme, n))

    if any(s == "unequal" for s, _ in pairs) and any(k % 5 for k in ks):
        return _grid_error(
            f"the unequal scheme tiles base sets of 5 studies; every --k "
            f"must be a multiple of 5, got {_fmt_vals(ks)}"
        )
    for name, vals in (("--q", qs), ("--pc", pcs)):
        bad = [v for v in vals if not 0.0 < v < 1.0]
        if bad:
            print(f"ormeta simulate: error: {name} value(s) {_fmt_vals(bad)} "
                  "must lie strictly between 0 and 1", file=sys.stderr)
            return 2
    try:
        # the per-study splits repeat with k, so k=5 checks every (n, q) combo
        for scheme, n in pairs:
            for q in qs:
                if any(n_t < 1 or n_c < 1 for n_t, n_c in
                       expand_sizes(scheme, n, 5, q)):
                    return _grid_error(
                        f"size n={n} with q={q:g} leaves an arm empty"
                    )
        grid = [
            SimConfig(k=k, size_scheme=scheme, n=n, q=q, theta=theta,
                      tau2=tau2, p_c=pc, replications=args.reps, seed=args.seed)
            for k in ks
            for scheme, n in pairs
            for q in qs
            for theta in thetas
            for tau2 in tau2s
            for pc in pcs
        ]
    except (ValueError, UnsupportedK) as exc:
        print(f"ormeta simulate: error: {exc}", file=sys.stderr)
        return 2

    n_rows = write_raw_csv(
        run_sweep(grid, estimator_set=methods, workers=args.workers), args.out
    )

    manifest = [
        ("command", "simulate"),
        ("version", __version__),
        ("seed", str(args.seed)),
        ("replications", str(args.reps)),
        ("k", _fmt_vals(ks)),
        ("scheme", ",".join(schemes)),
    ]
    for scheme in schemes:
        ns = sorted({n for s, n in pairs if s == scheme})
        manifest.append((f"n_{scheme}", _fmt_vals(ns)))
    manifest += [
        ("q", _fmt_vals(qs)),
        ("theta", _fmt_vals(thetas)),
        ("tau2", _fmt_vals(tau2s)),
        ("p_c", _fmt_vals(pcs)),
        ("methods", _methods_key(args.methods)),
        ("cells", str(len(grid))),
    ]
    _write_manifest(str(args.out) + ".manifest", manifest)
    print(f"{len(grid)} cells x {args.reps} replicates -> "
          f"{n_rows} records in {args.out}")
    return 0


# ----------------------------------------------------------------- report

def _cmd_report(args) -> int:
    try:
        records = read_raw_csv(args.raw)
        metrics = aggregate(records)
    except FileNotFoundError as exc:
        print(f"ormeta report: error: {exc}", file=sys.stderr)
        return 2
    except (SchemaError, EmptyCell) as exc:
        print(f"ormeta report: error: {exc}", file=sys.stderr)
        return 2

    paths = emit_panels(metrics, args.out_dir)
    if paths:
        _write_manifest(Path(args.out_dir) / "manifest.txt", [
            ("command", "report"),
            ("version", __version__),
            ("records", str(len(records))),
            ("metrics", str(len(metrics))),
            ("panels", str(len(paths))),
        ])
        print(f"wrote {len(paths)} panel files to {args.out_dir}")
    else:
        print("no metrics to report; no files written")
    return 0


# ------------------------------------------------------------------ shared

def _write_manifest(path, pairs):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for key, value in pairs:
            fh.write(f"{key}={value}\n")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ormeta",
        description="Random-effects meta-analysis of odds ratios: estimator "
                    "comparison on real data, simulation sweeps, and metric "
                    "aggregation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    pa = sub.add_parser(
        "analyze",
        help="run the estimator roster on a study-level CSV "
             "(header study_id,x_t,n_t,x_c,n_c)",
    )
    pa.add_argument("input", help="study CSV path")
    pa.add_argument("--methods", default=None,
                    help="comma-separated method tokens (default: all); "
                         "e.g. dl,mp,qp,iv_dl,ssw_kd")
    pa.add_argument("--policy", choices=[p.value for p in ZeroCellPolicy],
                    default=ZeroCellPolicy.STANDARD_HALF.value,
                    help="zero-cell policy for the classical lane; the "
                         "corrected-moment lane (KD, SSW) always adjusts "
                         "every table")
    pa.add_argument("--a", type=float, default=0.5,
                    help="continuity-correction constant (default 0.5)")
    pa.add_argument("--out", default=None, help="also write the table as CSV")
    pa.set_defaults(fn=_cmd_analyze)

    ps = sub.add_parser(
        "simulate",
        help="run a deterministic sweep over a factorial sub-grid",
    )
    ps.add_argument("--out", required=True, help="raw records CSV path")
    ps.add_argument("--k", type=_int_list, default=None,
                    help="study counts (comma list; default 5,10,30)")
    ps.add_argument("--scheme", type=_scheme_list, default=None,
                    help="size schemes: equal,unequal (default both)")
    ps.add_argument("--n", type=_int_list, default=None,
                    help="study sizes: totals for equal, mean sizes for "
                         "unequal (default: full menus)")
    ps.add_argument("--q", type=_float_list, default=None,
                    help="control-arm allocation fractions (default 0.5,0.75)")
    ps.add_argument("--theta", type=_float_list, default=None,
                    help="true log-odds-ratios (default 0,0.5,1,1.5,2)")
    ps.add_argument("--tau2", type=_float_list, default=None,
                    help="between-study variances (default 0,0.1,...,1)")
    ps.add_argument("--pc", type=_float_list, default=None,
                    help="control-arm risks (default 0.1,0.2,0.4)")
    ps.add_argument("--reps", type=int, default=10_000,
                    help="replicates per cell (default 10000)")
    ps.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    ps.add_argument("--workers", type=int, default=1,
                    help="worker processes; never changes the output bytes")
    ps.add_argument("--methods", default=None,
                    help="estimator tokens to run (default: all)")
    ps.add_argument("--allow-custom", action="store_true",
                    help="permit grid values outside the design menus")
    ps.set_defaults(fn=_cmd_simulate)

    pr = sub.add_parser(
        "report",
        help="aggregate a raw records CSV into figure-ready panel CSVs",
    )
    pr.add_argument("raw", help="raw records CSV from simulate")
    pr.add_argument("--out-dir", required=True, help="panel output directory")
    pr.set_defaults(fn=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
