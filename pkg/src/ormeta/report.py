"""Aggregation of raw sweep records into figure-ready metric tables.

Metrics per configuration cell and method: bias and coverage for tau2
and theta, MSE of theta, and the MSE ratio of the sample-size-weighted
estimator to an inverse-variance estimator (SSW/IV, in that order —
values below 1 favour SSW; the method column names the denominator).

NA records (estimator failures, degenerate replicates) are excluded and
surface through n_effective rather than disappearing.  Capped tau2
intervals (open upper end) count as covering any true value below the
cap.  Aggregation is permutation-invariant over input records, and panel
emission is byte-deterministic so re-runs can be diffed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyCell
from .simulate import (
    RawRecord,
    TAU2_INTERVAL_METHODS,
    TAU2_POINT_METHODS,
    THETA_INTERVAL_METHODS,
    THETA_POINT_METHODS,
)

METRICS = (
    "bias_tau2",
    "coverage_tau2",
    "bias_theta",
    "coverage_theta",
    "mse_theta",
    "mse_ratio_ssw_over_iv",
)

_TAU2_POINT_ORDER = tuple(m for _, m, _ in TAU2_POINT_METHODS)
_TAU2_INT_ORDER = tuple(m for _, m, _ in TAU2_INTERVAL_METHODS)
_THETA_POINT_ORDER = tuple(m for _, m, _ in THETA_POINT_METHODS)
_THETA_INT_ORDER = tuple(m for _, m, _ in THETA_INTERVAL_METHODS)
_RATIO_ORDER = ("IV_MP", "IV_KD")

_METHOD_RANK = {
    m: i
    for i, m in enumerate(
        dict.fromkeys(
            _TAU2_POINT_ORDER
            + _TAU2_INT_ORDER
            + _THETA_POINT_ORDER
            + _THETA_INT_ORDER
        )
    )
}

_USABLE = frozenset(("ok", "open_upper", "not_converged"))


@dataclass(frozen=True)
class MetricRecord:
    k: int
    size_scheme: str
    n: int
    q: float
    theta: float
    tau2: float
    p_c: float
    method: str
    metric: str
    value: float
    mc_se: float
    n_effective: int


def _mean_se(values: np.ndarray) -> float:
    if values.size < 2:
        return math.nan
    return float(values.std(ddof=1) / math.sqrt(values.size))


def _prop_se(p: float, n: int) -> float:
    return float(math.sqrt(p * (1.0 - p) / n))


class _Cell:
    """Accumulator for one configuration cell."""

    def __init__(self):
        self.t2_point: dict[str, dict[int, float]] = {}
        self.t2_int: dict[str, dict[int, list]] = {}
        self.th_point: dict[str, dict[int, float]] = {}
        self.th_int: dict[str, dict[int, list]] = {}
        self.usable = 0
        self.seen = 0

    def add(self, r: RawRecord):
        self.seen += 1
        if r.status not in _USABLE or r.value is None:
            return
        self.usable += 1
        if r.quantity == "tau2_point":
            self.t2_point.setdefault(r.method, {})[r.rep] = r.value
        elif r.quantity in ("tau2_lo", "tau2_hi"):
            slot = self.t2_int.setdefault(r.method, {}).setdefault(
                r.rep, [None, None, False]
            )
            if r.quantity == "tau2_lo":
                slot[0] = r.value
            else:
                slot[1] = r.value
                slot[2] = r.status == "open_upper"
        elif r.quantity == "theta_point":
            self.th_point.setdefault(r.method, {})[r.rep] = r.value
        elif r.quantity in ("theta_lo", "theta_hi"):
            slot = self.th_int.setdefault(r.method, {}).setdefault(r.rep, [None, None])
            slot[0 if r.quantity == "theta_lo" else 1] = r.value


def aggregate(records: Iterable[RawRecord]) -> list[MetricRecord]:
    """Reduce raw records to one MetricRecord per (cell, metric, method)."""
    cells: dict[tuple, _Cell] = {}
    for r in records:
        key = (r.k, r.size_scheme, r.n, r.q, r.theta, r.tau2, r.p_c)
        cells.setdefault(key, _Cell()).add(r)

    out: list[MetricRecord] = []
    for key in sorted(cells):
        cell = cells[key]
        k, scheme, n, q, theta, tau2, p_c = key
        if cell.usable == 0:
            raise EmptyCell(
                f"configuration k={k} scheme={scheme} n={n} q={q} theta={theta} "
                f"tau2={tau2} p_c={p_c} has zero usable replicates"
            )

        def emit(method, metric, value, mc_se, n_eff):
            out.append(
                MetricRecord(
                    k, scheme, n, q, theta, tau2, p_c,
                    method, metric, float(value), float(mc_se), n_eff,
                )
            )

        for method in _TAU2_POINT_ORDER:
            per_rep = cell.t2_point.get(method)
            if not per_rep:
                continue
            v = np.fromiter(per_rep.values(), dtype=float)
            emit(method, "bias_tau2", v.mean() - tau2, _mean_se(v), v.size)

        for method in _TAU2_INT_ORDER:
            per_rep = cell.t2_int.get(method)
            if not per_rep:
                continue
            flags = [
                lo <= tau2 and (open_up or tau2 <= hi)
                for lo, hi, open_up in per_rep.values()
                if lo is not None and hi is not None
            ]
            if not flags:
                continue
            p = sum(flags) / len(flags)
            emit(method, "coverage_tau2", p, _prop_se(p, len(flags)), len(flags))

        for method in _THETA_POINT_ORDER:
            per_rep = cell.th_point.get(method)
            if not per_rep:
                continue
            v = np.fromiter(per_rep.values(), dtype=float)
            emit(method, "bias_theta", v.mean() - theta, _mean_se(v), v.size)

        for method in _THETA_INT_ORDER:
            per_rep = cell.th_int.get(method)
            if not per_rep:
                continue
            flags = [
                lo <= theta <= hi
                for lo, hi in per_rep.values()
                if lo is not None and hi is not None
            ]
            if not flags:
                continue
            p = sum(flags) / len(flags)
            emit(method, "coverage_theta", p, _prop_se(p, len(flags)), len(flags))

        for method in _THETA_POINT_ORDER:
            per_rep = cell.th_point.get(method)
            if not per_rep:
                continue
            sq = np.fromiter(
                ((v - theta) ** 2 for v in per_rep.values()), dtype=float
            )
            emit(method, "mse_theta", sq.mean(), _mean_se(sq), sq.size)

        ssw = cell.th_point.get("SSW")
        if ssw:
            for method in _RATIO_ORDER:
                iv = cell.th_point.get(method)
                if not iv:
                    continue
                common = sorted(ssw.keys() & iv.keys())
                if not common:
                    continue
                a = np.array([(ssw[r] - theta) ** 2 for r in common])
                b = np.array([(iv[r] - theta) ** 2 for r in common])
                ratio = a.mean() / b.mean()
                n_c = len(common)
                if n_c < 2:
                    se = math.nan
                else:
                    # delta method for a ratio of means, with covariance
                    va = a.var(ddof=1)
                    vb = b.var(ddof=1)
                    cab = float(np.cov(a, b, ddof=1)[0, 1])
                    am, bm = a.mean(), b.mean()
                    var_r = (
                        va / bm**2
                        + am**2 * vb / bm**4
                        - 2.0 * am * cab / bm**3
                    ) / n_c
                    se = math.sqrt(max(var_r, 0.0))
                emit(method, "mse_ratio_ssw_over_iv", ratio, se, n_c)

    return out


_PANEL_PREFIX = {
    "bias_tau2": "biasTau",
    "coverage_tau2": "covTau",
    "bias_theta": "biasTheta",
    "coverage_theta": "covTheta",
    "mse_theta": "mseTheta",
    "mse_ratio_ssw_over_iv": "mseRatio",
}

PANEL_HEADER = ("k", "n", "tau2", "method", "value", "mc_se")


def _label(x: float) -> str:
    return f"{x:g}".replace(".", "")


def panel_filename(metric: str, p_c: float, theta: float, q: float, scheme: str) -> str:
    return (
        f"{_PANEL_PREFIX[metric]}_pc{_label(p_c)}_theta{_label(theta)}"
        f"_q{_label(q)}_{scheme}.csv"
    )


def emit_panels(metrics: Sequence[MetricRecord], out_dir) -> list[Path]:
    """Write one CSV per (metric, p_c, theta, q, scheme) figure key.

    Rows are (k, n, tau2, method, value, mc_se) in a fixed sort order;
    re-emission of the same metrics is byte-identical.
    """
    groups: dict[str, list[MetricRecord]] = {}
    for m in metrics:
        name = panel_filename(m.metric, m.p_c, m.theta, m.q, m.size_scheme)
        groups.setdefault(name, []).append(m)
    if not groups:
        return []
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(groups):
        rows = sorted(
            groups[name], key=lambda m: (m.k, m.n, m.tau2, _METHOD_RANK[m.method])
        )
        path = out_dir / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(PANEL_HEADER) + "\n")
            for m in rows:
                fh.write(
                    f"{m.k},{m.n},{'%.17g' % m.tau2},{m.method},"
                    f"{'%.17g' % m.value},{'%.17g' % m.mc_se}\n"
                )
        written.append(path)
    return written
