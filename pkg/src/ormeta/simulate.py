"""Deterministic Monte Carlo engine for the factorial simulation design.

Meta-analyses of 2x2 tables are generated on a grid over number of
studies, study sizes (equal, or unequal following fixed base sets with
skewness 1.464), control-arm allocation, overall log-odds-ratio,
between-study variance, and control-arm risk.  True study effects are
normal around theta with variance tau2; arm counts are binomial.

Reproducibility contract: every replicate draws from its own
counter-based stream keyed on (seed, design hash, replicate index), so
any single replicate can be regenerated in isolation and sharding the
sweep across workers can never change the output.

The sweep runs each estimator on the zero-cell policy it was designed
for: the classical tau2/theta machinery (DL, REML, MP, J and their
intervals, HKSJ_DL) sees tables adjusted only when a zero cell occurs,
while the corrected-moment family (KD point/interval, IV_KD, HKSJ_KD,
SSW and SSW_KD) sees always-adjusted tables.  Per-replicate estimator
failures become NA records with a reason code; they never abort a sweep.
"""

from __future__ import annotations

import csv
import hashlib
import math
import multiprocessing
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np
from scipy import special

from .data import StudyTable, ZeroCellPolicy, build_effect_sample
from .effects import hksj_interval, iv_interval, iv_point, ssw_interval, ssw_point
from .errors import SchemaError, TooFewStudies, UnsupportedK
from .qstats import KDCorrected, QMomentModel
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

# design menus
K_MENU = (5, 10, 30)
EQUAL_N_MENU = (40, 100, 250, 1000)
UNEQUAL_BASES = {
    30: (12, 16, 18, 20, 84),
    60: (24, 32, 36, 40, 168),
    100: (64, 72, 76, 80, 208),
    160: (124, 132, 136, 140, 268),
}
Q_MENU = (0.5, 0.75)
THETA_MENU = (0.0, 0.5, 1.0, 1.5, 2.0)
TAU2_MENU = tuple(round(i / 10, 10) for i in range(11))
TAU2_EXTENDED = tuple(float(i) for i in range(2, 11))
PC_MENU = (0.1, 0.2, 0.4)

_STD = ZeroCellPolicy.STANDARD_HALF.value
_ALW = ZeroCellPolicy.ALWAYS_HALF.value

# canonical roster: (selection token, method label, policy) per quantity
# group, in emission order.  Tokens are distinct across groups so a sweep
# can request, say, the J point estimator without the J interval; the
# method label is what lands in the records (where the quantity column
# already disambiguates).
TAU2_POINT_METHODS = (
    ("DL", "DL", _STD),
    ("MP", "MP", _STD),
    ("REML", "REML", _STD),
    ("J", "J", _STD),
    ("KD", "KD", _ALW),
)
TAU2_INTERVAL_METHODS = (
    ("QP", "QP", _STD),
    ("BJ", "BJ", _STD),
    ("J_ci", "J", _STD),
    ("PL", "PL", _STD),
    ("KD_ci", "KD", _ALW),
)
THETA_POINT_METHODS = (
    ("IV_DL", "IV_DL", _STD),
    ("IV_MP", "IV_MP", _STD),
    ("IV_REML", "IV_REML", _STD),
    ("IV_J", "IV_J", _STD),
    ("IV_KD", "IV_KD", _ALW),
    ("SSW", "SSW", _ALW),
)
THETA_INTERVAL_METHODS = (
    ("IV_DL", "IV_DL", _STD),
    ("IV_MP", "IV_MP", _STD),
    ("IV_REML", "IV_REML", _STD),
    ("IV_J", "IV_J", _STD),
    ("IV_KD", "IV_KD", _ALW),
    ("HKSJ_DL", "HKSJ_DL", _STD),
    ("HKSJ_KD", "HKSJ_KD", _ALW),
    ("SSW_KD", "SSW_KD", _ALW),
)
ALL_METHODS = frozenset(
    token
    for group in (
        TAU2_POINT_METHODS,
        TAU2_INTERVAL_METHODS,
        THETA_POINT_METHODS,
        THETA_INTERVAL_METHODS,
    )
    for token, _, _ in group
)

RAW_HEADER = (
    "k",
    "size_scheme",
    "n",
    "q",
    "theta",
    "tau2",
    "p_c",
    "policy",
    "rep",
    "method",
    "quantity",
    "value",
    "status",
)


@dataclass(frozen=True)
class SimConfig:
    k: int
    size_scheme: str
    n: int
    q: float
    theta: float
    tau2: float
    p_c: float
    replications: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.size_scheme not in ("equal", "unequal"):
            raise ValueError(f"unknown size_scheme {self.size_scheme!r}")
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if not 0.0 < self.q < 1.0:
            raise ValueError("q must lie strictly between 0 and 1")
        if not 0.0 < self.p_c < 1.0:
            raise ValueError("p_c must lie strictly between 0 and 1")
        if self.tau2 < 0.0:
            raise ValueError("tau2 must be nonnegative")
        if self.replications < 1:
            raise ValueError("replications must be positive")

    def design_key(self) -> str:
        """Canonical string for the six design parameters (hash input).

        Deliberately excludes replications and seed, so extending a run
        keeps all earlier replicates bit-identical.
        """
        return (
            f"k={self.k};scheme={self.size_scheme};n={self.n};q={self.q!r};"
            f"theta={self.theta!r};tau2={self.tau2!r};pc={self.p_c!r}"
        )


@dataclass(frozen=True)
class MetaSample:
    tables: tuple[StudyTable, ...]
    theta_i: np.ndarray

    @property
    def k(self) -> int:
        return len(self.tables)


class RawRecord(NamedTuple):
    k: int
    size_scheme: str
    n: int
    q: float
    theta: float
    tau2: float
    p_c: float
    policy: str
    rep: int
    method: str
    quantity: str
    value: float | None
    status: str


def expand_sizes(size_scheme: str, n: int, k: int, q: float) -> list[tuple[int, int]]:
    """Per-study (n_t, n_c) pairs for a configuration.

    Equal scheme: k studies of total size n.  Unequal scheme: the fixed
    base set for mean size n, tiled k/5 times.  Each total is split as
    n_t = ceil((1-q)*n_i), n_c = n_i - n_t.
    """
    if size_scheme == "unequal":
        base = UNEQUAL_BASES.get(n)
        if base is None:
            raise ValueError(
                f"no unequal base set for mean size {n}; choose from "
                f"{sorted(UNEQUAL_BASES)}"
            )
        if k % 5 != 0:
            raise UnsupportedK(
                f"unequal sizes tile a base set of 5 studies; k={k} is not a multiple of 5"
            )
        totals = base * (k // 5)
    else:
        totals = (n,) * k
    out = []
    for total in totals:
        n_t = math.ceil(round((1.0 - q) * total, 12))
        out.append((n_t, total - n_t))
    return out


def treatment_prob(p_c, theta_i):
    """Treatment-arm event probability with log-odds-ratio theta_i."""
    return special.expit(special.logit(p_c) + theta_i)


def _config_hash(cfg: SimConfig) -> int:
    digest = hashlib.blake2b(cfg.design_key().encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _replicate_rng(cfg: SimConfig, rep_index: int) -> np.random.Generator:
    key = np.array([cfg.seed, _config_hash(cfg)], dtype=np.uint64)
    bitgen = np.random.Philox(counter=[0, 0, rep_index, 0], key=key)
    return np.random.Generator(bitgen)


def generate_meta_sample(cfg: SimConfig, rep_index: int) -> MetaSample:
    """One synthetic meta-analysis; bit-identical for fixed (cfg, rep)."""
    sizes = expand_sizes(cfg.size_scheme, cfg.n, cfg.k, cfg.q)
    rng = _replicate_rng(cfg, rep_index)
    theta_i = rng.normal(cfg.theta, math.sqrt(cfg.tau2), cfg.k)
    n_t = np.array([s[0] for s in sizes])
    n_c = np.array([s[1] for s in sizes])
    x_c = rng.binomial(n_c, cfg.p_c)
    x_t = rng.binomial(n_t, treatment_prob(cfg.p_c, theta_i))
    tables = tuple(
        StudyTable(int(xt), int(nt), int(xc), int(nc))
        for xt, nt, xc, nc in zip(x_t, n_t, x_c, n_c)
    )
    return MetaSample(tables, theta_i)


def _na_records(cfg: SimConfig, rep: int, methods: frozenset, status: str):
    recs = []

    def add(method, policy, quantity):
        recs.append(
            RawRecord(
                cfg.k, cfg.size_scheme, cfg.n, cfg.q, cfg.theta, cfg.tau2,
                cfg.p_c, policy, rep, method, quantity, None, status,
            )
        )

    for token, m, pol in TAU2_POINT_METHODS:
        if token in methods:
            add(m, pol, "tau2_point")
    for token, m, pol in TAU2_INTERVAL_METHODS:
        if token in methods:
            add(m, pol, "tau2_lo")
            add(m, pol, "tau2_hi")
    for token, m, pol in THETA_POINT_METHODS:
        if token in methods:
            add(m, pol, "theta_point")
    for token, m, pol in THETA_INTERVAL_METHODS:
        if token in methods:
            add(m, pol, "theta_lo")
            add(m, pol, "theta_hi")
    return recs


def _one_replicate(
    cfg: SimConfig, rep: int, methods: frozenset, model: QMomentModel
) -> list[RawRecord]:
    meta = generate_meta_sample(cfg, rep)
    try:
        std = build_effect_sample(meta.tables, ZeroCellPolicy.STANDARD_HALF)
        alw = build_effect_sample(meta.tables, ZeroCellPolicy.ALWAYS_HALF)
    except TooFewStudies:
        return _na_records(cfg, rep, methods, "too_few_studies")

    recs: list[RawRecord] = []

    def add(method, policy, quantity, value, status):
        recs.append(
            RawRecord(
                cfg.k, cfg.size_scheme, cfg.n, cfg.q, cfg.theta, cfg.tau2,
                cfg.p_c, policy, rep, method, quantity, value, status,
            )
        )

    # tau2 point estimates, memoized because the theta estimators reuse them
    tau_memo: dict[str, tuple[str, object]] = {}

    def tau_est(tag):
        if tag not in tau_memo:
            try:
                if tag == "DL":
                    est = dl_estimate(std)
                elif tag == "MP":
                    est = mp_estimate(std)
                elif tag == "REML":
                    est = reml_estimate(std)
                elif tag == "J":
                    est = jackson_estimate(std)
                else:
                    est = kd_estimate(alw, model)
                tau_memo[tag] = ("ok", est)
            except Exception as exc:  # record the failure, keep sweeping
                tau_memo[tag] = ("err", exc)
        return tau_memo[tag]

    for token, tag, pol in TAU2_POINT_METHODS:
        if token not in methods:
            continue
        state, est = tau_est(tag)
        if state == "ok":
            add(tag, pol, "tau2_point", est.value,
                "ok" if est.converged else "not_converged")
        else:
            add(tag, pol, "tau2_point", None, f"error:{type(est).__name__}")

    interval_fns = {
        "QP": lambda: qp_interval(std),
        "BJ": lambda: bj_interval(std),
        "J_ci": lambda: jackson_interval(std),
        "PL": lambda: pl_interval(std),
        "KD_ci": lambda: kd_interval(alw, model),
    }
    for token, tag, pol in TAU2_INTERVAL_METHODS:
        if token not in methods:
            continue
        try:
            ci = interval_fns[token]()
            add(tag, pol, "tau2_lo", ci.lower, "ok")
            add(tag, pol, "tau2_hi", ci.upper,
                "open_upper" if ci.open_upper else "ok")
        except Exception as exc:
            reason = f"error:{type(exc).__name__}"
            add(tag, pol, "tau2_lo", None, reason)
            add(tag, pol, "tau2_hi", None, reason)

    def theta_point_of(tag):
        if tag == "SSW":
            return ssw_point(alw)
        src = tag[3:]  # IV_DL -> DL
        state, est = tau_est(src)
        if state != "ok":
            raise est
        sample = alw if src == "KD" else std
        return iv_point(sample, est.value, method=tag)

    for token, tag, pol in THETA_POINT_METHODS:
        if token not in methods:
            continue
        try:
            est = theta_point_of(tag)
            add(tag, pol, "theta_point", est.value, "ok")
        except Exception as exc:
            add(tag, pol, "theta_point", None, f"error:{type(exc).__name__}")

    def theta_interval_of(tag):
        if tag == "SSW_KD":
            state, est = tau_est("KD")
            if state != "ok":
                raise est
            return ssw_interval(alw, est.value)
        if tag.startswith("HKSJ"):
            src = tag[5:]
            state, est = tau_est(src)
            if state != "ok":
                raise est
            sample = alw if src == "KD" else std
            return hksj_interval(sample, est.value, tag)
        src = tag[3:]
        state, est = tau_est(src)
        if state != "ok":
            raise est
        sample = alw if src == "KD" else std
        return iv_interval(sample, est.value, tag)

    for token, tag, pol in THETA_INTERVAL_METHODS:
        if token not in methods:
            continue
        try:
            ci = theta_interval_of(tag)
            add(tag, pol, "theta_lo", ci.lower, "ok")
            add(tag, pol, "theta_hi", ci.upper, "ok")
        except Exception as exc:
            reason = f"error:{type(exc).__name__}"
            add(tag, pol, "theta_lo", None, reason)
            add(tag, pol, "theta_hi", None, reason)

    return recs


def _run_chunk(args) -> list[RawRecord]:
    cfg, rep_lo, rep_hi, methods, model = args
    out: list[RawRecord] = []
    for rep in range(rep_lo, rep_hi):
        out.extend(_one_replicate(cfg, rep, methods, model))
    return out


def run_sweep(
    grid: Sequence[SimConfig],
    estimator_set: Iterable[str] | None = None,
    workers: int = 1,
    model: QMomentModel | None = None,
    chunk_size: int = 200,
) -> Iterator[RawRecord]:
    """Stream raw records for every config x replicate x method x quantity.

    Output order is canonical — grid order, then replicate, then the
    fixed method/quantity roster — for any worker count.
    """
    if not grid:
        raise ValueError("empty simulation grid")
    methods = frozenset(estimator_set) if estimator_set is not None else ALL_METHODS
    unknown = methods - ALL_METHODS
    if unknown:
        raise ValueError(f"unknown estimator tokens: {sorted(unknown)}")
    if model is None:
        model = KDCorrected()
    tasks = [
        (cfg, lo, min(lo + chunk_size, cfg.replications), methods, model)
        for cfg in grid
        for lo in range(0, cfg.replications, chunk_size)
    ]
    if workers <= 1:
        for task in tasks:
            yield from _run_chunk(task)
    else:
        with multiprocessing.Pool(processes=workers) as pool:
            for out in pool.imap(_run_chunk, tasks):
                yield from out


def _fmt(x: float) -> str:
    return "%.17g" % x


def write_raw_csv(records: Iterable[RawRecord], path) -> int:
    """Write records as CSV; returns the number of data rows written."""
    count = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(RAW_HEADER) + "\n")
        for r in records:
            fh.write(
                ",".join(
                    (
                        str(r.k),
                        r.size_scheme,
                        str(r.n),
                        _fmt(r.q),
                        _fmt(r.theta),
                        _fmt(r.tau2),
                        _fmt(r.p_c),
                        r.policy,
                        str(r.rep),
                        r.method,
                        r.quantity,
                        "" if r.value is None else _fmt(r.value),
                        r.status,
                    )
                )
                + "\n"
            )
            count += 1
    return count


def read_raw_csv(path) -> list[RawRecord]:
    """Read a raw records CSV, validating the schema."""
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if tuple(header) != RAW_HEADER:
            raise SchemaError(
                f"{path}: bad header {header!r}; expected {','.join(RAW_HEADER)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(RAW_HEADER):
                raise SchemaError(
                    f"{path}:{lineno}: expected {len(RAW_HEADER)} fields, got {len(row)}"
                )
            try:
                records.append(
                    RawRecord(
                        int(row[0]),
                        row[1],
                        int(row[2]),
                        float(row[3]),
                        float(row[4]),
                        float(row[5]),
                        float(row[6]),
                        row[7],
                        int(row[8]),
                        row[9],
                        row[10],
                        None if row[11] == "" else float(row[11]),
                        row[12],
                    )
                )
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
    return records
