"""Study-level data handling for 2x2 tables.

Turns raw event counts into per-study log-odds-ratios, their large-sample
variances, and effective sample sizes, applying a continuity-correction
policy for zero cells.  Tables where both arms contribute a zero cell in the
same row (no events anywhere, or events everywhere) leave the odds ratio
unidentified and are excluded.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import SchemaError, TooFewStudies

__all__ = [
    "StudyTable",
    "ZeroCellPolicy",
    "AdjustedProportions",
    "EffectSample",
    "adjust_table",
    "log_odds_ratio",
    "lor_variance",
    "build_effect_sample",
    "read_study_csv",
]


@dataclass(frozen=True)
class StudyTable:
    """Raw 2x2 counts for one study.

    Attributes
    ----------
    x_t, n_t : int
        Event count and arm size in the treatment arm.
    x_c, n_c : int
        Event count and arm size in the control arm.
    """

    x_t: int
    n_t: int
    x_c: int
    n_c: int

    def __post_init__(self):
        if self.n_t < 1 or self.n_c < 1:
            raise ValueError(f"arm sizes must be >= 1, got n_t={self.n_t}, n_c={self.n_c}")
        if not (0 <= self.x_t <= self.n_t):
            raise ValueError(f"need 0 <= x_t <= n_t, got x_t={self.x_t}, n_t={self.n_t}")
        if not (0 <= self.x_c <= self.n_c):
            raise ValueError(f"need 0 <= x_c <= n_c, got x_c={self.x_c}, n_c={self.n_c}")

    @property
    def is_double_zero(self) -> bool:
        """True when both arms contribute a zero cell in the same row."""
        return (self.x_t == 0 and self.x_c == 0) or (
            self.x_t == self.n_t and self.x_c == self.n_c
        )

    @property
    def has_zero_cell(self) -> bool:
        """True when any of the four cells of the table is zero."""
        return self.x_t in (0, self.n_t) or self.x_c in (0, self.n_c)

    @property
    def n_tilde(self) -> float:
        """Effective sample size n_t * n_c / (n_t + n_c)."""
        return self.n_t * self.n_c / (self.n_t + self.n_c)


class ZeroCellPolicy(Enum):
    """Continuity-correction policy for zero cells.

    STANDARD_HALF adds the correction to all cells of a table only when the
    table contains at least one zero cell; otherwise the plain maximum-
    likelihood proportions x/n are used.  ALWAYS_HALF applies the correction
    to every table unconditionally.  Both policies exclude double-zero
    tables.
    """

    STANDARD_HALF = "standard_half"
    ALWAYS_HALF = "always_half"


@dataclass(frozen=True)
class AdjustedProportions:
    """Adjusted event proportions and the denominators that produced them."""

    p_t: float
    p_c: float
    n_t_adj: float
    n_c_adj: float


def adjust_table(
    table: StudyTable, policy: ZeroCellPolicy, a: float = 0.5
) -> AdjustedProportions | None:
    """Apply a zero-cell policy to one table.

    Parameters
    ----------
    table : StudyTable
        Raw counts.
    policy : ZeroCellPolicy
        Correction policy.
    a : float
        Correction constant added to each cell (default 1/2).

    Returns
    -------
    AdjustedProportions or None
        Adjusted proportions together with the adjusted denominators used to
        form them, or None when the table is double-zero and excluded.

    Notes
    -----
    Under ALWAYS_HALF every proportion is (x + a)/(n + 2a).  Under
    STANDARD_HALF the same adjustment is applied only if the table has at
    least one zero cell; otherwise the proportions are the unadjusted x/n.
    """
    if a <= 0:
        raise ValueError(f"correction constant must be positive, got a={a}")
    if table.is_double_zero:
        return None
    if policy is ZeroCellPolicy.ALWAYS_HALF or table.has_zero_cell:
        n_t_adj = table.n_t + 2.0 * a
        n_c_adj = table.n_c + 2.0 * a
        return AdjustedProportions(
            p_t=(table.x_t + a) / n_t_adj,
            p_c=(table.x_c + a) / n_c_adj,
            n_t_adj=n_t_adj,
            n_c_adj=n_c_adj,
        )
    return AdjustedProportions(
        p_t=table.x_t / table.n_t,
        p_c=table.x_c / table.n_c,
        n_t_adj=float(table.n_t),
        n_c_adj=float(table.n_c),
    )


def log_odds_ratio(p_t: float, p_c: float) -> float:
    """Log-odds-ratio log[p_t (1-p_c) / (p_c (1-p_t))].

    Both proportions must lie strictly inside (0, 1); adjusted proportions
    from :func:`adjust_table` always do for non-excluded tables.
    """
    if not (0.0 < p_t < 1.0 and 0.0 < p_c < 1.0):
        raise ValueError(f"proportions must be in (0, 1), got p_t={p_t}, p_c={p_c}")
    return math.log(p_t / (1.0 - p_t)) - math.log(p_c / (1.0 - p_c))


def lor_variance(p_t: float, n_t_adj: float, p_c: float, n_c_adj: float) -> float:
    """Delta-method variance of the log-odds-ratio.

    1/(n_t p_t (1-p_t)) + 1/(n_c p_c (1-p_c)), where the denominators are the
    same (possibly adjusted) arm sizes used to form the proportions.
    """
    return 1.0 / (n_t_adj * p_t * (1.0 - p_t)) + 1.0 / (n_c_adj * p_c * (1.0 - p_c))


@dataclass(frozen=True)
class EffectSample:
    """Per-study effect estimates for the retained studies of one meta-analysis.

    Attributes
    ----------
    theta_hat : ndarray
        Study log-odds-ratios.
    sigma2_hat : ndarray
        Estimated variances of ``theta_hat``.
    n_tilde : ndarray or None
        Effective sample sizes n_t n_c / (n_t + n_c); None when the sample
        was built from effect summaries without arm sizes.
    p_t_hat, p_c_hat : ndarray or None
        Adjusted event proportions per arm (the complementary non-event
        proportions are 1 minus these).
    n_t, n_c : ndarray or None
        Raw arm sizes.
    n_t_adj, n_c_adj : ndarray or None
        Denominators used for the adjusted proportions and variances.
    policy : ZeroCellPolicy or None
        Policy the sample was built under.
    a : float
        Correction constant used.
    """

    theta_hat: np.ndarray
    sigma2_hat: np.ndarray
    n_tilde: np.ndarray | None = None
    p_t_hat: np.ndarray | None = None
    p_c_hat: np.ndarray | None = None
    n_t: np.ndarray | None = None
    n_c: np.ndarray | None = None
    n_t_adj: np.ndarray | None = None
    n_c_adj: np.ndarray | None = None
    policy: ZeroCellPolicy | None = None
    a: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "theta_hat", np.asarray(self.theta_hat, dtype=float))
        object.__setattr__(self, "sigma2_hat", np.asarray(self.sigma2_hat, dtype=float))
        if self.theta_hat.shape != self.sigma2_hat.shape:
            raise ValueError("theta_hat and sigma2_hat must have matching shapes")
        if self.k < 2:
            raise TooFewStudies(f"need at least 2 studies, got {self.k}")
        if np.any(self.sigma2_hat <= 0.0):
            raise ValueError("every sigma2_hat must be positive")
        if self.n_tilde is not None:
            object.__setattr__(self, "n_tilde", np.asarray(self.n_tilde, dtype=float))

    @property
    def k(self) -> int:
        """Number of retained studies."""
        return self.theta_hat.size

    @classmethod
    def from_summaries(
        cls, theta_hat, sigma2_hat, n_tilde=None
    ) -> "EffectSample":
        """Build a sample directly from effect summaries.

        Useful for synthetic data where the study effects and their
        variances are given rather than derived from 2x2 tables.  Samples
        built this way cannot feed the table-based moment corrections.
        """
        return cls(theta_hat=theta_hat, sigma2_hat=sigma2_hat, n_tilde=n_tilde)

    @property
    def has_tables(self) -> bool:
        """True when table-level detail (proportions, arm sizes) is present."""
        return self.p_c_hat is not None


def build_effect_sample(
    tables: list[StudyTable], policy: ZeroCellPolicy, a: float = 0.5
) -> EffectSample:
    """Derive an :class:`EffectSample` from raw tables under a policy.

    Double-zero tables are excluded; the order of the retained studies is
    preserved.  Raises :class:`TooFewStudies` when fewer than two studies
    survive exclusion.
    """
    theta, sigma2, n_tilde = [], [], []
    p_t, p_c, n_t, n_c, n_t_adj, n_c_adj = [], [], [], [], [], []
    for t in tables:
        adj = adjust_table(t, policy, a)
        if adj is None:
            continue
        theta.append(log_odds_ratio(adj.p_t, adj.p_c))
        sigma2.append(lor_variance(adj.p_t, adj.n_t_adj, adj.p_c, adj.n_c_adj))
        n_tilde.append(t.n_tilde)
        p_t.append(adj.p_t)
        p_c.append(adj.p_c)
        n_t.append(t.n_t)
        n_c.append(t.n_c)
        n_t_adj.append(adj.n_t_adj)
        n_c_adj.append(adj.n_c_adj)
    if len(theta) < 2:
        raise TooFewStudies(
            f"only {len(theta)} studies remain after double-zero exclusion"
        )
    return EffectSample(
        theta_hat=np.array(theta),
        sigma2_hat=np.array(sigma2),
        n_tilde=np.array(n_tilde),
        p_t_hat=np.array(p_t),
        p_c_hat=np.array(p_c),
        n_t=np.array(n_t, dtype=np.int64),
        n_c=np.array(n_c, dtype=np.int64),
        n_t_adj=np.array(n_t_adj),
        n_c_adj=np.array(n_c_adj),
        policy=policy,
        a=a,
    )


_CSV_HEADER = ["study_id", "x_t", "n_t", "x_c", "n_c"]


def read_study_csv(path: str) -> tuple[list[str], list[StudyTable]]:
    """Read study tables from a CSV file.

    The file must start with the header ``study_id,x_t,n_t,x_c,n_c`` and
    contain one integer row per study.  Returns the study ids and tables in
    file order.  Raises :class:`SchemaError` with a line number on any
    malformed content.
    """
    ids: list[str] = []
    tables: list[StudyTable] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected header "
                              f"{','.join(_CSV_HEADER)}") from None
        if [h.strip() for h in header] != _CSV_HEADER:
            raise SchemaError(
                f"{path}:1: bad header {','.join(header)!r}, "
                f"expected {','.join(_CSV_HEADER)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 5:
                raise SchemaError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                counts = [int(v) for v in row[1:]]
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: non-integer count: {exc}") from None
            try:
                tables.append(StudyTable(*counts))
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
            ids.append(row[0].strip())
    return ids, tables
