"""Random-effects meta-analysis of odds ratios.

Point and interval estimation of the between-study variance and the overall
log-odds-ratio, a corrected-moment machinery for Cochran-type Q statistics,
and a deterministic Monte Carlo harness for coverage/bias studies.
"""

__version__ = "0.1.0"

from .data import (
    EffectSample,
    StudyTable,
    ZeroCellPolicy,
    adjust_table,
    build_effect_sample,
    log_odds_ratio,
    lor_variance,
    read_study_csv,
)
from .errors import (
    BootstrapFailure,
    EmptyCell,
    NonConvergence,
    OrmetaError,
    SchemaError,
    TooFewStudies,
    UnsupportedK,
)

__all__ = [
    "__version__",
    "StudyTable",
    "ZeroCellPolicy",
    "EffectSample",
    "adjust_table",
    "log_odds_ratio",
    "lor_variance",
    "build_effect_sample",
    "read_study_csv",
    "OrmetaError",
    "TooFewStudies",
    "NonConvergence",
    "BootstrapFailure",
    "EmptyCell",
    "SchemaError",
    "UnsupportedK",
]
