from .records import (
    CHOICES, METRICS, ComparisonRecord, canonical, deshuffle, read_ratings, write_ratings,
)
from .stats import (
    DEFAULT_MAPPING, AggregateRow, Assignment, ICCResult, aggregate_outcomes, build_assignments,
    encode_rating_matrix, icc2k, interpret_icc, winplus_transform,
)
from .tables import REFERENCE_RETENTION, reproduce_tables
from .report import align, icc_report, reproduction_report, winrate_report
