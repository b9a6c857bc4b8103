"""Assignment, aggregation, Win+/Lose+ and ICC(2,k) for pairwise human judgments."""
from collections import Counter, defaultdict
from dataclasses import dataclass
import logging
import math

import numpy as np

from ..errors import IncompleteDataError
from .records import canonical

log = logging.getLogger(__name__)

DEFAULT_MAPPING = {"win": 1.0, "tie": 0.5, "lose": 0.0}


@dataclass(frozen=True)
class Assignment:
    sample_id: str
    method_a: str
    method_b: str
    rater_id: str
    presented_order: str


def build_assignments(sample_ids, method_pairs, raters_per_comparison=3, seed=0, rater_pool=None):
    """Give every (sample, pair) ``raters_per_comparison`` raters and a random option order.

    Raters are never shared between method pairs. Without ``rater_pool`` each
    pair gets its own pool of exactly ``raters_per_comparison`` raters. A
    supplied pool is split evenly across pairs.
    """
    if raters_per_comparison < 1:
        raise ValueError("raters_per_comparison must be >= 1")
    method_pairs = [tuple(p) for p in method_pairs]
    if rater_pool is None:
        pools = [
            [f"{a}~{b}/r{i}" for i in range(raters_per_comparison)] for a, b in method_pairs
        ]
    else:
        size = len(rater_pool) // max(len(method_pairs), 1)
        if size < raters_per_comparison:
            raise ValueError(
                f"rater pool of {len(rater_pool)} cannot give {len(method_pairs)} pairs "
                f"{raters_per_comparison} disjoint raters each"
            )
        pools = [list(rater_pool[i * size:(i + 1) * size]) for i in range(len(method_pairs))]
    rng = np.random.default_rng(seed)
    out = []
    for (a, b), pool in zip(method_pairs, pools):
        for sid in sample_ids:
            chosen = pool if len(pool) == raters_per_comparison else list(
                rng.choice(pool, size=raters_per_comparison, replace=False)
            )
            orders = rng.integers(0, 2, size=raters_per_comparison)
            for rater, o in zip(chosen, orders):
                out.append(Assignment(str(sid), a, b, str(rater), "AB" if o == 0 else "BA"))
    return out


@dataclass(frozen=True)
class AggregateRow:
    win: float
    lose: float
    tie: float
    n: int = 0

    @property
    def total(self):
        return self.win + self.lose + self.tie

    def normalized(self):
        s = self.total
        if abs(s - 1.0) <= 1e-9:
            return self
        if s <= 0:
            raise ValueError("row has no mass")
        log.warning("renormalizing row (%.4f, %.4f, %.4f) that sums to %.4f", self.win, self.lose, self.tie, s)
        return AggregateRow(self.win / s, self.lose / s, self.tie / s, self.n)


def aggregate_outcomes(records):
    """Map ``((method_a, method_b), metric)`` to win/lose/tie proportions.

    Cells without records are simply absent from the result.
    """
    counts = defaultdict(Counter)
    for r in canonical(records):
        counts[(r.pair, r.metric)][r.choice] += 1
    out = {}
    for key, c in counts.items():
        n = sum(c.values())
        out[key] = AggregateRow(c["win"] / n, c["lose"] / n, c["tie"] / n, n)
    return out


def winplus_transform(row):
    """``(win + tie/2, lose + tie/2)``, unrounded."""
    row = row.normalized()
    return row.win + row.tie / 2.0, row.lose + row.tie / 2.0


def encode_rating_matrix(records, mapping=None):
    """Subjects x raters matrix for one (pair, metric); ``mapping`` turns choices into numbers."""
    mapping = mapping or DEFAULT_MAPPING
    records = canonical(records)
    keys = {(r.pair, r.metric) for r in records}
    if len(keys) > 1:
        raise ValueError(f"records span several (pair, metric) cells: {sorted(keys)}")
    samples = list(dict.fromkeys(r.sample_id for r in records))
    raters = list(dict.fromkeys(r.rater_id for r in records))
    m = np.full((len(samples), len(raters)), np.nan)
    si = {s: i for i, s in enumerate(samples)}
    ri = {r: j for j, r in enumerate(raters)}
    for r in records:
        m[si[r.sample_id], ri[r.rater_id]] = mapping[r.choice]
    if np.isnan(m).any():
        i, j = np.argwhere(np.isnan(m))[0]
        raise IncompleteDataError(f"no rating from {raters[j]!r} for sample {samples[i]!r}")
    return m


@dataclass(frozen=True)
class ICCResult:
    value: float
    band: str
    degenerate: bool = False
    msr: float = math.nan
    msc: float = math.nan
    mse: float = math.nan


def icc2k(matrix):
    """Two-way random effects, absolute agreement, average of k raters.

    ``(MSR - MSE) / (MSR + (MSC - MSE) / n)`` from the two-way ANOVA of an
    ``n subjects x k raters`` matrix. A zero denominator is flagged as degenerate.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError(f"need at least 2 subjects and 2 raters, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("rating matrix has non-finite entries")
    n, k = x.shape
    ss_rows = k * np.sum((x.mean(axis=1) - x.mean()) ** 2)
    # rater and residual sums of squares are unchanged by per-subject shifts;
    # centring each row on its first rating keeps perfect agreement exactly zero
    y = x - x[:, :1]
    col_dev = y.mean(axis=0) - y.mean()
    ss_cols = n * np.sum(col_dev ** 2)
    resid = y - y.mean(axis=1, keepdims=True) - col_dev[None, :]
    ss_err = np.sum(resid ** 2)
    msr = ss_rows / (n - 1)
    msc = ss_cols / (k - 1)
    mse = ss_err / ((n - 1) * (k - 1))
    denom = msr + (msc - mse) / n
    if denom == 0.0 or abs(denom) < 1e-15 * max(1.0, abs(msr), abs(msc)):
        return ICCResult(math.nan, "undefined", True, msr, msc, mse)
    value = (msr - mse) / denom
    return ICCResult(float(value), interpret_icc(value), False, msr, msc, mse)


def interpret_icc(value):
    """Guideline bands; a value on a boundary goes to the higher band."""
    if not math.isfinite(value):
        raise ValueError("ICC value must be finite")
    if value < 0.5:
        return "poor"
    if value < 0.75:
        return "moderate"
    if value < 0.9:
        return "good"
    return "excellent"
