"""Pairwise judgment records and the ratings-file format."""
import csv
from dataclasses import dataclass, replace, asdict
import io

METRICS = ("integrality", "interestingness", "consistency_text", "consistency_image", "correlation")
ORDERS = ("AB", "BA")
CHOICES = ("win", "lose", "tie")
FIELDS = ("sample_id", "metric", "method_a", "method_b", "rater_id", "presented_order", "choice")

_FLIP = {"win": "lose", "lose": "win", "tie": "tie"}
# raw file values name the displayed option that was preferred
_RAW = {"a": "win", "b": "lose", "tie": "tie", "win": "win", "lose": "lose"}


@dataclass(frozen=True)
class ComparisonRecord:
    """One rater's judgment of ``method_a`` (ours) against ``method_b`` on one sample.

    ``choice`` is relative to the option shown first until :func:`deshuffle`
    sets ``canonical``; after that ``win`` always means ``method_a`` was preferred.
    """

    sample_id: str
    metric: str
    method_a: str
    method_b: str
    rater_id: str
    presented_order: str
    choice: str
    canonical: bool = False

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.presented_order not in ORDERS:
            raise ValueError(f"presented_order must be AB or BA, got {self.presented_order!r}")
        if self.choice not in CHOICES:
            raise ValueError(f"choice must be one of {CHOICES}, got {self.choice!r}")

    @property
    def pair(self):
        return (self.method_a, self.method_b)


def deshuffle(record):
    """Toggle between displayed and canonical orientation. Applying it twice is a no-op."""
    choice = _FLIP[record.choice] if record.presented_order == "BA" else record.choice
    return replace(record, choice=choice, canonical=not record.canonical)


def canonical(records):
    return [r if r.canonical else deshuffle(r) for r in records]


def parse_choice(value):
    try:
        return _RAW[value.strip().lower()]
    except KeyError:
        raise ValueError(f"unrecognised choice {value!r}") from None


def read_ratings(source):
    """Read a ratings file (path or text stream); rows are in displayed orientation."""
    if hasattr(source, "read"):
        return _read(source)
    with open(source, newline="", encoding="utf-8") as fh:
        return _read(fh)


def _read(fh):
    reader = csv.DictReader(fh)
    missing = set(FIELDS) - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"ratings file lacks columns: {sorted(missing)}")
    return [
        ComparisonRecord(
            sample_id=row["sample_id"], metric=row["metric"].strip().lower(),
            method_a=row["method_a"], method_b=row["method_b"], rater_id=row["rater_id"],
            presented_order=row["presented_order"].strip().upper(), choice=parse_choice(row["choice"]),
        )
        for row in reader
    ]


def write_ratings(records, path=None):
    """Write records in displayed orientation (A/B/tie). Returns the text when ``path`` is None."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in records:
        if r.canonical:
            r = deshuffle(r)
        row = {k: v for k, v in asdict(r).items() if k in FIELDS}
        row["choice"] = {"win": "A", "lose": "B", "tie": "tie"}[r.choice]
        writer.writerow(row)
    text = buf.getvalue()
    if path is None:
        return text
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path
