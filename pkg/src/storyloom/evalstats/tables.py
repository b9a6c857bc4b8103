"""Published raw win/lose/tie tables and their collapsed Win+/Lose+ counterparts.

``RAW_TABLES`` hold the three-way proportions per comparison and metric;
``COLLAPSED_TABLES`` hold the two-decimal Win+/Lose+ cells derived from them.
``None`` marks cells that were not evaluated.

A collapsed "consistency" cell combines the text and image consistency columns
by averaging whichever of the two were evaluated.
"""
from dataclasses import dataclass

from .stats import AggregateRow, winplus_transform

TOLERANCE = 0.015


def _r(*triples):
    return tuple(None if t is None else AggregateRow(*t) for t in triples)


# metric columns of each raw table, in printed order
RAW_COLUMNS = {
    "storytelling": ("integrality", "interestingness", "consistency_text", "consistency_image", "correlation"),
    "data_enhancement": ("integrality", "interestingness", "correlation", "consistency_text"),
    "components": ("consistency_text", "consistency_image", "correlation"),
}

RAW_TABLES = {
    "storytelling": {
        ("generation", "AREL"): _r((0.86, 0.09, 0.05), (0.89, 0.07, 0.04), (1.00, 0.00, 0.00), None, (0.76, 0.07, 0.17)),
        ("generation", "RECO"): _r((0.88, 0.05, 0.08), (1.00, 0.00, 0.00), (1.00, 0.00, 0.00), None, (0.85, 0.00, 0.15)),
        ("generation", "LLaVa"): _r((0.96, 0.00, 0.04), (1.00, 0.00, 0.00), (1.00, 0.00, 0.00), None, (0.35, 0.01, 0.65)),
        ("generation", "NextGPT"): _r((0.48, 0.24, 0.28), (0.89, 0.10, 0.01), (0.87, 0.12, 0.02), None, (0.99, 0.01, 0.00)),
        ("generation", "7B"): _r((0.42, 0.35, 0.24), (0.40, 0.40, 0.20), (0.39, 0.37, 0.23), None, (0.47, 0.41, 0.13)),
        ("generation", "G.T."): _r((0.20, 0.52, 0.28), (0.21, 0.54, 0.25), (0.20, 0.33, 0.47), None, (0.11, 0.19, 0.70)),
        ("prediction", "RECO+"): _r((0.95, 0.05, 0.01), (0.62, 0.23, 0.14), (0.93, 0.06, 0.00), (0.49, 0.13, 0.38), (0.98, 0.01, 0.00)),
        ("prediction", "LLaVa+"): _r((0.63, 0.08, 0.29), (0.60, 0.13, 0.27), (0.68, 0.10, 0.23), (0.56, 0.09, 0.35), (0.57, 0.12, 0.31)),
        ("prediction", "MiniGPT-5"): _r((0.95, 0.00, 0.05), (0.69, 0.29, 0.02), (0.94, 0.02, 0.04), (0.14, 0.31, 0.55), (0.13, 0.08, 0.79)),
        ("prediction", "7B"): _r((0.30, 0.22, 0.48), (0.28, 0.21, 0.51), (0.30, 0.27, 0.43), (0.26, 0.26, 0.48), (0.06, 0.04, 0.90)),
        ("prediction", "G.T."): _r((0.34, 0.41, 0.25), (0.36, 0.52, 0.11), (0.39, 0.42, 0.19), (0.07, 0.80, 0.13), (0.25, 0.32, 0.44)),
    },
    "data_enhancement": {
        ("ablation", "w/o data enhancement"): _r((0.83, 0.00, 0.17), (0.99, 0.00, 0.01), (0.16, 0.02, 0.82), (0.85, 0.01, 0.14)),
        ("ablation", "storyline enhancement"): _r((0.86, 0.04, 0.10), (0.81, 0.01, 0.18), (0.59, 0.23, 0.18), (0.83, 0.05, 0.12)),
        ("ablation", "caption enhancement"): _r((0.50, 0.25, 0.25), (0.53, 0.32, 0.15), (0.51, 0.26, 0.22), (0.51, 0.33, 0.17)),
    },
    "components": {
        ("ablation", "w/o data enhancement"): _r((1.00, 0.00, 0.00), (0.61, 0.20, 0.19), (0.49, 0.37, 0.14)),
        ("ablation", "w/o sq-adapter"): _r(None, (0.47, 0.27, 0.26), (0.36, 0.26, 0.38)),
        ("ablation", "w/o 13B LLM"): _r((0.30, 0.27, 0.43), (0.26, 0.26, 0.48), (0.06, 0.04, 0.90)),
    },
}

COLLAPSED_COLUMNS = {
    "storytelling": ("integrality", "interestingness", "consistency", "correlation"),
    "data_enhancement": ("integrality", "interestingness", "correlation", "consistency"),
    "components": ("interestingness", "consistency", "correlation"),
}

COLLAPSED_TABLES = {
    "storytelling": {
        ("generation", "AREL"): ((0.89, 0.11), (0.91, 0.09), (1.00, 0.00), (0.85, 0.15)),
        ("generation", "RECO"): ((0.92, 0.09), (1.00, 0.00), (1.00, 0.00), (0.93, 0.07)),
        ("generation", "LLaVa"): ((0.98, 0.02), (1.00, 0.00), (1.00, 0.00), (0.67, 0.33)),
        ("generation", "NextGPT"): ((0.62, 0.38), (0.89, 0.11), (0.88, 0.13), (0.99, 0.01)),
        ("generation", "7B"): ((0.54, 0.47), (0.50, 0.50), (0.51, 0.49), (0.53, 0.47)),
        ("generation", "G.T."): ((0.34, 0.66), (0.34, 0.66), (0.44, 0.57), (0.46, 0.54)),
        ("prediction", "RECO+"): ((0.95, 0.05), (0.70, 0.31), (0.81, 0.19), (0.99, 0.02)),
        ("prediction", "LLaVa+"): ((0.77, 0.23), (0.73, 0.27), (0.76, 0.24), (0.72, 0.28)),
        ("prediction", "MiniGPT-5"): ((0.97, 0.03), (0.70, 0.30), (0.69, 0.31), (0.53, 0.47)),
        ("prediction", "7B"): ((0.54, 0.46), (0.54, 0.46), (0.51, 0.49), (0.51, 0.49)),
        ("prediction", "G.T."): ((0.47, 0.53), (0.42, 0.58), (0.31, 0.69), (0.47, 0.54)),
    },
    "data_enhancement": {
        ("ablation", "w/o data enhancement"): ((0.92, 0.09), (0.99, 0.01), (0.57, 0.43), (0.92, 0.08)),
        ("ablation", "storyline enhancement"): ((0.91, 0.09), (0.90, 0.10), (0.68, 0.32), (0.89, 0.11)),
        ("ablation", "caption enhancement"): ((0.63, 0.37), (0.60, 0.40), (0.63, 0.38), (0.59, 0.41)),
    },
    "components": {
        ("ablation", "w/o data enhancement"): ((1.00, 0.00), (0.86, 0.14), (0.56, 0.44)),
        ("ablation", "w/o sq-adapter"): (None, (0.60, 0.40), (0.55, 0.45)),
        ("ablation", "w/o 13B LLM"): ((0.54, 0.46), (0.51, 0.49), (0.51, 0.49)),
    },
}

# Integrality ratings with inter-rater reliability for the storytelling comparisons.
ICC_TABLE = {
    ("generation", "AREL"): 0.82,
    ("generation", "RECO"): 0.96,
    ("generation", "LLaVa"): 0.98,
    ("generation", "NextGPT"): 0.64,
    ("generation", "7B"): 0.23,
    ("generation", "G.T."): 0.42,
    ("prediction", "RECO+"): 0.82,
    ("prediction", "LLaVa+"): 0.64,
    ("prediction", "MiniGPT-5"): 0.77,
    ("prediction", "7B"): 0.08,
    ("prediction", "G.T."): 0.06,
}

# Full-scale enhancement kept 16k of 40k candidate stories.
REFERENCE_RETENTION = 16_000 / 40_000


def _sources(table, metric):
    columns = RAW_COLUMNS[table]
    if metric == "consistency":
        return [c for c in ("consistency_text", "consistency_image") if c in columns]
    if metric in columns:
        return [metric]
    # the components raw table carries no interestingness column; its first
    # column is the only candidate source
    return [columns[0]]


def collapse(table, key, metric):
    """Win+/Lose+ for one collapsed cell from its raw source columns, or None."""
    raw = RAW_TABLES[table][key]
    pairs = []
    for col in _sources(table, metric):
        row = raw[RAW_COLUMNS[table].index(col)]
        if row is not None:
            pairs.append(winplus_transform(row))
    if not pairs:
        return None
    return tuple(sum(p[i] for p in pairs) / len(pairs) for i in range(2))


@dataclass(frozen=True)
class CellDelta:
    table: str
    key: tuple
    metric: str
    side: str
    computed: float
    published: float

    @property
    def delta(self):
        return self.computed - self.published

    @property
    def ok(self):
        return abs(self.delta) <= TOLERANCE + 1e-12


def reproduce_tables(tables=None):
    """Compare every published Win+/Lose+ cell with its value recomputed from the raw table."""
    out = []
    for table in tables or COLLAPSED_TABLES:
        for key, cells in COLLAPSED_TABLES[table].items():
            for metric, published in zip(COLLAPSED_COLUMNS[table], cells):
                computed = collapse(table, key, metric)
                if published is None and computed is None:
                    continue
                if published is None or computed is None:
                    raise ValueError(f"{table} {key} {metric}: one side is missing")
                for side, c, p in zip(("win+", "lose+"), computed, published):
                    out.append(CellDelta(table, key, metric, side, float(c), float(p)))
    return out
