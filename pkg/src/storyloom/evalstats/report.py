"""Plain-text and JSON renderings of win-rate tables, ICC summaries and table reproduction."""
from collections import defaultdict
import math

from .records import canonical
from .stats import aggregate_outcomes, encode_rating_matrix, icc2k, winplus_transform
from .tables import COLLAPSED_COLUMNS, ICC_TABLE, TOLERANCE, reproduce_tables


def _fmt(x, digits=2):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "-"
    return f"{x:.{digits}f}"


def align(header, rows):
    """Left-align the first column, right-align the rest."""
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for j, r in enumerate(cells):
        parts = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(parts).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def winrate_report(records):
    """Win+/Lose+ per method pair and metric, one row per pair.

    Returns ``(text, data)``. ``data["rows"]`` holds unrounded values and the
    raw win/lose/tie proportions; the text shows two decimals as ``win+/lose+``.
    Cells with no ratings are absent from ``data`` and shown as ``-``.
    """
    agg = aggregate_outcomes(records)
    metrics = sorted({m for _, m in agg})
    pairs = list(dict.fromkeys(p for p, _ in agg))
    rows, data = [], []
    for pair in pairs:
        line = [f"{pair[0]} vs {pair[1]}"]
        entry = {"method_a": pair[0], "method_b": pair[1], "cells": {}}
        for m in metrics:
            row = agg.get((pair, m))
            if row is None:
                line.append("-")
                continue
            wp, lp = winplus_transform(row)
            line.append(f"{wp:.2f}/{lp:.2f}")
            entry["cells"][m] = {
                "win": row.win, "lose": row.lose, "tie": row.tie, "n": row.n,
                "win_plus": wp, "lose_plus": lp,
                "win_plus_2dp": round(wp, 2), "lose_plus_2dp": round(lp, 2),
            }
        rows.append(line)
        data.append(entry)
    return align(["comparison"] + metrics, rows), {"metrics": metrics, "rows": data}


def icc_report(records, mapping=None):
    """ICC(2,k) per (method pair, metric) with its qualitative band."""
    groups = defaultdict(list)
    for r in canonical(records):
        groups[(r.pair, r.metric)].append(r)
    rows, data = [], []
    for (pair, metric), recs in groups.items():
        res = icc2k(encode_rating_matrix(recs, mapping))
        n_subjects = len({r.sample_id for r in recs})
        n_raters = len({r.rater_id for r in recs})
        rows.append([f"{pair[0]} vs {pair[1]}", metric, n_subjects, n_raters, _fmt(res.value), res.band])
        data.append({
            "method_a": pair[0], "method_b": pair[1], "metric": metric,
            "subjects": n_subjects, "raters": n_raters,
            "icc": None if res.degenerate else res.value, "band": res.band,
            "degenerate": res.degenerate, "msr": res.msr, "msc": res.msc, "mse": res.mse,
        })
    header = ["comparison", "metric", "subjects", "raters", "ICC(2,k)", "band"]
    return align(header, rows), {"rows": data}


def reproduction_report(tables=None):
    """Recomputed vs published Win+/Lose+ for every embedded table cell."""
    deltas = reproduce_tables(tables)
    rows = [
        [d.table, "/".join(d.key), d.metric, d.side, _fmt(d.computed, 3), _fmt(d.published), f"{d.delta:+.3f}",
         "ok" if d.ok else "MISMATCH"]
        for d in deltas
    ]
    header = ["table", "row", "metric", "side", "computed", "published", "delta", "status"]
    failures = [d for d in deltas if not d.ok]
    data = {
        "tolerance": TOLERANCE,
        "cells": len(deltas),
        "mismatches": len(failures),
        "max_abs_delta": max(abs(d.delta) for d in deltas),
        "rows": [
            {"table": d.table, "row": list(d.key), "metric": d.metric, "side": d.side,
             "computed": d.computed, "published": d.published, "delta": d.delta, "ok": d.ok}
            for d in deltas
        ],
        "reference_icc": [{"row": list(k), "icc": v} for k, v in ICC_TABLE.items()],
        "collapsed_columns": {k: list(v) for k, v in COLLAPSED_COLUMNS.items()},
    }
    return align(header, rows), data
