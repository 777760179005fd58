"""Per-episode classification metrics, fold aggregation, and result tables.

At-risk is the positive class everywhere. Ratios with a zero denominator are
reported as absent with a reason, never silently substituted with 0, and are
excluded from means (with exclusion counts kept alongside).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError

METRIC_NAMES = ["accuracy", "sensitivity", "specificity", "precision", "f1"]

TABLE_ROWS = [
    ("accuracy", "Accuracy"),
    ("sensitivity", "Sensitivity"),
    ("specificity", "Specificity"),
    ("precision", "Precision"),
    ("f1", "F1-Score"),
    ("loss", "Loss (query NLL)"),
]

# column order: pseudo-color {single, rhythm}, then no-color {single, rhythm}
TABLE_COLUMNS = ["single_color", "rhythm_color", "single_gray", "rhythm_gray"]
TABLE_COLUMN_TITLES = {
    "single_color": "PC Single Heartbeat",
    "rhythm_color": "PC Heart Rhythm",
    "single_gray": "NC Single Heartbeat",
    "rhythm_gray": "NC Heart Rhythm",
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise DataError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricRecord:
    """Metric values plus reasons for any absent (undefined) entries."""

    values: dict
    absent: dict = field(default_factory=dict)

    def get(self, name):
        return self.values.get(name)


def metrics_from_counts(c: ConfusionCounts) -> MetricRecord:
    """Accuracy, sensitivity, specificity, precision, F1 from counts.

    Undefined ratios come back absent-with-reason: e.g. sensitivity is absent
    when the episode had no positive queries.
    """
    if c.total <= 0:
        raise DataError("metrics need at least one query")
    values = {"accuracy": (c.tp + c.tn) / c.total}
    absent = {}

    if c.tp + c.fn > 0:
        values["sensitivity"] = c.tp / (c.tp + c.fn)
    else:
        absent["sensitivity"] = "no positive queries"
    if c.tn + c.fp > 0:
        values["specificity"] = c.tn / (c.tn + c.fp)
    else:
        absent["specificity"] = "no negative queries"
    if c.tp + c.fp > 0:
        values["precision"] = c.tp / (c.tp + c.fp)
    else:
        absent["precision"] = "no positive predictions"

    p = values.get("precision")
    s = values.get("sensitivity")
    if p is None or s is None:
        absent["f1"] = "precision or sensitivity undefined"
    elif p + s == 0:
        absent["f1"] = "precision and sensitivity both zero"
    else:
        values["f1"] = 2 * p * s / (p + s)
    return MetricRecord(values=values, absent=absent)


def mean_of_records(records: list, names=None) -> MetricRecord:
    """Mean per metric over records, excluding absent values.

    The absent map carries 'excluded i/n episodes' notes; a metric absent
    everywhere stays absent.
    """
    names = names or list(
        dict.fromkeys(n for r in records for n in (*r.values, *r.absent))
    )
    values = {}
    absent = {}
    for name in names:
        present = [r.values[name] for r in records if name in r.values]
        n_missing = sum(1 for r in records if name in r.absent)
        if present:
            values[name] = sum(present) / len(present)
            if n_missing:
                absent[name] = f"excluded {n_missing}/{len(records)} episodes"
        else:
            absent[name] = "absent in all episodes"
    return MetricRecord(values=values, absent=absent)


@dataclass
class ExperimentCell:
    """One (learning mode, representation) cell of the result matrix."""

    mode: str
    representation: str
    fold_records: list  # one MetricRecord per fold (episode means incl. loss)

    def fold_averaged(self) -> MetricRecord:
        return mean_of_records(self.fold_records)


def aggregate(mode: str, representation: str, per_fold_episode_records: list) -> ExperimentCell:
    """Two-stage mean: episodes -> fold, folds -> cell.

    per_fold_episode_records is a list (one item per fold) of lists of
    per-episode MetricRecords (loss included as a metric key).
    """
    fold_records = [mean_of_records(records) for records in per_fold_episode_records]
    return ExperimentCell(mode=mode, representation=representation, fold_records=fold_records)


def _format_cell(record: MetricRecord, name: str) -> str:
    value = record.get(name)
    if value is None:
        return "absent"
    if name == "loss":
        return f"{value:.2f}"
    return f"{value * 100:.2f}"


def render_table(cells: dict, mode: str) -> str:
    """Aligned plain-text result table for one learning mode.

    cells maps representation name -> ExperimentCell; all four must be
    present. Rows are the metrics, columns the representations in
    pseudo-color-first order; values are percentages to 2 decimals (loss is
    the raw query NLL).
    """
    missing = [c for c in TABLE_COLUMNS if c not in cells]
    if missing:
        raise DataError(f"missing representation cells: {', '.join(missing)}")
    averaged = {name: cells[name].fold_averaged() for name in TABLE_COLUMNS}
    col_titles = [TABLE_COLUMN_TITLES[c] for c in TABLE_COLUMNS]
    widths = [max(len(t), 8) for t in col_titles]
    name_w = max(len(label) for _, label in TABLE_ROWS)

    lines = [f"{mode} learning, 5-fold cross-validation (fold-averaged)"]
    header = " " * name_w + "  " + "  ".join(t.rjust(w) for t, w in zip(col_titles, widths))
    lines.append(header)
    lines.append("-" * len(header))
    for key, label in TABLE_ROWS:
        row = [label.ljust(name_w)]
        for col, w in zip(TABLE_COLUMNS, widths):
            row.append(_format_cell(averaged[col], key).rjust(w))
        lines.append("  ".join(row))
    return "\n".join(lines) + "\n"


def write_results_csv(cells: dict, mode: str, path):
    """results_{mode}.csv: metric rows x representation columns."""
    path = Path(path)
    averaged = {name: cells[name].fold_averaged() for name in TABLE_COLUMNS}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric"] + TABLE_COLUMNS)
        for key, label in TABLE_ROWS:
            writer.writerow([label] + [_format_cell(averaged[c], key) for c in TABLE_COLUMNS])


def write_episode_csv(records: list, losses: list, counts: list, path):
    """Per-episode raw metrics for one (mode, representation, fold) run."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["episode", "tp", "fp", "tn", "fn"] + METRIC_NAMES + ["loss", "absent"]
        )
        for i, (rec, loss, c) in enumerate(zip(records, losses, counts)):
            row = [i, c.tp, c.fp, c.tn, c.fn]
            for name in METRIC_NAMES:
                v = rec.get(name)
                row.append("" if v is None else f"{v:.10g}")
            row.append(f"{loss:.10g}")
            row.append(";".join(f"{k}:{v}" for k, v in sorted(rec.absent.items())))
            writer.writerow(row)


def read_episode_csv(path):
    """Load a per-episode CSV back into (MetricRecords, losses, counts)."""
    records, losses, counts = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            values = {}
            absent = {}
            for name in METRIC_NAMES:
                if row[name] != "":
                    values[name] = float(row[name])
            for item in row["absent"].split(";"):
                if item:
                    k, _, v = item.partition(":")
                    absent[k] = v
            values["loss"] = float(row["loss"])
            records.append(MetricRecord(values=values, absent=absent))
            losses.append(float(row["loss"]))
            counts.append(
                ConfusionCounts(int(row["tp"]), int(row["fp"]), int(row["tn"]), int(row["fn"]))
            )
    return records, losses, counts
