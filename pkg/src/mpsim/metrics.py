"""Derived metrics over finished runs and the CSV/JSON report writer."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from fractions import Fraction

from .fetch import CLI_LABELS
from .pipeline import RunStats, compute_ipc
from .predictors import ConfusionMatrix

# error-rate bands: (0, LOW_EDGE], (LOW_EDGE, HIGH_EDGE], (HIGH_EDGE, 1]
LOW_EDGE = Fraction(3, 10)
HIGH_EDGE = Fraction(7, 10)

REPORT_COLUMNS = (
    "label", "policy", "fetch_width", "max_levels", "ipc", "recovery_pct",
    "pvn", "pvp", "sensitivity", "specificity",
    "fraction_le_03", "fraction_gt_03", "fraction_03_to_07", "fraction_gt_07",
    "status",
)
NA = "NA"


def _ratio(num: int, den: int) -> Fraction | None:
    return Fraction(num, den) if den else None


@dataclass(frozen=True)
class ConfidenceQuality:
    """Exact ratios; None marks a metric whose denominator is zero."""
    pvn: Fraction | None
    pvp: Fraction | None
    sensitivity: Fraction | None
    specificity: Fraction | None

    def as_floats(self) -> dict:
        return {k: (None if v is None else float(v)) for k, v in self.__dict__.items()}


def confidence_quality(m: ConfusionMatrix) -> ConfidenceQuality:
    return ConfidenceQuality(
        pvn=_ratio(m.lo_wrong, m.lo_wrong + m.lo_correct),
        pvp=_ratio(m.hi_correct, m.hi_correct + m.hi_wrong),
        sensitivity=_ratio(m.hi_correct, m.hi_correct + m.lo_correct),
        specificity=_ratio(m.lo_wrong, m.lo_wrong + m.hi_wrong),
    )


@dataclass(frozen=True)
class ErrorBuckets:
    """Shares of dynamic mispredictions by the error rate of their static branch."""
    fraction_le_03: Fraction
    fraction_03_to_07: Fraction
    fraction_gt_07: Fraction

    @property
    def fraction_gt_03(self) -> Fraction:
        return self.fraction_03_to_07 + self.fraction_gt_07


def error_buckets(per_branch) -> ErrorBuckets:
    """`per_branch` maps a static branch to (executions, mispredictions).
    A branch with error rate exactly 0.3 lands in the low band, exactly 0.7 in
    the middle band."""
    low = mid = high = 0
    for key, (execs, misses) in per_branch.items():
        if execs <= 0:
            raise ValueError(f"branch {key}: executions must be > 0")
        if not 0 <= misses <= execs:
            raise ValueError(f"branch {key}: mispredictions must be within [0, executions]")
        e = Fraction(misses, execs)
        if e <= LOW_EDGE:
            low += misses
        elif e <= HIGH_EDGE:
            mid += misses
        else:
            high += misses
    total = low + mid + high
    if total == 0:
        zero = Fraction(0)
        return ErrorBuckets(zero, zero, zero)
    return ErrorBuckets(Fraction(low, total), Fraction(mid, total), Fraction(high, total))


def recovery_percentage(stats: RunStats) -> Fraction | None:
    """Recoveries per executed conditional branch (a ratio, not scaled by 100)."""
    return _ratio(stats.recoveries, stats.cond_branches)


def report_row(label: str, stats: RunStats | None, error: str | None = None) -> dict:
    """One flat report record. A failed run (stats None) keeps its label and
    carries the error text in `status`."""
    row = dict.fromkeys(REPORT_COLUMNS)
    row["label"] = label
    if stats is None:
        row["status"] = f"failed: {error}" if error else "failed"
        return row
    q = confidence_quality(stats.confusion_matrix)
    b = error_buckets(stats.per_branch)
    rec = recovery_percentage(stats)
    row.update(
        policy=CLI_LABELS.get(stats.policy, stats.policy),
        fetch_width=stats.fetch_width,
        max_levels=stats.max_branch_levels,
        ipc=compute_ipc(stats) if stats.cycles > 0 else None,
        recovery_pct=None if rec is None else float(rec),
        fraction_le_03=float(b.fraction_le_03),
        fraction_gt_03=float(b.fraction_gt_03),
        fraction_03_to_07=float(b.fraction_03_to_07),
        fraction_gt_07=float(b.fraction_gt_07),
        status="ok",
    )
    row.update(q.as_floats())
    return row


def _csv_cell(v) -> str:
    if v is None:
        return NA
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


def emit_report(entries, fmt: str = "csv", columns=REPORT_COLUMNS) -> bytes:
    """Render report rows. `entries` holds (label, RunStats) pairs or rows
    already built by report_row."""
    entries = list(entries)
    if not entries:
        raise ValueError("report needs at least one entry")
    rows = [e if isinstance(e, dict) else report_row(*e) for e in entries]
    if fmt == "json":
        out = [{c: r.get(c) for c in columns} for r in rows]
        return (json.dumps(out, indent=2) + "\n").encode()
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_csv_cell(r.get(c)) for c in columns])
    return buf.getvalue().encode()
