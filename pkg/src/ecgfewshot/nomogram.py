"""QT-vs-heart-rate risk boundary: loading, interpolation, classification.

The boundary is a piecewise-linear polyline over heart rate. QT/HR pairs on
or above the line are labeled at risk; pairs strictly below are not. The
clinical boundary ships as a data file (see data/qt_nomogram_chan2007.csv)
and is treated as configuration: no clinical values are hardcoded here.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import InvalidBoundary, MissingGroundTruth


class RiskLabel(Enum):
    """Binary risk label. AT_RISK is the positive class in every metric."""

    AT_RISK = "AtRisk"
    NO_RISK = "NoRisk"

    @property
    def positive(self) -> bool:
        return self is RiskLabel.AT_RISK


class BoundaryRangeWarning(UserWarning):
    """Heart rate outside boundary coverage; value clamped to an endpoint."""


@dataclass(frozen=True)
class NomogramBoundary:
    """Piecewise-linear QT threshold over heart rate.

    hr values must be strictly increasing with at least two breakpoints.
    qt values are expected to be non-increasing (the clinical line falls or
    stays flat as rate rises); pass allow_increasing_qt=True to accept a
    boundary that violates this.
    """

    hr_bpm: tuple
    qt_ms: tuple
    name: str = "unnamed"
    source: str = ""
    allow_increasing_qt: bool = False

    def __post_init__(self):
        hr = np.asarray(self.hr_bpm, dtype=np.float64)
        qt = np.asarray(self.qt_ms, dtype=np.float64)
        if hr.ndim != 1 or hr.shape != qt.shape:
            raise InvalidBoundary("hr and qt breakpoint arrays must match")
        if len(hr) < 2:
            raise InvalidBoundary("boundary needs at least 2 breakpoints")
        if not np.all(np.isfinite(hr)) or not np.all(np.isfinite(qt)):
            raise InvalidBoundary("non-finite breakpoint")
        if np.any(hr <= 0) or np.any(qt <= 0):
            raise InvalidBoundary("breakpoints must be positive")
        if np.any(np.diff(hr) <= 0):
            raise InvalidBoundary("hr breakpoints must be strictly increasing")
        if not self.allow_increasing_qt and np.any(np.diff(qt) > 0):
            raise InvalidBoundary(
                "qt values increase with hr; pass allow_increasing_qt to accept"
            )
        object.__setattr__(self, "hr_bpm", tuple(float(v) for v in hr))
        object.__setattr__(self, "qt_ms", tuple(float(v) for v in qt))

    @property
    def hr_range(self) -> tuple:
        return self.hr_bpm[0], self.hr_bpm[-1]


def boundary_qt_at(boundary: NomogramBoundary, hr_bpm) -> np.ndarray | float:
    """QT threshold (ms) at the given heart rate(s).

    Linear interpolation between bracketing breakpoints; heart rates outside
    the breakpoint range clamp to the nearest endpoint value and emit a
    BoundaryRangeWarning.
    """
    hr = np.asarray(hr_bpm, dtype=np.float64)
    lo, hi = boundary.hr_range
    n_out = int(np.sum((hr < lo) | (hr > hi)))
    if n_out:
        warnings.warn(
            f"{n_out} heart rate value(s) outside boundary '{boundary.name}' "
            f"coverage [{lo:.0f}, {hi:.0f}] bpm; clamping",
            BoundaryRangeWarning,
            stacklevel=2,
        )
    out = np.interp(hr, boundary.hr_bpm, boundary.qt_ms)
    return float(out) if np.isscalar(hr_bpm) else out


def classify(boundary: NomogramBoundary, qt_ms: float, hr_bpm: float) -> RiskLabel:
    """AT_RISK iff qt_ms is on or above the boundary at hr_bpm.

    Points exactly on the line are at risk: the negative class is defined as
    strictly below the line, so the complement is positive.
    """
    threshold = boundary_qt_at(boundary, hr_bpm)
    return RiskLabel.AT_RISK if qt_ms >= threshold else RiskLabel.NO_RISK


def label_dataset(records, boundary: NomogramBoundary):
    """Assign a RiskLabel to every record; return (labels, (n_pos, n_neg)).

    labels is a dict record_id -> RiskLabel, ordered like the input.

    Raises:
        MissingGroundTruth: listing ids of records without finite qt/hr.
    """
    missing = [
        r.record_id
        for r in records
        if not (np.isfinite(r.qt_ms) and np.isfinite(r.hr_bpm))
    ]
    if missing:
        raise MissingGroundTruth(missing)
    labels = {}
    n_pos = 0
    for r in records:
        lab = classify(boundary, r.qt_ms, r.hr_bpm)
        labels[r.record_id] = lab
        n_pos += int(lab.positive)
    return labels, (n_pos, len(labels) - n_pos)


def load_boundary(path, name=None, source=None) -> NomogramBoundary:
    """Load a boundary from CSV (header hr_bpm,qt_ms, rows sorted by hr).

    name/source default to a sidecar JSON next to the CSV ({stem}.json with
    keys "name" and "source"), falling back to the file stem.
    """
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        header = fh.readline().strip().split(",")
        if [h.strip() for h in header] != ["hr_bpm", "qt_ms"]:
            raise InvalidBoundary(f"{path}: expected header 'hr_bpm,qt_ms'")
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise InvalidBoundary(f"{path}:{line_no}: expected two columns")
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise InvalidBoundary(f"{path}:{line_no}: {exc}") from exc
    if not rows:
        raise InvalidBoundary(f"{path}: no breakpoints")
    sidecar = path.with_suffix(".json")
    meta = {}
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    return NomogramBoundary(
        hr_bpm=tuple(r[0] for r in rows),
        qt_ms=tuple(r[1] for r in rows),
        name=name or meta.get("name", path.stem),
        source=source or meta.get("source", ""),
    )


def save_boundary(boundary: NomogramBoundary, path):
    """Write boundary CSV plus its sidecar JSON."""
    path = Path(path)
    lines = ["hr_bpm,qt_ms"]
    for hr, qt in zip(boundary.hr_bpm, boundary.qt_ms):
        lines.append(f"{hr:g},{qt:g}")
    path.write_text("\n".join(lines) + "\n")
    path.with_suffix(".json").write_text(
        json.dumps({"name": boundary.name, "source": boundary.source}, indent=2)
        + "\n"
    )


def default_boundary_path() -> Path:
    """Path of the boundary transcription shipped with the package."""
    return Path(__file__).parent / "data" / "qt_nomogram_chan2007.csv"


def load_default_boundary() -> NomogramBoundary:
    return load_boundary(default_boundary_path())
