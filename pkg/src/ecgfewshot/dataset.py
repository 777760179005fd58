"""Corpus ingestion, image materialization, and cross-validation folds."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DataError, InfeasibleStratification, SchemaError
from .nomogram import NomogramBoundary, RiskLabel, classify
from .render import (
    EcgImage,
    ImageKind,
    RenderConfig,
    encode_png,
    image_filename,
    rasterize_beat,
    rasterize_rhythm,
)
from .signal import (
    DetectorParams,
    EcgRecord,
    PIPELINE_RATE_HZ,
    annotate_beats,
    detect_r_peaks,
    resample_record,
    select_center_beat,
)
from .synth import MANIFEST_COLUMNS


class Representation(Enum):
    """The four image representations evaluated against each other."""

    SINGLE_COLOR = "single_color"
    SINGLE_GRAY = "single_gray"
    RHYTHM_COLOR = "rhythm_color"
    RHYTHM_GRAY = "rhythm_gray"

    @property
    def kind(self) -> ImageKind:
        return ImageKind.SINGLE_BEAT if self.value.startswith("single") else ImageKind.RHYTHM

    @property
    def colored(self) -> bool:
        return self.value.endswith("color")


class Grouping(Enum):
    BY_RECORD = "by-record"
    BY_SUBJECT = "by-subject"


@dataclass
class CatalogEntry:
    record_id: str
    label: RiskLabel
    hr_bpm: float
    qt_ms: float
    subject_id: str
    image_paths: dict  # Representation -> str (relative path)
    fold_id: int | None = None


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: dict  # record_id -> fold_id
    stratified: bool
    grouping: Grouping


def ingest_manifest(path, pipeline_hz: float = PIPELINE_RATE_HZ) -> list:
    """Load all records listed in a manifest CSV.

    Signals are single-column CSVs (header 'mv') resolved relative to the
    manifest location, resampled to the pipeline rate and validated.

    Raises:
        SchemaError: malformed manifest rows or missing files, with row
            numbers; per-record validation failures are collected and
            reported together rather than dropped.
    """
    path = Path(path)
    base = path.parent
    records = []
    failures = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        if [c.strip() for c in reader.fieldnames] != MANIFEST_COLUMNS:
            raise SchemaError(
                f"{path}: expected columns {','.join(MANIFEST_COLUMNS)}, "
                f"got {','.join(reader.fieldnames)}"
            )
        for row_no, row in enumerate(reader, start=2):
            try:
                sig_path = base / row["path"]
                if not sig_path.exists():
                    raise SchemaError(f"{path}:{row_no}: missing signal file {sig_path}")
                samples = _read_signal_csv(sig_path, row_no)
                record = EcgRecord(
                    record_id=row["record_id"],
                    samples=samples,
                    sample_rate_hz=float(row["sample_rate_hz"]),
                    hr_bpm=float(row["hr_bpm"]),
                    qt_ms=float(row["qt_ms"]),
                    subject_id=row["subject_id"] or None,
                )
            except SchemaError:
                raise
            except (KeyError, ValueError) as exc:
                raise SchemaError(f"{path}:{row_no}: {exc}") from exc
            try:
                record = resample_record(record, pipeline_hz)
                record.validate()
            except DataError as exc:
                failures.append(f"row {row_no} ({record.record_id}): {exc}")
                continue
            records.append(record)
    if failures:
        raise SchemaError(
            f"{path}: {len(failures)} record(s) failed validation:\n  "
            + "\n  ".join(failures)
        )
    return records


def _read_signal_csv(sig_path: Path, row_no: int) -> np.ndarray:
    with open(sig_path, newline="") as fh:
        header = fh.readline().strip()
        if header != "mv":
            raise SchemaError(f"{sig_path}: expected header 'mv' (manifest row {row_no})")
        try:
            return np.array([float(line) for line in fh if line.strip()])
        except ValueError as exc:
            raise SchemaError(f"{sig_path}: bad voltage value: {exc}") from exc


def materialize_images(
    records,
    boundary: NomogramBoundary,
    config: RenderConfig,
    out_dir,
    detector: DetectorParams | None = None,
    qrs_offset_ms: float = 40.0,
) -> list:
    """Render the four representations for every record; return the catalog.

    Idempotent: a file is skipped when it already exists and the recorded
    render-config hash matches, so re-running after a color-scale change
    rewrites only the colored variants.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    state_path = out_dir / "render_state.json"
    state = {}
    if state_path.exists():
        state = json.loads(state_path.read_text())

    detector = detector or DetectorParams()
    entries = []
    for record in records:
        try:
            r_peaks = detect_r_peaks(record, detector)
            beats = annotate_beats(record, r_peaks, qrs_offset_ms)
            if not beats:
                raise DataError("all beats dropped at record edges")
            center = select_center_beat(beats, len(record.samples))
        except DataError as exc:
            raise DataError(f"{record.record_id}: {exc}") from exc
        paths = {}
        for rep in Representation:
            fname = image_filename(record.record_id, rep.kind, rep.colored)
            target = img_dir / fname
            digest = config.config_hash(rep.kind, rep.colored)
            rel = f"images/{fname}"
            if not (target.exists() and state.get(fname) == digest):
                if rep.kind is ImageKind.SINGLE_BEAT:
                    img = rasterize_beat(record, center, config, boundary, rep.colored)
                else:
                    img = rasterize_rhythm(record, beats, config, boundary, rep.colored)
                encode_png(img, target)
                state[fname] = digest
            paths[rep] = rel
        entries.append(
            CatalogEntry(
                record_id=record.record_id,
                label=classify(boundary, record.qt_ms, record.hr_bpm),
                hr_bpm=record.hr_bpm,
                qt_ms=record.qt_ms,
                subject_id=record.subject_id or record.record_id,
                image_paths=paths,
            )
        )
    state_path.write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")
    return entries


def make_folds(
    catalog,
    k: int = 5,
    stratified: bool = True,
    grouping: Grouping = Grouping.BY_RECORD,
    seed: int = 7,
) -> FoldPlan:
    """Assign every catalog entry to one of k folds, deterministically.

    Stratified by-record assignment shuffles each class stratum with the
    seed and deals records round-robin, which is exact whenever class counts
    divide evenly by k. By-subject grouping keeps all of a subject's records
    in one fold and balances positives greedily (best effort).

    Raises:
        InfeasibleStratification: a class has fewer members than k.
    """
    if k < 1:
        raise DataError("k must be >= 1")
    rng = np.random.default_rng(seed)
    assignment = {}

    if grouping is Grouping.BY_RECORD:
        if stratified:
            strata = {}
            for e in catalog:
                strata.setdefault(e.label, []).append(e.record_id)
            for label, ids in sorted(strata.items(), key=lambda kv: kv[0].value):
                if len(ids) < k:
                    raise InfeasibleStratification(
                        f"class {label.value} has {len(ids)} member(s) < k={k}"
                    )
                ids = sorted(ids)
                rng.shuffle(ids)
                for i, rid in enumerate(ids):
                    assignment[rid] = i % k
        else:
            ids = sorted(e.record_id for e in catalog)
            rng.shuffle(ids)
            for i, rid in enumerate(ids):
                assignment[rid] = i % k
    else:
        subjects = {}
        for e in catalog:
            subjects.setdefault(e.subject_id, []).append(e)
        if stratified and sum(any(e.label.positive for e in v) for v in subjects.values()) < k:
            raise InfeasibleStratification(
                f"fewer than k={k} subjects carry positive records"
            )
        # shuffled tie order among equal-size subjects, then largest-first greedy
        order = sorted(subjects)
        rng.shuffle(order)
        order.sort(key=lambda s: (-sum(e.label.positive for e in subjects[s]), -len(subjects[s])))
        fold_pos = [0] * k
        fold_tot = [0] * k
        for s in order:
            target = min(range(k), key=lambda f: (fold_pos[f], fold_tot[f], f))
            for e in subjects[s]:
                assignment[e.record_id] = target
            fold_pos[target] += sum(e.label.positive for e in subjects[s])
            fold_tot[target] += len(subjects[s])

    plan = FoldPlan(k=k, assignment=assignment, stratified=stratified, grouping=grouping)
    for e in catalog:
        e.fold_id = assignment[e.record_id]
    return plan


CATALOG_COLUMNS = [
    "record_id",
    "label",
    "hr_bpm",
    "qt_ms",
    "subject_id",
    "fold_id",
    "single_color",
    "single_gray",
    "rhythm_color",
    "rhythm_gray",
]


def save_catalog(catalog, path):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CATALOG_COLUMNS)
        for e in catalog:
            writer.writerow(
                [
                    e.record_id,
                    e.label.value,
                    f"{e.hr_bpm:.6f}",
                    f"{e.qt_ms:.6f}",
                    e.subject_id,
                    "" if e.fold_id is None else e.fold_id,
                ]
                + [e.image_paths[rep] for rep in Representation]
            )


def load_catalog(path) -> list:
    path = Path(path)
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CATALOG_COLUMNS:
            raise SchemaError(f"{path}: unexpected catalog columns")
        for row in reader:
            entries.append(
                CatalogEntry(
                    record_id=row["record_id"],
                    label=RiskLabel(row["label"]),
                    hr_bpm=float(row["hr_bpm"]),
                    qt_ms=float(row["qt_ms"]),
                    subject_id=row["subject_id"],
                    image_paths={rep: row[rep.value] for rep in Representation},
                    fold_id=int(row["fold_id"]) if row["fold_id"] != "" else None,
                )
            )
    return entries


def save_folds(plan: FoldPlan, path):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["record_id", "fold_id"])
        for rid in sorted(plan.assignment):
            writer.writerow([rid, plan.assignment[rid]])
