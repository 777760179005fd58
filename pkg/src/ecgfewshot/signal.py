"""Single-lead ECG records and per-beat structure.

A record carries the raw voltage series plus its ground-truth heart rate and
QT interval. Beat-level structure (R peaks, QRS onset, QT end) is derived
here so the renderer can anchor the QT span of every beat.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, EmptySignal, IndexOutOfRange, NoBeatsDetected

PIPELINE_RATE_HZ = 500.0

HR_ACCEPTED_RANGE = (20.0, 220.0)


def round_half_up(x):
    """Deterministic scalar/array rounding: floor(x + 0.5).

    numpy's default round() is banker's rounding, which would make pixel
    quantization depend on parity; every ms->sample and ms->pixel conversion
    in the pipeline goes through this helper instead.
    """
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


@dataclass(eq=False)
class EcgRecord:
    """A sampled single-lead voltage series with record-level ground truth.

    Attributes:
        record_id: unique identifier.
        samples: voltage in millivolts.
        sample_rate_hz: sampling rate, positive.
        hr_bpm: ground-truth heart rate.
        qt_ms: ground-truth QT interval (record-level).
        known_r_peaks: sample indices of true R peaks (synthetic records).
        subject_id: optional subject bucket for grouped cross-validation.
    """

    record_id: str
    samples: np.ndarray
    sample_rate_hz: float
    hr_bpm: float
    qt_ms: float
    known_r_peaks: np.ndarray | None = None
    subject_id: str | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    def validate(self):
        """Raise DataError on invariant violations."""
        if self.sample_rate_hz <= 0:
            raise DataError(f"{self.record_id}: non-positive sample rate")
        if not np.isfinite(self.hr_bpm) or not np.isfinite(self.qt_ms):
            raise DataError(f"{self.record_id}: non-finite hr/qt ground truth")
        lo, hi = HR_ACCEPTED_RANGE
        if not lo <= self.hr_bpm <= hi:
            raise DataError(
                f"{self.record_id}: hr_bpm {self.hr_bpm:.1f} outside accepted "
                f"range [{lo:.0f}, {hi:.0f}]"
            )
        rr_ms = 60000.0 / self.hr_bpm
        if not 0 < self.qt_ms < rr_ms:
            raise DataError(
                f"{self.record_id}: qt_ms {self.qt_ms:.1f} must lie in "
                f"(0, RR interval {rr_ms:.1f} ms)"
            )
        if self.known_r_peaks is not None:
            peaks = np.asarray(self.known_r_peaks)
            if len(peaks) and (peaks.min() < 0 or peaks.max() >= len(self.samples)):
                raise DataError(f"{self.record_id}: known_r_peaks out of range")


@dataclass(frozen=True)
class BeatAnnotation:
    """Per-beat anchoring of the record-level QT interval (sample indices)."""

    r_peak_index: int
    qrs_onset_index: int
    qt_end_index: int

    def __post_init__(self):
        if not self.qrs_onset_index < self.r_peak_index < self.qt_end_index:
            raise DataError(
                f"beat indices not ordered: onset={self.qrs_onset_index} "
                f"r={self.r_peak_index} qt_end={self.qt_end_index}"
            )


@dataclass(frozen=True)
class DetectorParams:
    """R-peak detector settings.

    The detector thresholds the moving-average-smoothed squared first
    difference against k times its rolling median, enforces a refractory
    period, then refines each event to the local raw-signal maximum.
    """

    refractory_ms: float = 250.0
    # crude band-pass: short moving average (noise) minus long one (wander,
    # slow waves), applied before differencing
    lowpass_ms: float = 12.0
    detrend_ms: float = 200.0
    smooth_ms: float = 120.0
    threshold_k: float = 3.0
    median_window_ms: float = 2000.0
    # floor relative to the rolling energy maximum; a pure median threshold
    # collapses to ~0 on clean baselines and then fires on T waves
    threshold_floor_frac: float = 0.08
    refine_ms: float = 60.0
    trust_known_peaks: bool = True


def resample_record(record: EcgRecord, target_hz: float = PIPELINE_RATE_HZ) -> EcgRecord:
    """Linearly resample a record to the pipeline rate.

    Returns the record unchanged when already at target_hz. known_r_peaks are
    rescaled to the new rate.
    """
    if record.sample_rate_hz == target_hz:
        return record
    n_in = len(record.samples)
    if n_in == 0:
        raise EmptySignal(f"{record.record_id}: empty signal")
    duration = record.duration_s
    n_out = int(round_half_up(duration * target_hz))
    t_in = np.arange(n_in) / record.sample_rate_hz
    t_out = np.arange(n_out) / target_hz
    samples = np.interp(t_out, t_in, record.samples)
    peaks = record.known_r_peaks
    if peaks is not None:
        peaks = round_half_up(np.asarray(peaks) * (target_hz / record.sample_rate_hz))
        peaks = np.clip(peaks, 0, n_out - 1)
    return EcgRecord(
        record_id=record.record_id,
        samples=samples,
        sample_rate_hz=target_hz,
        hr_bpm=record.hr_bpm,
        qt_ms=record.qt_ms,
        known_r_peaks=peaks,
        subject_id=record.subject_id,
    )


def _rolling(x: np.ndarray, window: int, reducer) -> np.ndarray:
    """Centered rolling reduction, zero-padded at the edges.

    Zero padding treats out-of-record territory as quiet baseline, which
    biases the adaptive threshold down near the edges instead of replicating
    whatever energy the record happens to end on.
    """
    window = max(3, min(window, len(x)))
    if window % 2 == 0:
        window -= 1
    half = window // 2
    padded = np.concatenate([np.zeros(half), x, np.zeros(half)])
    views = np.lib.stride_tricks.sliding_window_view(padded, window)
    return reducer(views, axis=1)


def detect_r_peaks(record: EcgRecord, params: DetectorParams | None = None) -> np.ndarray:
    """Detect R-peak sample indices.

    Returns a strictly increasing index array with consecutive peaks
    separated by at least the refractory period. When the record carries
    known_r_peaks and params.trust_known_peaks is set, those are returned
    verbatim.

    Raises:
        EmptySignal: record has no samples.
        NoBeatsDetected: no peaks found on a non-empty record.
    """
    params = params or DetectorParams()
    x = record.samples
    if len(x) == 0:
        raise EmptySignal(f"{record.record_id}: empty signal")
    fs = record.sample_rate_hz
    if fs < 100:
        raise DataError(f"{record.record_id}: sample rate {fs} Hz below detector minimum")

    if params.trust_known_peaks and record.known_r_peaks is not None:
        peaks = np.asarray(record.known_r_peaks, dtype=np.int64)
        if len(peaks) and (peaks.min() < 0 or peaks.max() >= len(x)):
            raise IndexOutOfRange(f"{record.record_id}: known_r_peaks out of range")
        if len(peaks) == 0:
            raise NoBeatsDetected(f"{record.record_id}: empty known_r_peaks")
        return peaks

    # band-pass, then smoothed derivative energy
    def moving_average(v, length_ms):
        w = max(1, int(round_half_up(length_ms * fs / 1000.0)))
        return np.convolve(v, np.ones(w) / w, mode="same")

    banded = moving_average(x, params.lowpass_ms)
    banded = banded - moving_average(banded, params.detrend_ms)
    d = np.diff(banded)
    energy = d * d
    smoothed = moving_average(energy, params.smooth_ms)

    med_win = max(3, int(round_half_up(params.median_window_ms * fs / 1000.0)))
    threshold = np.maximum(
        params.threshold_k * _rolling(smoothed, med_win, np.median),
        params.threshold_floor_frac * _rolling(smoothed, med_win, np.max),
    )

    above = smoothed > threshold
    local_max = np.zeros_like(above)
    local_max[1:-1] = (smoothed[1:-1] >= smoothed[:-2]) & (smoothed[1:-1] > smoothed[2:])
    if len(smoothed) > 1:
        # edge samples count too: truncated beats at the record boundary
        # still produce an energy ramp ending at the edge
        local_max[0] = smoothed[0] > smoothed[1]
        local_max[-1] = smoothed[-1] >= smoothed[-2]
    candidates = np.flatnonzero(above & local_max & (smoothed > 0))
    if len(candidates) == 0:
        raise NoBeatsDetected(f"{record.record_id}: no beats detected")

    refractory = int(round_half_up(params.refractory_ms * fs / 1000.0))
    kept: list[int] = []
    for c in candidates:
        if kept and c - kept[-1] < refractory:
            if smoothed[c] > smoothed[kept[-1]]:
                kept[-1] = int(c)
        else:
            kept.append(int(c))

    # refine each event to the raw-signal maximum nearby (lead II R is positive)
    refine = int(round_half_up(params.refine_ms * fs / 1000.0))
    refined = []
    for c in kept:
        lo = max(0, c - refine)
        hi = min(len(x), c + refine + 1)
        refined.append(lo + int(np.argmax(x[lo:hi])))

    # refinement can merge neighbours; re-enforce ordering and refractory
    peaks: list[int] = []
    for p in sorted(set(refined)):
        if peaks and p - peaks[-1] < refractory:
            if x[p] > x[peaks[-1]]:
                peaks[-1] = p
        else:
            peaks.append(p)
    if not peaks:
        raise NoBeatsDetected(f"{record.record_id}: no beats detected")
    return np.asarray(peaks, dtype=np.int64)


def annotate_beats(
    record: EcgRecord, r_peaks: np.ndarray, qrs_offset_ms: float = 40.0
) -> list[BeatAnnotation]:
    """Anchor the record-level QT interval to each detected beat.

    QRS onset is approximated as the R peak minus a fixed offset; QT end is
    onset plus the record's QT converted to samples. Beats whose QT end (or
    onset) falls outside the record are dropped.

    Raises:
        IndexOutOfRange: an R peak lies outside the sample range.
    """
    r_peaks = np.asarray(r_peaks, dtype=np.int64)
    if len(r_peaks) == 0:
        raise DataError(f"{record.record_id}: no R peaks to annotate")
    n = len(record.samples)
    if r_peaks.min() < 0 or r_peaks.max() >= n:
        raise IndexOutOfRange(f"{record.record_id}: R peak outside sample range")
    fs = record.sample_rate_hz
    offset = int(round_half_up(qrs_offset_ms * fs / 1000.0))
    qt_samples = int(round_half_up(record.qt_ms * fs / 1000.0))
    beats = []
    for r in r_peaks:
        onset = int(r) - offset
        qt_end = onset + qt_samples
        if onset < 0 or qt_end >= n:
            continue
        beats.append(BeatAnnotation(int(r), onset, qt_end))
    return beats


def slice_beat_window(
    record: EcgRecord,
    beat: BeatAnnotation,
    pre_ms: float = 150.0,
    post_ms: float = 850.0,
) -> np.ndarray:
    """Extract a fixed-length voltage window around one beat.

    The window spans [onset - pre_ms, onset + post_ms) and is zero-padded at
    record edges, so the output length depends only on the window and the
    sample rate, never on the beat position.
    """
    fs = record.sample_rate_hz
    n_out = int(round_half_up((pre_ms + post_ms) * fs / 1000.0))
    start = beat.qrs_onset_index - int(round_half_up(pre_ms * fs / 1000.0))
    out = np.zeros(n_out, dtype=np.float64)
    src_lo = max(0, start)
    src_hi = min(len(record.samples), start + n_out)
    if src_lo < src_hi:
        out[src_lo - start : src_hi - start] = record.samples[src_lo:src_hi]
    return out


def select_center_beat(beats: list[BeatAnnotation], n_samples: int) -> BeatAnnotation:
    """Pick the beat whose R peak is nearest the record midpoint.

    The source data never states which beat of a strip the single-beat
    rendering uses; the midpoint beat is this pipeline's (configurable)
    interpretation.
    """
    if not beats:
        raise DataError("no beats to select from")
    mid = n_samples / 2.0
    return min(beats, key=lambda b: (abs(b.r_peak_index - mid), b.r_peak_index))
