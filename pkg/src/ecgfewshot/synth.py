"""Synthetic lead-II-like ECG records with exactly known HR, QT, and labels.

Each beat is a sum of Gaussian bumps (P, Q, R, S, T). Wave placement is
solved analytically so that T-end minus Q-onset equals the requested QT
exactly, with T-end defined as T-center + 2 sigma and Q-onset as Q-center -
2 sigma. That makes planted labels verifiable by construction and gives the
acceptance suite an exact oracle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InfeasibleShape, SpecInfeasible
from .nomogram import NomogramBoundary, RiskLabel, boundary_qt_at, classify
from .signal import EcgRecord, round_half_up

MANIFEST_COLUMNS = [
    "record_id",
    "path",
    "sample_rate_hz",
    "hr_bpm",
    "qt_ms",
    "label",
    "subject_id",
]

# QRS onset convention shared with the annotation step: Q-onset sits exactly
# qrs_anchor_offset_ms before the R peak (q_center_ms - 2*q_sigma_ms = -40).


@dataclass(frozen=True)
class BeatShapeParams:
    """Gaussian wave parameters (amplitudes mV, offsets/widths ms from R)."""

    p_amp: float = 0.15
    p_center_ms: float = -160.0
    p_sigma_ms: float = 22.0
    q_amp: float = -0.12
    q_center_ms: float = -30.0
    q_sigma_ms: float = 5.0
    r_amp: float = 1.1
    r_sigma_ms: float = 9.0
    s_amp: float = -0.25
    s_center_ms: float = 25.0
    s_sigma_ms: float = 7.0
    t_amp: float = 0.40
    t_sigma_ms: float = 35.0
    t_morphology_jitter: float = 0.0
    notched_t_probability: float = 0.0

    def __post_init__(self):
        for name in ("p_sigma_ms", "q_sigma_ms", "r_sigma_ms", "s_sigma_ms", "t_sigma_ms"):
            if getattr(self, name) <= 0:
                raise InfeasibleShape(f"{name} must be positive")
        if self.r_amp <= abs(self.q_amp) or self.r_amp <= abs(self.s_amp):
            raise InfeasibleShape("R amplitude must dominate Q and S")
        if not self.p_center_ms < self.q_center_ms < 0.0 < self.s_center_ms:
            raise InfeasibleShape("wave centers must be ordered P < Q < R < S")
        if not 0.0 <= self.t_morphology_jitter < 1.0:
            raise InfeasibleShape("t_morphology_jitter must be in [0, 1)")
        if not 0.0 <= self.notched_t_probability <= 1.0:
            raise InfeasibleShape("notched_t_probability must be in [0, 1]")

    @property
    def q_onset_ms(self) -> float:
        return self.q_center_ms - 2.0 * self.q_sigma_ms


# Defaults for generated corpora: moderate noise with T-morphology
# variability on, which is what keeps the grayscale task non-trivial.
DEFAULT_SHAPE = BeatShapeParams(t_morphology_jitter=0.18, notched_t_probability=0.15)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of one generated corpus."""

    n_records: int = 500
    positive_fraction: float = 0.2
    hr_range_bpm: tuple = (40.0, 96.0)
    qt_margin_ms: float = 25.0
    noise_sd_mv: float = 0.04
    baseline_wander_amp_mv: float = 0.08
    baseline_wander_freq_hz: float = 0.33
    seed: int = 7
    duration_s: float = 10.0
    sample_rate_hz: float = 500.0
    qt_min_guard_ms: float = 280.0
    qt_max_guard_ms: float = 580.0
    rr_qt_gap_ms: float = 120.0
    first_r_offset_ms: float = 400.0
    n_subjects: int = 20
    shape: BeatShapeParams = DEFAULT_SHAPE

    def __post_init__(self):
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise SpecInfeasible("positive_fraction must be in [0, 1]")
        if self.hr_range_bpm[0] > self.hr_range_bpm[1] or self.hr_range_bpm[0] <= 0:
            raise SpecInfeasible("invalid hr_range_bpm")
        if self.n_records < 0:
            raise SpecInfeasible("n_records must be non-negative")


def _gauss(t: np.ndarray, amp: float, center: float, sigma: float) -> np.ndarray:
    z = (t - center) / sigma
    return amp * np.exp(-0.5 * z * z)


def analytic_waveform(
    t_ms: np.ndarray,
    r_times_ms: np.ndarray,
    shape: BeatShapeParams,
    qt_ms: float,
    t_waves: list | None = None,
) -> np.ndarray:
    """Noise-free waveform: the exact finite sum of Gaussians.

    t_waves optionally carries per-beat (amp, sigma, notched) overrides from a
    jittered generation pass so the analytic reference matches it exactly.
    """
    out = np.zeros_like(t_ms, dtype=np.float64)
    for i, r in enumerate(r_times_ms):
        out += _gauss(t_ms, shape.p_amp, r + shape.p_center_ms, shape.p_sigma_ms)
        out += _gauss(t_ms, shape.q_amp, r + shape.q_center_ms, shape.q_sigma_ms)
        out += _gauss(t_ms, shape.r_amp, r, shape.r_sigma_ms)
        out += _gauss(t_ms, shape.s_amp, r + shape.s_center_ms, shape.s_sigma_ms)
        if t_waves is None:
            t_amp, t_sigma, notched = shape.t_amp, shape.t_sigma_ms, False
        else:
            t_amp, t_sigma, notched = t_waves[i]
        # T placed so that T-end (= center + 2 sigma) lands at Q-onset + QT
        t_end = r + shape.q_onset_ms + qt_ms
        t_center = t_end - 2.0 * t_sigma
        if notched:
            # split into two narrower humps; the envelope end stays at t_end
            out += _gauss(t_ms, 0.62 * t_amp, t_center - 0.7 * t_sigma, 0.55 * t_sigma)
            out += _gauss(t_ms, 0.55 * t_amp, t_center + 0.7 * t_sigma, 0.55 * t_sigma)
        else:
            out += _gauss(t_ms, t_amp, t_center, t_sigma)
    return out


def _check_feasible(shape: BeatShapeParams, qt_ms: float, rr_ms: float, rr_qt_gap_ms: float):
    t_center = shape.q_onset_ms + qt_ms - 2.0 * shape.t_sigma_ms
    if t_center <= shape.s_center_ms + 2.0 * shape.s_sigma_ms:
        raise InfeasibleShape(
            f"qt_ms {qt_ms:.0f} too short: T center {t_center:.0f} ms would "
            f"collide with the S wave"
        )
    if qt_ms >= rr_ms - rr_qt_gap_ms:
        raise InfeasibleShape(
            f"qt_ms {qt_ms:.0f} leaves less than {rr_qt_gap_ms:.0f} ms of the "
            f"RR interval ({rr_ms:.0f} ms)"
        )


def generate_record(
    record_id: str,
    hr_bpm: float,
    qt_ms: float,
    rng: np.random.Generator,
    shape: BeatShapeParams = DEFAULT_SHAPE,
    duration_s: float = 10.0,
    sample_rate_hz: float = 500.0,
    noise_sd_mv: float = 0.0,
    baseline_wander_amp_mv: float = 0.0,
    baseline_wander_freq_hz: float = 0.33,
    first_r_offset_ms: float = 400.0,
    rr_qt_gap_ms: float = 120.0,
    subject_id: str | None = None,
) -> EcgRecord:
    """Generate one record with beats spaced at exactly 60000/hr ms.

    The returned record's qt_ms and hr_bpm are the requested values and
    known_r_peaks holds the exact planted peak positions.

    Raises:
        InfeasibleShape: the requested QT cannot fit the wave ordering.
    """
    rr_ms = 60000.0 / hr_bpm
    _check_feasible(shape, qt_ms, rr_ms, rr_qt_gap_ms)
    duration_ms = duration_s * 1000.0
    r_times = np.arange(first_r_offset_ms, duration_ms, rr_ms)
    n = int(round_half_up(duration_s * sample_rate_hz))
    t_ms = np.arange(n) * (1000.0 / sample_rate_hz)

    t_waves = []
    jit = shape.t_morphology_jitter
    for _ in r_times:
        # draw per-beat morphology even when jitter is 0 so record content
        # downstream of a beat does not depend on the jitter switch
        z_amp, z_sig = rng.standard_normal(2)
        notched = bool(rng.random() < shape.notched_t_probability)
        amp = shape.t_amp * float(np.clip(1.0 + jit * z_amp, 0.35, 1.8))
        sigma = shape.t_sigma_ms * float(np.clip(1.0 + jit * z_sig, 0.5, 1.6))
        t_waves.append((amp, sigma, notched))

    samples = analytic_waveform(t_ms, r_times, shape, qt_ms, t_waves)
    if baseline_wander_amp_mv > 0:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        samples = samples + baseline_wander_amp_mv * np.sin(
            2.0 * np.pi * baseline_wander_freq_hz * t_ms / 1000.0 + phase
        )
    if noise_sd_mv > 0:
        samples = samples + rng.normal(0.0, noise_sd_mv, n)

    return EcgRecord(
        record_id=record_id,
        samples=samples,
        sample_rate_hz=sample_rate_hz,
        hr_bpm=hr_bpm,
        qt_ms=qt_ms,
        known_r_peaks=round_half_up(r_times * sample_rate_hz / 1000.0),
        subject_id=subject_id,
    )


def _qt_interval_for(
    spec: SynthSpec, boundary: NomogramBoundary, hr: float, positive: bool
) -> tuple:
    """Feasible uniform QT sampling interval for a planted label at hr."""
    threshold = float(boundary_qt_at(boundary, hr))
    rr = 60000.0 / hr
    if positive:
        lo = threshold + spec.qt_margin_ms
        hi = min(spec.qt_max_guard_ms, rr - spec.rr_qt_gap_ms)
    else:
        lo = spec.qt_min_guard_ms
        hi = threshold - spec.qt_margin_ms
    if lo >= hi:
        raise SpecInfeasible(
            f"no feasible {'positive' if positive else 'negative'} QT at "
            f"hr={hr:.1f} (interval [{lo:.1f}, {hi:.1f}] ms); relax qt_margin_ms "
            f"or the physiologic guards"
        )
    return lo, hi


def validate_spec(spec: SynthSpec, boundary: NomogramBoundary):
    """Reject degenerate specs before generating anything.

    A zero margin would make labels boundary-ambiguous; hr endpoints (and
    boundary breakpoints inside the range) must admit both labels.
    """
    if spec.qt_margin_ms <= 0:
        raise SpecInfeasible("qt_margin_ms must be positive: labels would be boundary-ambiguous")
    lo, hi = spec.hr_range_bpm
    if lo < boundary.hr_range[0] or hi > boundary.hr_range[1]:
        raise SpecInfeasible(
            f"hr_range {spec.hr_range_bpm} outside boundary coverage {boundary.hr_range}"
        )
    probe = [lo, hi] + [h for h in boundary.hr_bpm if lo < h < hi]
    for hr in probe:
        for positive in (False, True):
            _qt_interval_for(spec, boundary, hr, positive)


def generate_dataset(
    spec: SynthSpec, boundary: NomogramBoundary, out_dir
) -> Path:
    """Generate a corpus on disk; return the manifest path.

    Positives draw QT at least qt_margin_ms above the boundary at the
    record's heart rate, negatives at least the margin below. Every planted
    label is re-checked against the boundary after generation.
    """
    validate_spec(spec, boundary)
    out_dir = Path(out_dir)
    (out_dir / "records").mkdir(parents=True, exist_ok=True)

    n = spec.n_records
    n_pos = int(round_half_up(n * spec.positive_fraction))
    root = np.random.SeedSequence(spec.seed)
    assign_ss, *record_ss = root.spawn(n + 1)
    assign_rng = np.random.default_rng(assign_ss)
    # plant exact class counts, shuffled across indices
    labels = np.array([True] * n_pos + [False] * (n - n_pos))
    assign_rng.shuffle(labels)

    width = max(4, len(str(max(n - 1, 1))))
    rows = []
    for i in range(n):
        rng = np.random.default_rng(record_ss[i])
        hr = float(rng.uniform(*spec.hr_range_bpm))
        lo, hi = _qt_interval_for(spec, boundary, hr, bool(labels[i]))
        qt = float(rng.uniform(lo, hi))
        record_id = f"syn{i:0{width}d}"
        subject_id = f"S{i % spec.n_subjects:03d}"
        record = generate_record(
            record_id,
            hr,
            qt,
            rng,
            shape=spec.shape,
            duration_s=spec.duration_s,
            sample_rate_hz=spec.sample_rate_hz,
            noise_sd_mv=spec.noise_sd_mv,
            baseline_wander_amp_mv=spec.baseline_wander_amp_mv,
            baseline_wander_freq_hz=spec.baseline_wander_freq_hz,
            first_r_offset_ms=spec.first_r_offset_ms,
            rr_qt_gap_ms=spec.rr_qt_gap_ms,
            subject_id=subject_id,
        )
        planted = RiskLabel.AT_RISK if labels[i] else RiskLabel.NO_RISK
        recheck = classify(boundary, record.qt_ms, record.hr_bpm)
        if recheck is not planted:
            raise AssertionError(
                f"{record_id}: planted label {planted} disagrees with boundary "
                f"classification {recheck}"
            )
        rel_path = f"records/{record_id}.csv"
        with open(out_dir / rel_path, "w", newline="") as fh:
            fh.write("mv\n")
            fh.writelines(f"{v:.6f}\n" for v in record.samples)
        rows.append(
            {
                "record_id": record_id,
                "path": rel_path,
                "sample_rate_hz": f"{spec.sample_rate_hz:g}",
                "hr_bpm": f"{hr:.6f}",
                "qt_ms": f"{qt:.6f}",
                "label": planted.value,
                "subject_id": subject_id,
            }
        )

    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return manifest
