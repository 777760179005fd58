"""Deterministic rasterization of ECG segments into image representations.

Four representations are produced per record: a square single-beat image and
a wide full-strip rhythm image, each with and without pseudo-coloring. The
pseudo-color encodes elapsed time since QRS onset as a fraction of the
record's heart-rate-dependent QT risk threshold, so pure red appears exactly
when the elapsed time crosses the at-risk threshold.

All geometry is computed in integer pixel space after a single quantization
step (floor(x + 0.5)), which makes renders bitwise reproducible.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, RasterOverflow
from .nomogram import NomogramBoundary, boundary_qt_at
from .signal import BeatAnnotation, EcgRecord, round_half_up, slice_beat_window


class ImageKind(Enum):
    SINGLE_BEAT = "single"
    RHYTHM = "rhythm"


@dataclass(frozen=True)
class ColorScale:
    """Piecewise-linear RGB ramp over the elapsed/threshold ratio u.

    Stops are (u, (r, g, b)) with strictly increasing u, the first stop at
    u=0 and a stop at u=1. Values outside [clamp_low, clamp_high] clamp.
    """

    stops: tuple
    clamp_low: float = 0.0
    clamp_high: float = 1.0

    def __post_init__(self):
        us = [s[0] for s in self.stops]
        if len(us) < 2 or any(b <= a for a, b in zip(us, us[1:])):
            raise DataError("color scale stops must be strictly increasing in u")
        if us[0] != 0.0:
            raise DataError("color scale must start at u=0")
        if 1.0 not in us:
            raise DataError("color scale must have a stop at u=1")


# Defaults follow the clinical reading of the ramp: safe green through the
# warning yellow-orange band into pure red at the at-risk threshold.
DEFAULT_COLOR_SCALE = ColorScale(
    stops=(
        (0.0, (0, 128, 0)),
        (0.70, (255, 255, 0)),
        (0.90, (255, 165, 0)),
        (1.00, (255, 0, 0)),
    )
)


@dataclass(frozen=True)
class RenderConfig:
    beat_size_px: int = 256
    rhythm_width_px: int = 2048
    rhythm_height_px: int = 256
    pre_ms: float = 150.0
    post_ms: float = 850.0
    margin_frac: float = 0.10
    trace_rgb: tuple = (32, 32, 32)
    background_rgb: tuple = (255, 255, 255)
    trace_thickness_px: int = 2
    min_fill_band_px: int = 4
    color_scale: ColorScale = DEFAULT_COLOR_SCALE

    def canonical_items(self, kind: ImageKind, colored: bool):
        items = [
            ("kind", kind.value),
            ("colored", str(bool(colored)).lower()),
            ("margin_frac", f"{self.margin_frac:g}"),
            ("trace_rgb", ",".join(str(c) for c in self.trace_rgb)),
            ("background_rgb", ",".join(str(c) for c in self.background_rgb)),
            ("trace_thickness_px", str(self.trace_thickness_px)),
        ]
        if kind is ImageKind.SINGLE_BEAT:
            items += [
                ("beat_size_px", str(self.beat_size_px)),
                ("pre_ms", f"{self.pre_ms:g}"),
                ("post_ms", f"{self.post_ms:g}"),
            ]
        else:
            items += [
                ("rhythm_width_px", str(self.rhythm_width_px)),
                ("rhythm_height_px", str(self.rhythm_height_px)),
            ]
        if colored:
            items.append(("min_fill_band_px", str(self.min_fill_band_px)))
            items.append(
                (
                    "color_scale",
                    ";".join(
                        f"{u:g}:{r},{g},{b}" for u, (r, g, b) in self.color_scale.stops
                    )
                    + f"|{self.color_scale.clamp_low:g}|{self.color_scale.clamp_high:g}",
                )
            )
        return items

    def config_hash(self, kind: ImageKind, colored: bool) -> str:
        """Hex digest over every setting that affects this variant's pixels."""
        text = "\n".join(f"{k}={v}" for k, v in self.canonical_items(kind, colored))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(eq=False)
class EcgImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8
    kind: ImageKind
    colored: bool
    source_record_id: str
    render_config_hash: str


def color_at(scale: ColorScale, u: float) -> tuple:
    """RGB at ratio u: clamp, then per-channel linear interpolation."""
    u = min(max(float(u), scale.clamp_low), scale.clamp_high)
    stops = scale.stops
    if u <= stops[0][0]:
        return tuple(stops[0][1])
    for (u0, c0), (u1, c1) in zip(stops, stops[1:]):
        if u <= u1:
            f = (u - u0) / (u1 - u0)
            return tuple(
                int(round_half_up(a + (b - a) * f)) for a, b in zip(c0, c1)
            )
    return tuple(stops[-1][1])


def elapsed_ratio(t_ms: float, hr_bpm: float, boundary: NomogramBoundary) -> float:
    """Elapsed time since QRS onset as a fraction of the risk threshold.

    u >= 1 exactly when the elapsed time crosses the at-risk QT threshold
    for this heart rate.
    """
    if t_ms < 0:
        raise DataError(f"elapsed time must be non-negative, got {t_ms}")
    return float(t_ms) / float(boundary_qt_at(boundary, hr_bpm))


def _quantize_y(values: np.ndarray, height: int, margin_frac: float) -> np.ndarray:
    """Map voltages to pixel rows with headroom margins (one quantization).

    Flat (zero-range) windows render the baseline at mid-height.
    """
    if not np.all(np.isfinite(values)):
        raise RasterOverflow("non-finite voltage in raster window")
    vmin = float(values.min())
    vmax = float(values.max())
    margin = int(round_half_up(margin_frac * (height - 1)))
    usable = height - 1 - 2 * margin
    if vmax - vmin < 1e-12:
        return np.full(len(values), height // 2, dtype=np.int64)
    y = margin + (vmax - values) * (usable / (vmax - vmin))
    return round_half_up(y)


def _column_extents(xs: np.ndarray, ys: np.ndarray, width: int):
    """Per-column min/max trace rows plus carries that keep columns connected.

    Columns never visited by a sample take the previous column's last row so
    the polyline stays unbroken.
    """
    ymin = np.full(width, np.iinfo(np.int64).max, dtype=np.int64)
    ymax = np.full(width, np.iinfo(np.int64).min, dtype=np.int64)
    np.minimum.at(ymin, xs, ys)
    np.maximum.at(ymax, xs, ys)
    # last sample row per column, for connecting carry
    last = np.full(width, -1, dtype=np.int64)
    last[xs] = ys  # later samples win: xs is in time order
    lo = ymin.copy()
    hi = ymax.copy()
    carry = -1
    for x in range(width):
        if last[x] < 0:
            if carry >= 0:
                lo[x] = hi[x] = carry
                last[x] = carry
            continue
        if carry >= 0:
            lo[x] = min(lo[x], carry)
            hi[x] = max(hi[x], carry)
        carry = last[x]
    visited = last >= 0
    return lo, hi, visited


def _render_segment(
    samples: np.ndarray,
    fs: float,
    width: int,
    height: int,
    config: RenderConfig,
    spans_ms: list,
    hr_bpm: float,
    boundary: NomogramBoundary | None,
    colored: bool,
) -> np.ndarray:
    """Rasterize one voltage segment.

    spans_ms lists (onset_ms, qt_ms) QT spans in segment-local time; each is
    filled between trace and isoelectric baseline when colored.
    """
    n = len(samples)
    if n == 0:
        raise DataError("empty raster segment")
    window_ms = n * 1000.0 / fs
    px_per_ms = width / window_ms

    t_ms = np.arange(n) * (1000.0 / fs)
    xs = np.minimum((t_ms * px_per_ms).astype(np.int64), width - 1)
    ys = _quantize_y(samples, height, config.margin_frac)
    lo, hi, visited = _column_extents(xs, ys, width)

    canvas = np.empty((height, width, 3), dtype=np.uint8)
    canvas[:, :] = config.background_rgb

    if colored:
        if boundary is None:
            raise DataError("colored render requires a boundary")
        # baseline quantized against the full window range, same map as ys
        baseline_v = float(np.median(samples))
        vmin, vmax = float(samples.min()), float(samples.max())
        if vmax - vmin < 1e-12:
            base_y = height // 2
        else:
            margin = int(round_half_up(config.margin_frac * (height - 1)))
            usable = height - 1 - 2 * margin
            base_y = int(round_half_up(margin + (vmax - baseline_v) * (usable / (vmax - vmin))))
        threshold = float(boundary_qt_at(boundary, hr_bpm))
        thick = max(1, config.trace_thickness_px)
        for onset_ms, qt_ms in spans_ms:
            x_on = int(round_half_up(onset_ms * px_per_ms))
            x_end = int(round_half_up((onset_ms + qt_ms) * px_per_ms))
            for x in range(max(0, x_on), min(x_end, width)):
                elapsed = (x - x_on + 0.5) / px_per_ms
                rgb = color_at(config.color_scale, elapsed / threshold)
                if visited[x]:
                    y0 = min(int(lo[x]), base_y)
                    # skirt below the (about to be drawn) trace bottom keeps
                    # every span column visibly colored even where the trace
                    # is tall enough to cover the whole trace-baseline band
                    y1 = max(int(hi[x]) + thick - 1, base_y) + config.min_fill_band_px
                else:
                    y0 = base_y
                    y1 = base_y + config.min_fill_band_px
                canvas[y0 : min(y1, height - 1) + 1, x] = rgb

    ink = np.asarray(config.trace_rgb, dtype=np.uint8)
    thick = max(1, config.trace_thickness_px)
    for x in range(width):
        if not visited[x]:
            continue
        y0 = int(lo[x])
        y1 = min(height - 1, int(hi[x]) + thick - 1)
        canvas[y0 : y1 + 1, x] = ink
    return canvas


def rasterize_beat(
    record: EcgRecord,
    beat: BeatAnnotation,
    config: RenderConfig,
    boundary: NomogramBoundary | None = None,
    colored: bool = False,
) -> EcgImage:
    """Render one beat window into a square single-beat image.

    Time maps linearly onto x, voltage onto y with headroom margins. When
    colored, each column between the beat's QRS onset and QT end is filled
    between trace and baseline with the ramp color for its elapsed ratio.
    """
    window = slice_beat_window(record, beat, config.pre_ms, config.post_ms)
    size = config.beat_size_px
    spans = [(config.pre_ms, record.qt_ms)] if colored else []
    pixels = _render_segment(
        window,
        record.sample_rate_hz,
        size,
        size,
        config,
        spans,
        record.hr_bpm,
        boundary,
        colored,
    )
    return EcgImage(
        width=size,
        height=size,
        pixels=pixels,
        kind=ImageKind.SINGLE_BEAT,
        colored=colored,
        source_record_id=record.record_id,
        render_config_hash=config.config_hash(ImageKind.SINGLE_BEAT, colored),
    )


def rasterize_rhythm(
    record: EcgRecord,
    beats: list,
    config: RenderConfig,
    boundary: NomogramBoundary | None = None,
    colored: bool = False,
) -> EcgImage:
    """Render the full strip into a wide rhythm image.

    Every annotated beat's QT span is filled per the single-beat coloring
    rules; beats dropped during annotation simply have no span and are drawn
    as uncolored trace.
    """
    fs = record.sample_rate_hz
    spans = []
    if colored:
        for b in beats:
            onset_ms = b.qrs_onset_index * 1000.0 / fs
            spans.append((onset_ms, record.qt_ms))
    pixels = _render_segment(
        record.samples,
        fs,
        config.rhythm_width_px,
        config.rhythm_height_px,
        config,
        spans,
        record.hr_bpm,
        boundary,
        colored,
    )
    return EcgImage(
        width=config.rhythm_width_px,
        height=config.rhythm_height_px,
        pixels=pixels,
        kind=ImageKind.RHYTHM,
        colored=colored,
        source_record_id=record.record_id,
        render_config_hash=config.config_hash(ImageKind.RHYTHM, colored),
    )


def image_filename(record_id: str, kind: ImageKind, colored: bool) -> str:
    return f"{record_id}_{kind.value}_{'color' if colored else 'gray'}.png"


def encode_png(image: EcgImage, path):
    """Write the image as 8-bit RGB PNG (no alpha); deterministic bytes."""
    path = Path(path)
    try:
        Image.fromarray(image.pixels, mode="RGB").save(
            path, format="PNG", compress_level=6
        )
    except OSError as exc:
        raise DataError(f"failed to write {path}: {exc}") from exc


def decode_png(path) -> np.ndarray:
    """Read a PNG back into an (H, W, 3) uint8 array."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise DataError(f"failed to read {path}: {exc}") from exc
