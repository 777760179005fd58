"""Local perturbation-based explanations of single-image predictions.

The image is tiled into grid segments (ECG renders are line drawings on a
uniform background, where content-driven superpixels degenerate). Random
segment masks produce perturbed images with masked segments set to the
rendering background; a weighted sparse ridge surrogate is then fit to the
model's target-class probabilities, giving one weight per segment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, SingularSystem
from .signal import round_half_up


@dataclass(frozen=True)
class SegmentMap:
    """Grid tiling of an image; every pixel belongs to exactly one segment."""

    width: int
    height: int
    cell_px: int
    ids: np.ndarray  # (height, width) int32
    n_segments: int


@dataclass
class Explanation:
    weights: np.ndarray  # one per segment; zeros outside the retained top_k
    intercept: float
    kernel_width: float
    n_samples: int
    target_class: int
    fidelity: float
    cell_px: int
    low_confidence: bool = False

    def to_json(self) -> str:
        return json.dumps(
            {
                "weights": [float(w) for w in self.weights],
                "intercept": self.intercept,
                "kernel_width": self.kernel_width,
                "n_samples": self.n_samples,
                "target_class": self.target_class,
                "fidelity": self.fidelity,
                "cell_px": self.cell_px,
                "low_confidence": self.low_confidence,
            },
            sort_keys=True,
        )


def segment_image(shape_or_image, cell_px: int) -> SegmentMap:
    """Deterministic grid tiling; remainder pixels join the edge cells."""
    if hasattr(shape_or_image, "pixels"):
        height, width = shape_or_image.pixels.shape[:2]
    elif isinstance(shape_or_image, np.ndarray):
        height, width = shape_or_image.shape[:2]
    else:
        height, width = shape_or_image
    if cell_px < 1:
        raise DataError("cell_px must be >= 1")
    nx = max(1, width // cell_px)
    ny = max(1, height // cell_px)
    col = np.minimum(np.arange(width) // cell_px, nx - 1)
    row = np.minimum(np.arange(height) // cell_px, ny - 1)
    ids = (row[:, None] * nx + col[None, :]).astype(np.int32)
    return SegmentMap(width=width, height=height, cell_px=cell_px, ids=ids,
                      n_segments=nx * ny)


def perturb(image: np.ndarray, seg_map: SegmentMap, mask: np.ndarray,
            background=(255, 255, 255)) -> np.ndarray:
    """Copy of the image with masked-off segments set to the background."""
    mask = np.asarray(mask).astype(bool)
    if mask.shape != (seg_map.n_segments,):
        raise DataError(f"mask length {mask.shape} != n_segments {seg_map.n_segments}")
    out = image.copy()
    off = ~mask[seg_map.ids]
    out[off] = np.asarray(background, dtype=image.dtype)
    return out


def proximity_weight(mask: np.ndarray, kernel_width: float = 0.25):
    """exp(-d^2 / sigma^2) with d = fraction of segments turned off.

    Accepts one mask or a (n, s) batch.
    """
    if kernel_width <= 0:
        raise DataError("kernel_width must be positive")
    mask = np.asarray(mask, dtype=bool)
    d = 1.0 - mask.mean(axis=-1)
    return np.exp(-(d * d) / (kernel_width * kernel_width))


def fit_surrogate(masks: np.ndarray, outputs: np.ndarray, weights: np.ndarray,
                  ridge_lambda: float = 1.0, top_k: int = 10,
                  kernel_width: float = 0.25, n_samples: int | None = None,
                  target_class: int = 0, cell_px: int = 0) -> Explanation:
    """Weighted ridge on standardized mask features, then top-k truncation.

    Solves (Z'WZ + lambda I) w = Z'Wy on standardized columns (so the
    penalty is scale-free), maps coefficients back to the raw 0/1 features,
    and zeroes all but the top_k by absolute weight. Fidelity is the
    weighted R^2 of the full (pre-truncation) fit; a constant-output model
    yields zero weights and zero fidelity.
    """
    Z = np.asarray(masks, dtype=np.float64)
    y = np.asarray(outputs, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n, s = Z.shape
    if len(y) != n or len(w) != n:
        raise DataError("masks, outputs and weights must agree in length")
    if n < 2:
        raise DataError("need at least 2 samples to fit a surrogate")
    w = w / w.sum()  # duplication-invariant

    z_mean = w @ Z
    y_mean = float(w @ y)
    Zc = Z - z_mean
    yc = y - y_mean
    z_var = w @ (Zc * Zc)
    z_std = np.sqrt(z_var)
    active = z_std > 1e-12
    Zs = np.where(active, Zc / np.where(active, z_std, 1.0), 0.0)

    A = (Zs * w[:, None]).T @ Zs
    b = (Zs * w[:, None]).T @ yc
    if ridge_lambda > 0:
        A = A + ridge_lambda * np.eye(s)
        coef_s = np.linalg.solve(A, b)
    else:
        try:
            coef_s = np.linalg.solve(A, b)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(
                "rank-deficient masks with ridge_lambda=0"
            ) from exc
    coef = np.where(active, coef_s / np.where(active, z_std, 1.0), 0.0)
    intercept = y_mean - float(coef @ z_mean)

    pred = Z @ coef + intercept
    ss_res = float(w @ ((y - pred) ** 2))
    ss_tot = float(w @ (yc * yc))
    fidelity = 0.0 if ss_tot < 1e-18 else 1.0 - ss_res / ss_tot

    truncated = coef.copy()
    if top_k < s:
        keep = np.argsort(-np.abs(coef), kind="stable")[:top_k]
        mask_keep = np.zeros(s, dtype=bool)
        mask_keep[keep] = True
        truncated[~mask_keep] = 0.0

    return Explanation(
        weights=truncated,
        intercept=intercept,
        kernel_width=kernel_width,
        n_samples=n_samples if n_samples is not None else n,
        target_class=target_class,
        fidelity=fidelity,
        cell_px=cell_px,
        low_confidence=fidelity < 0.2,
    )


DEFAULT_HIGHLIGHT_RGB = (60, 120, 255)


def overlay_image(image: np.ndarray, seg_map: SegmentMap, explanation: Explanation,
                  highlight=DEFAULT_HIGHLIGHT_RGB) -> np.ndarray:
    """Tint positive-weight segments with weight-proportional opacity."""
    out = image.astype(np.float64)
    pos = explanation.weights > 0
    if pos.any():
        w_max = explanation.weights[pos].max()
        tint = np.asarray(highlight, dtype=np.float64)
        for seg in np.flatnonzero(pos):
            alpha = 0.15 + 0.45 * float(explanation.weights[seg] / w_max)
            region = seg_map.ids == seg
            out[region] = (1 - alpha) * out[region] + alpha * tint
    return np.clip(round_half_up(out), 0, 255).astype(np.uint8)


def default_cell_px(image: np.ndarray) -> int:
    """16 px cells for square single-beat renders, 32 px for wide rhythms."""
    h, w = image.shape[:2]
    return 32 if w > 2 * h else 16


def explain_image(predict_fn, image: np.ndarray, *, rng,
                  cell_px: int | None = None, n_samples: int = 1000,
                  kernel_width: float = 0.25, ridge_lambda: float = 1.0,
                  top_k: int = 10, target_class: int | None = None,
                  background=(255, 255, 255), batch: int = 64):
    """Explain one prediction; returns (Explanation, overlay image).

    predict_fn maps a stack of images (N, H, W, 3) uint8 to class
    probabilities (N, n_classes). Masks are drawn with per-segment
    on-probability 0.5; the all-on mask is always included. target_class
    defaults to the model's predicted class on the unmasked image.
    """
    image = np.asarray(image)
    if cell_px is None:
        cell_px = default_cell_px(image)
    seg_map = segment_image(image, cell_px)
    s = seg_map.n_segments

    masks = np.ones((n_samples, s), dtype=bool)
    if n_samples > 1:
        masks[1:] = rng.integers(0, 2, size=(n_samples - 1, s)).astype(bool)

    outputs = np.empty(n_samples, dtype=np.float64)
    base_probs = np.asarray(predict_fn(image[None]))[0]
    if target_class is None:
        target_class = int(np.argmax(base_probs))
    outputs[0] = base_probs[target_class]
    for start in range(1, n_samples, batch):
        stop = min(n_samples, start + batch)
        stack = np.stack(
            [perturb(image, seg_map, masks[i], background) for i in range(start, stop)]
        )
        outputs[start:stop] = np.asarray(predict_fn(stack))[:, target_class]

    weights = proximity_weight(masks, kernel_width)
    explanation = fit_surrogate(
        masks.astype(np.float64),
        outputs,
        weights,
        ridge_lambda=ridge_lambda,
        top_k=top_k,
        kernel_width=kernel_width,
        n_samples=n_samples,
        target_class=target_class,
        cell_px=cell_px,
    )
    return explanation, overlay_image(image, seg_map, explanation)


def colored_segments(image: np.ndarray, seg_map: SegmentMap) -> np.ndarray:
    """Segment ids containing at least one pseudo-color (non-gray) pixel.

    In these renders every background/trace pixel has equal RGB channels, so
    channel disagreement identifies the QT-span fill exactly.
    """
    px = image.astype(np.int16)
    colored = (px[..., 0] != px[..., 1]) | (px[..., 1] != px[..., 2])
    return np.unique(seg_map.ids[colored])


def qt_span_weight_split(explanation: Explanation, span_ids: np.ndarray) -> dict:
    """Summed positive surrogate weight inside vs outside the given segments."""
    pos = np.clip(explanation.weights, 0.0, None)
    inside = np.zeros(len(pos), dtype=bool)
    inside[np.asarray(span_ids, dtype=int)] = True
    return {
        "inside_positive_weight": float(pos[inside].sum()),
        "outside_positive_weight": float(pos[~inside].sum()),
    }
