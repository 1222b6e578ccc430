"""Left-right flow consistency, occlusion statistics and image quality metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from . import kernels
from .datakit import FrameSequence

DEFAULT_EPSILON = 4.0
BUCKET_EDGES = (0.10, 0.20, 0.30, 0.40)
FLOW_DIRECTIONS = ("left_to_right", "right_to_left", "frame_to_frame")


class MetricError(ValueError):
    pass


@dataclass
class FlowField:
    vectors: np.ndarray  # H x W x 2, (horizontal, vertical) in pixels
    direction: str = "left_to_right"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 3 or self.vectors.shape[-1] != 2:
            raise MetricError(f"flow must be H x W x 2, got {self.vectors.shape}")
        if self.direction not in FLOW_DIRECTIONS:
            raise MetricError(f"unknown flow direction {self.direction!r}")
        if not np.all(np.isfinite(self.vectors)):
            raise MetricError("flow contains non-finite values")


@dataclass
class ConsistencyMap:
    errors: np.ndarray  # H x W, pixels

    def __post_init__(self):
        self.errors = np.asarray(self.errors, dtype=np.float64)
        if np.any(self.errors < 0):
            raise MetricError("consistency errors must be non-negative")


@dataclass
class QualityReport:
    l1: float
    ssim: float
    psnr: float

    def as_dict(self):
        return {"l1": self.l1, "ssim": self.ssim, "psnr": self.psnr}


# A flow provider maps an (left, right) image pair to (F_lr, F_rl).
FlowProvider = Callable[[np.ndarray, np.ndarray], "tuple[FlowField, FlowField]"]


def flow_consistency(f_lr, f_rl):
    """Forward-backward error ``|F_lr(p) + F_rl(p + F_lr(p))|``.

    ``F_rl`` is sampled bilinearly; targets outside the image clamp to the border.
    """
    a = f_lr.vectors if isinstance(f_lr, FlowField) else np.asarray(f_lr, dtype=np.float64)
    b = f_rl.vectors if isinstance(f_rl, FlowField) else np.asarray(f_rl, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"flow shapes differ: {a.shape} vs {b.shape}")
    err = kernels.consistency_error(a[None], b[None])[0]
    return ConsistencyMap(err)


def occlusion_fraction(c, epsilon=DEFAULT_EPSILON):
    """Fraction of pixels whose consistency error strictly exceeds ``epsilon``."""
    if epsilon <= 0:
        raise MetricError("epsilon must be positive")
    errors = c.errors if isinstance(c, ConsistencyMap) else np.asarray(c)
    return float(np.count_nonzero(errors > epsilon)) / errors.size


def occlusion_breakdown(fractions, edges=BUCKET_EDGES):
    """Percentage of frames whose occluded fraction is below each bucket edge."""
    fr = np.asarray(list(fractions), dtype=np.float64)
    if fr.size == 0:
        raise MetricError("no frames to break down")
    if np.any((fr < 0) | (fr > 1)):
        raise MetricError("fractions must lie in [0, 1]")
    return tuple(100.0 * float(np.count_nonzero(fr < e)) / fr.size for e in edges)


def ground_truth_flow_provider(left_disparity, right_disparity):
    """Flow provider backed by known per-pixel disparities (synthetic scenes).

    A left pixel with disparity ``d`` lands at ``x - d`` in the right view, so
    ``F_lr = (-d_left, 0)`` and ``F_rl = (+d_right, 0)``.
    """

    def provider(left=None, right=None, t=0):
        f_lr = np.zeros(left_disparity.shape[1:] + (2,))
        f_rl = np.zeros_like(f_lr)
        f_lr[..., 0] = -left_disparity[t]
        f_rl[..., 0] = right_disparity[t]
        return FlowField(f_lr, "left_to_right"), FlowField(f_rl, "right_to_left")

    return provider


def farneback_flow_provider(left, right, t=0):
    """Dense flow via OpenCV Farneback; an optional stand-in for a learned estimator."""
    import cv2

    def gray(img):
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 3 and img.shape[2] == 3:
            img = img @ np.array([0.299, 0.587, 0.114])
        return np.clip(img.reshape(img.shape[:2]), 0, 255).astype(np.uint8)

    gl, gr = gray(left), gray(right)
    args = (None, 0.5, 3, 15, 3, 5, 1.2, 0)
    f_lr = cv2.calcOpticalFlowFarneback(gl, gr, *args)
    f_rl = cv2.calcOpticalFlowFarneback(gr, gl, *args)
    return FlowField(f_lr, "left_to_right"), FlowField(f_rl, "right_to_left")


# --------------------------------------------------------------------------- image quality


def _gaussian_taps(size=11, sigma=1.5):
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_plane(a, b, data_range, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM of two 2-D planes with a Gaussian window.

    Statistics use population (unbiased=False) moments; the mean is taken over
    positions where the full window fits inside the image.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    taps = _gaussian_taps(size, sigma)

    def blur(x):
        return correlate1d(correlate1d(x, taps, axis=0, mode="reflect"), taps, axis=1, mode="reflect")

    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a * mu_a
    sbb = blur(b * b) - mu_b * mu_b
    sab = blur(a * b) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    smap = num / den
    r = size // 2
    if smap.shape[0] > 2 * r and smap.shape[1] > 2 * r:
        smap = smap[r:-r, r:-r]
    return float(np.clip(smap.mean(), -1.0, 1.0))


def evaluate_pair(pred, gt):
    """L1 (on a [0, 1] scale), mean SSIM and PSNR between two sequences.

    PSNR uses the value-range width as MAX and is ``inf`` for identical inputs.
    """
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.value_range != gt.value_range:
        raise MetricError(f"value range mismatch: {pred.value_range} vs {gt.value_range}")
    lo, hi = gt.value_range
    span = hi - lo
    p = pred.frames.astype(np.float64)
    g = gt.frames.astype(np.float64)
    diff = p - g
    l1 = float(np.mean(np.abs(diff))) / span
    mse = float(np.mean(diff ** 2))
    psnr = math.inf if mse == 0 else 10.0 * math.log10(span ** 2 / mse)
    scores = [
        ssim_plane(p[t, ..., c], g[t, ..., c], data_range=span)
        for t in range(p.shape[0])
        for c in range(p.shape[3])
    ]
    return QualityReport(l1=l1, ssim=float(np.mean(scores)), psnr=psnr)


def aggregate_reports(reports):
    """Frame-weighted mean of per-clip reports (PSNR averaged in dB over finite values)."""
    reports = list(reports)
    if not reports:
        raise MetricError("no reports to aggregate")
    psnrs = [r.psnr for r in reports]
    finite = [p for p in psnrs if math.isfinite(p)]
    psnr = math.inf if not finite else float(np.mean(finite))
    return QualityReport(
        l1=float(np.mean([r.l1 for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        psnr=psnr,
    )


def analyze_sequence(left, right, provider, epsilon=DEFAULT_EPSILON):
    """Per-frame consistency statistics for a stereo clip.

    Returns a list of dicts with the mean error and the occluded fraction.
    """
    rows = []
    for t in range(len(left)):
        f_lr, f_rl = provider(left.frames[t], right.frames[t], t=t)
        cmap = flow_consistency(f_lr, f_rl)
        rows.append(
            {
                "frame": t,
                "mean_error": float(cmap.errors.mean()),
                "occluded_fraction": occlusion_fraction(cmap, epsilon),
            }
        )
    return rows
