"""Coincidence statistics between residual images and closed-form predictors.

Correlation values are coincidence counts: the covariance of the two
residual images at a given shift, summed (not averaged) over the overlapping
pixels. The shift convention is ``value(dx, dy) = sum_p sig[p + (dx, dy)] *
idl[p]``, i.e. a positive ``dx`` means the signal photon sits to the right of
its idler twin.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import signal as sps

from . import kernels

# m_s, m_i above this leave the low-occupancy regime the predictors assume.
LOW_FLUX_LIMIT = 0.3
# Direct summation is used up to this many shifts; larger ranges go through FFT.
DIRECT_SHIFT_LIMIT = 256


class ApproximationWarning(UserWarning):
    """A closed-form predictor is evaluated outside its low-flux regime."""


@dataclass(frozen=True, eq=False)
class CorrelationMap:
    values: np.ndarray      # indexed [dy - dy_min, dx - dx_min]
    dx_min: int
    dx_max: int
    dy_min: int
    dy_max: int
    pixel_count: int
    normalized: bool = False

    def __post_init__(self):
        expect = (self.dy_max - self.dy_min + 1, self.dx_max - self.dx_min + 1)
        if self.values.shape != expect:
            raise ValueError(f"map shape {self.values.shape} does not match range {expect}")

    @property
    def normalization(self) -> str:
        return "normalized-coefficient" if self.normalized else "coincidence-count"

    def value(self, dx: int, dy: int) -> float:
        if not (self.dx_min <= dx <= self.dx_max and self.dy_min <= dy <= self.dy_max):
            raise IndexError(f"shift ({dx}, {dy}) outside map range")
        return float(self.values[dy - self.dy_min, dx - self.dx_min])

    def contains(self, dx_lo, dx_hi, dy_lo, dy_hi) -> bool:
        return (self.dx_min <= dx_lo and dx_hi <= self.dx_max
                and self.dy_min <= dy_lo and dy_hi <= self.dy_max)

    def shifts(self):
        """Arrays ``(dx, dy)`` of the same shape as ``values``."""
        dy, dx = np.mgrid[self.dy_min:self.dy_max + 1, self.dx_min:self.dx_max + 1]
        return dx, dy

    def with_values(self, values, normalized=None) -> "CorrelationMap":
        return CorrelationMap(np.asarray(values, dtype=float), self.dx_min, self.dx_max,
                              self.dy_min, self.dy_max, self.pixel_count,
                              self.normalized if normalized is None else normalized)

    def to_csv(self, fh=None) -> Optional[str]:
        """Write ``dx,dy,value`` rows after a one-line normalization header.

        Returns the text when ``fh`` is None.
        """
        own = fh is None
        if own:
            fh = io.StringIO()
        fh.write(f"# normalization: {self.normalization}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dx", "dy", "value"])
        dx, dy = self.shifts()
        for x, y, v in zip(dx.ravel(), dy.ravel(), self.values.ravel()):
            writer.writerow([int(x), int(y), repr(float(v))])
        if own:
            return fh.getvalue()
        return None

    @classmethod
    def from_csv(cls, fh, pixel_count: int = 0) -> "CorrelationMap":
        header = fh.readline().strip()
        if not header.startswith("# normalization:"):
            raise ValueError("missing normalization header line")
        normalized = header.split(":", 1)[1].strip() == "normalized-coefficient"
        rows = list(csv.DictReader(fh))
        dx = np.array([int(r["dx"]) for r in rows])
        dy = np.array([int(r["dy"]) for r in rows])
        vals = np.array([float(r["value"]) for r in rows])
        out = np.full((dy.max() - dy.min() + 1, dx.max() - dx.min() + 1), np.nan)
        out[dy - dy.min(), dx - dx.min()] = vals
        if np.isnan(out).any():
            raise ValueError("correlation CSV does not cover a full rectangle of shifts")
        return cls(out, int(dx.min()), int(dx.max()), int(dy.min()), int(dy.max()),
                   pixel_count, normalized)


def _as_array(img) -> np.ndarray:
    return np.asarray(getattr(img, "values", img), dtype=np.float64)


def _shift_range(shift):
    """Accept ``(dx, dy)`` for a symmetric range or ``((dx0, dx1), (dy0, dy1))``."""
    sx, sy = shift
    if np.ndim(sx) == 0:
        sx = (-int(sx), int(sx))
    if np.ndim(sy) == 0:
        sy = (-int(sy), int(sy))
    (dx0, dx1), (dy0, dy1) = sx, sy
    if dx0 > dx1 or dy0 > dy1:
        raise ValueError("empty shift range")
    return int(dx0), int(dx1), int(dy0), int(dy1)


def _xcov_fft(sig, idl, dx0, dx1, dy0, dy1):
    h, w = sig.shape
    full = sps.fftconvolve(sig, idl[::-1, ::-1], mode="full")
    return full[dy0 + h - 1:dy1 + h, dx0 + w - 1:dx1 + w]


def cross_covariance_map(sig, idl, max_shift: Tuple = (8, 8), method: str = "auto",
                         backend: Optional[str] = None) -> CorrelationMap:
    """Coincidence-count map between two residual images over a shift range.

    ``max_shift`` is ``(dx, dy)`` for the symmetric range ``[-dx, dx] x
    [-dy, dy]`` or ``((dx_min, dx_max), (dy_min, dy_max))``. ``method`` picks
    direct summation (compiled or numpy kernel), ``"fft"``, or ``"auto"``.
    """
    s, i = _as_array(sig), _as_array(idl)
    if s.shape != i.shape or s.ndim != 2:
        raise ValueError(f"residual images differ in shape: {s.shape} vs {i.shape}")
    h, w = s.shape
    dx0, dx1, dy0, dy1 = _shift_range(max_shift)
    if max(abs(dx0), abs(dx1)) >= w or max(abs(dy0), abs(dy1)) >= h:
        raise ValueError(f"shift range exceeds the {w}x{h} frame")
    n_shifts = (dx1 - dx0 + 1) * (dy1 - dy0 + 1)
    if method == "auto":
        method = "direct" if n_shifts <= DIRECT_SHIFT_LIMIT else "fft"
    if method == "direct":
        vals = kernels.xcov_window(s, i, dy0, dy1, dx0, dx1, backend=backend)
    elif method == "fft":
        vals = _xcov_fft(s, i, dx0, dx1, dy0, dy1)
    else:
        raise ValueError(f"unknown method {method!r}")
    return CorrelationMap(vals, dx0, dx1, dy0, dy1, h * w)


def normalize_map(cmap: CorrelationMap, sig, idl) -> CorrelationMap:
    """Divide by ``sqrt(sum sig^2 * sum idl^2)``; the result lies in [-1, 1]."""
    s, i = _as_array(sig), _as_array(idl)
    scale = math.sqrt(float(np.dot(s.ravel(), s.ravel())) * float(np.dot(i.ravel(), i.ravel())))
    if scale == 0:
        return cmap.with_values(np.zeros_like(cmap.values), normalized=True)
    return cmap.with_values(cmap.values / scale, normalized=True)


def window_bounds(window) -> Tuple[int, int, int, int]:
    """Inclusive ``(dx_lo, dx_hi, dy_lo, dy_hi)`` covered by a peak window."""
    dx_lo = window.center_dx - window.extent_x // 2
    dy_lo = window.center_dy - window.extent_y // 2
    return dx_lo, dx_lo + window.extent_x - 1, dy_lo, dy_lo + window.extent_y - 1


def binned_coincidences(cmap: CorrelationMap, window) -> float:
    """Sum of the map over the ``extent_x x extent_y`` bins of ``window``."""
    dx_lo, dx_hi, dy_lo, dy_hi = window_bounds(window)
    if not cmap.contains(dx_lo, dx_hi, dy_lo, dy_hi):
        raise ValueError(f"window [{dx_lo},{dx_hi}]x[{dy_lo},{dy_hi}] outside map range")
    block = cmap.values[dy_lo - cmap.dy_min:dy_hi - cmap.dy_min + 1,
                        dx_lo - cmap.dx_min:dx_hi - cmap.dx_min + 1]
    return float(block.sum())


@dataclass(frozen=True)
class NoiseModelParams:
    """Inputs of the coincidence and noise predictors.

    ``eta`` is the equivalent quantum efficiency already reduced by the
    capture loss of the binning window; ``ones`` is the number of "1" steps.
    """

    pixel_count: int
    binning: int
    mean_signal: float
    mean_idler: float
    eta: float
    ones: int = 1

    def __post_init__(self):
        if self.pixel_count < 1 or self.binning < 1:
            raise ValueError("pixel_count and binning must be >= 1")
        for name in ("mean_signal", "mean_idler", "eta"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.ones < 0:
            raise ValueError("ones must be >= 0")

    @property
    def low_flux(self) -> bool:
        return self.mean_signal <= LOW_FLUX_LIMIT and self.mean_idler <= LOW_FLUX_LIMIT


def accidental_std(params: NoiseModelParams) -> float:
    """Standard deviation of binned accidental coincidences, sqrt(D B m_s m_i)."""
    p = params
    return math.sqrt(p.pixel_count * p.binning * p.mean_signal * p.mean_idler)


def accidental_std_binary(params: NoiseModelParams) -> float:
    """Same quantity without the m << 1 approximation for 0/1 pixels.

    For binary pixels the residual variance is m (1 - m) per image, so the
    binned accidental variance is ``D B m_s (1 - m_s) m_i (1 - m_i)``.
    """
    p = params
    return math.sqrt(p.pixel_count * p.binning * p.mean_signal * (1 - p.mean_signal)
                     * p.mean_idler * (1 - p.mean_idler))


def predicted_coincidences(level: int, params: NoiseModelParams) -> float:
    """Mean twin coincidences of one step, T D (eta m_i - m_i^2)."""
    p = params
    if p.eta > 0 and p.mean_idler / p.eta > LOW_FLUX_LIMIT:
        warnings.warn(f"incident idler flux m_i/eta = {p.mean_idler / p.eta:.3g} is not small",
                      ApproximationWarning, stacklevel=2)
    return level * p.pixel_count * (p.eta * p.mean_idler - p.mean_idler ** 2)


def predicted_snr(level: int, params: NoiseModelParams) -> Tuple[float, float]:
    """``(full, approximate)`` signal-to-noise ratio of one step.

    The full form keeps the twin-fluctuation variance and the double-occupancy
    loss; the approximate form is ``T eta sqrt(D / (B M))``.
    """
    p = params
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ApproximationWarning)
        mean = predicted_coincidences(level, p)
    var = (level * p.pixel_count * p.eta * p.mean_idler
           + p.pixel_count * p.binning * p.mean_signal * p.mean_idler)
    full = mean / math.sqrt(var) if var > 0 else 0.0
    if p.ones >= 1:
        approx = level * p.eta * math.sqrt(p.pixel_count / (p.binning * p.ones))
    else:
        approx = float("nan")
    return full, approx


def required_snr(levels: int, level: int) -> float:
    """Smallest SNR that separates ``levels`` Gaussian levels 99.3% of the time."""
    if levels < 2:
        raise ValueError("need at least two levels")
    return 2.45 * levels * level
