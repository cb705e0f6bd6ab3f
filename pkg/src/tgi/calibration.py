"""Beam-shape removal, correlation-peak location and efficiency estimation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import fft as sp_fft
from scipy import ndimage, optimize

from .correlation import CorrelationMap, _shift_range, binned_coincidences, window_bounds
from .source import DetectorGeometry, GeometryMismatch, PhotonFrame

# Width reported for the Gaussian axes of a degenerate (flat) fit.
SIGMA_SENTINEL = 1.0e6
# Peak pixels must exceed the background level by this many background std.
PEAK_SIGMA = 5.0
DEFAULT_EXTENT = (16, 5)
DEFAULT_ENSEMBLE = 900
# Shift range searched when estimating the efficiency without a window.
DEFAULT_SEARCH = (32, 12)


class InsufficientStatistics(RuntimeError):
    """The data cannot separate the correlation peak from its background."""


@dataclass(frozen=True, eq=False)
class MeanImage:
    values: np.ndarray
    sample_count: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("mean image must be two dimensional")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("mean detection probabilities must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def geometry(self) -> DetectorGeometry:
        return DetectorGeometry.from_shape(self.values.shape)

    def render(self, geometry: DetectorGeometry) -> np.ndarray:
        if geometry != self.geometry:
            raise GeometryMismatch(f"mean image is {self.geometry}, frame is {geometry}")
        return self.values


@dataclass(frozen=True, eq=False)
class ResidualImage:
    values: np.ndarray

    @property
    def geometry(self) -> DetectorGeometry:
        return DetectorGeometry.from_shape(self.values.shape)


@dataclass(frozen=True)
class GaussianShape:
    amplitude: float
    center_x: float
    center_y: float
    sigma_x: float
    sigma_y: float
    offset: float
    degenerate: bool = False

    def __post_init__(self):
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            raise ValueError("Gaussian widths must be positive")
        if self.amplitude < 0:
            raise ValueError("Gaussian amplitude must be >= 0")

    def render(self, geometry: DetectorGeometry) -> np.ndarray:
        return _gauss_model(self.params(), geometry.shape)

    def params(self) -> np.ndarray:
        return np.array([self.amplitude, self.center_x, self.center_y,
                         self.sigma_x, self.sigma_y, self.offset])


@dataclass(frozen=True)
class PeakWindow:
    center_dx: int
    center_dy: int
    extent_x: int = DEFAULT_EXTENT[0]
    extent_y: int = DEFAULT_EXTENT[1]

    def __post_init__(self):
        if self.extent_x < 1 or self.extent_y < 1:
            raise ValueError("window extents must be >= 1")

    @property
    def binning(self) -> int:
        return self.extent_x * self.extent_y

    def bounds(self) -> Tuple[int, int, int, int]:
        return window_bounds(self)

    def shift_range(self, margin: int = 0):
        """Map range ``((dx0, dx1), (dy0, dy1))`` that just contains the window."""
        x0, x1, y0, y1 = self.bounds()
        return ((x0 - margin, x1 + margin), (y0 - margin, y1 + margin))


@dataclass(frozen=True)
class EtaEstimate:
    eta: float
    peak_integral: float
    frames_used: int
    background_std: float = 0.0
    support_size: int = 0

    def __post_init__(self):
        object.__setattr__(self, "eta", float(min(max(self.eta, 0.0), 1.0)))

    @property
    def standard_error(self) -> float:
        """Background noise of the integrated support."""
        return self.background_std * float(np.sqrt(self.support_size))


def _check_frames(frames: Sequence[PhotonFrame]) -> Tuple[int, int]:
    if not frames:
        raise ValueError("need at least one frame")
    shape = frames[0].detections.shape
    for f in frames:
        if f.detections.shape != shape:
            raise GeometryMismatch(f"frame shapes differ: {f.detections.shape} vs {shape}")
    return shape


def estimate_mean_shape(frames: Iterable[PhotonFrame]) -> MeanImage:
    """Per-pixel detection probability averaged over an ensemble of frames."""
    frames = list(frames)
    shape = _check_frames(frames)
    acc = np.zeros(shape, dtype=np.int64)
    for f in frames:
        acc += f.detections
    return MeanImage(acc / len(frames), len(frames))


def _gauss_model(p, shape):
    amp, cx, cy, sx, sy, off = p
    y = np.arange(shape[0], dtype=float)
    x = np.arange(shape[1], dtype=float)
    gy = np.exp(-0.5 * ((y - cy) / sy) ** 2)
    gx = np.exp(-0.5 * ((x - cx) / sx) ** 2)
    return off + amp * np.outer(gy, gx)


def _moment_seed(img):
    h, w = img.shape
    base = float(np.percentile(img, 5))
    wts = np.clip(img - base, 0, None)
    total = wts.sum()
    if total <= 0:
        return None
    y, x = np.mgrid[0:h, 0:w]
    cx, cy = (wts * x).sum() / total, (wts * y).sum() / total
    sx = np.sqrt(max((wts * (x - cx) ** 2).sum() / total, 0.25))
    sy = np.sqrt(max((wts * (y - cy) ** 2).sum() / total, 0.25))
    return np.array([float(wts.max()), cx, cy, sx, sy, base])


def fit_gaussian_shape(mean: Union[MeanImage, PhotonFrame, np.ndarray]) -> GaussianShape:
    """Least-squares separable 2-D Gaussian plus constant offset.

    A bounded trust-region fit is seeded from the image moments. If the image is flat,
    or the fit does not beat the best constant, a flat shape is returned with
    both widths set to ``SIGMA_SENTINEL`` and ``degenerate=True``.
    """
    if isinstance(mean, PhotonFrame):
        img = mean.detections.astype(np.float64)
    else:
        img = np.asarray(getattr(mean, "values", mean), dtype=np.float64)
    if not img.any():
        raise ValueError("cannot fit a shape to an image with zero total intensity")
    flat_value = float(img.mean())
    flat = GaussianShape(0.0, (img.shape[1] - 1) / 2, (img.shape[0] - 1) / 2,
                         SIGMA_SENTINEL, SIGMA_SENTINEL, flat_value, degenerate=True)
    flat_rss = float(((img - flat_value) ** 2).sum())
    seed = _moment_seed(img)
    if flat_rss == 0 or seed is None:
        return flat

    def resid(p):
        return (_gauss_model(p, img.shape) - img).ravel()

    h, w = img.shape
    lo = [-np.inf, -w, -h, 0.25, 0.25, -np.inf]
    hi = [np.inf, 2 * w, 2 * h, 10 * max(h, w), 10 * max(h, w), np.inf]
    seed = np.clip(seed, np.array(lo) + 1e-9, np.array(hi) - 1e-9)
    try:
        res = optimize.least_squares(resid, seed, bounds=(lo, hi), x_scale="jac")
    except (ValueError, np.linalg.LinAlgError):
        return flat
    amp, cx, cy, sx, sy, off = res.x
    rss = float(np.dot(res.fun, res.fun))
    if not res.success or rss >= flat_rss or amp <= 0:
        return flat
    return GaussianShape(float(amp), float(cx), float(cy), float(sx), float(sy), float(off))


def subtract_shape(frame: PhotonFrame, shape: Union[MeanImage, GaussianShape]) -> ResidualImage:
    """Frame minus the deterministic beam shape, without clipping."""
    model = shape.render(frame.geometry)
    if model.shape != frame.detections.shape:
        raise GeometryMismatch("shape and frame differ in size")
    return ResidualImage(frame.detections - model)


def _fitted_residual(frame: PhotonFrame) -> np.ndarray:
    if not frame.detected_count:
        return np.zeros(frame.detections.shape)
    return subtract_shape(frame, fit_gaussian_shape(frame)).values


def locate_peak(avg_map: CorrelationMap, extent: Tuple[int, int] = DEFAULT_EXTENT) -> PeakWindow:
    """Window of the given extent centered on the map maximum.

    Ties go to the smallest ``(dx, dy)`` in lexicographic order.
    """
    ex, ey = int(extent[0]), int(extent[1])
    if ex > avg_map.values.shape[1] or ey > avg_map.values.shape[0]:
        raise ValueError(f"map range is smaller than the {ex}x{ey} window")
    vals = avg_map.values
    dx, dy = avg_map.shifts()
    best = vals == vals.max()
    cand = sorted(zip(dx[best].tolist(), dy[best].tolist()))
    cx, cy = cand[0]
    win = PeakWindow(int(cx), int(cy), ex, ey)
    if not avg_map.contains(*win.bounds()):
        raise ValueError(f"{ex}x{ey} window centered at ({cx}, {cy}) leaves the map range")
    return win


def mean_normalized_map(twin_pairs: Sequence[Tuple[PhotonFrame, PhotonFrame]],
                        shift_range=DEFAULT_SEARCH,
                        shapes: Union[Tuple, str, None] = None) -> CorrelationMap:
    """Ensemble average of normalized cross-covariance maps.

    Frames are reduced with ``shapes = (signal_shape, idler_shape)``, with the
    ensemble mean of each arm when ``shapes`` is None, or with a Gaussian
    fitted to every picture when ``shapes == "gaussian"``. Each pair's map is
    normalized by ``sqrt(sum rs^2 * sum ri^2)``; the average is accumulated as
    a cross spectrum and transformed back once.
    """
    pairs = list(twin_pairs)
    if not pairs:
        raise ValueError("no twin pairs")
    if shapes is None:
        shapes = (estimate_mean_shape(p[0] for p in pairs),
                  estimate_mean_shape(p[1] for p in pairs))
    elif isinstance(shapes, str) and shapes != "gaussian":
        raise ValueError(f"unknown shape method {shapes!r}")
    dx0, dx1, dy0, dy1 = _shift_range(shift_range)
    h, w = pairs[0][0].detections.shape
    if max(abs(dx0), abs(dx1)) >= w or max(abs(dy0), abs(dy1)) >= h:
        raise ValueError(f"shift range exceeds the {w}x{h} frame")
    # zero padding beyond the largest shift keeps the circular product exact
    ph = sp_fft.next_fast_len(h + max(abs(dy0), abs(dy1)), real=True)
    pw = sp_fft.next_fast_len(w + max(abs(dx0), abs(dx1)), real=True)
    spectrum = None
    for s, i in pairs:
        if shapes == "gaussian":
            rs, ri = _fitted_residual(s), _fitted_residual(i)
        else:
            rs = subtract_shape(s, shapes[0]).values
            ri = subtract_shape(i, shapes[1]).values
        scale = np.sqrt(np.vdot(rs, rs) * np.vdot(ri, ri))
        if scale == 0:
            continue
        term = sp_fft.rfft2(rs, (ph, pw)) * np.conj(sp_fft.rfft2(ri, (ph, pw))) / scale
        spectrum = term if spectrum is None else spectrum + term
    if spectrum is None:
        corr = np.zeros((ph, pw))
    else:
        corr = sp_fft.irfft2(spectrum, (ph, pw)) / len(pairs)
    rows = np.arange(dy0, dy1 + 1) % ph
    cols = np.arange(dx0, dx1 + 1) % pw
    return CorrelationMap(corr[np.ix_(rows, cols)], dx0, dx1, dy0, dy1, h * w, normalized=True)


def _background_stats(values: np.ndarray) -> Tuple[float, float]:
    med = float(np.median(values))
    mad = float(np.median(np.abs(values - med)))
    return med, 1.4826 * mad


def estimate_eta(twin_pairs: Sequence[Tuple[PhotonFrame, PhotonFrame]],
                 support: Optional[PeakWindow] = None,
                 shift_range=DEFAULT_SEARCH,
                 shapes: Union[Tuple, str, None] = None,
                 avg_map: Optional[CorrelationMap] = None) -> EtaEstimate:
    """Equivalent quantum efficiency from the integrated correlation peak.

    With a ``support`` window, the averaged normalized map is summed over that
    window. Without one, pixels more than ``PEAK_SIGMA`` robust background
    deviations above the background level are located; the connected group
    holding the maximum defines a box that is doubled in size (so the faint
    tails that do not pass the cut are still integrated) and summed.
    """
    pairs = list(twin_pairs)
    if len(pairs) < 2:
        raise InsufficientStatistics(f"need at least 2 twin pairs, got {len(pairs)}")
    if avg_map is None:
        rng = shift_range if support is None else support.shift_range(margin=8)
        avg_map = mean_normalized_map(pairs, rng, shapes)
    level, spread = _background_stats(avg_map.values)

    if support is not None:
        x0, x1, y0, y1 = support.bounds()
        if not avg_map.contains(x0, x1, y0, y1):
            raise ValueError("support window is outside the averaged map")
        total = binned_coincidences(avg_map, support)
        return EtaEstimate(total, total, len(pairs), spread, support.binning)

    vals = avg_map.values
    hot = vals > level + PEAK_SIGMA * spread
    if spread == 0 or not hot.any():
        raise InsufficientStatistics("no correlation peak stands out from the background")
    labels, _ = ndimage.label(hot)
    peak = np.unravel_index(np.argmax(np.where(hot, vals, -np.inf)), vals.shape)
    rows, cols = np.nonzero(labels == labels[peak])
    r0, r1, c0, c1 = rows.min(), rows.max(), cols.min(), cols.max()
    hr, hc = (r1 - r0) // 2 + 1, (c1 - c0) // 2 + 1
    r0, r1 = max(r0 - hr, 0), min(r1 + hr, vals.shape[0] - 1)
    c0, c1 = max(c0 - hc, 0), min(c1 + hc, vals.shape[1] - 1)
    block = vals[r0:r1 + 1, c0:c1 + 1]
    total = float(block.sum())
    return EtaEstimate(total, total, len(pairs), spread, block.size)
