"""Ghost-signal retrieval: per-step coincidences, threshold decoding, metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from .calibration import (DEFAULT_EXTENT, DEFAULT_SEARCH, EtaEstimate, InsufficientStatistics,
                          MeanImage, PeakWindow, _fitted_residual, estimate_eta,
                          estimate_mean_shape, locate_peak, mean_normalized_map, subtract_shape)
from .correlation import binned_coincidences, cross_covariance_map
from .source import GeometryMismatch, PhotonFrame, TimeSignal

METHODS = ("ensemble", "gaussian")


@dataclass(frozen=True, eq=False)
class CalibrationProfile:
    """Everything reconstruction needs from the calibration run."""

    mean_signal: MeanImage
    mean_idler: MeanImage
    window: PeakWindow
    eta: EtaEstimate
    eta_window: EtaEstimate

    @property
    def geometry(self):
        return self.mean_idler.geometry

    @property
    def capture_fraction(self) -> float:
        """Share of the full correlation peak that falls inside the window."""
        return self.eta_window.eta / self.eta.eta if self.eta.eta > 0 else 0.0


def calibrate(twin_pairs: Sequence[Tuple[PhotonFrame, PhotonFrame]],
              extent: Tuple[int, int] = DEFAULT_EXTENT,
              shift_range=DEFAULT_SEARCH) -> CalibrationProfile:
    """Mean beam shapes, peak window and efficiency from unmodulated twin pairs."""
    pairs = list(twin_pairs)
    if len(pairs) < 2:
        raise InsufficientStatistics(f"calibration needs at least 2 twin pairs, got {len(pairs)}")
    shapes = (estimate_mean_shape(p[0] for p in pairs), estimate_mean_shape(p[1] for p in pairs))
    h, w = pairs[0][1].detections.shape
    sx, sy = shift_range
    sx, sy = min(max(sx, extent[0]), w - 1), min(max(sy, extent[1]), h - 1)
    avg = mean_normalized_map(pairs, (sx, sy), shapes)
    window = locate_peak(avg, extent)
    eta = estimate_eta(pairs, avg_map=avg)
    eta_window = estimate_eta(pairs, support=window, avg_map=avg)
    return CalibrationProfile(shapes[0], shapes[1], window, eta, eta_window)


@dataclass(frozen=True)
class CoincidenceSeries:
    values: Tuple[float, ...]
    window: PeakWindow
    trial: int = 0

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class DecodedSignal:
    bits: Tuple[int, ...]
    threshold: float
    margins: Tuple[float, ...]


def _signal_shape(frame: PhotonFrame, calib: CalibrationProfile) -> np.ndarray:
    # the calibration shape rescaled to this exposure's own detection level
    base = calib.mean_signal.render(frame.geometry)
    total = base.mean()
    if total <= 0:
        return np.full(base.shape, frame.mean)
    return base * (frame.mean / total)


def _residuals(integrated_signal, idler_frames, calib, method):
    if method == "ensemble":
        rs = integrated_signal.detections - _signal_shape(integrated_signal, calib)
        ri = [subtract_shape(f, calib.mean_idler).values for f in idler_frames]
        return rs, ri
    if method == "gaussian":
        return _fitted_residual(integrated_signal), [_fitted_residual(f) for f in idler_frames]
    raise ValueError(f"unknown mean-subtraction method {method!r}; expected one of {METHODS}")


def reconstruct_series(integrated_signal: PhotonFrame, idler_frames: Sequence[PhotonFrame],
                       calib: Optional[CalibrationProfile], method: str = "ensemble",
                       trial: int = 0, backend: Optional[str] = None) -> CoincidenceSeries:
    """Binned coincidences between the integrated signal and each idler frame.

    ``method="ensemble"`` removes the calibration mean shapes (the signal shape
    rescaled to the integrated frame's detection level); ``"gaussian"`` fits
    and removes a Gaussian profile from every picture.
    """
    if calib is None:
        raise ValueError("reconstruction needs a calibration profile")
    geom = integrated_signal.geometry
    if geom != calib.geometry:
        raise GeometryMismatch(f"frames are {geom}, calibration is {calib.geometry}")
    for f in idler_frames:
        if f.geometry != geom:
            raise GeometryMismatch("idler and signal frames differ in size")
    rs, ri = _residuals(integrated_signal, idler_frames, calib, method)
    rng = calib.window.shift_range()
    values = tuple(binned_coincidences(cross_covariance_map(rs, r, rng, method="direct",
                                                            backend=backend), calib.window)
                   for r in ri)
    return CoincidenceSeries(values, calib.window, trial)


def threshold_decode(series: CoincidenceSeries, mean_one_level: float) -> DecodedSignal:
    """Bit is 1 when the coincidence count reaches half the mean "1" level.

    A value exactly at the threshold decodes to 1.
    """
    if not mean_one_level > 0:
        raise ValueError(f"mean one level must be positive, got {mean_one_level}")
    thr = mean_one_level / 2
    vals = np.asarray(series.values, dtype=float)
    bits = tuple(int(b) for b in vals >= thr)
    return DecodedSignal(bits, thr, tuple(float(m) for m in np.abs(vals - thr)))


def blind_decode(series: CoincidenceSeries) -> DecodedSignal:
    """Single-shot decoding that takes the largest count as the "1" level."""
    top = max(series.values)
    if top <= 0:
        return DecodedSignal(tuple(0 for _ in series.values), 0.0,
                             tuple(abs(v) for v in series.values))
    return threshold_decode(series, top)


def gaussian_error_rate(mean_one: float, std_one: float, std_zero: float, ones: int,
                        n_steps: int, mean_zero: float = 0.0) -> float:
    """Expected bit error rate of the midpoint threshold for Gaussian counts."""
    thr = mean_one / 2
    p1 = norm.sf((mean_one - thr) / std_one) if std_one > 0 else float(mean_one < thr)
    p0 = norm.sf((thr - mean_zero) / std_zero) if std_zero > 0 else float(mean_zero >= thr)
    return (ones * p1 + (n_steps - ones) * p0) / n_steps


@dataclass
class EnsembleMetrics:
    trials: int
    step_mean: np.ndarray
    step_std: np.ndarray
    snr: float                      # mean "1" level / unweighted mean of "1"-step stds
    snr_rms: float                  # same with the rms of the "1"-step stds
    error_rate: float
    mean_one: float
    mean_zero: float
    std_one: float
    std_zero: float
    predicted_error_rate: float
    degenerate: bool = False
    predicted_snr: Optional[Tuple[float, float]] = None
    step_snr: np.ndarray = field(default_factory=lambda: np.zeros(0))


def evaluate_ensemble(trials: Sequence[Tuple[CoincidenceSeries, DecodedSignal]],
                      truth: TimeSignal,
                      predicted_snr: Optional[Tuple[float, float]] = None) -> EnsembleMetrics:
    """Per-step statistics, measured SNR of the "1" steps and bit error rate.

    A zero spread over the "1" steps reports an infinite SNR with
    ``degenerate=True``.
    """
    trials = list(trials)
    if len(trials) < 2:
        raise ValueError("ensemble evaluation needs at least 2 trials")
    levels = np.asarray(truth.levels)
    c = np.array([s.values for s, _ in trials], dtype=float)
    bits = np.array([d.bits for _, d in trials])
    if c.shape[1] != levels.size or bits.shape[1] != levels.size:
        raise ValueError(f"series length {c.shape[1]} differs from truth length {levels.size}")
    mean = c.mean(axis=0)
    std = c.std(axis=0, ddof=1)
    ones, zeros = levels == 1, levels == 0
    mean_one = float(mean[ones].mean()) if ones.any() else float("nan")
    mean_zero = float(mean[zeros].mean()) if zeros.any() else 0.0
    std_one = float(std[ones].mean()) if ones.any() else float("nan")
    std_zero = float(std[zeros].mean()) if zeros.any() else float("nan")
    rms_one = float(np.sqrt((std[ones] ** 2).mean())) if ones.any() else float("nan")
    degenerate = ones.any() and std_one == 0
    snr = math.inf if degenerate else mean_one / std_one
    snr_rms = math.inf if degenerate else mean_one / rms_one
    with np.errstate(divide="ignore", invalid="ignore"):
        step_snr = np.where(std > 0, mean / np.where(std > 0, std, 1), np.inf)
    err = float((bits != levels[None, :]).mean())
    pred_err = (gaussian_error_rate(mean_one, std_one, std_zero, int(ones.sum()), levels.size,
                                    mean_zero)
                if ones.any() and zeros.any() and not degenerate else float("nan"))
    return EnsembleMetrics(len(trials), mean, std, snr, snr_rms, err, mean_one, mean_zero,
                           std_one, std_zero, pred_err, degenerate, predicted_snr, step_snr)
