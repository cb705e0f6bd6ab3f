"""Synthetic twin-photon frame generation.

Each time step draws an independent field of photon pairs, thins it into an
idler reference frame and an attenuated signal frame, adds uncorrelated
background singles and thresholds every pixel to a binary detection.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

SeedLike = Union[int, np.random.SeedSequence]

# Sub-stream tags used below a (trial, step) seed node.
_PAIRS, _IDLER, _SIGNAL = 0, 1, 2


class GeometryMismatch(ValueError):
    """Raised when frames or images of different sizes are combined."""


@dataclass(frozen=True)
class DetectorGeometry:
    width_px: int
    height_px: int

    def __post_init__(self):
        if int(self.width_px) < 1 or int(self.height_px) < 1:
            raise ValueError(
                f"detector must be at least 1x1, got {self.width_px}x{self.height_px}")
        object.__setattr__(self, "width_px", int(self.width_px))
        object.__setattr__(self, "height_px", int(self.height_px))

    @property
    def pixel_count(self) -> int:
        return self.width_px * self.height_px

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape in (rows, columns) order."""
        return (self.height_px, self.width_px)

    @classmethod
    def from_shape(cls, shape) -> "DetectorGeometry":
        return cls(width_px=shape[1], height_px=shape[0])


@dataclass(frozen=True)
class GaussianEnvelope:
    center_x: float
    center_y: float
    sigma_beam_x: float
    sigma_beam_y: float

    def __post_init__(self):
        if not (self.sigma_beam_x > 0 and self.sigma_beam_y > 0):
            raise ValueError("Gaussian envelope widths must be positive")


@dataclass(frozen=True)
class SourceParams:
    """Generative model of the pair source and both detection arms.

    Rates are per pixel per time step. ``envelope=None`` means a flat beam.
    """

    pair_rate: float
    transmission_signal: float = 1.0
    transmission_idler: float = 1.0
    jitter_sigma_x: float = 5.2
    jitter_sigma_y: float = 1.65
    background_signal: float = 0.0
    background_idler: float = 0.0
    envelope: Optional[GaussianEnvelope] = None

    def __post_init__(self):
        for name in ("pair_rate", "jitter_sigma_x", "jitter_sigma_y",
                     "background_signal", "background_idler"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("transmission_signal", "transmission_idler"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}")

    @property
    def eta_model(self) -> float:
        """Fraction of idler detections whose twin is detected on the signal arm."""
        singles = self.pair_rate * self.transmission_idler + self.background_idler
        if singles == 0:
            return 0.0
        return self.pair_rate * self.transmission_signal * self.transmission_idler / singles

    def replace(self, **changes) -> "SourceParams":
        from dataclasses import replace
        return replace(self, **changes)


@dataclass(frozen=True)
class TimeSignal:
    levels: tuple[int, ...]

    def __post_init__(self):
        levels = tuple(int(v) for v in self.levels)
        if any(v not in (0, 1) for v in levels):
            raise ValueError(f"time signal levels must be 0 or 1, got {self.levels}")
        if not levels:
            raise ValueError("time signal needs at least one step")
        object.__setattr__(self, "levels", levels)

    level_count = 2

    @property
    def n_steps(self) -> int:
        return len(self.levels)

    @property
    def ones(self) -> int:
        return sum(self.levels)

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    @classmethod
    def parse(cls, text: str) -> "TimeSignal":
        """Build from a bit string such as ``"11110000"``."""
        return cls(tuple(int(c) for c in text.replace(",", "").replace(" ", "")))


@dataclass(frozen=True, eq=False)
class PhotonFrame:
    """Binary detection map of one exposure (uint8, 0 or 1 per pixel)."""

    detections: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.detections)
        if arr.ndim != 2:
            raise ValueError("a photon frame is two dimensional")
        if arr.dtype != np.uint8:
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("photon frame values must be 0 or 1")
            arr = arr.astype(np.uint8)
        elif arr.size and arr.max() > 1:
            raise ValueError("photon frame values must be 0 or 1")
        arr = np.array(arr, order="C")  # own copy, so freezing it leaves the caller alone
        arr.flags.writeable = False
        object.__setattr__(self, "detections", arr)

    @property
    def geometry(self) -> DetectorGeometry:
        return DetectorGeometry.from_shape(self.detections.shape)

    @property
    def detected_count(self) -> int:
        return int(self.detections.sum(dtype=np.int64))

    @property
    def mean(self) -> float:
        return self.detected_count / self.detections.size

    def __eq__(self, other):
        if not isinstance(other, PhotonFrame):
            return NotImplemented
        return np.array_equal(self.detections, other.detections)

    @classmethod
    def zeros(cls, geometry: DetectorGeometry) -> "PhotonFrame":
        return cls(np.zeros(geometry.shape, dtype=np.uint8))


@dataclass(frozen=True)
class StepFrames:
    step_index: int
    signal_frame: PhotonFrame
    idler_frame: PhotonFrame

    def __post_init__(self):
        if self.signal_frame.geometry != self.idler_frame.geometry:
            raise GeometryMismatch("signal and idler frames differ in size")


def derive_seed(master: SeedLike, *path: int) -> np.random.SeedSequence:
    """Derive an independent stream for a node of the seed tree.

    The stream for ``(master, a, b, ...)`` is
    ``SeedSequence(master, spawn_key=(a, b, ...))``, extended by further
    components when ``master`` is already a SeedSequence. Nodes used by the
    experiment harness are ``(trial, step)`` for time steps and
    ``(CALIBRATION_NODE, index)`` for calibration pairs.
    """
    if isinstance(master, np.random.SeedSequence):
        return np.random.SeedSequence(master.entropy,
                                      spawn_key=tuple(master.spawn_key) + tuple(path),
                                      pool_size=master.pool_size)
    return np.random.SeedSequence(int(master), spawn_key=tuple(int(p) for p in path))


def _rng(seed: SeedLike, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, tag)))


def envelope_weights(geometry: DetectorGeometry,
                     envelope: Optional[GaussianEnvelope]) -> np.ndarray:
    """Nonnegative beam profile with unit mean over the detector."""
    if envelope is None:
        return np.ones(geometry.shape)
    y = np.arange(geometry.height_px, dtype=float)
    x = np.arange(geometry.width_px, dtype=float)
    gy = np.exp(-0.5 * ((y - envelope.center_y) / envelope.sigma_beam_y) ** 2)
    gx = np.exp(-0.5 * ((x - envelope.center_x) / envelope.sigma_beam_x) ** 2)
    w = np.outer(gy, gx)
    total = w.mean()
    if total <= 0:
        raise ValueError("Gaussian envelope underflows everywhere on the detector")
    return w / total


def _poisson_points(rng: np.random.Generator, rate: float, cdf: Optional[np.ndarray],
                    n_pixels: int) -> np.ndarray:
    """Pixel indices of a Poisson field with mean ``rate * weight`` per pixel.

    Drawing the total count and then placing each event by weight gives the
    same joint law as independent per-pixel Poisson counts, at a cost
    proportional to the number of events.
    """
    count = rng.poisson(rate * n_pixels)
    if cdf is None:
        return rng.integers(0, n_pixels, count)
    idx = np.searchsorted(cdf, rng.random(count) * cdf[-1], side="right")
    return np.minimum(idx, n_pixels - 1)


def beam_mean_map(geometry: DetectorGeometry, source: SourceParams) -> np.ndarray:
    """Per-pixel mean pair rate; its detector average equals ``pair_rate``."""
    return source.pair_rate * envelope_weights(geometry, source.envelope)


def generate_step(geometry: DetectorGeometry, source: SourceParams, level: int,
                  seed: SeedLike, step_index: int = 0) -> StepFrames:
    """Draw one time step: the attenuated signal frame and its idler reference.

    Pair positions, idler thinning and signal thinning/jitter each use their
    own sub-stream of ``seed``, so the idler frame does not depend on
    ``level``. Jittered signal photons falling off the sensor are lost.
    """
    if level not in (0, 1):
        raise ValueError(f"level must be 0 or 1, got {level}")
    h, w = geometry.shape
    weights = envelope_weights(geometry, source.envelope)
    cdf = None if source.envelope is None else np.cumsum(weights.ravel())

    pixel = _poisson_points(_rng(seed, _PAIRS), source.pair_rate, cdf, h * w)
    py, px = np.divmod(pixel, w)

    idler_rng = _rng(seed, _IDLER)
    keep_i = idler_rng.random(pixel.size) < source.transmission_idler
    idler = np.zeros(h * w, dtype=bool)
    idler[pixel[keep_i]] = True
    idler[_poisson_points(idler_rng, source.background_idler, cdf, h * w)] = True

    signal_rng = _rng(seed, _SIGNAL)
    keep_s = signal_rng.random(pixel.size) < source.transmission_signal * level
    dx = np.rint(signal_rng.standard_normal(pixel.size) * source.jitter_sigma_x).astype(np.int64)
    dy = np.rint(signal_rng.standard_normal(pixel.size) * source.jitter_sigma_y).astype(np.int64)
    sx, sy = px + dx, py + dy
    keep_s &= (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    signal = np.zeros(h * w, dtype=bool)
    signal[sy[keep_s] * w + sx[keep_s]] = True
    signal[_poisson_points(signal_rng, source.background_signal, cdf, h * w)] = True

    return StepFrames(step_index=step_index,
                      signal_frame=PhotonFrame(signal.view(np.uint8).reshape(h, w)),
                      idler_frame=PhotonFrame(idler.view(np.uint8).reshape(h, w)))


def integrate_signal(frames: Sequence[PhotonFrame]) -> PhotonFrame:
    """Temporally integrated, thresholded signal exposure (pixelwise OR)."""
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame to integrate")
    shape = frames[0].detections.shape
    out = np.zeros(shape, dtype=np.uint8)
    for f in frames:
        if f.detections.shape != shape:
            raise GeometryMismatch(
                f"cannot integrate frames of shape {f.detections.shape} and {shape}")
        np.bitwise_or(out, f.detections, out=out)
    return PhotonFrame(out)
