"""Oscillation diagnostics on sampled trajectories.

Only the trailing part of a run is analysed (``window_fraction``, default one
quarter) so that transients are discarded.  The observed angular frequency is
``2 pi / T`` with ``T`` the mean spacing of successive maxima of ``m^z``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import find_peaks
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import InvalidArgumentError
from .integrator import Trajectory

__all__ = [
    "AMP_THRESHOLD",
    "SYNC_TOL",
    "FourierSpectrum",
    "FrequencyEstimate",
    "FrequencyMethod",
    "ObservedFrequency",
    "SyncMetrics",
    "estimate_frequency",
    "fourier_spectrum",
    "late_amplitude",
    "observed_frequency",
    "sync_metrics",
]

#: Half peak-to-peak amplitude below which a signal counts as stationary.
AMP_THRESHOLD = 1e-4
#: ``delta_obs`` below this (in units of kappa) is read as synchronized.
SYNC_TOL = 1e-3
#: Maxima less prominent than this fraction of the peak-to-peak range are ignored.
PEAK_PROMINENCE = 1e-3
MIN_FOURIER_SAMPLES = 64


class FrequencyMethod(str, enum.Enum):
    PEAK_SPACING = "peak_spacing"
    FOURIER_PEAK = "fourier_peak"


@dataclass(frozen=True)
class FrequencyEstimate:
    omega_obs: float
    amplitude: float
    method: FrequencyMethod
    uncertainty: float = 0.0
    n_peaks: int = 0
    # peak spacing and Fourier peak disagreed by more than two bins
    flagged: bool = False

    @property
    def oscillating(self) -> bool:
        return self.omega_obs > 0.0


@dataclass(frozen=True)
class FourierSpectrum:
    """One-sided spectrum; ``omega`` is angular frequency."""

    omega: np.ndarray
    magnitude: np.ndarray

    @property
    def bin_width(self) -> float:
        return float(self.omega[1] - self.omega[0])

    @property
    def peak_index(self) -> int:
        return int(np.argmax(self.magnitude))

    @property
    def peak_omega(self) -> float:
        return float(self.omega[self.peak_index])

    def as_pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.omega.tolist(), self.magnitude.tolist()))


@dataclass(frozen=True)
class SyncMetrics:
    delta_obs: float
    variance: float
    per_ensemble: tuple[FrequencyEstimate, ...] = field(default_factory=tuple)

    @property
    def frequencies(self) -> np.ndarray:
        return np.array([e.omega_obs for e in self.per_ensemble])

    @property
    def synchronized(self) -> bool:
        return self.delta_obs < SYNC_TOL


def _window(n_samples: int, window_fraction: float) -> slice:
    if not (0 < window_fraction <= 0.5):
        raise InvalidArgumentError(f"window_fraction must lie in (0, 0.5], got {window_fraction!r}")
    start = int(np.ceil((1.0 - window_fraction) * (n_samples - 1)))
    if n_samples - start < 2:
        raise InvalidArgumentError(
            f"analysis window holds {n_samples - start} samples; at least 2 are needed"
        )
    return slice(start, n_samples)


def _refined_peaks(signal: np.ndarray, dt: float, ptp: float) -> np.ndarray:
    idx, _ = find_peaks(signal, prominence=PEAK_PROMINENCE * ptp)
    idx = idx[(idx > 0) & (idx < len(signal) - 1)]
    left, mid, right = signal[idx - 1], signal[idx], signal[idx + 1]
    curv = left - 2.0 * mid + right
    with np.errstate(divide="ignore", invalid="ignore"):
        offset = np.where(curv < 0, 0.5 * (left - right) / curv, 0.0)
    return (idx + np.clip(offset, -0.5, 0.5)) * dt


def _spectrum(signal: np.ndarray, dt: float, pad: int = 1) -> FourierSpectrum:
    x = signal - signal.mean()
    x = x * np.hanning(len(x))
    m = pad * len(x)
    mag = np.abs(np.fft.rfft(x, n=m))
    omega = 2.0 * np.pi * np.fft.rfftfreq(m, d=dt)
    top = mag.max()
    return FourierSpectrum(omega, mag / top if top > 0 else mag)


def _fourier_peak(spec: FourierSpectrum) -> float:
    k = spec.peak_index
    if 0 < k < len(spec.magnitude) - 1:
        a, b, c = spec.magnitude[k - 1 : k + 2]
        denom = a - 2 * b + c
        if denom < 0:
            return float(spec.omega[k] + 0.5 * (a - c) / denom * spec.bin_width)
    return float(spec.omega[k])


def estimate_frequency(signal, dt: float, amp_threshold: float = AMP_THRESHOLD) -> FrequencyEstimate:
    """Observed angular frequency of one uniformly sampled signal.

    Uses the mean spacing of quadratically refined maxima; falls back to the
    Fourier peak when fewer than three maxima are present.
    """
    z = np.asarray(signal, dtype=float)
    if z.ndim != 1 or len(z) < 2:
        raise InvalidArgumentError("need a 1-d signal with at least 2 samples")
    ptp = float(z.max() - z.min())
    amplitude = 0.5 * ptp
    if not amplitude >= amp_threshold:
        return FrequencyEstimate(0.0, amplitude, FrequencyMethod.PEAK_SPACING)

    peaks = _refined_peaks(z, dt, ptp)
    fourier = None
    if len(z) >= MIN_FOURIER_SAMPLES:
        spec = _spectrum(z, dt)
        fourier = (_fourier_peak(spec), spec.bin_width)

    if len(peaks) >= 3:
        spacings = np.diff(peaks)
        period = (peaks[-1] - peaks[0]) / (len(peaks) - 1)
        omega = 2.0 * np.pi / period
        # propagate the spread of the period to omega
        unc = omega / period * np.std(spacings) / np.sqrt(len(spacings))
        flagged = fourier is not None and abs(fourier[0] - omega) > 2.0 * fourier[1]
        return FrequencyEstimate(
            omega, amplitude, FrequencyMethod.PEAK_SPACING, float(unc), len(peaks), bool(flagged)
        )
    if fourier is None:
        # too short for either estimator; treat as no resolvable oscillation
        return FrequencyEstimate(0.0, amplitude, FrequencyMethod.FOURIER_PEAK, n_peaks=len(peaks))
    omega, width = fourier
    return FrequencyEstimate(max(omega, 0.0), amplitude, FrequencyMethod.FOURIER_PEAK, width, len(peaks))


def observed_frequency(
    traj: Trajectory,
    ensemble_index: int,
    window_fraction: float = 0.25,
    amp_threshold: float = AMP_THRESHOLD,
) -> FrequencyEstimate:
    """``omega_obs = 2 pi / T`` for one ensemble's ``m^z`` over the trailing window."""
    if not 0 <= ensemble_index < traj.n:
        raise InvalidArgumentError(f"ensemble_index {ensemble_index} out of range for n = {traj.n}")
    sl = _window(len(traj.times), window_fraction)
    return estimate_frequency(traj.component(ensemble_index)[sl], traj.dt, amp_threshold)


def late_amplitude(traj: Trajectory, ensemble_index: int, window_fraction: float = 0.25) -> float:
    """Half the peak-to-peak range of ``m^z`` over the trailing window."""
    z = traj.component(ensemble_index)[_window(len(traj.times), window_fraction)]
    return 0.5 * float(z.max() - z.min())


def fourier_spectrum(traj: Trajectory, ensemble_index: int, window_fraction: float = 0.25,
                     pad: int = 1) -> FourierSpectrum:
    """Normalized magnitude spectrum of the mean-subtracted, Hann-windowed tail of ``m^z``."""
    sl = _window(len(traj.times), window_fraction)
    z = traj.component(ensemble_index)[sl]
    if len(z) < MIN_FOURIER_SAMPLES:
        raise InvalidArgumentError(
            f"Fourier analysis needs >= {MIN_FOURIER_SAMPLES} samples in the window, got {len(z)}"
        )
    return _spectrum(z, traj.dt, pad)


def sync_metrics(traj: Trajectory, window_fraction: float = 0.25,
                 amp_threshold: float = AMP_THRESHOLD) -> SyncMetrics:
    """Frequency mismatch of the first two ensembles and the variance over all.

    For ``n > 2`` ``delta_obs`` still compares ensembles 0 and 1; the
    variance is the network-wide measure.
    """
    if traj.n < 2:
        raise InvalidArgumentError("synchronization metrics need at least two ensembles")
    est = tuple(observed_frequency(traj, a, window_fraction, amp_threshold) for a in range(traj.n))
    freqs = np.array([e.omega_obs for e in est])
    return SyncMetrics(float(abs(freqs[0] - freqs[1])), float(np.var(freqs)), est)


class ObservedFrequency(TransformerMixin, BaseEstimator):
    """Map sampled ``m^z`` traces to ``(omega_obs, amplitude)`` rows.

    Each row of ``X`` is one signal sampled every ``dt``; only its trailing
    ``window_fraction`` is analysed.

    Examples
    --------
    >>> t = np.arange(0, 200, 0.05)
    >>> ObservedFrequency(dt=0.05).fit_transform([0.1 * np.sin(np.pi * t)]).round(3)
    array([[3.142, 0.1  ]])
    """

    def __init__(self, dt=0.05, window_fraction=0.25, amp_threshold=AMP_THRESHOLD):
        self.dt = dt
        self.window_fraction = window_fraction
        self.amp_threshold = amp_threshold

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_features=2)
        if not self.dt > 0:
            raise InvalidArgumentError(f"dt must be > 0, got {self.dt!r}")
        _window(X.shape[1], self.window_fraction)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, ensure_min_features=2)
        sl = _window(X.shape[1], self.window_fraction)
        rows = [estimate_frequency(x[sl], self.dt, self.amp_threshold) for x in X]
        return np.array([[r.omega_obs, r.amplitude] for r in rows])
