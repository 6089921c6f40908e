"""Anchor-time selection via an onset function, smoothing and maximal filtering.

The goal is not onset detection: anchor times only have to land on the same
signal events with or without degradations, so that prints computed on a
reference track and on a degraded excerpt line up. The selected onset
function is the rectified difference of frame-wise spectral 1-norms, the
winner of a robustness study over the generalized spectral-flux family; the
generalized form is kept for experimentation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.ndimage
import scipy.signal

DEFAULT_T_C = 0.050
DEFAULT_N_FILTER = 20
DEFAULT_MEAN_LAG = 0.25


@dataclass(frozen=True)
class OnsetConfig:
    """Parameters of the onset function and its post-filtering.

    ``h``, ``p``, ``d``, ``beta`` parameterize the generalized flux family;
    the production setting (difference of spectral norms) corresponds to
    h=1, p=1, d=0. ``epsilon`` guards the d=1 normalization against silence;
    when None it is set to 1e-10 times the peak spectrogram magnitude.
    """

    h: float = 1.0
    p: float = 1.0
    d: int = 0
    beta: float = 0.0
    epsilon: float | None = None
    r: float = 1.0
    t_c: float = DEFAULT_T_C
    n: int = DEFAULT_N_FILTER
    mean_lag: float = DEFAULT_MEAN_LAG

    def __post_init__(self):
        if not -1.0 <= self.h <= 1.0:
            raise ValueError("h must be in [-1, 1]")
        if self.p <= 0:
            raise ValueError("p must be positive")
        if self.d not in (0, 1):
            raise ValueError("d must be 0 or 1")
        if self.n % 2 != 0:
            raise ValueError("filter size n must be even")
        if self.t_c <= 0 or self.mean_lag <= 0 or self.r <= 0:
            raise ValueError("t_c, mean_lag and r must be positive")


@dataclass(frozen=True)
class AnalysisTimes:
    """Selected anchor frames (strictly increasing) and their times in seconds."""

    frames: np.ndarray
    seconds: np.ndarray

    def __len__(self) -> int:
        return len(self.frames)


def rectify(x, h: float):
    """Parametric half-wave rectifier (x + h|x|) / (1 + |h|).

    h=1 keeps the positive part, h=-1 the negative part, h=0 is identity.
    """
    if not -1.0 <= h <= 1.0:
        raise ValueError("h must be in [-1, 1]")
    x = np.asarray(x, dtype=np.float64)
    return (x + h * np.abs(x)) / (1.0 + abs(h))


def _pnorm(m: np.ndarray, p: float) -> np.ndarray:
    """Column-wise p-norm (p = inf supported)."""
    if np.isinf(p):
        return np.max(np.abs(m), axis=0)
    return np.sum(np.abs(m) ** p, axis=0) ** (1.0 / p)


def _magnitudes(spec) -> np.ndarray:
    m = getattr(spec, "magnitudes", spec)
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[np.newaxis, :]
    return m


def generalized_flux(spec, cfg: OnsetConfig) -> np.ndarray:
    """Generalized spectral flux: rectified frame-difference p-norm, optionally
    normalized by a geometric/algebraic mix of the frame norms.

    Returns one value per frame; frame 0 (no predecessor) is 0.
    """
    m = _magnitudes(spec)
    if not np.all(np.isfinite(m)):
        raise ValueError("spectrogram entries must be finite")
    if m.shape[1] < 2:
        raise ValueError("need at least 2 frames")
    num = _pnorm(rectify(m[:, 1:] - m[:, :-1], cfg.h), cfg.p)
    phi = np.zeros(m.shape[1])
    if cfg.d == 0:
        phi[1:] = num
        return phi
    eps = cfg.epsilon
    if eps is None:
        eps = max(1e-10 * float(m.max()), np.finfo(np.float64).tiny)
    norms = _pnorm(m, cfg.p)
    den = np.sqrt(norms[1:] * norms[:-1]) + cfg.beta * (norms[1:] + norms[:-1]) + eps
    phi[1:] = num / den
    return phi


def diff_spectral_norms(spec) -> np.ndarray:
    """Rectified difference of spectral 1-norms, the production onset function.

    Equals the generalized flux at (h=1, p=1, d=0) applied to the series of
    frame norms.
    """
    m = _magnitudes(spec)
    norms = np.sum(np.abs(m), axis=0)
    phi = np.zeros(m.shape[1])
    phi[1:] = np.abs(rectify(norms[1:] - norms[:-1], 1.0))
    return phi


def design_smoother(t_c: float, n: int, frame_rate: float) -> np.ndarray:
    """Symmetric windowed-sinc low-pass smoother, sum-normalized.

    Ideal response 2*f_c*sinc(2*f_c*ell/F_r) with f_c = 1/t_c, weighted by a
    Hamming window over support [-n/2, n/2]. Zero group delay, so smoothed
    maxima are not shifted.
    """
    if n % 2 != 0:
        raise ValueError("n must be even")
    if t_c <= 0:
        raise ValueError("t_c must be positive")
    if n == 0:
        return np.array([1.0])
    f_c = 1.0 / t_c
    ell = np.arange(-(n // 2), n // 2 + 1, dtype=np.float64)
    ideal = 2.0 * f_c * np.sinc(2.0 * f_c * ell / frame_rate)
    coeffs = ideal * scipy.signal.windows.hamming(n + 1, sym=True)
    return coeffs / coeffs.sum()


def post_filter(phi: np.ndarray, coeffs: np.ndarray, r: float = 1.0) -> np.ndarray:
    """Convolve phi**r with the smoother, same length, reflect-padded edges."""
    if r <= 0:
        raise ValueError("r must be positive")
    phi = np.asarray(phi, dtype=np.float64)
    if np.any(phi < 0):
        raise ValueError("post_filter input must be nonnegative")
    powered = phi**r
    half = (len(coeffs) - 1) // 2
    if half == 0:
        return powered * coeffs[0]
    if len(powered) <= half:
        raise ValueError(f"series too short ({len(powered)}) for filter support ({half})")
    padded = np.pad(powered, half, mode="reflect")
    return np.convolve(padded, coeffs, mode="valid")


def select_times(phi: np.ndarray, mean_lag: float, frame_rate: float) -> AnalysisTimes:
    """Pick frames where phi equals its sliding maximum.

    The window covers [-T//2, T//2] around each frame with
    T = round(mean_lag * F_r); runs of equal consecutive maxima yield only
    their first frame (deterministic plateau tie-break).
    """
    phi = np.asarray(phi, dtype=np.float64)
    if len(phi) == 0:
        raise ValueError("empty onset series")
    t_frames = int(round(mean_lag * frame_rate))
    if t_frames < 1:
        raise ValueError("mean_lag shorter than one frame")
    half = t_frames // 2
    sliding_max = scipy.ndimage.maximum_filter1d(phi, size=2 * half + 1, mode="nearest")
    mask = phi == sliding_max
    keep = mask.copy()
    keep[1:] &= ~(mask[:-1] & (phi[1:] == phi[:-1]))
    frames = np.flatnonzero(keep)
    return AnalysisTimes(frames=frames, seconds=frames / frame_rate)


def select_analysis_times(spec, cfg: OnsetConfig | None = None) -> AnalysisTimes:
    """Full anchor-time selection on a spectrogram (flux, smoothing, maxima)."""
    cfg = cfg or OnsetConfig()
    frame_rate = spec.frame_rate
    phi = diff_spectral_norms(spec)
    coeffs = design_smoother(cfg.t_c, cfg.n, frame_rate)
    smoothed = post_filter(phi, coeffs, cfg.r)
    return select_times(smoothed, cfg.mean_lag, frame_rate)
