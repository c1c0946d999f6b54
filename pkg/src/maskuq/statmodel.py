"""Gaussian posterior model for masked spectral coefficients.

Under circularly-symmetric Gaussian priors on speech and noise, the posterior
of a clean coefficient given the noisy one is complex Gaussian with mean
``wiener_gain * X`` and variance ``posterior_variance``.  The magnitude of the
clean coefficient then follows a Rician density, whose closed-form approximate
mode (``amap_gain``) plugs the posterior parameters into a square-root formula
that stays at or above the Wiener gain and reduces to it as the variance
vanishes.

Brute-force/Monte-Carlo oracles used by the tests live here as well, so the
closed forms and the things that check them stay side by side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .spectral import ComplexSpectrogram

XMAG_FLOOR = 1e-8
LAM_FLOOR = 1e-10


@dataclass
class GaussianPrior:
    """Per-bin speech/noise variances; scalars or equal-shaped arrays."""

    sigma_s2: np.ndarray
    sigma_n2: np.ndarray

    def __post_init__(self) -> None:
        self.sigma_s2 = np.asarray(self.sigma_s2, dtype=np.float64)
        self.sigma_n2 = np.asarray(self.sigma_n2, dtype=np.float64)
        if self.sigma_s2.shape != self.sigma_n2.shape:
            raise ValueError("variance shapes must match")
        if np.any(self.sigma_s2 < 0) or np.any(self.sigma_n2 < 0):
            raise ValueError("variances must be nonnegative")
        if not (np.all(np.isfinite(self.sigma_s2))
                and np.all(np.isfinite(self.sigma_n2))):
            raise ValueError("variances must be finite")


@dataclass
class PosteriorField:
    """Per-bin gain and aleatoric variance predicted for one utterance."""

    wf: np.ndarray
    lam: np.ndarray

    def __post_init__(self) -> None:
        self.wf = np.asarray(self.wf, dtype=np.float64)
        self.lam = np.asarray(self.lam, dtype=np.float64)
        if self.wf.shape != self.lam.shape:
            raise ValueError("wf and lam shapes must match")
        if np.any(self.wf < 0) or np.any(self.wf > 1):
            raise ValueError("wf must lie in [0, 1]")
        if np.any(self.lam < 0):
            raise ValueError("lam must be nonnegative")
        if not (np.all(np.isfinite(self.wf)) and np.all(np.isfinite(self.lam))):
            raise ValueError("wf and lam must be finite")


def wiener_gain(prior: GaussianPrior) -> np.ndarray:
    """sigma_s2 / (sigma_s2 + sigma_n2); rejects bins where both are zero."""
    total = prior.sigma_s2 + prior.sigma_n2
    if np.any(total == 0):
        raise ValueError("speech and noise variance are both zero")
    return prior.sigma_s2 / total


def posterior_variance(prior: GaussianPrior) -> np.ndarray:
    """sigma_s2 * sigma_n2 / (sigma_s2 + sigma_n2)."""
    total = prior.sigma_s2 + prior.sigma_n2
    if np.any(total == 0):
        raise ValueError("speech and noise variance are both zero")
    return prior.sigma_s2 * prior.sigma_n2 / total


def apply_mask(gain: np.ndarray, spec: ComplexSpectrogram) -> ComplexSpectrogram:
    """Multiply coefficients by a real per-bin gain."""
    gain = np.asarray(gain, dtype=np.float64)
    if gain.shape != spec.coeffs.shape:
        raise ValueError("gain shape must match the spectrogram")
    return ComplexSpectrogram(gain * spec.coeffs, spec.config, spec.original_len)


def log_i0(z):
    """log of the modified Bessel function I0, overflow-free for any z >= 0.

    Uses the exponentially scaled Bessel: log I0(z) = log i0e(z) + z.
    """
    z = np.asarray(z, dtype=np.float64)
    if np.any(z < 0):
        raise ValueError("argument must be nonnegative")
    return np.log(special.i0e(z)) + z


def rician_log_pdf(mag, wf, lam, xmag):
    """Log density of the clean magnitude given the noisy coefficient.

    p(m) = (2 m / lam) exp(-(m^2 + (wf xmag)^2) / lam) I0(2 xmag m wf / lam)

    Args:
        mag: magnitude values (>= 0) at which to evaluate.
        wf: gain in [0, 1].
        lam: posterior variance (> 0; floored at 1e-10).
        xmag: noisy magnitude (floored at 1e-8).

    Returns:
        log density, elementwise over broadcast inputs; -inf at mag == 0.
    """
    mag = np.asarray(mag, dtype=np.float64)
    if np.any(mag < 0):
        raise ValueError("magnitudes must be nonnegative")
    lam = np.maximum(np.asarray(lam, dtype=np.float64), LAM_FLOOR)
    xmag = np.maximum(np.asarray(xmag, dtype=np.float64), XMAG_FLOOR)
    nu = np.asarray(wf, dtype=np.float64) * xmag
    with np.errstate(divide="ignore"):
        logm = np.log(2.0 * mag / lam)
    return logm - (mag ** 2 + nu ** 2) / lam + log_i0(2.0 * nu * mag / lam)


def amap_gain(wf, lam, xmag):
    """Closed-form approximate magnitude-MAP gain.

    wf/2 + sqrt((wf/2)^2 + lam / (4 xmag^2)), with xmag floored at 1e-8.
    Equals wf exactly when lam == 0 and approaches wf as xmag grows.
    """
    wf = np.asarray(wf, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0):
        raise ValueError("lam must be nonnegative")
    xmag = np.maximum(np.asarray(xmag, dtype=np.float64), XMAG_FLOOR)
    half = 0.5 * wf
    return half + np.sqrt(half ** 2 + lam / (4.0 * xmag ** 2))


def rician_map_bruteforce(wf: float, lam: float, xmag: float,
                          grid_resolution: float = 1e-4) -> float:
    """Grid-search argmax of ``rician_log_pdf`` over [0, xmag + 6 sqrt(lam)].

    Reference oracle for the closed-form gain; O(range/resolution) work.
    """
    if lam <= 0:
        raise ValueError("lam must be positive for a grid search")
    upper = xmag + 6.0 * np.sqrt(lam)
    grid = np.arange(grid_resolution, upper + grid_resolution, grid_resolution)
    logp = rician_log_pdf(grid, wf, lam, xmag)
    return float(grid[np.argmax(logp)])


@dataclass
class MmseRiskTable:
    """Monte-Carlo risk of candidate gains under a Gaussian simulation."""

    gains: np.ndarray
    risks: np.ndarray
    wiener: float
    residual_variance: float

    @property
    def best_gain(self) -> float:
        return float(self.gains[np.argmin(self.risks)])


def mmse_risk_oracle(prior: GaussianPrior, n_samples: int,
                     candidate_gains, seed: int) -> MmseRiskTable:
    """Simulate S ~ CN(0, s2), N ~ CN(0, n2), X = S + N and score gains.

    For each candidate g the risk is the empirical mean of |S - g X|^2; the
    residual variance is the same mean at the Wiener gain itself.
    """
    s2 = float(prior.sigma_s2)
    n2 = float(prior.sigma_n2)
    gains = np.asarray(candidate_gains, dtype=np.float64)
    rng = np.random.default_rng(seed)

    def draw_cn(var: float) -> np.ndarray:
        re = rng.standard_normal(n_samples)
        im = rng.standard_normal(n_samples)
        return np.sqrt(var / 2.0) * (re + 1j * im)

    s = draw_cn(s2)
    x = s + draw_cn(n2)
    risks = np.empty_like(gains)
    for i, g in enumerate(gains):
        r = s - g * x
        risks[i] = np.mean(r.real ** 2 + r.imag ** 2)
    w = float(wiener_gain(prior))
    res = s - w * x
    residual_variance = float(np.mean(res.real ** 2 + res.imag ** 2))
    return MmseRiskTable(gains, risks, w, residual_variance)
