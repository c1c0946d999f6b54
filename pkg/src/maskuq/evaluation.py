"""Sparsification analysis and enhancement metrics.

A sparsification curve removes bins from most to least uncertain and tracks
the RMSE of the surviving bins, normalized by the full-set RMSE; ranking by
the true error instead gives the oracle curve, the best any uncertainty
measure could do.  The area between the two (rectangle rule over the removal
fractions, i.e. their mean difference) is the sparsification error AUSE:
zero means the uncertainty orders bins exactly like the error does.

Waveform quality is scored with scale-invariant SDR, clamped to +/-60 dB.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spectral import ComplexSpectrogram, Waveform

SDR_CLAMP_DB = 60.0
ACTIVE_THRESHOLD_DB = 40.0


def per_bin_error(est: ComplexSpectrogram, ref: ComplexSpectrogram) -> np.ndarray:
    """|est - ref|^2 per time-frequency bin."""
    if est.coeffs.shape != ref.coeffs.shape:
        raise ValueError("spectrogram shapes must match")
    d = est.coeffs - ref.coeffs
    return d.real ** 2 + d.imag ** 2


def speech_active_mask(ref: ComplexSpectrogram,
                       threshold_db: float = ACTIVE_THRESHOLD_DB) -> np.ndarray:
    """Bins whose clean magnitude is within threshold_db of the utterance peak."""
    mag = np.abs(ref.coeffs)
    return mag > mag.max() * 10.0 ** (-threshold_db / 20.0)


@dataclass
class SparsificationCurve:
    """Normalized survivor RMSE over removal fractions 0, 1/K, ... (K-1)/K."""

    fractions: np.ndarray
    rmse: np.ndarray
    label: str = ""

    def __post_init__(self) -> None:
        self.fractions = np.asarray(self.fractions, dtype=np.float64)
        self.rmse = np.asarray(self.rmse, dtype=np.float64)
        if self.fractions.shape != self.rmse.shape or self.fractions.ndim != 1:
            raise ValueError("fractions and rmse must be equal-length 1-D arrays")


def _as_flat(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} must be nonempty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def sparsification(errors, uncertainty, n_fractions: int = 100,
                   label: str = "") -> SparsificationCurve:
    """Remove bins most-uncertain-first and track the surviving RMSE.

    Bins are ordered by uncertainty descending, ties broken by ascending
    flattened index, so the output is a pure function of (errors,
    uncertainty, input order).  At fraction k/K the first floor(k*n/K) bins
    of that order are removed; the curve reports the RMSE of the survivors
    divided by the full-set RMSE (element 0 is exactly 1).
    """
    err = _as_flat(errors, "errors")
    unc = _as_flat(uncertainty, "uncertainty")
    if err.shape != unc.shape:
        raise ValueError("errors and uncertainty must have the same size")
    if np.any(err < 0):
        raise ValueError("errors must be nonnegative")
    if n_fractions < 1:
        raise ValueError("need at least one fraction")
    order = np.argsort(-unc, kind="stable")
    sorted_err = err[order]
    n = err.size
    k = np.arange(n_fractions)
    rmse = np.empty(n_fractions, dtype=np.float64)
    for i in range(n_fractions):
        removed = (i * n) // n_fractions
        rmse[i] = np.sqrt(np.mean(sorted_err[removed:]))
    if rmse[0] == 0.0:
        raise ValueError("total error is zero; curve undefined")
    return SparsificationCurve(k / n_fractions, rmse / rmse[0], label)


def oracle_curve(errors, n_fractions: int = 100) -> SparsificationCurve:
    """Sparsification with the error itself as the uncertainty."""
    err = _as_flat(errors, "errors")
    return sparsification(err, err, n_fractions, label="oracle")


def ause(measured: SparsificationCurve, oracle: SparsificationCurve) -> float:
    """Area between measured and oracle curves over the unit fraction range.

    Each of the K removal fractions owns a 1/K-wide strip, so the area is the
    mean difference; identical curves give exactly 0.
    """
    if measured.fractions.shape != oracle.fractions.shape or \
            np.any(measured.fractions != oracle.fractions):
        raise ValueError("curves must share the same fraction grid")
    return float(np.mean(measured.rmse - oracle.rmse))


def si_sdr_metric(ref: Waveform, est: Waveform) -> float:
    """Scale-invariant SDR in dB, clamped to [-60, +60].

    alpha = <est, ref> / ||ref||^2; the score is
    10 log10(||alpha ref||^2 / ||alpha ref - est||^2).
    """
    s = ref.samples
    e = est.samples
    if e.shape != s.shape:
        raise ValueError("waveform lengths must match")
    s_energy = float(np.dot(s, s))
    if s_energy == 0.0:
        raise ValueError("reference signal is identically zero")
    alpha = float(np.dot(e, s)) / s_energy
    target = alpha * s
    a = float(np.dot(target, target))
    b = float(np.dot(target - e, target - e))
    if a == 0.0:
        return -SDR_CLAMP_DB
    if b == 0.0:
        return SDR_CLAMP_DB
    return float(np.clip(10.0 * np.log10(a / b), -SDR_CLAMP_DB, SDR_CLAMP_DB))


def mean_ci95(values) -> tuple[float, float]:
    """Sample mean and its 95% normal-approximation half-width.

    A single value (or identical values) gives a zero-width interval.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("need at least one value")
    if arr.size == 1:
        return float(arr[0]), 0.0
    half = 1.96 * arr.std(ddof=1) / np.sqrt(arr.size)
    return float(arr.mean()), float(half)


@dataclass
class UtteranceEval:
    """Per-utterance evaluation inputs: pooled later across the test set."""

    error: np.ndarray
    uncertainty: np.ndarray
    si_sdr: float

    def __post_init__(self) -> None:
        self.error = _as_flat(self.error, "error")
        self.uncertainty = _as_flat(self.uncertainty, "uncertainty")
        if self.error.shape != self.uncertainty.shape:
            raise ValueError("error and uncertainty must have the same size")


@dataclass
class PooledReport:
    measured: SparsificationCurve
    oracle: SparsificationCurve
    ause: float
    si_sdr_mean: float
    si_sdr_ci95: float
    n_utterances: int
    n_bins: int


def pooled_evaluation(entries: list[UtteranceEval],
                      n_fractions: int = 100) -> PooledReport:
    """Pool bins across utterances before sorting, then curve + AUSE + SI-SDR.

    Pooling happens before the uncertainty sort so that one global ranking is
    evaluated, not an average of per-utterance rankings.
    """
    if not entries:
        raise ValueError("need at least one utterance")
    err = np.concatenate([e.error for e in entries])
    unc = np.concatenate([e.uncertainty for e in entries])
    measured = sparsification(err, unc, n_fractions, label="measured")
    oracle = oracle_curve(err, n_fractions)
    mean, half = mean_ci95([e.si_sdr for e in entries])
    return PooledReport(
        measured=measured,
        oracle=oracle,
        ause=ause(measured, oracle),
        si_sdr_mean=mean,
        si_sdr_ci95=half,
        n_utterances=len(entries),
        n_bins=err.size,
    )
