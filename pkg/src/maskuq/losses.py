"""Training objectives and their analytic gradients.

All losses report gradients with respect to the network's two output fields:
the real gain ``wf`` and the log of the aleatoric variance ``log lam`` (the
chain factor lam is applied internally, so callers never differentiate through
the exponential themselves).  The time-domain objective additionally needs the
adjoint of the synthesis transform to carry waveform gradients back onto
spectrogram bins; see :mod:`maskuq.spectral`.

Conventions:
  * spectral losses average over all bins that participate (frames x bins);
  * the scale-invariant ratio is clamped to +/-60 dB with zero gradient at
    the clamp;
  * the hybrid objective is ``beta * nll + (1 - beta) * sisdr`` computed on
    the approximate-MAP magnitude path with the noisy phase.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spectral import ComplexSpectrogram, StftConfig, Waveform, istft, istft_adjoint
from .statmodel import LAM_FLOOR, XMAG_FLOOR, PosteriorField

SDR_CLAMP_DB = 60.0
DEFAULT_BETA = 0.001


@dataclass
class LossReport:
    """Scalar objective plus the gradients a training step consumes.

    grad_wf / grad_loglam are populated for spectral-field losses; grad_est
    holds waveform-sample gradients when the loss is taken in the time domain
    directly.  parts carries named sub-objective values for history curves.
    """

    value: float
    grad_wf: np.ndarray | None = None
    grad_loglam: np.ndarray | None = None
    grad_est: np.ndarray | None = None
    parts: dict = field(default_factory=dict)


def _check_aligned(ref: ComplexSpectrogram, noisy: ComplexSpectrogram) -> None:
    if ref.coeffs.shape != noisy.coeffs.shape:
        raise ValueError("spectrogram shapes must match")


def mse(ref: ComplexSpectrogram, noisy: ComplexSpectrogram,
        wf: np.ndarray) -> LossReport:
    """Mean |S - wf X|^2 over all bins; gradient w.r.t. the gain only."""
    _check_aligned(ref, noisy)
    wf = np.asarray(wf, dtype=np.float64)
    if wf.shape != ref.coeffs.shape:
        raise ValueError("gain shape must match the spectrograms")
    resid = ref.coeffs - wf * noisy.coeffs
    n = resid.size
    value = float(np.mean(resid.real ** 2 + resid.imag ** 2))
    grad_wf = -2.0 * (np.conj(noisy.coeffs) * resid).real / n
    return LossReport(value, grad_wf=grad_wf, grad_loglam=np.zeros_like(grad_wf))


def nll_posterior(ref: ComplexSpectrogram, noisy: ComplexSpectrogram,
                  fld: PosteriorField) -> LossReport:
    """Gaussian posterior negative log-likelihood.

    mean over bins of ``log lam + |S - wf X|^2 / lam``; gradients w.r.t. wf
    and log lam.
    """
    _check_aligned(ref, noisy)
    if fld.wf.shape != ref.coeffs.shape:
        raise ValueError("field shape must match the spectrograms")
    lam = np.maximum(fld.lam, LAM_FLOOR)
    resid = ref.coeffs - fld.wf * noisy.coeffs
    sq = resid.real ** 2 + resid.imag ** 2
    n = sq.size
    value = float(np.mean(np.log(lam) + sq / lam))
    grad_wf = -2.0 * (np.conj(noisy.coeffs) * resid).real / (lam * n)
    grad_loglam = (1.0 - sq / lam) / n
    return LossReport(value, grad_wf=grad_wf, grad_loglam=grad_loglam)


def si_sdr_loss(ref: Waveform, est: np.ndarray | Waveform) -> LossReport:
    """Negative scale-invariant SDR with gradient w.r.t. the estimate samples.

    The projection scale alpha = <est, ref> / ||ref||^2 is part of the graph;
    its contribution to the error-term gradient vanishes by orthogonality,
    leaving dL/dest = -(10/ln10) (2 alpha ref / A + 2 (alpha ref - est) / B)
    with A = ||alpha ref||^2 and B = ||alpha ref - est||^2.  Outside the
    +/-60 dB window the value is clamped and the gradient is zero.
    """
    s = ref.samples
    e = est.samples if isinstance(est, Waveform) else np.asarray(est, np.float64)
    if e.shape != s.shape:
        raise ValueError("estimate length must match the reference")
    s_energy = float(np.dot(s, s))
    if s_energy == 0.0:
        raise ValueError("reference signal is identically zero")
    alpha = float(np.dot(e, s)) / s_energy
    target = alpha * s
    err = target - e
    a = float(np.dot(target, target))
    b = float(np.dot(err, err))
    zero = np.zeros_like(e)
    if a == 0.0:
        # est orthogonal to ref: ratio 0, clamp at the bottom
        return LossReport(SDR_CLAMP_DB, grad_est=zero)
    if b == 0.0 or 10.0 * np.log10(a / b) >= SDR_CLAMP_DB:
        return LossReport(-SDR_CLAMP_DB, grad_est=zero)
    sdr = 10.0 * np.log10(a / b)
    if sdr <= -SDR_CLAMP_DB:
        return LossReport(SDR_CLAMP_DB, grad_est=zero)
    scale = 10.0 / np.log(10.0)
    grad_est = -scale * (2.0 * alpha * s / a + 2.0 * err / b)
    return LossReport(-sdr, grad_est=grad_est)


@dataclass
class _SynthCache:
    """Intermediates of a masked synthesis pass, kept for the backward hop."""

    noisy: ComplexSpectrogram
    n_frames: int


def wiener_synthesis(noisy: ComplexSpectrogram, wf: np.ndarray) -> tuple[Waveform, _SynthCache]:
    """Synthesize istft(wf * X); returns the waveform and a backward cache."""
    wf = np.asarray(wf, dtype=np.float64)
    masked = ComplexSpectrogram(wf * noisy.coeffs, noisy.config, noisy.original_len)
    return istft(masked), _SynthCache(noisy, masked.n_frames)


def wiener_synthesis_backward(grad_wave: np.ndarray, cache: _SynthCache) -> np.ndarray:
    """Waveform gradient -> gain gradient for ``wiener_synthesis``."""
    g = istft_adjoint(grad_wave, cache.noisy.config, cache.n_frames)
    return (np.conj(g) * cache.noisy.coeffs).real


@dataclass
class _AmapCache:
    noisy: ComplexSpectrogram
    n_frames: int
    phase: np.ndarray
    dmag_dwf: np.ndarray
    dmag_dloglam: np.ndarray


def amap_synthesis(noisy: ComplexSpectrogram,
                   fld: PosteriorField) -> tuple[Waveform, _AmapCache]:
    """Synthesize the approximate-MAP magnitude with the noisy phase.

    waveform = istft(amap_gain(wf, lam, |X|) * |X| * exp(i angle X)).  The
    cache holds the partials of the magnitude w.r.t. wf and log lam so the
    chain rule can run backward through the synthesis adjoint.
    """
    xmag = np.abs(noisy.coeffs)
    xmag_f = np.maximum(xmag, XMAG_FLOOR)
    lam = fld.lam
    half = 0.5 * fld.wf
    root = np.sqrt(half ** 2 + lam / (4.0 * xmag_f ** 2))
    root = np.maximum(root, 1e-30)
    gain = half + root
    mag = gain * xmag
    ph = np.exp(1j * np.angle(noisy.coeffs))
    est = ComplexSpectrogram(mag * ph, noisy.config, noisy.original_len)
    dgain_dwf = 0.5 + fld.wf / (4.0 * root)
    dgain_dlam = 1.0 / (8.0 * root * xmag_f ** 2)
    cache = _AmapCache(
        noisy=noisy,
        n_frames=est.n_frames,
        phase=ph,
        dmag_dwf=dgain_dwf * xmag,
        dmag_dloglam=dgain_dlam * lam * xmag,
    )
    return istft(est), cache


def amap_synthesis_backward(grad_wave: np.ndarray,
                            cache: _AmapCache) -> tuple[np.ndarray, np.ndarray]:
    """Waveform gradient -> (gain, log-variance) gradients for ``amap_synthesis``."""
    g = istft_adjoint(grad_wave, cache.noisy.config, cache.n_frames)
    grad_mag = (np.conj(g) * cache.phase).real
    return grad_mag * cache.dmag_dwf, grad_mag * cache.dmag_dloglam


def amap_enhance_path(noisy: ComplexSpectrogram, fld: PosteriorField,
                      cfg: StftConfig | None = None) -> Waveform:
    """Forward-only enhancement through the approximate-MAP magnitude path."""
    if cfg is not None and cfg != noisy.config:
        raise ValueError("config does not match the spectrogram")
    wave, _ = amap_synthesis(noisy, fld)
    return wave


def masked_si_sdr_loss(ref_wave: Waveform, noisy: ComplexSpectrogram,
                       wf: np.ndarray) -> LossReport:
    """Time-domain loss of istft(wf * X) against the clean waveform."""
    est, cache = wiener_synthesis(noisy, wf)
    rep = si_sdr_loss(ref_wave, est)
    grad_wf = wiener_synthesis_backward(rep.grad_est, cache)
    return LossReport(rep.value, grad_wf=grad_wf,
                      grad_loglam=np.zeros_like(grad_wf))


def hybrid(ref: ComplexSpectrogram, noisy: ComplexSpectrogram,
           fld: PosteriorField, ref_wave: Waveform,
           beta: float = DEFAULT_BETA) -> LossReport:
    """beta * posterior NLL + (1 - beta) * time-domain loss on the MAP path."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    nll = nll_posterior(ref, noisy, fld)
    est, cache = amap_synthesis(noisy, fld)
    sdr = si_sdr_loss(ref_wave, est)
    g_wf, g_loglam = amap_synthesis_backward(sdr.grad_est, cache)
    value = beta * nll.value + (1.0 - beta) * sdr.value
    return LossReport(
        value,
        grad_wf=beta * nll.grad_wf + (1.0 - beta) * g_wf,
        grad_loglam=beta * nll.grad_loglam + (1.0 - beta) * g_loglam,
        parts={"nll": nll.value, "sisdr": sdr.value},
    )
