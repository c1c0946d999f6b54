"""Short-time Fourier analysis/synthesis with exact reconstruction.

Frames are left-aligned on a zero-padded buffer: ``frame_len - hop`` zeros in
front, enough zeros behind to complete the last frame, and the synthesis path
trims exactly the front padding plus any tail.  Synthesis applies the window a
second time and divides by the accumulated window-square sum, which makes the
round trip exact for any window/hop combination that keeps that sum positive
over the retained samples.

Besides the transforms themselves, this module exposes their adjoints
(``stft_adjoint``, ``istft_adjoint``) with respect to the real inner product
``<U, Z> = sum(Re U * Re Z + Im U * Im Z)``.  The adjoints are what chain-rule
code needs to push waveform-domain gradients back onto spectrogram bins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_NOLA_EPS = 1e-12


def hann_periodic(n: int) -> np.ndarray:
    """Periodic Hann window of length n, w[k] = 0.5 - 0.5 cos(2 pi k / n)."""
    if n < 1:
        raise ValueError("window length must be positive")
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis parameters.

    Attributes:
        frame_len: analysis frame length in samples.
        hop: hop between frame starts; must divide frame_len.
        fft_size: FFT length (>= frame_len, even); defaults to frame_len.
        sample_rate: sample rate the config is meant for, in Hz.
    """

    frame_len: int = 512
    hop: int = 256
    fft_size: int | None = None
    sample_rate: int = 16000

    def __post_init__(self) -> None:
        if self.fft_size is None:
            object.__setattr__(self, "fft_size", self.frame_len)
        if self.frame_len < 1 or self.hop < 1:
            raise ValueError("frame_len and hop must be positive")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.frame_len % self.hop != 0:
            raise ValueError("hop must divide frame_len")
        if self.fft_size < self.frame_len:
            raise ValueError("fft_size must be >= frame_len")
        if self.fft_size % 2 != 0:
            raise ValueError("fft_size must be even")
        # NOLA: the window-square sum over any fully covered sample must be
        # positive, otherwise synthesis cannot undo the analysis windowing.
        w2 = self.window ** 2
        for phase in range(self.hop):
            s = w2[phase::self.hop].sum()
            if s <= _NOLA_EPS:
                raise ValueError(
                    "window/hop fails the nonzero overlap condition "
                    f"(square sum {s:.3e} at phase {phase})"
                )

    @property
    def window(self) -> np.ndarray:
        return hann_periodic(self.frame_len)

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def pad(self) -> int:
        return self.frame_len - self.hop

    def n_frames(self, n_samples: int) -> int:
        """Frame count for a signal of n_samples samples."""
        if n_samples < 1:
            raise ValueError("signal must contain at least one sample")
        return -(-(n_samples + self.pad) // self.hop)

    def padded_len(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop + self.frame_len


@dataclass
class Waveform:
    """A mono time-domain signal."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("samples must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class ComplexSpectrogram:
    """STFT coefficients, frames along axis 0 and frequency along axis 1."""

    coeffs: np.ndarray
    config: StftConfig
    original_len: int

    def __post_init__(self) -> None:
        self.coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if self.coeffs.ndim != 2:
            raise ValueError("coeffs must be a 2-D array (frames x bins)")
        if self.coeffs.shape[1] != self.config.n_bins:
            raise ValueError(
                f"expected {self.config.n_bins} bins, got {self.coeffs.shape[1]}"
            )
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("coeffs must be finite")
        if self.original_len < 1:
            raise ValueError("original_len must be positive")

    @property
    def n_frames(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_bins(self) -> int:
        return self.coeffs.shape[1]


def magnitude(spec: ComplexSpectrogram) -> np.ndarray:
    return np.abs(spec.coeffs)


def phase(spec: ComplexSpectrogram) -> np.ndarray:
    """Per-bin phase in radians; a zero coefficient gets phase 0."""
    return np.angle(spec.coeffs)


def _padded_signal(x: np.ndarray, cfg: StftConfig) -> tuple[np.ndarray, int]:
    n_frames = cfg.n_frames(x.size)
    buf = np.zeros(cfg.padded_len(n_frames), dtype=np.float64)
    buf[cfg.pad:cfg.pad + x.size] = x
    return buf, n_frames


def _frames_of(buf: np.ndarray, cfg: StftConfig) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(buf, cfg.frame_len)
    return view[::cfg.hop]


def _overlap_square_sum(n_frames: int, cfg: StftConfig) -> np.ndarray:
    w2 = cfg.window ** 2
    acc = np.zeros(cfg.padded_len(n_frames), dtype=np.float64)
    for t in range(n_frames):
        start = t * cfg.hop
        acc[start:start + cfg.frame_len] += w2
    return acc


def stft(wave: Waveform, cfg: StftConfig) -> ComplexSpectrogram:
    """Analyze a waveform into windowed, left-aligned frames.

    Args:
        wave: input signal; its sample rate must match cfg.
        cfg: analysis parameters.

    Returns:
        ComplexSpectrogram with ``cfg.n_frames(len(wave))`` frames and
        ``fft_size // 2 + 1`` frequency bins per frame.
    """
    if wave.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"waveform rate {wave.sample_rate} != config rate {cfg.sample_rate}"
        )
    buf, _ = _padded_signal(wave.samples, cfg)
    frames = _frames_of(buf, cfg) * cfg.window
    coeffs = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    return ComplexSpectrogram(coeffs, cfg, wave.samples.size)


def istft(spec: ComplexSpectrogram) -> Waveform:
    """Resynthesize by windowed overlap-add and window-square normalization."""
    cfg = spec.config
    frames = np.fft.irfft(spec.coeffs, n=cfg.fft_size, axis=1)[:, :cfg.frame_len]
    frames = frames * cfg.window
    buf = np.zeros(cfg.padded_len(spec.n_frames), dtype=np.float64)
    for t in range(spec.n_frames):
        start = t * cfg.hop
        buf[start:start + cfg.frame_len] += frames[t]
    wss = _overlap_square_sum(spec.n_frames, cfg)
    out = np.where(wss > _NOLA_EPS, buf / np.where(wss > _NOLA_EPS, wss, 1.0), 0.0)
    samples = out[cfg.pad:cfg.pad + spec.original_len]
    if samples.size != spec.original_len:
        raise ValueError("spectrogram too short for its declared original_len")
    return Waveform(samples, cfg.sample_rate)


def _rfft_adjoint(grad_bins: np.ndarray, fft_size: int) -> np.ndarray:
    # Adjoint of the real-to-halfcomplex DFT under the real inner product:
    # d<G, rfft(x)> / dx_n = sum_k Re[G_k exp(2i pi k n / N)].
    half = grad_bins * 0.5
    half[..., 0] = grad_bins[..., 0].real
    half[..., -1] = grad_bins[..., -1].real
    return fft_size * np.fft.irfft(half, n=fft_size, axis=-1)


def _irfft_adjoint(grad_frames: np.ndarray, fft_size: int) -> np.ndarray:
    # Adjoint of irfft: a scaled rfft with the one-sided doubling undone at
    # DC and Nyquist, whose imaginary parts irfft never reads.
    spec = np.fft.rfft(grad_frames, n=fft_size, axis=-1) * (2.0 / fft_size)
    spec[..., 0] = spec[..., 0].real * 0.5
    spec[..., -1] = spec[..., -1].real * 0.5
    return spec


def stft_adjoint(grad_coeffs: np.ndarray, cfg: StftConfig,
                 original_len: int) -> np.ndarray:
    """Adjoint of ``stft`` as a linear map from samples to coefficients.

    Args:
        grad_coeffs: (frames x bins) complex array; real/imag parts hold the
            partial derivatives of a scalar with respect to Re/Im of each bin.
        cfg: the analysis parameters used forward.
        original_len: length of the waveform the forward pass consumed.

    Returns:
        Array of length original_len holding the partials with respect to the
        input samples.
    """
    grad_coeffs = np.asarray(grad_coeffs, dtype=np.complex128)
    n_frames = grad_coeffs.shape[0]
    frames = _rfft_adjoint(grad_coeffs, cfg.fft_size)[:, :cfg.frame_len]
    frames = frames * cfg.window
    buf = np.zeros(cfg.padded_len(n_frames), dtype=np.float64)
    for t in range(n_frames):
        start = t * cfg.hop
        buf[start:start + cfg.frame_len] += frames[t]
    return buf[cfg.pad:cfg.pad + original_len]


def istft_adjoint(grad_samples: np.ndarray, cfg: StftConfig,
                  n_frames: int) -> np.ndarray:
    """Adjoint of ``istft``: waveform-domain gradients back to bins.

    Args:
        grad_samples: partials of a scalar with respect to the synthesized
            samples (length = the original_len used at synthesis).
        cfg: the synthesis parameters used forward.
        n_frames: frame count of the spectrogram that was synthesized.

    Returns:
        (frames x bins) complex array; real/imag parts are the partials with
        respect to Re/Im of each coefficient.
    """
    grad_samples = np.asarray(grad_samples, dtype=np.float64)
    wss = _overlap_square_sum(n_frames, cfg)
    buf = np.zeros(cfg.padded_len(n_frames), dtype=np.float64)
    buf[cfg.pad:cfg.pad + grad_samples.size] = grad_samples
    buf = np.where(wss > _NOLA_EPS, buf / np.where(wss > _NOLA_EPS, wss, 1.0), 0.0)
    frames = _frames_of(buf, cfg) * cfg.window
    padded = np.zeros((n_frames, cfg.fft_size), dtype=np.float64)
    padded[:, :cfg.frame_len] = frames
    return _irfft_adjoint(padded, cfg.fft_size)
