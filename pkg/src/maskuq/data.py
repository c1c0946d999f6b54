"""Synthetic speech corpus: signal generators, SNR mixing, WAV and manifest I/O.

The generators stand in for recorded speech at desk scale.  Speech is a
harmonic source with drifting pitch, resonant spectral envelopes and a
voiced/unvoiced/pause segment structure; noises cover stationary, colored,
speech-shaped and modulated interference.  Everything is seeded, and a
manifest fully determines every byte of a generated corpus.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.random import default_rng
from scipy.io import wavfile

from .spectral import Waveform

SPEECH_RMS = 0.1
NOISE_KINDS = ("white", "pink", "babble_proxy", "amplitude_modulated")
SPLITS = ("train", "val", "test")
TRAIN_SNR_RANGE = (-5.0, 20.0)
TEST_SNR_GRID = (-10.0, -5.0, 0.0, 5.0, 10.0)
PITCH_RANGE = (80.0, 300.0)
# Common rescale applied to a (clean, noise, mix) triple whose peak would
# clip 16-bit PCM; SNR and SI-SDR are invariant to it.
PEAK_CEILING = 0.99
PCM_FULL_SCALE = 32767
RAMP_SECONDS = 0.010
BABBLE_STREAMS = 6

MANIFEST_HEADER = "# corpus manifest v1"
MANIFEST_FIELDS = "# fields: id split speech_seed noise_seed noise_kind snr_db duration_s"


# ---------------------------------------------------------------------------
# speech synthesis


@dataclass(frozen=True)
class Segment:
    """One stretch of a planned utterance.

    ``f0_start``/``f0_end`` are the pitch endpoints in Hz for voiced
    segments and 0 otherwise; pitch moves linearly in between.
    """

    kind: str
    start: int
    length: int
    f0_start: float = 0.0
    f0_end: float = 0.0

    @property
    def stop(self) -> int:
        return self.start + self.length


def speech_plan(seed: int, duration_s: float,
                sample_rate: int = 16000) -> list[Segment]:
    """Segment plan that ``synth_speech`` realizes for the same arguments."""
    rng = default_rng(seed)
    n = _n_samples(duration_s, sample_rate)
    return _plan_segments(rng, n, sample_rate)


def _n_samples(duration_s: float, sample_rate: int) -> int:
    if not duration_s > 0:
        raise ValueError("duration must be positive")
    return int(round(duration_s * sample_rate))


def _plan_segments(rng: np.random.Generator, n_samples: int,
                   sample_rate: int) -> list[Segment]:
    segments: list[Segment] = []
    pos = 0
    while pos < n_samples:
        u = rng.random()
        kind = "voiced" if u < 0.60 else ("unvoiced" if u < 0.82 else "pause")
        length = min(int(rng.uniform(0.15, 0.40) * sample_rate), n_samples - pos)
        f0s = f0e = 0.0
        if kind == "voiced":
            f0s = rng.uniform(*PITCH_RANGE)
            f0e = float(np.clip(f0s * (1.0 + rng.uniform(-0.15, 0.15)),
                                *PITCH_RANGE))
        segments.append(Segment(kind, pos, length, f0s, f0e))
        pos += length
    if not any(s.kind == "voiced" for s in segments):
        # Guarantees nonzero output so RMS normalization is well defined.
        first = segments[0]
        f0s = rng.uniform(*PITCH_RANGE)
        f0e = float(np.clip(f0s * (1.0 + rng.uniform(-0.15, 0.15)),
                            *PITCH_RANGE))
        segments[0] = Segment("voiced", first.start, first.length, f0s, f0e)
    return segments


def _resonance_envelope(rng: np.random.Generator):
    """Random three-resonance spectral envelope, evaluated per frequency."""
    centers = (rng.uniform(300.0, 900.0), rng.uniform(1000.0, 2200.0),
               rng.uniform(2300.0, 3400.0))
    widths = (rng.uniform(80.0, 160.0), rng.uniform(120.0, 250.0),
              rng.uniform(150.0, 300.0))
    amps = (1.0, 0.5, 0.25)

    def envelope(freq: np.ndarray | float) -> np.ndarray | float:
        total = 0.02
        for c, w, a in zip(centers, widths, amps):
            total = total + a * np.exp(-0.5 * ((freq - c) / w) ** 2)
        return total

    return envelope


def _apply_ramps(x: np.ndarray, sample_rate: int) -> np.ndarray:
    ramp = min(int(RAMP_SECONDS * sample_rate), len(x) // 2)
    if ramp == 0:
        return x
    fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    x[:ramp] *= fade
    x[-ramp:] *= fade[::-1]
    return x


def _voiced_segment(rng: np.random.Generator, seg: Segment,
                    sample_rate: int) -> np.ndarray:
    envelope = _resonance_envelope(rng)
    amp = rng.uniform(0.6, 1.0)
    t = np.arange(seg.length) / sample_rate
    f0 = seg.f0_start + (seg.f0_end - seg.f0_start) * t / max(t[-1], 1e-12)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
    f0_max = max(seg.f0_start, seg.f0_end)
    n_harm = max(1, int(4000.0 // f0_max))
    f0_mid = 0.5 * (seg.f0_start + seg.f0_end)
    x = np.zeros(seg.length)
    for h in range(1, n_harm + 1):
        f_h = h * f0_mid
        a_h = envelope(f_h) * 600.0 / (600.0 + f_h)
        x += a_h * np.cos(h * phase + rng.uniform(0.0, 2.0 * np.pi))
    rms = math.sqrt(float(np.mean(x**2)))
    if rms > 0:
        x *= amp / rms
    return _apply_ramps(x, sample_rate)


def _unvoiced_segment(rng: np.random.Generator, seg: Segment,
                      sample_rate: int) -> np.ndarray:
    center = rng.uniform(1800.0, 4500.0)
    width = rng.uniform(800.0, 2000.0)
    amp = 0.35 * rng.uniform(0.6, 1.0)
    noise = rng.standard_normal(seg.length)
    spec = np.fft.rfft(noise)
    freq = np.fft.rfftfreq(seg.length, 1.0 / sample_rate)
    spec *= np.exp(-0.5 * ((freq - center) / width) ** 2)
    x = np.fft.irfft(spec, seg.length)
    rms = math.sqrt(float(np.mean(x**2)))
    if rms > 0:
        x *= amp / rms
    return _apply_ramps(x, sample_rate)


def synth_speech(seed: int, duration_s: float,
                 sample_rate: int = 16000) -> Waveform:
    """Speech-like utterance with drifting pitch, RMS normalized to 0.1.

    The same seed always yields the same samples.  Segment boundaries and
    pitch tracks are available separately through ``speech_plan``.
    """
    rng = default_rng(seed)
    n = _n_samples(duration_s, sample_rate)
    segments = _plan_segments(rng, n, sample_rate)
    x = np.zeros(n)
    for seg in segments:
        if seg.kind == "voiced":
            x[seg.start:seg.stop] = _voiced_segment(rng, seg, sample_rate)
        elif seg.kind == "unvoiced":
            x[seg.start:seg.stop] = _unvoiced_segment(rng, seg, sample_rate)
    rms = math.sqrt(float(np.mean(x**2)))
    x *= SPEECH_RMS / rms
    return Waveform(x, sample_rate)


# ---------------------------------------------------------------------------
# noise synthesis


def synth_noise(kind: str, seed: int, duration_s: float,
                sample_rate: int = 16000) -> Waveform:
    """Noise of the requested kind; all kinds except white have unit RMS.

    white
        Unit-variance Gaussian samples.
    pink
        White noise shaped by 1/sqrt(f), i.e. a -3 dB/octave power slope.
    babble_proxy
        Sum of six circularly shifted synthetic speech streams.
    amplitude_modulated
        White noise under a slow (0.4-1.5 Hz) sinusoidal envelope.
    """
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}")
    rng = default_rng(seed)
    n = _n_samples(duration_s, sample_rate)
    if kind == "white":
        return Waveform(rng.standard_normal(n), sample_rate)
    if kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        freq = np.fft.rfftfreq(n, 1.0 / sample_rate)
        shape = np.zeros_like(freq)
        shape[1:] = 1.0 / np.sqrt(freq[1:])
        x = np.fft.irfft(spec * shape, n)
    elif kind == "babble_proxy":
        child_seeds = rng.integers(0, 2**63, size=BABBLE_STREAMS)
        shifts = rng.integers(0, n, size=BABBLE_STREAMS)
        x = np.zeros(n)
        for cs, sh in zip(child_seeds, shifts):
            stream = synth_speech(int(cs), duration_s, sample_rate)
            x += np.roll(stream.samples, int(sh))
    else:
        white = rng.standard_normal(n)
        f_mod = rng.uniform(0.4, 1.5)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        t = np.arange(n) / sample_rate
        x = white * (1.0 + 0.9 * np.sin(2.0 * np.pi * f_mod * t + phi))
    x /= math.sqrt(float(np.mean(x**2)))
    return Waveform(x, sample_rate)


# ---------------------------------------------------------------------------
# mixing


def mix_at_snr(speech: Waveform, noise: Waveform,
               snr_db: float) -> tuple[Waveform, Waveform]:
    """Scale ``noise`` so the mixture hits ``snr_db`` exactly.

    Returns ``(mixture, scaled_noise)`` with
    ``10*log10(||s||^2 / ||n'||^2) == snr_db`` to float precision, SNR being
    defined on full-utterance power including pauses.
    """
    if len(speech) != len(noise):
        raise ValueError("speech and noise lengths differ")
    if speech.sample_rate != noise.sample_rate:
        raise ValueError("sample rates differ")
    if not math.isfinite(snr_db):
        raise ValueError("snr must be finite")
    energy_s = float(np.sum(speech.samples**2))
    energy_n = float(np.sum(noise.samples**2))
    if energy_s == 0.0 or energy_n == 0.0:
        raise ValueError("silent input")
    scale = math.sqrt(energy_s / (energy_n * 10.0 ** (snr_db / 10.0)))
    scaled = noise.samples * scale
    return (Waveform(speech.samples + scaled, speech.sample_rate),
            Waveform(scaled, noise.sample_rate))


# ---------------------------------------------------------------------------
# WAV I/O


def wav_write(path: str | Path, wave: Waveform) -> None:
    """Write 16-bit PCM mono; samples outside [-1, 1] are clipped with a warning."""
    q = np.round(wave.samples * PCM_FULL_SCALE)
    n_clipped = int(np.count_nonzero((q < -32768) | (q > 32767)))
    if n_clipped:
        warnings.warn(f"{n_clipped} samples clipped writing {path}")
    data = np.clip(q, -32768, 32767).astype(np.int16)
    wavfile.write(str(path), wave.sample_rate, data)


def wav_read(path: str | Path) -> Waveform:
    """Read 16-bit PCM mono; round trip with ``wav_write`` is exact to 1 LSB."""
    rate, data = wavfile.read(str(path))
    if data.dtype != np.int16:
        raise ValueError(f"expected 16-bit PCM, got {data.dtype}")
    if data.ndim != 1:
        raise ValueError("expected mono audio")
    return Waveform(data.astype(np.float64) / PCM_FULL_SCALE, int(rate))


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class MixtureSpec:
    """Recipe for one clean/noise/mixture triple."""

    speech_seed: int
    noise_seed: int
    noise_kind: str
    snr_db: float
    duration_s: float

    def __post_init__(self):
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")
        if not self.duration_s > 0:
            raise ValueError("duration must be positive")
        if not math.isfinite(self.snr_db):
            raise ValueError("snr must be finite")


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    split: str
    spec: MixtureSpec

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class CorpusManifest:
    """Complete, reproducible description of a corpus.

    Seeds are unique across the whole manifest, so no generator stream is
    shared between any two files or splits.
    """

    seed: int
    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        ids = [e.utt_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate utterance ids")
        seeds = [s for e in self.entries
                 for s in (e.spec.speech_seed, e.spec.noise_seed)]
        if len(set(seeds)) != len(seeds):
            raise ValueError("generator seeds reused across entries")

    def split_entries(self, split: str) -> tuple[ManifestEntry, ...]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return tuple(e for e in self.entries if e.split == split)


def build_manifest(seed: int = 0, n_train: int = 200, n_val: int = 40,
                   n_test: int = 40, duration_s: float = 3.0) -> CorpusManifest:
    """Plan a corpus: per-utterance seeds, SNRs and noise kinds.

    Train and val SNRs are uniform over [-5, 20] dB; test SNRs cycle the
    fixed grid {-10, -5, 0, 5, 10} dB.  Noise kinds rotate round-robin
    within each split.
    """
    rng = default_rng(seed)
    base = seed * 10**9
    entries: list[ManifestEntry] = []
    global_idx = 0
    for split, count in zip(SPLITS, (n_train, n_val, n_test)):
        for i in range(count):
            if split == "test":
                snr = TEST_SNR_GRID[i % len(TEST_SNR_GRID)]
            else:
                snr = float(rng.uniform(*TRAIN_SNR_RANGE))
            spec = MixtureSpec(speech_seed=base + 2 * global_idx,
                               noise_seed=base + 2 * global_idx + 1,
                               noise_kind=NOISE_KINDS[i % len(NOISE_KINDS)],
                               snr_db=snr, duration_s=duration_s)
            entries.append(ManifestEntry(f"{global_idx:04d}", split, spec))
            global_idx += 1
    return CorpusManifest(seed, tuple(entries))


def save_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    lines = [MANIFEST_HEADER, MANIFEST_FIELDS, f"# seed: {manifest.seed}"]
    for e in manifest.entries:
        s = e.spec
        lines.append(f"{e.utt_id} {e.split} {s.speech_seed} {s.noise_seed} "
                     f"{s.noise_kind} {s.snr_db!r} {s.duration_s!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> CorpusManifest:
    seed = None
    entries = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("# seed:"):
                seed = int(line.split(":", 1)[1])
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"malformed manifest line: {line!r}")
        utt_id, split, s_seed, n_seed, kind, snr, dur = parts
        spec = MixtureSpec(int(s_seed), int(n_seed), kind,
                           float(snr), float(dur))
        entries.append(ManifestEntry(utt_id, split, spec))
    if seed is None:
        raise ValueError("manifest missing seed header")
    return CorpusManifest(seed, tuple(entries))


# ---------------------------------------------------------------------------
# corpus generation and loading


def realize(spec: MixtureSpec,
            sample_rate: int = 16000) -> tuple[Waveform, Waveform, Waveform]:
    """Synthesize ``(clean, scaled_noise, mixture)``, rescaled for headroom.

    If the triple's peak would clip 16-bit PCM all three signals are scaled
    by a common factor, which leaves the SNR untouched.
    """
    clean = synth_speech(spec.speech_seed, spec.duration_s, sample_rate)
    noise = synth_noise(spec.noise_kind, spec.noise_seed, spec.duration_s,
                        sample_rate)
    mix, scaled = mix_at_snr(clean, noise, spec.snr_db)
    peak = max(float(np.max(np.abs(w.samples))) for w in (clean, scaled, mix))
    if peak > PEAK_CEILING:
        c = PEAK_CEILING / peak
        clean = Waveform(clean.samples * c, sample_rate)
        scaled = Waveform(scaled.samples * c, sample_rate)
        mix = Waveform(mix.samples * c, sample_rate)
    return clean, scaled, mix


def generate_corpus(manifest: CorpusManifest, out_dir: str | Path,
                    sample_rate: int = 16000, log=None) -> Path:
    """Write the corpus under ``out_dir/{train,val,test}/`` plus the manifest."""
    out = Path(out_dir)
    for split in SPLITS:
        (out / split).mkdir(parents=True, exist_ok=True)
    for e in manifest.entries:
        clean, scaled, mix = realize(e.spec, sample_rate)
        stem = out / e.split / e.utt_id
        wav_write(f"{stem}_clean.wav", clean)
        wav_write(f"{stem}_noise.wav", scaled)
        wav_write(f"{stem}_mix.wav", mix)
        if log is not None:
            log(f"wrote {e.split}/{e.utt_id} ({e.spec.noise_kind}, "
                f"{e.spec.snr_db:+.1f} dB)")
    manifest_path = out / "manifest.txt"
    save_manifest(manifest, manifest_path)
    return manifest_path


@dataclass(frozen=True)
class CorpusUtterance:
    """Loaded clean/mixture pair; unpacks as ``clean, mix = utt``."""

    utt_id: str
    clean: Waveform
    mix: Waveform
    noise_kind: str
    snr_db: float

    def __iter__(self):
        return iter((self.clean, self.mix))


def load_split(corpus_dir: str | Path, split: str) -> list[CorpusUtterance]:
    corpus = Path(corpus_dir)
    manifest = load_manifest(corpus / "manifest.txt")
    out = []
    for e in manifest.split_entries(split):
        stem = corpus / e.split / e.utt_id
        clean = wav_read(f"{stem}_clean.wav")
        mix = wav_read(f"{stem}_mix.wav")
        out.append(CorpusUtterance(e.utt_id, clean, mix,
                                   e.spec.noise_kind, e.spec.snr_db))
    if not out:
        raise ValueError(f"no utterances for split {split!r} in {corpus}")
    return out
