"""Deterministic signal-processing primitives.

Short-time transforms, spectral features, band splitting and noise
generation used by every other module. All functions here are pure:
identical inputs give identical outputs, no hidden state.

Conventions, fixed once for the whole toolkit:
  * analysis window: periodic Hann, centered frames, reflect padding
  * frame count: T = ceil(len(x) / hop)
  * rFFT layout: K = fft_size // 2 + 1 bins, bin k at k * fs / fft_size Hz
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .audio import AudioBuffer
from .errors import UsageError

__all__ = [
    "Spectrogram",
    "BandSplitSpec",
    "LoudnessTrack",
    "hann_window",
    "frame_count",
    "stft",
    "istft",
    "mel_filterbank",
    "mfcc",
    "a_weighting_power",
    "a_weighted_loudness",
    "cutoff_bin",
    "band_split",
    "lowpass",
    "pink_noise",
    "mix_at_snr",
    "LOUDNESS_FLOOR_DB",
    "LOG_FLOOR",
]

# Magnitude/power log floor shared by spectral losses and features.
LOG_FLOOR = 1e-7
# Loudness is clamped here; digital silence reads exactly this value.
LOUDNESS_FLOOR_DB = -90.0


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT frames, [T x K] with K = fft_size//2 + 1."""

    frames: np.ndarray
    fft_size: int
    hop: int
    window: str
    sample_rate: int

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames)
        if frames.ndim != 2 or frames.shape[1] != self.fft_size // 2 + 1:
            raise UsageError(
                f"Spectrogram frames must be [T x {self.fft_size // 2 + 1}], got {frames.shape}"
            )
        if self.hop > self.fft_size:
            raise UsageError(f"hop {self.hop} exceeds fft_size {self.fft_size}")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.n_bins) * (self.sample_rate / self.fft_size)

    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)

    def with_frames(self, frames: np.ndarray) -> "Spectrogram":
        return Spectrogram(frames, self.fft_size, self.hop, self.window, self.sample_rate)


@dataclass(frozen=True)
class BandSplitSpec:
    """Defines the low band of the extension task.

    bandwidth_factor is the ratio Nyquist/cutoff; for the standard task
    (16 kHz audio, 2 kHz cutoff) it is 4.
    """

    cutoff_hz: float = 2000.0
    sample_rate: int = 16_000

    def __post_init__(self) -> None:
        if not 0 < self.cutoff_hz < self.sample_rate / 2:
            raise UsageError(
                f"cutoff {self.cutoff_hz} Hz outside (0, Nyquist={self.sample_rate / 2})"
            )

    @property
    def bandwidth_factor(self) -> float:
        return (self.sample_rate / 2) / self.cutoff_hz


@dataclass(frozen=True)
class LoudnessTrack:
    """Per-frame loudness in dB, floored at LOUDNESS_FLOOR_DB."""

    values: np.ndarray
    hop: int

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise UsageError("LoudnessTrack values must be 1-D")
        if not np.all(np.isfinite(values)):
            raise UsageError("LoudnessTrack values must be finite")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)


# ---------------------------------------------------------------------------
# Windows and framing
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=32)
def hann_window(size: int) -> np.ndarray:
    """Periodic Hann window (the DFT-even variant used for OLA)."""
    n = np.arange(size)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / size)
    w.flags.writeable = False
    return w


def frame_count(n_samples: int, hop: int) -> int:
    return -(-n_samples // hop)  # ceil division


def _check_cola(window: str, fft_size: int, hop: int) -> None:
    if window != "hann":
        raise UsageError(f"unsupported window {window!r}; only 'hann' satisfies the OLA contract here")
    if fft_size & (fft_size - 1) or fft_size <= 0:
        raise UsageError(f"fft_size must be a power of two, got {fft_size}")
    if hop <= 0 or hop > fft_size // 2:
        raise UsageError(
            f"window 'hann' with hop {hop} and fft {fft_size} breaks overlap-add coverage; "
            f"need 0 < hop <= fft_size/2"
        )


def _reflect_pad(x: np.ndarray, left: int, right: int) -> np.ndarray:
    """Reflect padding that tolerates pad widths beyond len(x) - 1."""
    while left > 0 or right > 0:
        if len(x) == 1:
            return np.pad(x, (left, right), mode="edge")
        l_now = min(left, len(x) - 1)
        r_now = min(right, len(x) - 1)
        x = np.pad(x, (l_now, r_now), mode="reflect")
        left -= l_now
        right -= r_now
    return x


def _frame_signal(x: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    """Centered frames with reflect padding, [T x fft_size]."""
    n = len(x)
    t = frame_count(n, hop)
    half = fft_size // 2
    needed = (t - 1) * hop + fft_size  # padded length the frames cover
    pad_right = max(0, needed - (half + n))
    padded = _reflect_pad(x, half, pad_right)
    starts = np.arange(t) * hop
    idx = starts[:, None] + np.arange(fft_size)[None, :]
    return padded[idx]


# ---------------------------------------------------------------------------
# STFT / ISTFT
# ---------------------------------------------------------------------------


def stft(x: AudioBuffer, fft_size: int = 1024, hop: int = 256, window: str = "hann") -> Spectrogram:
    """Short-time Fourier transform with centered Hann frames.

    T = ceil(len(x)/hop); frame t is centered on sample t*hop. Rejects
    window/hop pairs that cannot be inverted by overlap-add.
    """
    if len(x) == 0:
        raise UsageError("stft of empty signal")
    _check_cola(window, fft_size, hop)
    frames = _frame_signal(x.samples, fft_size, hop)
    spec = sfft.rfft(frames * hann_window(fft_size)[None, :], axis=1)
    return Spectrogram(spec, fft_size, hop, window, x.sample_rate)


def istft(s: Spectrogram, n_samples: int | None = None) -> AudioBuffer:
    """Inverse STFT by windowed overlap-add with coverage normalization.

    Reconstruction divides by the summed squared window, which makes the
    round trip istft(stft(x)) exact to floating-point precision for any
    hop accepted by stft. Output length defaults to n_frames * hop.
    """
    _check_cola(s.window, s.fft_size, s.hop)
    t, fft_size, hop = s.n_frames, s.fft_size, s.hop
    if n_samples is None:
        n_samples = t * hop
    w = hann_window(fft_size)
    frames = sfft.irfft(s.frames, n=fft_size, axis=1) * w[None, :]

    half = fft_size // 2
    total = (t - 1) * hop + fft_size
    acc = np.zeros(total)
    den = np.zeros(total)
    w2 = w * w
    for i in range(t):
        j = i * hop
        acc[j : j + fft_size] += frames[i]
        den[j : j + fft_size] += w2
    # trim the centering pad; guard uncovered edges
    out = acc[half : half + n_samples]
    cov = den[half : half + n_samples]
    if len(out) < n_samples:
        out = np.pad(out, (0, n_samples - len(out)))
        cov = np.pad(cov, (0, n_samples - len(cov)))
    cov = np.where(cov > 1e-12, cov, 1.0)
    return AudioBuffer(out / cov, s.sample_rate)


# ---------------------------------------------------------------------------
# Mel filterbank and MFCC
# ---------------------------------------------------------------------------

# Slaney-style mel scale: linear below 1 kHz, logarithmic above.
_MEL_BREAK_HZ = 1000.0
_MEL_BREAK = 15.0  # 1000 Hz / (200/3)
_MEL_LOG_STEP = np.log(6.4) / 27.0


def _hz_to_mel(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    lin = f / (200.0 / 3.0)
    log = _MEL_BREAK + np.log(np.maximum(f, 1e-12) / _MEL_BREAK_HZ) / _MEL_LOG_STEP
    return np.where(f < _MEL_BREAK_HZ, lin, log)


def _mel_to_hz(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    lin = m * (200.0 / 3.0)
    log = _MEL_BREAK_HZ * np.exp(_MEL_LOG_STEP * (m - _MEL_BREAK))
    return np.where(m < _MEL_BREAK, lin, log)


@functools.lru_cache(maxsize=8)
def mel_filterbank(
    n_mels: int, fft_size: int, sample_rate: int, fmin: float, fmax: float
) -> np.ndarray:
    """Triangular mel filterbank [n_mels x K], area-normalized rows."""
    if fmax > sample_rate / 2:
        raise UsageError(f"fmax {fmax} above Nyquist {sample_rate / 2}")
    n_bins = fft_size // 2 + 1
    bin_hz = np.arange(n_bins) * (sample_rate / fft_size)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, center, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (bin_hz - lo) / max(center - lo, 1e-9)
        down = (hi - bin_hz) / max(hi - center, 1e-9)
        tri = np.maximum(0.0, np.minimum(up, down))
        # area normalization: constant response to white spectra across bands
        fb[i] = tri * (2.0 / max(hi - lo, 1e-9))
    fb.flags.writeable = False
    return fb


@functools.lru_cache(maxsize=8)
def _dct_ii_orthonormal(n_out: int, n_in: int) -> np.ndarray:
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    mat = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in)) * np.sqrt(2.0 / n_in)
    mat[0] /= np.sqrt(2.0)
    mat.flags.writeable = False
    return mat


def mfcc(
    x: AudioBuffer,
    n_coeffs: int = 30,
    n_mels: int = 128,
    fmin: float = 20.0,
    fmax: float = 8000.0,
    fft_size: int = 1024,
    overlap: float = 0.75,
) -> np.ndarray:
    """Mel-frequency cepstral coefficients, [T x n_coeffs].

    Log power mel spectrogram followed by an orthonormal DCT-II, keeping
    coefficients 0..n_coeffs-1. Frame layout matches stft() with
    hop = fft_size * (1 - overlap).
    """
    hop = int(round(fft_size * (1.0 - overlap)))
    s = stft(x, fft_size=fft_size, hop=hop)
    power = np.abs(s.frames) ** 2
    fb = mel_filterbank(n_mels, fft_size, x.sample_rate, fmin, fmax)
    mel_power = power @ fb.T
    log_mel = np.log(np.maximum(mel_power, LOG_FLOOR))
    return log_mel @ _dct_ii_orthonormal(n_coeffs, n_mels).T


# ---------------------------------------------------------------------------
# A-weighted loudness
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=8)
def a_weighting_power(fft_size: int, sample_rate: int) -> np.ndarray:
    """Squared-magnitude A-weighting per rFFT bin, unity gain at 1 kHz.

    Analytic IEC 61672 pole formula:
      R_A(f) = 12194^2 f^4 / ((f^2+20.6^2) sqrt((f^2+107.7^2)(f^2+737.9^2)) (f^2+12194^2))
    normalized by R_A(1000) so the curve is exactly 0 dB at 1 kHz.
    """

    def r_a(f: np.ndarray) -> np.ndarray:
        f2 = f * f
        num = (12194.0**2) * f2 * f2
        den = (
            (f2 + 20.6**2)
            * np.sqrt((f2 + 107.7**2) * (f2 + 737.9**2))
            * (f2 + 12194.0**2)
        )
        return num / den

    freqs = np.arange(fft_size // 2 + 1) * (sample_rate / fft_size)
    w = (r_a(np.maximum(freqs, 1e-9)) / r_a(np.array(1000.0))) ** 2
    w[freqs <= 0] = 0.0
    w.flags.writeable = False
    return w


def a_weighted_loudness(x: AudioBuffer, fft_size: int = 1024, hop: int = 256) -> LoudnessTrack:
    """Per-frame A-weighted loudness in dB.

    The frame power estimate is calibrated via Parseval so that values are
    comparable across fft sizes: a full-scale 1 kHz sine reads about -3 dB
    (its mean-square power), digital silence exactly -90 dB.
    """
    s = stft(x, fft_size=fft_size, hop=hop)
    w = a_weighting_power(fft_size, x.sample_rate)
    power = np.abs(s.frames) ** 2
    # rFFT halves the spectrum; double interior bins to count both sides
    scale = np.full(s.n_bins, 2.0)
    scale[0] = 1.0
    if fft_size % 2 == 0:
        scale[-1] = 1.0
    win = hann_window(fft_size)
    norm = fft_size * float(np.sum(win * win))
    p = (power * (w * scale)[None, :]).sum(axis=1) / norm
    db = 10.0 * np.log10(p + 1e-9)
    return LoudnessTrack(np.maximum(db, LOUDNESS_FLOOR_DB), hop)


# ---------------------------------------------------------------------------
# Band splitting
# ---------------------------------------------------------------------------


def cutoff_bin(cutoff_hz: float, fft_size: int, sample_rate: int) -> int:
    """First rFFT bin index at or above cutoff_hz: ceil(cutoff * N / fs)."""
    return int(np.ceil(cutoff_hz * fft_size / sample_rate))


def band_split(x: AudioBuffer, spec: BandSplitSpec) -> tuple[AudioBuffer, AudioBuffer]:
    """Split x into complementary low/high bands at spec.cutoff_hz.

    Masks complementary rFFT bins over the whole signal (a single-frame
    transform), so lb + hb == x to machine precision and the low band has
    no energy above the cutoff at all.
    """
    if x.sample_rate != spec.sample_rate:
        raise UsageError(
            f"buffer rate {x.sample_rate} != band spec rate {spec.sample_rate}"
        )
    n = len(x)
    spectrum = sfft.rfft(x.samples)
    kc = cutoff_bin(spec.cutoff_hz, n, x.sample_rate)
    low = spectrum.copy()
    low[kc:] = 0.0
    high = spectrum - low
    x_lb = AudioBuffer(sfft.irfft(low, n=n), x.sample_rate)
    x_hb = AudioBuffer(sfft.irfft(high, n=n), x.sample_rate)
    return x_lb, x_hb


def lowpass(x: AudioBuffer, cutoff_hz: float) -> AudioBuffer:
    """Low band only (see band_split)."""
    lb, _ = band_split(x, BandSplitSpec(cutoff_hz, x.sample_rate))
    return lb


# ---------------------------------------------------------------------------
# Noise generation and mixing
# ---------------------------------------------------------------------------


def pink_noise(n_samples: int, seed: int | np.random.Generator) -> AudioBuffer:
    """1/f noise, RMS-normalized to 1.0; deterministic given seed.

    White Gaussian noise shaped in the frequency domain by 1/sqrt(f)
    (power spectral density slope -10 dB/decade), DC removed.
    """
    if n_samples <= 0:
        raise UsageError(f"n_samples must be positive, got {n_samples}")
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(n_samples)
    spectrum = sfft.rfft(white)
    f = np.arange(len(spectrum), dtype=np.float64)
    shape = np.zeros_like(f)
    shape[1:] = 1.0 / np.sqrt(f[1:])
    pink = sfft.irfft(spectrum * shape, n=n_samples)
    rms = np.sqrt(np.mean(pink**2))
    return AudioBuffer(pink / rms)


def mix_at_snr(signal: AudioBuffer, noise: AudioBuffer, snr_db: float) -> AudioBuffer:
    """signal + noise with the noise rescaled to the requested SNR.

    snr_db = +inf is the no-noise convention and returns the signal.
    """
    if len(signal) != len(noise):
        raise UsageError(f"length mismatch: signal {len(signal)} vs noise {len(noise)}")
    if signal.sample_rate != noise.sample_rate:
        raise UsageError("sample-rate mismatch between signal and noise")
    if np.isinf(snr_db) and snr_db > 0:
        return signal
    p_sig = np.mean(signal.samples**2)
    p_noise = np.mean(noise.samples**2)
    if p_sig <= 0:
        raise UsageError("mix_at_snr: zero-power signal")
    if p_noise <= 0:
        return signal
    gain = np.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    return signal.with_samples(signal.samples + gain * noise.samples)
