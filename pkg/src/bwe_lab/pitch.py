"""Fundamental-frequency tracks and pluggable pitch providers.

Three sources produce the same track types: an oracle fed by generator
metadata, a CSV file reader for externally computed tracks, and built-in
DSP estimators (YIN-style monophonic, greedy comb-salience multi-pitch).
The built-in estimators are serviceable stand-ins for the large neural
estimators used in the literature, not replacements; the file provider
exists precisely so better trackers can be plugged in.

All providers emit one frame per hop (default 256 samples), frame count
ceil(len(x)/hop), matching the STFT framing used everywhere else.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .audio import AudioBuffer
from .dsp import _frame_signal, frame_count, stft
from .errors import DataError, UsageError

__all__ = [
    "PitchTrack",
    "MultiPitchTrack",
    "midi_to_hz",
    "hz_to_midi",
    "estimate_f0_mono",
    "estimate_multi_f0",
    "oracle_pitch",
    "load_pitch_file",
    "save_pitch_file",
    "YIN_APERIODICITY_THRESHOLD",
]

YIN_APERIODICITY_THRESHOLD = 0.15
DEFAULT_HOP = 256


def midi_to_hz(m) -> np.ndarray | float:
    return 440.0 * 2.0 ** ((np.asarray(m, dtype=np.float64) - 69.0) / 12.0)


def hz_to_midi(f) -> np.ndarray | float:
    return 69.0 + 12.0 * np.log2(np.asarray(f, dtype=np.float64) / 440.0)


@dataclass(frozen=True)
class PitchTrack:
    """Per-frame f0 in Hz (0 = unvoiced) with confidence in [0, 1]."""

    f0: np.ndarray
    hop: int = DEFAULT_HOP
    confidence: np.ndarray | None = None

    def __post_init__(self) -> None:
        f0 = np.asarray(self.f0, dtype=np.float64)
        if f0.ndim != 1:
            raise UsageError("PitchTrack f0 must be 1-D")
        if not np.all(np.isfinite(f0)) or np.any(f0 < 0):
            raise UsageError("PitchTrack f0 must be finite and non-negative")
        conf = self.confidence
        if conf is None:
            conf = np.where(f0 > 0, 1.0, 0.0)
        else:
            conf = np.clip(np.asarray(conf, dtype=np.float64), 0.0, 1.0)
            if conf.shape != f0.shape:
                raise UsageError("confidence shape must match f0")
        object.__setattr__(self, "f0", f0)
        object.__setattr__(self, "confidence", conf)

    @property
    def n_frames(self) -> int:
        return len(self.f0)

    def voiced_mask(self) -> np.ndarray:
        return self.f0 > 0

    def held(self) -> np.ndarray:
        """f0 with unvoiced gaps holding the last voiced value.

        Frames before the first voiced frame stay 0. This is what the
        decoder consumes; the raw track keeps literal zeros.
        """
        out = self.f0.copy()
        last = 0.0
        for i in range(len(out)):
            if out[i] > 0:
                last = out[i]
            else:
                out[i] = last
        return out


@dataclass(frozen=True)
class MultiPitchTrack:
    """Up to I simultaneous tracks, ordered by salience (strongest first)."""

    tracks: tuple[PitchTrack, ...] = field(default_factory=tuple)
    max_voices: int = 5

    def __post_init__(self) -> None:
        tracks = tuple(self.tracks)
        if len(tracks) > self.max_voices:
            raise UsageError(f"{len(tracks)} tracks exceed max_voices={self.max_voices}")
        if tracks:
            hop, n = tracks[0].hop, tracks[0].n_frames
            for t in tracks[1:]:
                if t.hop != hop or t.n_frames != n:
                    raise UsageError("all tracks in a MultiPitchTrack must share framing")
        object.__setattr__(self, "tracks", tracks)

    @property
    def n_voices(self) -> int:
        return len(self.tracks)

    def __iter__(self):
        return iter(self.tracks)


# ---------------------------------------------------------------------------
# Monophonic estimator (YIN-style)
# ---------------------------------------------------------------------------


def estimate_f0_mono(
    x: AudioBuffer,
    fmin: float = 65.0,
    fmax: float = 1800.0,
    hop: int = DEFAULT_HOP,
    frame_size: int = 2048,
    threshold: float = YIN_APERIODICITY_THRESHOLD,
) -> PitchTrack:
    """Autocorrelation-difference pitch tracking with parabolic refinement.

    Per frame: cumulative-mean-normalized difference function over lags
    covering [fmin, fmax]; the first dip below the aperiodicity threshold
    (or the global minimum if none) picks the period. Frames whose
    normalized difference never drops below the threshold, and near-silent
    frames, are unvoiced (f0 = 0).
    """
    fs = x.sample_rate
    if len(x) < 4 * hop:
        raise UsageError("input too short for pitch analysis (need >= 4 frames)")
    w = frame_size // 2
    frames = _frame_signal(x.samples, frame_size, hop)
    t_frames = frames.shape[0]

    tau_min = max(2, int(fs / fmax))
    tau_max = min(w - 1, int(np.ceil(fs / fmin)))
    if tau_min >= tau_max:
        raise UsageError(f"empty lag range for fmin={fmin}, fmax={fmax}")

    # difference function d(tau) = sum_{j<w} (x_j - x_{j+tau})^2, via FFT
    n_fft = 1 << int(np.ceil(np.log2(frame_size + w)))
    head = frames[:, :w]
    spec_head = sfft.rfft(head, n=n_fft, axis=1)
    spec_full = sfft.rfft(frames, n=n_fft, axis=1)
    cross = sfft.irfft(np.conj(spec_head) * spec_full, axis=1)[:, : w + 1]
    sq = frames**2
    csum = np.concatenate([np.zeros((t_frames, 1)), np.cumsum(sq, axis=1)], axis=1)
    e_head = csum[:, w] - csum[:, 0]
    taus = np.arange(w + 1)
    e_shift = csum[:, taus + w] - csum[:, taus]
    d = e_head[:, None] + e_shift - 2.0 * cross
    d = np.maximum(d, 0.0)

    # cumulative mean normalization; d'(0) = 1
    cum = np.cumsum(d[:, 1:], axis=1)
    cmndf = np.ones_like(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmndf[:, 1:] = d[:, 1:] * taus[1:][None, :] / np.where(cum > 0, cum, 1.0)

    band = cmndf[:, tau_min : tau_max + 1]
    below = band < threshold
    first_dip = np.where(below.any(axis=1), below.argmax(axis=1), band.argmin(axis=1))
    # walk each dip down to its local minimum
    best = first_dip.copy()
    for i in range(t_frames):
        j = best[i]
        while j + 1 < band.shape[1] and band[i, j + 1] < band[i, j]:
            j += 1
        best[i] = j
    tau_star = best + tau_min
    d_min = cmndf[np.arange(t_frames), tau_star]

    # parabolic refinement around the integer lag
    tau_ref = tau_star.astype(np.float64)
    can_refine = (tau_star > tau_min) & (tau_star < tau_max)
    idx = np.where(can_refine)[0]
    if idx.size:
        y0 = cmndf[idx, tau_star[idx] - 1]
        y1 = cmndf[idx, tau_star[idx]]
        y2 = cmndf[idx, tau_star[idx] + 1]
        denom = y0 - 2 * y1 + y2
        offset = np.where(np.abs(denom) > 1e-12, 0.5 * (y0 - y2) / np.where(denom == 0, 1, denom), 0.0)
        tau_ref[idx] = tau_star[idx] + np.clip(offset, -1.0, 1.0)

    f0 = fs / tau_ref
    rms = np.sqrt(np.mean(frames**2, axis=1))
    voiced = (d_min < threshold) & (rms > 1e-5)
    f0 = np.where(voiced, f0, 0.0)
    confidence = np.clip(1.0 - d_min, 0.0, 1.0) * voiced
    return PitchTrack(f0, hop, confidence)


# ---------------------------------------------------------------------------
# Multi-pitch estimator (greedy comb salience)
# ---------------------------------------------------------------------------


def estimate_multi_f0(
    x: AudioBuffer,
    max_voices: int = 5,
    fmin: float = 65.0,
    fmax: float = 1800.0,
    hop: int = DEFAULT_HOP,
    salience_floor: float = 0.15,
) -> MultiPitchTrack:
    """Greedy iterative multi-pitch estimation on the average spectrum.

    Repeats up to max_voices times: score every candidate f0 by its
    1/h-weighted harmonic comb over the residual magnitude spectrum, take
    the best, subtract its comb. Stops when the best salience falls below
    salience_floor relative to the first voice. Tracks are constant per
    clip (the estimator targets sustained material) and ordered by
    salience.
    """
    fs = x.sample_rate
    n_frames = frame_count(len(x), hop)
    if x.rms() < 1e-6:
        return MultiPitchTrack((), max_voices)

    fft_size = 4096
    spec = stft(x, fft_size=fft_size, hop=fft_size // 4)
    mag = np.abs(spec.frames).mean(axis=0)
    freqs = np.arange(len(mag)) * fs / fft_size

    midi_grid = np.arange(hz_to_midi(fmin), hz_to_midi(fmax), 0.1)
    cand = midi_to_hz(midi_grid)
    n_harm = 12
    weights = 1.0 / np.arange(1, n_harm + 1)

    residual = mag.copy()
    found: list[tuple[float, float]] = []  # (f0, salience)
    for _ in range(max_voices):
        sal = np.zeros(len(cand))
        for h in range(1, n_harm + 1):
            fh = cand * h
            ok = fh < fs / 2
            sal[ok] += weights[h - 1] * np.interp(fh[ok], freqs, residual)
        best = int(np.argmax(sal))
        best_sal = float(sal[best])
        if found and best_sal < salience_floor * found[0][1]:
            break
        if not found and best_sal <= 0:
            break
        f0_star = float(cand[best])
        found.append((f0_star, best_sal))
        # remove this voice's comb: half a semitone around every harmonic
        for h in range(1, int(fs / 2 / f0_star) + 1):
            fh = f0_star * h
            lo, hi = fh * 2 ** (-0.5 / 12), fh * 2 ** (0.5 / 12)
            residual[(freqs >= lo) & (freqs <= hi)] = 0.0

    if not found:
        return MultiPitchTrack((), max_voices)
    top = found[0][1]
    tracks = tuple(
        PitchTrack(np.full(n_frames, f0), hop, np.full(n_frames, min(1.0, s / top)))
        for f0, s in found
    )
    return MultiPitchTrack(tracks, max_voices)


# ---------------------------------------------------------------------------
# Oracle and file providers
# ---------------------------------------------------------------------------


def oracle_pitch(meta, n_frames: int, hop: int = DEFAULT_HOP) -> PitchTrack | MultiPitchTrack:
    """Exact generator frequencies as constant tracks.

    meta may be a number (one voice), a sequence of numbers, or any object
    with an f0_hz_list attribute (dataset clip metadata).
    """
    if meta is None:
        raise DataError("oracle_pitch: missing metadata")
    if hasattr(meta, "f0_hz_list"):
        values = list(meta.f0_hz_list)
    elif isinstance(meta, (int, float, np.floating)):
        values = [float(meta)]
    else:
        try:
            values = [float(v) for v in meta]
        except TypeError:
            raise DataError(f"oracle_pitch: cannot extract f0 values from {type(meta).__name__}")
    if not values:
        raise DataError("oracle_pitch: metadata carries no f0 values")
    tracks = [PitchTrack(np.full(n_frames, v), hop) for v in values]
    if len(tracks) == 1:
        return tracks[0]
    return MultiPitchTrack(tuple(tracks), max_voices=max(5, len(tracks)))


def save_pitch_file(path, track: PitchTrack | MultiPitchTrack, sample_rate: int = 16_000) -> None:
    """Write a track as CSV: time_s,f0_hz,voice_index,confidence (UTF-8)."""
    tracks = track.tracks if isinstance(track, MultiPitchTrack) else (track,)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "f0_hz", "voice_index", "confidence"])
        for voice, t in enumerate(tracks):
            times = np.arange(t.n_frames) * t.hop / sample_rate
            for ts, f0, conf in zip(times, t.f0, t.confidence):
                writer.writerow([repr(float(ts)), repr(float(f0)), voice, repr(float(conf))])


def load_pitch_file(
    path,
    n_frames: int,
    hop: int = DEFAULT_HOP,
    sample_rate: int = 16_000,
) -> PitchTrack | MultiPitchTrack:
    """Read a pitch CSV and snap it onto the analysis frame grid.

    Format: header then rows time_s,f0_hz[,voice_index[,confidence]];
    decimal point, UTF-8. Each frame takes the value of the nearest row
    in time (per voice). Rows must be time-sorted within each voice.
    """
    voices: dict[int, list[tuple[float, float, float]]] = {}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is not None and header and header[0].strip().lower() != "time_s":
                # no header: treat the first line as data
                fh.seek(0)
                reader = csv.reader(fh)
            for ln, row in enumerate(reader, start=2):
                if not row or not "".join(row).strip():
                    continue
                try:
                    ts = float(row[0])
                    f0 = float(row[1])
                    voice = int(row[2]) if len(row) > 2 and row[2].strip() else 0
                    conf = float(row[3]) if len(row) > 3 and row[3].strip() else 1.0
                except (ValueError, IndexError):
                    raise DataError(f"{path}: malformed pitch row {ln}: {row!r}") from None
                if not np.isfinite(f0) or f0 < 0:
                    raise DataError(f"{path}: invalid f0 {f0} at row {ln}")
                voices.setdefault(voice, []).append((ts, f0, conf))
    except FileNotFoundError:
        raise DataError(f"no such pitch file: {path}") from None

    if not voices:
        warnings.warn(f"pitch file {path} is empty; emitting an unvoiced track")
        return PitchTrack(np.zeros(n_frames), hop)

    frame_times = np.arange(n_frames) * hop / sample_rate
    tracks = []
    for voice in sorted(voices):
        rows = voices[voice]
        times = np.array([r[0] for r in rows])
        if np.any(np.diff(times) < 0):
            raise DataError(f"{path}: non-monotone time values for voice {voice}")
        f0s = np.array([r[1] for r in rows])
        confs = np.array([r[2] for r in rows])
        idx = np.searchsorted(times, frame_times)
        idx = np.clip(idx, 0, len(times) - 1)
        left = np.clip(idx - 1, 0, len(times) - 1)
        use_left = np.abs(frame_times - times[left]) <= np.abs(times[idx] - frame_times)
        nearest = np.where(use_left, left, idx)
        tracks.append(PitchTrack(f0s[nearest], hop, confs[nearest]))
    if len(tracks) == 1:
        return tracks[0]
    return MultiPitchTrack(tuple(tracks), max_voices=max(5, len(tracks)))
