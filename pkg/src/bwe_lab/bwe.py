"""Bandwidth-extension pipelines.

Every pipeline maps a low-band AudioBuffer to a full-band AudioBuffer of
the same length and keeps the input's low band untouched: generated
content is merged in the STFT domain above the cutoff only. Available
pipelines: identity (null), spectral band replication, and the learned
harmonic-plus-noise models in mono, cyclic, and polyphonic form.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .audio import AudioBuffer
from .autodiff import Tensor, no_grad
from .controller import (
    ModelParams,
    canonical_voice_order,
    decode_mono,
    decode_noise,
    decode_poly,
    encode,
    load_checkpoint,
)
from .dsp import (
    Spectrogram,
    a_weighted_loudness,
    cutoff_bin,
    frame_count,
    istft,
    lowpass,
    stft,
)
from .errors import DataError, UsageError
from .pitch import MultiPitchTrack, PitchTrack, estimate_f0_mono, estimate_multi_f0
from .synth import ControlFrames, harmonic_synth, noise_synth

__all__ = [
    "SbrConfig",
    "bwe_null",
    "bwe_sbr",
    "bwe_ddsp_mono",
    "bwe_ddsp_cyclic",
    "bwe_ddsp_poly",
    "combine_bands",
]

# analysis parameters shared by band recombination, SBR, and evaluation
FFT_SIZE = 1024
HOP = 256


# ---------------------------------------------------------------------------
# Band recombination
# ---------------------------------------------------------------------------


def combine_bands(x_lb: AudioBuffer, y_full: AudioBuffer, cutoff_hz: float) -> AudioBuffer:
    """Low band from x_lb, high band from y_full, merged in the STFT domain.

    The boundary bin (the first at or above the cutoff) takes half from
    each side; everything below comes from x_lb, everything above from
    y_full. The inverse transform reproduces the kept bands exactly.
    """
    if len(x_lb) != len(y_full):
        raise UsageError(f"length mismatch: {len(x_lb)} vs {len(y_full)}")
    if x_lb.sample_rate != y_full.sample_rate:
        raise UsageError("sample rates differ")
    s_lb = stft(x_lb, FFT_SIZE, HOP)
    s_hb = stft(y_full, FFT_SIZE, HOP)
    kc = cutoff_bin(cutoff_hz, FFT_SIZE, x_lb.sample_rate)
    w = np.zeros(s_lb.n_bins)
    if kc < len(w):
        w[kc] = 0.5
        w[kc + 1 :] = 1.0
    mixed = s_lb.frames * (1.0 - w) + s_hb.frames * w
    out = istft(s_lb.with_frames(mixed), n_samples=len(x_lb))
    # resynthesis of the masked high band leaks ~-50 dB of its energy below
    # the cutoff; pin the global spectrum under the crossfade bin to the
    # input's so the low band comes back exactly
    spec = np.fft.rfft(out.samples)
    ref = np.fft.rfft(x_lb.samples)
    freqs = np.fft.rfftfreq(len(x_lb), 1.0 / x_lb.sample_rate)
    keep = freqs < (kc - 0.5) * x_lb.sample_rate / FFT_SIZE
    spec[keep] = ref[keep]
    return out.with_samples(np.fft.irfft(spec, len(x_lb)))


# ---------------------------------------------------------------------------
# Null and SBR baselines
# ---------------------------------------------------------------------------


def bwe_null(x_lb: AudioBuffer) -> AudioBuffer:
    """Identity baseline: adds nothing above the cutoff."""
    return AudioBuffer(x_lb.samples.copy(), x_lb.sample_rate)


@dataclass(frozen=True)
class SbrConfig:
    """Spectral band replication settings.

    match_fraction is the fraction of the replication band width used to
    equate energies on both sides of each replication frontier.
    phase_mode 'replicated' copies the low-band phase (blind operation);
    'oracle' takes phases from a reference spectrogram.
    """

    n_replications: int = 3
    match_fraction: float = 0.5
    phase_mode: str = "replicated"

    def __post_init__(self) -> None:
        if self.n_replications < 1:
            raise UsageError("n_replications must be >= 1")
        if not 0.0 < self.match_fraction <= 1.0:
            raise UsageError("match_fraction must be in (0, 1]")
        if self.phase_mode not in ("replicated", "oracle"):
            raise UsageError(f"unknown phase_mode {self.phase_mode!r}")


# gain cascades blow up on frames whose matched source region holds junk
# rather than content. Two symptoms, two gates: the region is far below
# the loudest frame's (absolute junk floor), or it is far below the rest
# of the frame's own source block (inverted shape; real content and its
# decay tails keep the upper region within ~20 dB of the matched one,
# resynthesis junk at signal edges shows 30 dB+ inversions).
_SILENT_REL = 1e-12
_SHAPE_MAX = 100.0


def _sbr_extend(s: Spectrogram, cfg: SbrConfig, oracle_phase) -> np.ndarray:
    """Replication in the spectrogram domain; energy continuity holds here
    exactly on non-silent frames (resynthesis smears it slightly, as any
    magnitude edit must). Frames whose matched region is silent, in level
    or relative to the rest of the source block, get zero gain."""
    half = s.fft_size // 2
    if half % (cfg.n_replications + 1):
        raise UsageError(
            f"{cfg.n_replications} replications do not tile {half} bins evenly"
        )
    b = half // (cfg.n_replications + 1)
    m = max(1, round(cfg.match_fraction * b))
    ext = s.frames.copy()
    src = s.frames[:, :b]
    src_mag = np.abs(src)
    e_src = (src_mag[:, :m] ** 2).sum(axis=1)
    e_rest = (src_mag[:, m:] ** 2).sum(axis=1)
    live = (e_src > _SILENT_REL * e_src.max()) & (e_rest <= _SHAPE_MAX * e_src)
    for j in range(1, cfg.n_replications + 1):
        lo = j * b
        e_left = (np.abs(ext[:, lo - m : lo]) ** 2).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            g = np.sqrt(e_left / e_src)
        g = np.where(live, g, 0.0)[:, None]
        if oracle_phase is None:
            ext[:, lo : lo + b] = src * g
        else:
            ext[:, lo : lo + b] = src_mag * g * oracle_phase[:, lo : lo + b]
    return ext


def bwe_sbr(x_lb: AudioBuffer, cfg: SbrConfig | None = None, oracle=None) -> AudioBuffer:
    """Replicate the low band upward with energy-matched gains.

    Frame by frame, the lowest band of the spectrum (1/(n_replications+1)
    of the bins) is copied into each band above it, scaled so that the
    energy in the match_fraction-wide regions on both sides of every
    replication frontier is equal. A silent source band gets gain 0.
    oracle supplies the phase reference (AudioBuffer or Spectrogram) when
    phase_mode is 'oracle'.
    """
    cfg = cfg or SbrConfig()
    s = stft(x_lb, FFT_SIZE, HOP)
    oracle_phase = None
    if cfg.phase_mode == "oracle":
        if oracle is None:
            raise UsageError("phase_mode 'oracle' needs a reference signal or spectrogram")
        ref = oracle if isinstance(oracle, Spectrogram) else stft(oracle, FFT_SIZE, HOP)
        if ref.frames.shape != s.frames.shape:
            raise UsageError(
                f"oracle spectrogram {ref.frames.shape} does not match input {s.frames.shape}"
            )
        oracle_phase = np.exp(1j * np.angle(ref.frames))
    ext = _sbr_extend(s, cfg, oracle_phase)
    y_ext = istft(s.with_frames(ext), n_samples=len(x_lb))
    # re-merging with the input keeps the low band bit-faithful; the
    # replication frontier doubles as the band edge
    edge_hz = (FFT_SIZE // 2) // (cfg.n_replications + 1) * x_lb.sample_rate / FFT_SIZE
    return combine_bands(x_lb, y_ext, edge_hz)


# ---------------------------------------------------------------------------
# Learned pipelines: shared plumbing
# ---------------------------------------------------------------------------


def _load_params(checkpoint, allowed: tuple) -> ModelParams:
    params = checkpoint if isinstance(checkpoint, ModelParams) else load_checkpoint(checkpoint)
    if params.config.variant not in allowed:
        raise UsageError(
            f"pipeline needs a model variant in {allowed}, got {params.config.variant!r}"
        )
    return params


def _detach(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v)


def _silent(track: PitchTrack) -> bool:
    return not np.any(track.f0 > 0)


def _zero_track(t: int, hop: int) -> PitchTrack:
    return PitchTrack(np.zeros(t), hop)


def _resolve_mono_pitch(pitch, x_lb: AudioBuffer, t: int) -> PitchTrack:
    if pitch is None:
        track = estimate_f0_mono(x_lb)
    elif isinstance(pitch, PitchTrack):
        track = pitch
    elif isinstance(pitch, MultiPitchTrack):
        if pitch.n_voices != 1:
            raise UsageError(f"mono pipeline got {pitch.n_voices} pitch tracks")
        track = pitch.tracks[0]
    else:
        track = pitch(x_lb, t)
        if isinstance(track, MultiPitchTrack):
            return _resolve_mono_pitch(track, x_lb, t)
    if track.n_frames != t:
        raise DataError(f"pitch track has {track.n_frames} frames, expected {t}")
    return track


def _resolve_multi_pitch(pitch, x_lb: AudioBuffer, t: int, max_voices: int) -> tuple:
    """Pitch source -> canonically ordered tuple of tracks (may be empty)."""
    if pitch is None:
        multi = estimate_multi_f0(x_lb, max_voices=max_voices)
    elif isinstance(pitch, MultiPitchTrack):
        multi = pitch
    elif isinstance(pitch, PitchTrack):
        multi = MultiPitchTrack((pitch,), max_voices=max(max_voices, 1))
    else:
        multi = pitch(x_lb, t)
        if isinstance(multi, PitchTrack):
            multi = MultiPitchTrack((multi,), max_voices=max(max_voices, 1))
    tracks = tuple(multi)
    if len(tracks) > max_voices:
        raise UsageError(f"{len(tracks)} pitch tracks exceed {max_voices} voices")
    for tr in tracks:
        if tr.n_frames != t:
            raise DataError(f"pitch track has {tr.n_frames} frames, expected {t}")
    return canonical_voice_order(tracks)


def _mono_controls(params: ModelParams, x_lb: AudioBuffer, track: PitchTrack) -> ControlFrames:
    """Encoder + decoder pass with the graph disabled, plain-array output."""
    loud = a_weighted_loudness(x_lb, hop=params.config.hop)
    with no_grad():
        z = encode(x_lb, params)
        if params.config.variant == "noise_only":
            c = decode_noise(z, loud, params)
        else:
            c = decode_mono(z, track, loud, params)
    return ControlFrames(_detach(c.harmonic_amps), _detach(c.noise_coeffs), c.hop)


# ---------------------------------------------------------------------------
# Learned pipelines
# ---------------------------------------------------------------------------


def bwe_ddsp_mono(x_lb: AudioBuffer, checkpoint, pitch=None, seed=0) -> AudioBuffer:
    """Monophonic learned pipeline (also drives noise-only models).

    pitch may be None (built-in estimator), a PitchTrack, or a callable
    (x_lb, n_frames) -> PitchTrack. The seed is split exactly like the
    harmonic-plus-noise synthesizer: child 0 phases, child 1 noise.
    """
    params = _load_params(checkpoint, ("mono_dec", "noise_only"))
    c = params.config
    if x_lb.sample_rate != c.sample_rate:
        raise UsageError(f"model expects {c.sample_rate} Hz, got {x_lb.sample_rate}")
    t = frame_count(len(x_lb), c.hop)
    if c.variant == "noise_only":
        track = _zero_track(t, c.hop)
    else:
        track = _resolve_mono_pitch(pitch, x_lb, t)
    controls = _mono_controls(params, x_lb, track)
    harm_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
    n = len(x_lb)
    y = noise_synth(controls.noise_coeffs, c.hop, seed=noise_ss,
                    sample_rate=c.sample_rate, n_samples=n).samples
    if c.variant != "noise_only" and not _silent(track):
        y = y + harmonic_synth(track, controls.harmonic_amps, c.sample_rate,
                               seed=harm_ss, n_samples=n).samples
    return combine_bands(x_lb, AudioBuffer(y, c.sample_rate), c.cutoff_hz)


def bwe_ddsp_cyclic(
    x_lb: AudioBuffer,
    checkpoint,
    pitch=None,
    iterations: int = 5,
    seed=0,
    residual_hook=None,
) -> AudioBuffer:
    """Iterated monophonic inference for polyphonic input.

    Pitch tracks are estimated once up front (missing ones count as
    silent). Each iteration runs the mono model on the current residual,
    then subtracts the synthesized low band from the residual magnitude
    spectrogram (clamped at zero, phase kept from the input). Harmonic
    output accumulates across iterations; the noise part is taken from
    the last iteration only. residual_hook(i, magnitude) observes the
    residual after each iteration.

    With one iteration and the same pitch track this reduces exactly to
    bwe_ddsp_mono at the same seed.
    """
    if iterations < 1:
        raise UsageError("iterations must be >= 1")
    params = _load_params(checkpoint, ("mono_dec",))
    c = params.config
    if x_lb.sample_rate != c.sample_rate:
        raise UsageError(f"model expects {c.sample_rate} Hz, got {x_lb.sample_rate}")
    t = frame_count(len(x_lb), c.hop)
    n = len(x_lb)
    tracks = _resolve_multi_pitch(pitch, x_lb, t, iterations)

    if all(_silent(tr) for tr in tracks) or not tracks:
        warnings.warn("no pitched content found; using the noise part only")
        controls = _mono_controls(params, x_lb, _zero_track(t, c.hop))
        _, noise_ss = np.random.SeedSequence(seed).spawn(2)
        y = noise_synth(controls.noise_coeffs, c.hop, seed=noise_ss,
                        sample_rate=c.sample_rate, n_samples=n)
        return combine_bands(x_lb, y, c.cutoff_hz)

    tracks = tracks + tuple(
        _zero_track(t, c.hop) for _ in range(iterations - len(tracks))
    )
    kids = np.random.SeedSequence(seed).spawn(2 * iterations)
    spec0 = stft(x_lb, FFT_SIZE, HOP)
    mag = spec0.magnitude()
    phase = np.exp(1j * np.angle(spec0.frames))
    residual = x_lb
    harm_sum = np.zeros(n)
    noise_last = None
    for i, track in enumerate(tracks):
        controls = _mono_controls(params, residual, track)
        harm_i = np.zeros(n)
        if not _silent(track):
            harm_i = harmonic_synth(track, controls.harmonic_amps, c.sample_rate,
                                    seed=kids[2 * i], n_samples=n).samples
        noise_last = noise_synth(controls.noise_coeffs, c.hop, seed=kids[2 * i + 1],
                                 sample_rate=c.sample_rate, n_samples=n).samples
        harm_sum += harm_i
        if i + 1 < len(tracks) or residual_hook is not None:
            y_lb = lowpass(AudioBuffer(harm_i + noise_last, c.sample_rate), c.cutoff_hz)
            mag = np.maximum(mag - stft(y_lb, FFT_SIZE, HOP).magnitude(), 0.0)
            residual = istft(spec0.with_frames(mag * phase), n_samples=n)
        if residual_hook is not None:
            residual_hook(i + 1, mag.copy())
    y_full = AudioBuffer(harm_sum + noise_last, c.sample_rate)
    return combine_bands(x_lb, y_full, c.cutoff_hz)


def bwe_ddsp_poly(x_lb: AudioBuffer, checkpoint, pitch=None, seed=0) -> AudioBuffer:
    """Polyphonic pipeline: one decoder pass, one synthesizer per voice.

    All voice slots are decoded (missing tracks enter as zero pitch), but
    only slots with a provided track are synthesized. No tracks at all
    leaves the noise synthesizer as the sole source.
    """
    params = _load_params(checkpoint, ("poly_dec",))
    c = params.config
    if x_lb.sample_rate != c.sample_rate:
        raise UsageError(f"model expects {c.sample_rate} Hz, got {x_lb.sample_rate}")
    t = frame_count(len(x_lb), c.hop)
    n = len(x_lb)
    tracks = _resolve_multi_pitch(pitch, x_lb, t, c.max_voices)
    loud = a_weighted_loudness(x_lb, hop=c.hop)
    with no_grad():
        z = encode(x_lb, params)
        poly = decode_poly(z, MultiPitchTrack(tracks, max_voices=c.max_voices), loud, params)
    harm_root, noise_ss = np.random.SeedSequence(seed).spawn(2)
    voice_seeds = harm_root.spawn(c.max_voices)
    y = noise_synth(_detach(poly.noise_coeffs), c.hop, seed=noise_ss,
                    sample_rate=c.sample_rate, n_samples=n).samples
    for i, track in enumerate(tracks):
        if _silent(track):
            continue
        y = y + harmonic_synth(track, _detach(poly.voices[i]), c.sample_rate,
                               seed=voice_seeds[i], n_samples=n).samples
    return combine_bands(x_lb, AudioBuffer(y, c.sample_rate), c.cutoff_hz)
