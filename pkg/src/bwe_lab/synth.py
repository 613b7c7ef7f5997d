"""Harmonic additive and filtered-noise synthesizers with gradients.

Both renderers accept their control matrices either as plain numpy arrays
(returning AudioBuffer) or as autodiff Tensors (returning a graph-connected
Tensor), through identical numeric kernels, so training and inference see
bit-identical synthesis.

Control signals live at frame rate (one row per hop). Amplitudes are
upsampled with 50%-overlapping Hann windows, a crossfade that hits each
frame value exactly at its frame center and sums to one in between;
fundamental frequency is linearly interpolated per sample.

Gradients flow to the harmonic amplitudes and the noise magnitude
coefficients. f0 enters as a constant control: it comes from a separate
pitch estimator, and no gradient path through the phase integral is
provided.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .audio import AudioBuffer
from .autodiff import Tensor, custom
from .dsp import hann_window
from .errors import UsageError
from .pitch import PitchTrack

__all__ = [
    "ControlFrames",
    "PhaseState",
    "upsample_controls",
    "upsample_f0",
    "harmonic_synth",
    "noise_synth",
    "asd_envelope",
    "hpn_synth",
]


@dataclass(frozen=True)
class ControlFrames:
    """Frame-rate synthesizer controls: A_h(n) [T x H] and N(k) [T x K_n].

    Values must be non-negative (the decoder heads guarantee this by
    construction; plain arrays are checked). Either field may be a Tensor.
    """

    harmonic_amps: np.ndarray | Tensor
    noise_coeffs: np.ndarray | Tensor
    hop: int = 256

    def __post_init__(self) -> None:
        for name in ("harmonic_amps", "noise_coeffs"):
            raw = getattr(self, name)
            data = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
            if data.ndim != 2:
                raise UsageError(f"{name} must be 2-D [frames x bands], got {data.shape}")
            if np.any(data < 0) or not np.all(np.isfinite(data)):
                raise UsageError(f"{name} must be finite and non-negative")
            if not isinstance(raw, Tensor):
                object.__setattr__(self, name, np.asarray(raw, dtype=np.float64))
        ta = self._data("harmonic_amps").shape[0]
        tn = self._data("noise_coeffs").shape[0]
        if ta != tn:
            raise UsageError(f"frame counts differ: {ta} harmonic vs {tn} noise")
        if self.hop <= 0:
            raise UsageError("hop must be positive")

    def _data(self, name: str) -> np.ndarray:
        raw = getattr(self, name)
        return raw.data if isinstance(raw, Tensor) else raw

    @property
    def n_frames(self) -> int:
        return self._data("harmonic_amps").shape[0]

    @property
    def n_harmonics(self) -> int:
        return self._data("harmonic_amps").shape[1]

    @property
    def n_noise_bands(self) -> int:
        return self._data("noise_coeffs").shape[1]

    def dump_csv(self, path) -> None:
        """Debug dump, one row per frame: amps then noise coefficients."""
        amps = self._data("harmonic_amps")
        noise = self._data("noise_coeffs")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            header = ["frame"]
            header += [f"amp_{h}" for h in range(amps.shape[1])]
            header += [f"noise_{k}" for k in range(noise.shape[1])]
            writer.writerow(header)
            for t in range(amps.shape[0]):
                row = [t] + [repr(float(v)) for v in amps[t]] + [repr(float(v)) for v in noise[t]]
                writer.writerow(row)


@dataclass(frozen=True)
class PhaseState:
    """Per-harmonic oscillator phases, confined to one synthesis call."""

    initial: np.ndarray  # phi_0,h in [0, 2pi)
    final: np.ndarray  # running phase after the last sample, wrapped

    @classmethod
    def draw(cls, n_harmonics: int, seed) -> "PhaseState":
        """Initial phases, uniform [0, 2pi); seed=None means all zero."""
        if seed is None:
            phi0 = np.zeros(n_harmonics)
        else:
            rng = np.random.default_rng(seed)
            phi0 = rng.uniform(0.0, 2.0 * np.pi, n_harmonics)
        return cls(initial=phi0, final=phi0.copy())


# ---------------------------------------------------------------------------
# Control upsampling
# ---------------------------------------------------------------------------


def _upsample_window(hop: int) -> tuple[np.ndarray, np.ndarray]:
    # rising Hann half and its exact complement, so wa[r] + wb[r] == 1.0
    wb = hann_window(2 * hop)[:hop]
    return 1.0 - wb, wb


def _upsample_forward(frames: np.ndarray, hop: int, n_samples: int) -> np.ndarray:
    t = frames.shape[0]
    if t * hop < n_samples - hop:
        raise UsageError(
            f"{t} frames at hop {hop} cannot cover {n_samples} samples"
        )
    _, wb = _upsample_window(hop)
    wb = wb.astype(frames.dtype)
    # pad so every sample sees two full window taps; endpoints clamp
    p = np.concatenate([frames[:1], frames, frames[-1:], frames[-1:]], axis=0)
    idx = np.arange(n_samples)
    q, r = idx // hop, idx % hop
    a = p[q + 1]
    # lerp form keeps constant rows bitwise constant
    return a + (p[q + 2] - a) * wb[r][:, None]


def _upsample_adjoint(g: np.ndarray, hop: int, t: int) -> np.ndarray:
    wa, wb = _upsample_window(hop)
    n, c = g.shape
    blocks_n = -(-n // hop)
    padded = np.zeros((blocks_n * hop, c), dtype=g.dtype)
    padded[:n] = g
    blocks = padded.reshape(blocks_n, hop, c)
    to_a = np.einsum("qrc,r->qc", blocks, wa.astype(g.dtype))
    to_b = np.einsum("qrc,r->qc", blocks, wb.astype(g.dtype))
    dp = np.zeros((t + 3, c), dtype=g.dtype)
    dp[1 : blocks_n + 1] += to_a
    dp[2 : blocks_n + 2] += to_b
    df = dp[1 : t + 1].copy()
    df[0] += dp[0]
    df[-1] += dp[t + 1] + dp[t + 2]
    return df


def _upsample_forward_t(frames: np.ndarray, hop: int, n_samples: int) -> np.ndarray:
    """Like _upsample_forward but laid out [C x n_samples].

    Row-major channel layout keeps the big writes contiguous; the
    harmonic renderer lives in this orientation.
    """
    t = frames.shape[0]
    if t * hop < n_samples - hop:
        raise UsageError(f"{t} frames at hop {hop} cannot cover {n_samples} samples")
    _, wb = _upsample_window(hop)
    wb = wb.astype(frames.dtype)
    pt = np.ascontiguousarray(
        np.concatenate([frames[:1], frames, frames[-1:], frames[-1:]], axis=0).T
    )
    c = pt.shape[0]
    blocks_n = -(-n_samples // hop)
    # per block q the left frame is constant; broadcast writes beat fancy
    # indexing on these sizes
    a3 = pt[:, 1 : blocks_n + 1, None]
    d3 = pt[:, 2 : blocks_n + 2, None] - a3
    out = np.empty((c, blocks_n, hop), dtype=frames.dtype)
    np.multiply(d3, wb[None, None, :], out=out)
    out += a3
    return out.reshape(c, blocks_n * hop)[:, :n_samples]


def _upsample_adjoint_t(gt: np.ndarray, hop: int, t: int) -> np.ndarray:
    wa, wb = _upsample_window(hop)
    c, n = gt.shape
    blocks_n = -(-n // hop)
    padded = np.zeros((c, blocks_n * hop), dtype=gt.dtype)
    padded[:, :n] = gt
    blocks = padded.reshape(c, blocks_n, hop)
    to_a = np.einsum("cqr,r->cq", blocks, wa.astype(gt.dtype))
    to_b = np.einsum("cqr,r->cq", blocks, wb.astype(gt.dtype))
    dp = np.zeros((c, t + 3), dtype=gt.dtype)
    dp[:, 1 : blocks_n + 1] += to_a
    dp[:, 2 : blocks_n + 2] += to_b
    df = dp[:, 1 : t + 1].copy()
    df[:, 0] += dp[:, 0]
    df[:, -1] += dp[:, t + 1] + dp[:, t + 2]
    return np.ascontiguousarray(df.T)


def upsample_controls(frames, hop: int, n_samples: int):
    """Frame-rate matrix [T x C] to sample rate [n_samples x C].

    Overlapping Hann crossfade: exact at frame centers (t*hop), convex
    blend of neighboring frames in between, endpoints held. Requires
    T*hop >= n_samples - hop. Accepts 1-D frames (returns 1-D) and
    Tensors (returns a graph-connected Tensor; the op is linear).
    """
    if isinstance(frames, Tensor):
        data = frames.data
        flat = data.ndim == 1
        mat = data[:, None] if flat else data
        value = _upsample_forward(mat, hop, n_samples)
        t = mat.shape[0]

        def vjp(g):
            g2 = g[:, None] if flat else g
            df = _upsample_adjoint(np.ascontiguousarray(g2), hop, t)
            return df[:, 0] if flat else df

        out = custom((frames,), value[:, 0] if flat else value, (vjp,), name="upsample")
        return out
    data = np.asarray(frames, dtype=np.float64)
    flat = data.ndim == 1
    mat = data[:, None] if flat else data
    value = _upsample_forward(mat, hop, n_samples)
    return value[:, 0] if flat else value


def upsample_f0(f0_frames: np.ndarray, hop: int, n_samples: int) -> np.ndarray:
    """Per-sample f0 by linear interpolation between frame centers."""
    t = len(f0_frames)
    if t * hop < n_samples - hop:
        raise UsageError(f"{t} frames at hop {hop} cannot cover {n_samples} samples")
    centers = np.arange(t) * hop
    return np.interp(np.arange(n_samples), centers, np.asarray(f0_frames, dtype=np.float64))


# ---------------------------------------------------------------------------
# Harmonic additive synthesizer
# ---------------------------------------------------------------------------


def _harmonic_tables(
    f0_frames: np.ndarray,
    n_harmonics: int,
    hop: int,
    n_samples: int,
    sample_rate: float,
    phi0: np.ndarray,
    dtype,
) -> np.ndarray:
    """Masked oscillator bank sin(h*phi(n) + phi0_h) as [H_act x n_samples].

    phi(n) integrates f0 exclusively (phi(0) = 0), so a constant f0 at a
    quarter of the sample rate yields 0, 1, 0, -1, ... Harmonics beyond
    Nyquist at a given sample are zeroed there. Rows the mask silences at
    every sample are not built at all, so H_act <= n_harmonics; callers
    must treat missing rows as zero.
    """
    f0_samp = upsample_f0(f0_frames, hop, n_samples)
    phase = np.zeros(n_samples)
    np.cumsum(f0_samp[:-1], out=phase[1:])
    phase *= 2.0 * np.pi / sample_rate
    # wrapping first keeps h*phase small enough for single precision
    phase = np.mod(phase, 2.0 * np.pi).astype(dtype)
    # highest harmonic index still below Nyquist, per sample
    with np.errstate(divide="ignore"):
        h_limit = np.where(f0_samp > 0, (sample_rate / 2.0) / np.maximum(f0_samp, 1e-12), np.inf)
    if np.all(f0_samp > 0):
        h_act = min(n_harmonics, int(np.floor(h_limit.max())))
    else:
        # unvoiced stretches leave every harmonic unmasked there
        h_act = n_harmonics
    if dtype == np.float32:
        # rotation recurrence: ~4x cheaper than H broadcast sin calls,
        # phase drift stays ~H ulps which is far below audio noise floor
        table = np.empty((h_act, n_samples), dtype=dtype)
        s1, c1 = np.sin(phase), np.cos(phase)
        cp, sp = np.cos(phi0).astype(dtype), np.sin(phi0).astype(dtype)
        sh, ch = s1.copy(), c1.copy()
        if h_act > 0:
            table[0] = sh * cp[0] + ch * sp[0]
            table[0] *= 1.0 <= h_limit
        for k in range(1, h_act):
            sh, ch = sh * c1 + ch * s1, ch * c1 - sh * s1
            table[k] = sh * cp[k] + ch * sp[k]
            table[k] *= (k + 1.0) <= h_limit
    else:
        h = np.arange(1, h_act + 1, dtype=dtype)
        table = np.sin(h[:, None] * phase[None, :] + phi0.astype(dtype)[:h_act, None])
        table *= h[:, None] <= h_limit[None, :]
    return table


def harmonic_synth(
    f0: PitchTrack,
    amps,
    sample_rate: int = 16_000,
    seed=None,
    n_samples: int | None = None,
):
    """Additive bank of H sine oscillators tracking integer multiples of f0.

    y(n) = sum_h A_h(n) sin(phi_h(n)), phi_h(n) = 2*pi*sum_{m<n} h*f0(m)/fs
    + phi_0,h. Initial phases are drawn uniform per harmonic from the seed
    (seed=None keeps them at zero). Amplitudes come in at frame rate
    [T x H] and are Hann-upsampled; any harmonic pushed past Nyquist by
    the current f0 is silenced at those samples.

    amps as a Tensor returns a Tensor differentiable w.r.t. amps;
    a plain array returns an AudioBuffer.
    """
    f0_frames = f0.f0
    if np.any(f0_frames > sample_rate / 2):
        raise UsageError("f0 exceeds Nyquist")
    is_tensor = isinstance(amps, Tensor)
    amat = amps.data if is_tensor else np.asarray(amps, dtype=np.float64)
    if amat.ndim != 2 or amat.shape[0] != f0.n_frames:
        raise UsageError(
            f"amps must be [{f0.n_frames} x H], got {amat.shape}"
        )
    if np.any(amat < 0):
        raise UsageError("amps must be non-negative")
    t, n_harm = amat.shape
    hop = f0.hop
    n = t * hop if n_samples is None else int(n_samples)
    state = PhaseState.draw(n_harm, seed)
    table = _harmonic_tables(f0_frames, n_harm, hop, n, sample_rate, state.initial, amat.dtype)
    # harmonics the Nyquist mask silences everywhere have no table row;
    # they contribute exact zeros to the render and to the gradient
    h_act = table.shape[0]

    def render(a: np.ndarray) -> np.ndarray:
        if h_act == 0:
            return np.zeros(n, dtype=a.dtype)
        return np.einsum("hn,hn->n", _upsample_forward_t(a[:, :h_act], hop, n), table)

    if is_tensor:
        def vjp(g):
            if h_act == 0:
                return np.zeros((t, n_harm), dtype=g.dtype)
            ga = _upsample_adjoint_t(g[None, :] * table, hop, t)
            if h_act == n_harm:
                return ga
            full = np.zeros((t, n_harm), dtype=ga.dtype)
            full[:, :h_act] = ga
            return full

        return custom((amps,), render(amat), (vjp,), name="harmonic_synth")
    return AudioBuffer(render(amat), sample_rate)


# ---------------------------------------------------------------------------
# Filtered-noise synthesizer
# ---------------------------------------------------------------------------


def _fir_from_coeffs(coeffs: np.ndarray, taps_n: int, window: np.ndarray) -> np.ndarray:
    """Zero-phase FIR bank from magnitude coefficients, one row per frame."""
    kernel = sfft.irfft(coeffs.astype(np.complex128 if coeffs.dtype == np.float64 else np.complex64), n=taps_n, axis=1)
    kernel = np.roll(kernel, taps_n // 2, axis=1)
    return kernel * window.astype(kernel.dtype)


def noise_synth(
    noise_coeffs,
    hop: int = 256,
    window: str = "hann",
    seed=0,
    sample_rate: int = 16_000,
    n_samples: int | None = None,
):
    """White noise shaped by a per-frame FIR magnitude response N(k).

    Each frame's K coefficients define a zero-phase FIR of 2*(K-1) taps
    (inverse rFFT, centered, Hann-tapered). Disjoint unit-variance noise
    blocks of hop samples are convolved with their frame's filter and
    overlap-added, so the response crossfades at block boundaries.

    Tensor coefficients give a Tensor differentiable w.r.t. N(k); the
    whole render is linear in the coefficients.
    """
    if window != "hann":
        raise UsageError(f"unsupported FIR window: {window!r}")
    is_tensor = isinstance(noise_coeffs, Tensor)
    cmat = noise_coeffs.data if is_tensor else np.asarray(noise_coeffs, dtype=np.float64)
    if cmat.ndim != 2:
        raise UsageError(f"noise_coeffs must be [T x K], got {cmat.shape}")
    if np.any(cmat < 0):
        raise UsageError("noise coefficients must be non-negative")
    t, k = cmat.shape
    if k < 2:
        raise UsageError("need at least 2 noise coefficients")
    n = t * hop if n_samples is None else int(n_samples)
    if n > t * hop:
        raise UsageError(f"{t} frames at hop {hop} cover only {t * hop} samples, {n} requested")
    taps_n = 2 * (k - 1)
    fir_window = np.hanning(taps_n)
    rng = np.random.default_rng(seed)
    blocks = rng.standard_normal((t, hop)).astype(cmat.dtype)

    seg_len = hop + taps_n - 1
    nfft = 1 << int(np.ceil(np.log2(seg_len)))
    blocks_f = sfft.rfft(blocks, n=nfft, axis=1)
    half = taps_n // 2

    def render(c: np.ndarray) -> np.ndarray:
        fir = _fir_from_coeffs(c, taps_n, fir_window)
        segs = sfft.irfft(blocks_f * sfft.rfft(fir, n=nfft, axis=1), axis=1)[:, :seg_len]
        ext = np.zeros(t * hop + taps_n, dtype=c.dtype)
        for i in range(t):
            ext[i * hop : i * hop + seg_len] += segs[i]
        return ext[half : half + n]

    if is_tensor:
        def vjp(g):
            g_ext = np.zeros(t * hop + taps_n, dtype=g.dtype)
            g_ext[half : half + n] = g
            gsegs = np.lib.stride_tricks.sliding_window_view(g_ext, seg_len)[::hop][:t]
            # d/d(taps): correlate each gradient segment with its noise block
            corr = sfft.irfft(np.conj(blocks_f) * sfft.rfft(gsegs, n=nfft, axis=1), axis=1)
            dtaps = corr[:, :taps_n] * fir_window.astype(g.dtype)
            dkernel = np.roll(dtaps, -half, axis=1)
            spec = sfft.rfft(dkernel, axis=1).real
            dc = np.empty((t, k), dtype=g.dtype)
            dc[:, 0] = spec[:, 0] / taps_n
            dc[:, 1:-1] = 2.0 * spec[:, 1:-1] / taps_n
            dc[:, -1] = spec[:, -1] / taps_n
            return dc

        return custom((noise_coeffs,), render(cmat), (vjp,), name="noise_synth")
    return AudioBuffer(render(cmat), sample_rate)


# ---------------------------------------------------------------------------
# Envelope and combined synthesis
# ---------------------------------------------------------------------------


def asd_envelope(
    attack_s: float,
    decay_s: float,
    sustain_level: float,
    sustain_s: float,
    total_s: float,
    sample_rate: int = 16_000,
) -> AudioBuffer:
    """Attack-sustain-decay gain curve, values in [0, 1].

    Linear 0 to 1 over the attack, linear 1 down to sustain_level over the
    sustain span, linear to 0 over the decay, then silence; truncated or
    zero-padded to the total duration. A zero attack skips the unity
    transient entirely and starts at the sustain level.
    """
    for name, v in (("attack_s", attack_s), ("decay_s", decay_s),
                    ("sustain_s", sustain_s), ("total_s", total_s)):
        if v < 0:
            raise UsageError(f"{name} must be >= 0, got {v}")
    if not 0.0 <= sustain_level <= 1.0:
        raise UsageError(f"sustain_level must be in [0, 1], got {sustain_level}")
    n = int(round(total_s * sample_rate))
    tsec = np.arange(n) / sample_rate
    peak = 1.0 if attack_s > 0 else sustain_level
    env = np.zeros(n)
    in_attack = tsec < attack_s
    if attack_s > 0:
        env[in_attack] = tsec[in_attack] / attack_s
    sus_end = attack_s + sustain_s
    in_sustain = (tsec >= attack_s) & (tsec < sus_end)
    if sustain_s > 0:
        frac = (tsec[in_sustain] - attack_s) / sustain_s
        env[in_sustain] = peak + frac * (sustain_level - peak)
    else:
        env[in_sustain] = sustain_level
    dec_end = sus_end + decay_s
    in_decay = (tsec >= sus_end) & (tsec < dec_end)
    if decay_s > 0:
        env[in_decay] = sustain_level * (1.0 - (tsec[in_decay] - sus_end) / decay_s)
    return AudioBuffer(np.clip(env, 0.0, 1.0), sample_rate)


def hpn_synth(
    f0: PitchTrack,
    controls: ControlFrames,
    seed=0,
    sample_rate: int = 16_000,
    n_samples: int | None = None,
):
    """Harmonic plus filtered-noise synthesis, summed.

    The seed is split once: child 0 drives the harmonic initial phases,
    child 1 the noise draw, so the two parts stay uncorrelated and each
    is reproducible on its own.
    """
    if controls.hop != f0.hop:
        raise UsageError(f"control hop {controls.hop} != pitch hop {f0.hop}")
    if controls.n_frames != f0.n_frames:
        raise UsageError(f"{controls.n_frames} control frames vs {f0.n_frames} pitch frames")
    harm_seed, noise_seed = np.random.SeedSequence(seed).spawn(2)
    y_h = harmonic_synth(f0, controls.harmonic_amps, sample_rate, seed=harm_seed, n_samples=n_samples)
    y_n = noise_synth(
        controls.noise_coeffs, controls.hop, seed=noise_seed,
        sample_rate=sample_rate, n_samples=n_samples,
    )
    if isinstance(y_h, Tensor) or isinstance(y_n, Tensor):
        a = y_h if isinstance(y_h, Tensor) else Tensor(y_h.samples)
        b = y_n if isinstance(y_n, Tensor) else Tensor(y_n.samples)
        return a + b
    return AudioBuffer(y_h.samples + y_n.samples, sample_rate)
