"""Training: spectral reconstruction loss, LR schedule, and the step loop.

The loss is multi-scale spectral (MSS): at several FFT sizes, L1 distance
between magnitude spectrograms plus L1 between log magnitudes. When
loss_band is set, only bins at or above the model cutoff count, so the
model is scored purely on the band it is asked to reconstruct.

Determinism: every random choice (batch sampling, per-item filter noise)
is drawn from a stream derived from (seed, step, item), never from an
evolving generator, so interrupting and resuming a run reproduces the
uninterrupted run bit for bit.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .audio import AudioBuffer
from .autodiff import Tensor
from .controller import (
    ModelConfig,
    ModelParams,
    canonical_voice_order,
    decode_mono_batch,
    decode_noise_batch,
    decode_poly_batch,
    encode_batch,
    encoder_features,
    f0_feature,
    init_model,
    loudness_feature,
    save_checkpoint,
)
from .dsp import a_weighted_loudness, cutoff_bin, frame_count, lowpass
from .errors import DataError, NumericError, UsageError
from .pitch import MultiPitchTrack, PitchTrack, estimate_f0_mono, estimate_multi_f0, oracle_pitch
from .synth import harmonic_synth, noise_synth

__all__ = [
    "TrainConfig",
    "TrainResult",
    "LrSchedule",
    "stft_mag",
    "mss_loss",
    "train",
    "default_pitch_provider",
    "clip_features",
    "CACHE_ENV_VAR",
]

CACHE_ENV_VAR = "BWE_LAB_CACHE"
LOG_FLOOR = 1e-7
STATE_MAGIC = b"DDSPBWTS"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; architecture lives in ModelConfig."""

    steps: int = 25_000
    batch: int = 32
    lr0: float = 1e-3
    plateau_steps: int = 2500
    max_halvings: int = 4
    mss_fft_sizes: tuple = (2048, 1024, 512, 256, 128, 64)
    loss_band: bool = True
    cutoff_hz: float = 2000.0
    seed: int = 0
    checkpoint_every: int = 2500

    def __post_init__(self):
        object.__setattr__(self, "mss_fft_sizes", tuple(int(s) for s in self.mss_fft_sizes))
        for name in ("steps", "batch", "plateau_steps", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise UsageError(f"{name} must be positive")
        if self.lr0 <= 0 or self.cutoff_hz <= 0:
            raise UsageError("lr0 and cutoff_hz must be positive")
        if self.max_halvings < 0:
            raise UsageError("max_halvings must be >= 0")
        if not self.mss_fft_sizes:
            raise UsageError("mss_fft_sizes is empty")
        for s in self.mss_fft_sizes:
            if s < 8 or s & (s - 1):
                raise UsageError(f"fft size {s} is not a power of two >= 8")


@dataclass
class LrSchedule:
    """Halve on plateau: cut the rate when the best loss has not improved
    for plateau_steps consecutive observations, at most max_halvings times."""

    lr0: float = 1e-3
    plateau_steps: int = 2500
    max_halvings: int = 4
    best: float = field(default=np.inf)
    since_best: int = 0
    halvings: int = 0

    @property
    def lr(self) -> float:
        return self.lr0 * 0.5**self.halvings

    def update(self, loss: float) -> float:
        """Observe one loss value; returns the rate to use for this step."""
        if loss < self.best:
            self.best = loss
            self.since_best = 0
        else:
            self.since_best += 1
            if self.since_best >= self.plateau_steps and self.halvings < self.max_halvings:
                self.halvings += 1
                self.since_best = 0
        return self.lr


# ---------------------------------------------------------------------------
# Differentiable STFT magnitude
# ---------------------------------------------------------------------------


def _loss_window(fft_size: int) -> np.ndarray:
    # periodic Hann, cached by lru in dsp for the analysis path; the loss
    # path needs float64 regardless of signal dtype
    from .dsp import hann_window

    return hann_window(fft_size)


def _frame_starts(n: int, fft_size: int, hop: int) -> int:
    if n < fft_size:
        raise UsageError(f"signal ({n}) shorter than fft size {fft_size}")
    return 1 + (n - fft_size) // hop


def _mag_forward(x: np.ndarray, fft_size: int, hop: int):
    n_frames = _frame_starts(len(x), fft_size, hop)
    view = np.lib.stride_tricks.sliding_window_view(x, fft_size)[:: hop][:n_frames]
    spec = np.fft.rfft(view * _loss_window(fft_size), axis=1)
    mag = np.abs(spec)
    return mag, spec


def _ola_rows(rows: np.ndarray, hop: int, n: int) -> np.ndarray:
    """Overlap-add [F x L] rows at stride hop into a length-n buffer.

    L is a multiple of hop, so frames whose index agrees mod (L/hop)
    occupy disjoint spans and each congruence class adds vectorized.
    """
    f, width = rows.shape
    out = np.zeros(n)
    ratio = width // hop
    for c in range(ratio):
        sel = rows[c::ratio]
        if not len(sel):
            continue
        start = c * hop
        out[start : start + sel.size] += sel.reshape(-1)
    return out


def stft_mag(x, fft_size: int, hop: int):
    """Magnitude spectrogram [frames x bins], differentiable in x.

    Frames start at multiples of hop with no padding (trailing samples
    that do not fill a frame are ignored); Hann analysis window.
    """
    if fft_size % hop:
        raise UsageError("hop must divide fft_size")
    if isinstance(x, Tensor):
        mag, spec = _mag_forward(x.data, fft_size, hop)
        n = len(x.data)
        win = _loss_window(fft_size)

        def vjp(g):
            cot = g * (spec / np.maximum(mag, 1e-300))
            cot[:, 1:-1] *= 0.5  # interior rfft bins count twice in irfft
            frames_g = np.fft.irfft(cot, n=fft_size) * fft_size
            return _ola_rows(frames_g * win, hop, n)

        return ad.custom((x,), mag, (vjp,), name="stft_mag")
    mag, _ = _mag_forward(np.asarray(x, dtype=np.float64), fft_size, hop)
    return mag


def _target_spectra(y: np.ndarray, cfg: TrainConfig, sample_rate: int) -> list:
    """Per-scale (magnitude, log magnitude) of a fixed reference signal.

    Stored float32: references are bounded by the clip peak, so the cast
    costs ~1e-7 relative loss at half the memory, and training only ever
    compares losses computed against the same cached copies.
    """
    out = []
    for s in cfg.mss_fft_sizes:
        kc = cutoff_bin(cfg.cutoff_hz, s, sample_rate) if cfg.loss_band else 0
        ref = stft_mag(y, s, s // 4)[:, kc:]
        out.append((ref.astype(np.float32),
                    np.log(np.maximum(ref, LOG_FLOOR)).astype(np.float32)))
    return out


def _mss_terms(y: np.ndarray, y_hat, cfg: TrainConfig, sample_rate: int, refs=None):
    """(magnitude L1, log-magnitude L1) summed over scales."""
    is_tensor = isinstance(y_hat, Tensor)
    mag_term = 0.0
    log_term = 0.0
    for si, s in enumerate(cfg.mss_fft_sizes):
        kc = cutoff_bin(cfg.cutoff_hz, s, sample_rate) if cfg.loss_band else 0
        if refs is None:
            ref = stft_mag(y, s, s // 4)[:, kc:]
            ref_log = np.log(np.maximum(ref, LOG_FLOOR))
        else:
            ref, ref_log = refs[si]
        est = stft_mag(y_hat, s, s // 4)
        if is_tensor:
            est = ad.getitem(est, (slice(None), slice(kc, None)))
            mag_term = mag_term + ad.sum_(ad.abs_(est - ref))
            est_log = ad.log(ad.maximum(est, LOG_FLOOR))
            log_term = log_term + ad.sum_(ad.abs_(est_log - ref_log))
        else:
            est = est[:, kc:]
            mag_term += float(np.sum(np.abs(est - ref)))
            est_log = np.log(np.maximum(est, LOG_FLOOR))
            log_term += float(np.sum(np.abs(est_log - ref_log)))
    return mag_term, log_term


def mss_loss(y, y_hat, cfg: TrainConfig, sample_rate: int = 16_000, _refs=None):
    """Multi-scale spectral distance; Tensor in, differentiable Tensor out.

    y is the reference (never differentiated); y_hat may be a Tensor from
    the synthesis graph, an AudioBuffer, or an array. _refs short-circuits
    the reference transforms with spectra from _target_spectra.
    """
    y_arr = y.samples if isinstance(y, AudioBuffer) else np.asarray(y, dtype=np.float64)
    if isinstance(y_hat, AudioBuffer):
        y_hat = y_hat.samples
    n_hat = len(y_hat.data) if isinstance(y_hat, Tensor) else len(y_hat)
    if len(y_arr) != n_hat:
        raise UsageError(f"length mismatch: {len(y_arr)} vs {n_hat}")
    mag_term, log_term = _mss_terms(y_arr, y_hat, cfg, sample_rate, refs=_refs)
    return mag_term + log_term


# ---------------------------------------------------------------------------
# Per-clip features
# ---------------------------------------------------------------------------


def default_pitch_provider(entry, x_lb: AudioBuffer, n_frames: int, max_voices: int = 1):
    """Oracle pitch when the clip record carries ground truth, otherwise
    the built-in estimators on the low-band signal."""
    if hasattr(entry, "f0_hz_list"):
        return oracle_pitch(entry, n_frames)
    if max_voices > 1:
        track = estimate_multi_f0(x_lb, max_voices=max_voices)
        got = track[0].n_frames if track.n_voices else n_frames
    else:
        track = estimate_f0_mono(x_lb)
        got = track.n_frames
    if got != n_frames:
        raise DataError(f"pitch frames {got} != expected {n_frames}")
    return track


def _poly_feature(track_or_multi, n_frames: int, max_voices: int) -> np.ndarray:
    """[T x max_voices] f0 features from a track of either arity."""
    if isinstance(track_or_multi, PitchTrack):
        tracks = (track_or_multi,)
    else:
        tracks = tuple(track_or_multi)
    if len(tracks) > max_voices:
        raise UsageError(f"{len(tracks)} pitch tracks exceed {max_voices} voices")
    out = np.zeros((n_frames, max_voices))
    for i, tr in enumerate(tracks):
        out[:, i : i + 1] = f0_feature(tr)
    return out


def _mono_track(track_or_multi) -> PitchTrack:
    if isinstance(track_or_multi, MultiPitchTrack):
        if track_or_multi.n_voices != 1:
            raise UsageError("mono model got a multi-voice pitch track")
        return track_or_multi[0]
    return track_or_multi


def clip_features(entry, config: ModelConfig, pitch_provider=None, cache_dir=None) -> dict:
    """Everything the training step needs for one clip, as plain arrays.

    Keys: target (full-band samples), mfcc [T x n_mfcc], loud [T x 1],
    f0 [T x 1 or T x I], f0_hz [T or I x T]. Cached to disk when a cache
    directory is configured (argument or CACHE_ENV_VAR).
    """
    from .data import render_clip

    if cache_dir is None:
        cache_dir = os.environ.get(CACHE_ENV_VAR) or None
    cache_path = None
    if cache_dir:
        key_src = "|".join([
            "feat-v1", getattr(entry, "clip_id", "?"),
            repr(getattr(entry, "seed", None)),
            config.variant, str(config.cutoff_hz), str(config.n_mfcc),
            str(config.hop), str(config.sample_rate), str(config.max_voices),
        ])
        key = hashlib.sha256(key_src.encode()).hexdigest()[:32]
        cache_path = Path(cache_dir) / f"{key}.npz"
        if cache_path.is_file():
            with np.load(cache_path) as z:
                return {k: z[k] for k in z.files}

    audio, _truth = render_clip(entry)
    if audio.sample_rate != config.sample_rate:
        raise DataError(f"{getattr(entry, 'clip_id', '?')}: rate {audio.sample_rate} != model rate")
    x_lb = lowpass(audio, config.cutoff_hz)
    t = frame_count(len(audio.samples), config.hop)
    feats = {
        "target": audio.samples,
        "mfcc": encoder_features(x_lb, config),
        "loud": loudness_feature(a_weighted_loudness(x_lb, hop=config.hop)),
    }
    if config.variant != "noise_only":
        voices = config.max_voices if config.variant == "poly_dec" else 1
        provider = pitch_provider or (
            lambda e, x, n: default_pitch_provider(e, x, n, max_voices=voices)
        )
        track = provider(entry, x_lb, t)
        if config.variant == "mono_dec":
            mono = _mono_track(track)
            feats["f0"] = f0_feature(mono)
            feats["f0_hz"] = mono.held()
        else:
            if isinstance(track, PitchTrack):
                track = MultiPitchTrack((track,))
            ordered = canonical_voice_order(track)
            feats["f0"] = _poly_feature(ordered, t, config.max_voices)
            hz = np.zeros((config.max_voices, t))
            for i, tr in enumerate(ordered):
                hz[i] = tr.held()
            feats["f0_hz"] = hz

    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = cache_path.with_suffix(".tmp.npz")
        np.savez(tmp, **feats)
        os.replace(tmp, cache_path)
    return feats


# ---------------------------------------------------------------------------
# The step loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: str
    loss_log_path: str
    steps_run: int
    final_loss: float
    final_lr: float


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(step,)))


def _item_noise_seed(seed: int, step: int, item: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(step, 1 + item))


def _synth_batch_item(
    params: ModelParams,
    feats: dict,
    amps3,
    noise3,
    item: int,
    noise_seed,
    n_samples: int,
):
    """One clip's synthesis subgraph: harmonic voices plus filtered noise."""
    c = params.config
    noise_b = ad.getitem(noise3, (slice(None), item, slice(None)))
    out = noise_synth(noise_b, hop=c.hop, seed=noise_seed,
                      sample_rate=c.sample_rate, n_samples=n_samples)
    if c.variant == "noise_only":
        return out
    if c.variant == "mono_dec":
        track = PitchTrack(feats["f0_hz"], hop=c.hop)
        amps_b = ad.getitem(amps3, (slice(None), item, slice(None)))
        harm = harmonic_synth(track, amps_b, sample_rate=c.sample_rate,
                              seed=None, n_samples=n_samples)
        return out + harm
    for v in range(c.max_voices):
        hz = feats["f0_hz"][v]
        if not np.any(hz > 0):
            continue  # silent slot: skip the oscillator bank entirely
        track = PitchTrack(hz, hop=c.hop)
        amps_v = ad.getitem(amps3[v], (slice(None), item, slice(None)))
        harm = harmonic_synth(track, amps_v, sample_rate=c.sample_rate,
                              seed=None, n_samples=n_samples)
        out = out + harm
    return out


def _forward_batch(params: ModelParams, batch: list[dict], cfg: TrainConfig, step: int):
    """Build the loss graph for one batch; returns the scalar loss Tensor."""
    c = params.config
    t = batch[0]["mfcc"].shape[0]
    b = len(batch)
    n_samples = min(len(item["target"]) for item in batch)
    mfcc_stack = np.stack([item["mfcc"] for item in batch], axis=1)
    loud_stack = np.stack([item["loud"] for item in batch], axis=1)
    z = encode_batch(mfcc_stack, params)
    if c.variant == "mono_dec":
        f0_stack = np.stack([item["f0"] for item in batch], axis=1)
        amps3, noise3 = decode_mono_batch(z, f0_stack, loud_stack, params)
    elif c.variant == "noise_only":
        amps3, noise3 = None, decode_noise_batch(z, loud_stack, params)
    else:
        f0_stack = np.stack([item["f0"] for item in batch], axis=1)
        voice_list, noise3 = decode_poly_batch(z, f0_stack, loud_stack, params)
        amps3 = voice_list
    ref_key = (n_samples, cfg.mss_fft_sizes, cfg.loss_band, cfg.cutoff_hz)
    total = None
    for i, item in enumerate(batch):
        y_hat = _synth_batch_item(params, item, amps3, noise3, i,
                                  _item_noise_seed(cfg.seed, step, i), n_samples)
        cached = item.get("_mss_ref")
        if cached is None or cached[0] != ref_key:
            cached = (ref_key, _target_spectra(item["target"][:n_samples], cfg, c.sample_rate))
            item["_mss_ref"] = cached
        loss_i = mss_loss(item["target"][:n_samples], y_hat, cfg, c.sample_rate,
                          _refs=cached[1])
        total = loss_i if total is None else total + loss_i
    return total * (1.0 / b)


def _save_train_state(path, params: ModelParams, schedule: LrSchedule, step: int) -> None:
    store = params.store
    buf = io.BytesIO()
    buf.write(STATE_MAGIC)
    buf.write(struct.pack("<I", 1))
    header = (
        f"step={step}\nadam_step={store.step}\nbest={schedule.best!r}\n"
        f"since_best={schedule.since_best}\nhalvings={schedule.halvings}\n"
    ).encode()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    names = store.names()
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        for tag, bank in (("m", store._adam_m), ("v", store._adam_v)):
            arr = np.ascontiguousarray(bank.get(name, np.zeros_like(store[name].data)))
            label = f"{tag}.{name}".encode()
            buf.write(struct.pack("<I", len(label)))
            buf.write(label)
            buf.write(struct.pack("<I", len(str(arr.dtype).encode())))
            buf.write(str(arr.dtype).encode())
            buf.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                buf.write(struct.pack("<q", d))
            buf.write(struct.pack("<Q", arr.nbytes))
            buf.write(arr.tobytes())
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def _load_train_state(path, params: ModelParams, schedule: LrSchedule) -> int:
    store = params.store
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot read train state: {exc}") from None
    with fh:
        if fh.read(len(STATE_MAGIC)) != STATE_MAGIC:
            raise DataError(f"{path}: not a train-state file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != 1:
            raise DataError(f"{path}: unsupported train-state version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        fields = dict(
            line.split("=", 1) for line in fh.read(hlen).decode().strip().splitlines()
        )
        step = int(fields["step"])
        store.step = int(fields["adam_step"])
        schedule.best = float(fields["best"])
        schedule.since_best = int(fields["since_best"])
        schedule.halvings = int(fields["halvings"])
        (n_names,) = struct.unpack("<I", fh.read(4))
        for _ in range(n_names * 2):
            (llen,) = struct.unpack("<I", fh.read(4))
            label = fh.read(llen).decode()
            (dlen,) = struct.unpack("<I", fh.read(4))
            dt = np.dtype(fh.read(dlen).decode())
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<q", fh.read(8))[0] for _ in range(ndim))
            (nbytes,) = struct.unpack("<Q", fh.read(8))
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise DataError("truncated train state")
            arr = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
            tag, name = label.split(".", 1)
            if name not in store.params:
                raise DataError(f"train state names unknown parameter {name!r}")
            (store._adam_m if tag == "m" else store._adam_v)[name] = arr
    return step


def train(
    model_config: ModelConfig,
    manifest,
    cfg: TrainConfig,
    out_dir,
    pitch_provider=None,
    resume: bool = False,
    log_hook=None,
) -> TrainResult:
    """Run the optimization loop; writes checkpoints and a loss CSV.

    Layout under out_dir: model.ckpt (latest, atomic), model.ckpt.state
    (optimizer/schedule state for exact resume), loss_log.csv with header
    step,loss,lr. resume=True continues a previous run in the same
    directory and reproduces the uninterrupted run exactly.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "model.ckpt"
    state_path = out / "model.ckpt.state"
    log_path = out / "loss_log.csv"

    train_clips = manifest.train_clips
    if not train_clips:
        raise UsageError("manifest has no train clips")

    schedule = LrSchedule(lr0=cfg.lr0, plateau_steps=cfg.plateau_steps,
                          max_halvings=cfg.max_halvings)
    start_step = 0
    if resume:
        from .controller import load_checkpoint

        params = load_checkpoint(ckpt_path, expect_variant=model_config.variant)
        if params.config != model_config:
            raise UsageError("resume config does not match the checkpoint")
        start_step = _load_train_state(state_path, params, schedule)
        if not log_path.is_file():
            raise DataError("resume: loss_log.csv missing")
    else:
        params = init_model(model_config, seed=cfg.seed)

    feats = [clip_features(c, model_config, pitch_provider) for c in train_clips]

    mode = "a" if resume else "w"
    loss_value = float("nan")
    with open(log_path, mode, encoding="utf-8") as log:
        if not resume:
            log.write("step,loss,lr\n")
        for step in range(start_step, cfg.steps):
            rng = _step_rng(cfg.seed, step)
            idx = rng.integers(0, len(feats), size=cfg.batch)
            batch = [feats[i] for i in idx]
            params.store.zero_grads()
            loss = _forward_batch(params, batch, cfg, step)
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise NumericError(
                    f"loss diverged at step {step}: {loss_value} (lr {schedule.lr:g})"
                )
            loss.backward()
            # voice heads that saw no active track this batch get no grad
            for name in params.store.names():
                p = params.store[name]
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            lr = schedule.update(loss_value)
            nn.adam_step(params.store, lr)
            log.write(f"{step},{loss_value!r},{lr!r}\n")
            log.flush()
            if log_hook is not None:
                log_hook(step, loss_value, lr)
            if (step + 1) % cfg.checkpoint_every == 0 or step + 1 == cfg.steps:
                save_checkpoint(params, ckpt_path)
                _save_train_state(state_path, params, schedule, step + 1)
    save_checkpoint(params, ckpt_path)
    _save_train_state(state_path, params, schedule, cfg.steps)
    return TrainResult(
        checkpoint_path=str(ckpt_path),
        loss_log_path=str(log_path),
        steps_run=cfg.steps - start_step,
        final_loss=loss_value,
        final_lr=schedule.lr,
    )
