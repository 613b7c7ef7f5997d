"""Trainable encoder-decoder producing synthesizer controls.

The encoder maps low-band audio to a latent sequence: MFCC(30) frames go
through a trainable normalization (layer norm with learnable gain/shift),
a GRU, and a dense projection. Decoders condition that latent on pitch
and loudness to emit harmonic amplitudes and noise filter coefficients,
in three variants:

  mono_dec    one f0 track -> harmonic amps [T x H] + noise [T x K]
  noise_only  no pitch branch; harmonic amps fixed at zero
  poly_dec    up to I f0 slots -> I amp sets + one shared noise set

Decoder wiring: each conditioning signal runs through its own 3-layer
MLP; outputs are concatenated in the order (f0 slots..., loudness,
latent), fed to a GRU, a final MLP, and per-output dense heads. The
harmonic head emits 1+H values per frame: a global amplitude through the
positive-output sigmoid times a softmax distribution over harmonics.
Voice slots are positional: head i always reads f0 slot i, so callers
decide track ordering (the pipelines sort by descending mean f0).

Scalar conditioning enters normalized: f0 as MIDI/127 (unvoiced frames
hold the previous pitch; leading silence stays 0), loudness as
(dB + 90) / 90.

All forwards run batched internally as [T x B x features]; the public
single-clip entry points wrap batch size 1.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .audio import AudioBuffer
from .autodiff import Tensor
from .dsp import LoudnessTrack, mfcc
from .errors import DataError, UsageError
from .pitch import MultiPitchTrack, PitchTrack, hz_to_midi
from .synth import ControlFrames

__all__ = [
    "ModelConfig",
    "ModelParams",
    "LatentSequence",
    "PolyControls",
    "VARIANTS",
    "init_model",
    "encode",
    "decode_mono",
    "decode_noise",
    "decode_poly",
    "save_checkpoint",
    "load_checkpoint",
]

VARIANTS = ("mono_dec", "noise_only", "poly_dec")

CHECKPOINT_MAGIC = b"DDSPBWE1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; fully determines the parameter layout."""

    variant: str
    n_harmonics: int = 100
    n_noise: int = 65
    gru_units: int = 512
    mlp_width: int = 512
    z_dim: int = 512
    max_voices: int = 5
    sample_rate: int = 16_000
    cutoff_hz: float = 2000.0
    n_mfcc: int = 30
    hop: int = 256

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise UsageError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("n_harmonics", "n_noise", "gru_units", "mlp_width",
                     "z_dim", "max_voices", "sample_rate", "n_mfcc", "hop"):
            if getattr(self, name) <= 0:
                raise UsageError(f"{name} must be positive")
        if not 0 < self.cutoff_hz < self.sample_rate / 2:
            raise UsageError(f"cutoff_hz must lie in (0, Nyquist), got {self.cutoff_hz}")

    def canonical_text(self) -> str:
        """Stable key=value rendering; hashed into checkpoints."""
        lines = ["format: bwe-lab model config v1"]
        for key in sorted(self.__dataclass_fields__):
            lines.append(f"{key}={getattr(self, key)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("format: bwe-lab model config v1"):
            raise DataError("not a model config (missing format header)")
        kwargs = {}
        for ln in lines[1:]:
            key, _, raw = ln.partition("=")
            if key not in cls.__dataclass_fields__:
                raise DataError(f"unknown config key {key!r}")
            kind = cls.__dataclass_fields__[key].type
            if key == "variant":
                kwargs[key] = raw.strip("'\"")
            elif key == "cutoff_hz":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = int(raw)
        return cls(**kwargs)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.canonical_text())

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


@dataclass(frozen=True)
class LatentSequence:
    """Per-frame latent z, [T x z_dim]; Tensor while a graph is alive."""

    z: Tensor | np.ndarray
    hop: int = 256

    @property
    def array(self) -> np.ndarray:
        return self.z.data if isinstance(self.z, Tensor) else self.z

    @property
    def n_frames(self) -> int:
        return self.array.shape[0]


@dataclass(frozen=True)
class PolyControls:
    """Per-voice harmonic amplitude sets plus one shared noise set."""

    voices: tuple  # I matrices [T x H], Tensor or ndarray
    noise_coeffs: Tensor | np.ndarray
    hop: int = 256

    @property
    def n_voices(self) -> int:
        return len(self.voices)

    def voice_controls(self, i: int) -> ControlFrames:
        """One voice's amps paired with zeroed noise (noise renders once)."""
        amps = self.voices[i]
        t = (amps.data if isinstance(amps, Tensor) else amps).shape[0]
        k = (self.noise_coeffs.data if isinstance(self.noise_coeffs, Tensor) else self.noise_coeffs).shape[1]
        return ControlFrames(amps, np.zeros((t, k)), self.hop)


@dataclass
class ModelParams:
    """Parameter store plus typed handles; built only by init_model/load."""

    config: ModelConfig
    store: nn.ParamStore
    enc_norm: tuple[Tensor, Tensor]
    enc_gru: nn.GruParams
    enc_dense: tuple[Tensor, Tensor]
    mlp_l: nn.Mlp3Params
    mlp_z: nn.Mlp3Params
    dec_gru: nn.GruParams
    mlp_out: nn.Mlp3Params
    head_noise: tuple[Tensor, Tensor]
    mlp_f0: tuple = ()
    head_harm: tuple = ()

    @property
    def seed(self) -> int:
        return self.store.seed


def _n_voice_slots(config: ModelConfig) -> int:
    if config.variant == "mono_dec":
        return 1
    if config.variant == "poly_dec":
        return config.max_voices
    return 0


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Fresh parameters; (config, seed) fully determines every value.

    Creation order is fixed and load-bearing: the store's RNG is consumed
    in sequence, and checkpoints address parameters by these names.
    """
    store = nn.ParamStore(seed=seed, dtype=dtype)
    c = config
    enc_norm = nn.init_feature_norm(store, "enc.norm", c.n_mfcc)
    enc_gru = nn.init_gru(store, "enc.gru", c.n_mfcc, c.gru_units)
    enc_w = store.add("enc.out.w", (c.gru_units, c.z_dim), init="uniform", fan_in=c.gru_units)
    enc_b = store.add("enc.out.b", (c.z_dim,), init="zeros")

    slots = _n_voice_slots(c)
    mlp_f0 = tuple(
        nn.init_mlp3(store, f"dec.f0_mlp{i}", 1, c.mlp_width) for i in range(slots)
    )
    mlp_l = nn.init_mlp3(store, "dec.l_mlp", 1, c.mlp_width)
    mlp_z = nn.init_mlp3(store, "dec.z_mlp", c.z_dim, c.mlp_width)
    concat_width = (slots + 2) * c.mlp_width
    dec_gru = nn.init_gru(store, "dec.gru", concat_width, c.gru_units)
    mlp_out = nn.init_mlp3(store, "dec.out_mlp", c.gru_units, c.mlp_width)
    head_harm = tuple(
        (
            store.add(f"dec.head_harm{i}.w", (c.mlp_width, 1 + c.n_harmonics),
                      init="uniform", fan_in=c.mlp_width),
            store.add(f"dec.head_harm{i}.b", (1 + c.n_harmonics,), init="zeros"),
        )
        for i in range(slots)
    )
    head_noise = (
        store.add("dec.head_noise.w", (c.mlp_width, c.n_noise), init="uniform", fan_in=c.mlp_width),
        store.add("dec.head_noise.b", (c.n_noise,), init="zeros"),
    )
    return ModelParams(
        config=c, store=store, enc_norm=enc_norm, enc_gru=enc_gru,
        enc_dense=(enc_w, enc_b), mlp_l=mlp_l, mlp_z=mlp_z, dec_gru=dec_gru,
        mlp_out=mlp_out, head_noise=head_noise, mlp_f0=mlp_f0, head_harm=head_harm,
    )


# ---------------------------------------------------------------------------
# Feature preparation (constants w.r.t. the graph)
# ---------------------------------------------------------------------------


def f0_feature(track: PitchTrack) -> np.ndarray:
    """Pitch as MIDI/127 per frame, [T x 1]; unvoiced gaps hold, leading
    silence stays zero."""
    held = track.held()
    feat = np.zeros(len(held))
    voiced = held > 0
    feat[voiced] = hz_to_midi(held[voiced]) / 127.0
    return feat[:, None]


def loudness_feature(track: LoudnessTrack) -> np.ndarray:
    """Loudness mapped from [-90, 0] dB to roughly [0, 1], [T x 1]."""
    return ((track.values + 90.0) / 90.0)[:, None]


def canonical_voice_order(tracks) -> tuple:
    """Fixed voice-to-slot binding: descending mean voiced f0, stable ties.

    The decoder's voice slots are positional, so training features and
    inference must agree on which track lands in which slot regardless of
    the order a pitch source emits them.
    """
    tracks = tuple(tracks)
    means = np.zeros(len(tracks))
    for i, tr in enumerate(tracks):
        held = tr.held()
        voiced = held[held > 0]
        if voiced.size:
            means[i] = voiced.mean()
    order = np.argsort(-means, kind="stable")
    return tuple(tracks[i] for i in order)


def encoder_features(x_lb: AudioBuffer, config: ModelConfig) -> np.ndarray:
    """MFCC matrix [T x n_mfcc] the encoder consumes."""
    return mfcc(x_lb, n_coeffs=config.n_mfcc, fft_size=1024,
                overlap=1.0 - config.hop / 1024)


# ---------------------------------------------------------------------------
# Batched forward passes (training entry points)
# ---------------------------------------------------------------------------


def encode_batch(feats: np.ndarray, params: ModelParams) -> Tensor:
    """MFCC frames [T x B x n_mfcc] -> latent [T x B x z_dim]."""
    c = params.config
    t, b, _ = feats.shape
    x = Tensor(np.ascontiguousarray(feats, dtype=params.store.dtype))
    flat = ad.reshape(x, (t * b, c.n_mfcc))
    scale, shift = params.enc_norm
    normed = ad.layer_norm(flat, scale, shift)
    seq = ad.reshape(normed, (t, b, c.n_mfcc))
    h0 = np.zeros((b, c.gru_units), dtype=params.store.dtype)
    hidden = nn.gru_sequence(seq, h0, params.enc_gru)
    hidden_flat = ad.reshape(hidden, (t * b, c.gru_units))
    z = nn.dense(hidden_flat, *params.enc_dense)
    return ad.reshape(z, (t, b, c.z_dim))


def _decoder_trunk(branches: list[Tensor], t: int, b: int, params: ModelParams) -> Tensor:
    """Concat MLP branches, run the decoder GRU and final MLP, [T*B x width]."""
    c = params.config
    joined = ad.concat(branches, axis=-1)
    seq = ad.reshape(joined, (t, b, joined.shape[-1]))
    h0 = np.zeros((b, c.gru_units), dtype=params.store.dtype)
    hidden = nn.gru_sequence(seq, h0, params.dec_gru)
    return nn.mlp3(ad.reshape(hidden, (t * b, c.gru_units)), params.mlp_out)


def _harmonic_head(trunk: Tensor, head: tuple[Tensor, Tensor]) -> Tensor:
    """1+H head values -> amplitudes: sigmoid(global) * softmax(logits)."""
    raw = nn.dense(trunk, *head)
    amp = nn.modified_sigmoid(ad.getitem(raw, (slice(None), slice(0, 1))))
    dist = ad.softmax(ad.getitem(raw, (slice(None), slice(1, None))), axis=-1)
    return amp * dist


def _noise_head(trunk: Tensor, params: ModelParams) -> Tensor:
    return nn.modified_sigmoid(nn.dense(trunk, *params.head_noise))


def decode_mono_batch(
    z: Tensor, f0_feats: np.ndarray, l_feats: np.ndarray, params: ModelParams
) -> tuple[Tensor, Tensor]:
    """[T x B x .] conditioning -> (amps [T x B x H], noise [T x B x K])."""
    c = params.config
    t, b, _ = f0_feats.shape
    dt = params.store.dtype
    f0_in = Tensor(np.ascontiguousarray(f0_feats, dtype=dt))
    l_in = Tensor(np.ascontiguousarray(l_feats, dtype=dt))
    branches = [
        nn.mlp3(ad.reshape(f0_in, (t * b, 1)), params.mlp_f0[0]),
        nn.mlp3(ad.reshape(l_in, (t * b, 1)), params.mlp_l),
        nn.mlp3(ad.reshape(z, (t * b, c.z_dim)), params.mlp_z),
    ]
    trunk = _decoder_trunk(branches, t, b, params)
    amps = _harmonic_head(trunk, params.head_harm[0])
    noise = _noise_head(trunk, params)
    return ad.reshape(amps, (t, b, c.n_harmonics)), ad.reshape(noise, (t, b, c.n_noise))


def decode_noise_batch(
    z: Tensor, l_feats: np.ndarray, params: ModelParams
) -> Tensor:
    """[T x B x .] conditioning -> noise coefficients [T x B x K]."""
    c = params.config
    t, b, _ = l_feats.shape
    l_in = Tensor(np.ascontiguousarray(l_feats, dtype=params.store.dtype))
    branches = [
        nn.mlp3(ad.reshape(l_in, (t * b, 1)), params.mlp_l),
        nn.mlp3(ad.reshape(z, (t * b, c.z_dim)), params.mlp_z),
    ]
    trunk = _decoder_trunk(branches, t, b, params)
    return ad.reshape(_noise_head(trunk, params), (t, b, c.n_noise))


def decode_poly_batch(
    z: Tensor, f0_feats: np.ndarray, l_feats: np.ndarray, params: ModelParams
) -> tuple[list[Tensor], Tensor]:
    """f0_feats [T x B x I] -> (I amp sets [T x B x H], noise [T x B x K])."""
    c = params.config
    t, b, slots = f0_feats.shape
    if slots != c.max_voices:
        raise UsageError(f"expected {c.max_voices} f0 slots, got {slots}")
    dt = params.store.dtype
    branches = []
    for i in range(slots):
        f0_in = Tensor(np.ascontiguousarray(f0_feats[:, :, i : i + 1], dtype=dt))
        branches.append(nn.mlp3(ad.reshape(f0_in, (t * b, 1)), params.mlp_f0[i]))
    l_in = Tensor(np.ascontiguousarray(l_feats, dtype=dt))
    branches.append(nn.mlp3(ad.reshape(l_in, (t * b, 1)), params.mlp_l))
    branches.append(nn.mlp3(ad.reshape(z, (t * b, c.z_dim)), params.mlp_z))
    trunk = _decoder_trunk(branches, t, b, params)
    amp_sets = [
        ad.reshape(_harmonic_head(trunk, params.head_harm[i]), (t, b, c.n_harmonics))
        for i in range(slots)
    ]
    noise = ad.reshape(_noise_head(trunk, params), (t, b, c.n_noise))
    return amp_sets, noise


# ---------------------------------------------------------------------------
# Single-clip public API
# ---------------------------------------------------------------------------


def encode(x_lb: AudioBuffer, params: ModelParams) -> LatentSequence:
    """Low-band audio -> latent sequence [T x z_dim]."""
    c = params.config
    if x_lb.sample_rate != c.sample_rate:
        raise UsageError(f"model expects {c.sample_rate} Hz, got {x_lb.sample_rate}")
    feats = encoder_features(x_lb, c)
    z3 = encode_batch(feats[:, None, :], params)
    return LatentSequence(ad.reshape(z3, (feats.shape[0], c.z_dim)), hop=c.hop)


def _check_frames(params: ModelParams, *counts: int) -> int:
    t = counts[0]
    if any(n != t for n in counts):
        raise UsageError(f"frame counts disagree: {counts}")
    return t


def decode_mono(
    z: LatentSequence, f0: PitchTrack, loud: LoudnessTrack, params: ModelParams
) -> ControlFrames:
    """Latent + pitch + loudness -> harmonic amps and noise coefficients."""
    if params.config.variant != "mono_dec":
        raise UsageError(f"decode_mono needs a mono_dec model, got {params.config.variant}")
    t = _check_frames(params, z.n_frames, f0.n_frames, len(loud.values))
    zt = z.z if isinstance(z.z, Tensor) else Tensor(np.asarray(z.z, dtype=params.store.dtype))
    amps3, noise3 = decode_mono_batch(
        ad.reshape(zt, (t, 1, params.config.z_dim)),
        f0_feature(f0)[:, None, :],
        loudness_feature(loud)[:, None, :],
        params,
    )
    return ControlFrames(
        ad.reshape(amps3, (t, params.config.n_harmonics)),
        ad.reshape(noise3, (t, params.config.n_noise)),
        params.config.hop,
    )


def decode_noise(z: LatentSequence, loud: LoudnessTrack, params: ModelParams) -> ControlFrames:
    """Noise-only decoding; harmonic amplitudes are identically zero."""
    if params.config.variant != "noise_only":
        raise UsageError(f"decode_noise needs a noise_only model, got {params.config.variant}")
    t = _check_frames(params, z.n_frames, len(loud.values))
    zt = z.z if isinstance(z.z, Tensor) else Tensor(np.asarray(z.z, dtype=params.store.dtype))
    noise3 = decode_noise_batch(
        ad.reshape(zt, (t, 1, params.config.z_dim)),
        loudness_feature(loud)[:, None, :],
        params,
    )
    return ControlFrames(
        np.zeros((t, params.config.n_harmonics)),
        ad.reshape(noise3, (t, params.config.n_noise)),
        params.config.hop,
    )


def decode_poly(
    z: LatentSequence, multi_f0: MultiPitchTrack, loud: LoudnessTrack, params: ModelParams
) -> PolyControls:
    """Latent + up to I pitch tracks -> I amp sets + shared noise.

    Tracks bind to head slots in the order given; missing slots get an
    all-zero f0 feature. Downstream synthesis consumes only the first
    I' = multi_f0.n_voices amp sets.
    """
    c = params.config
    if c.variant != "poly_dec":
        raise UsageError(f"decode_poly needs a poly_dec model, got {c.variant}")
    if multi_f0.n_voices > c.max_voices:
        raise UsageError(f"{multi_f0.n_voices} tracks exceed the model's {c.max_voices} voices")
    counts = [z.n_frames, len(loud.values)] + [tr.n_frames for tr in multi_f0]
    t = _check_frames(params, *counts)
    feats = np.zeros((t, 1, c.max_voices))
    for i, track in enumerate(multi_f0):
        feats[:, 0, i : i + 1] = f0_feature(track)
    zt = z.z if isinstance(z.z, Tensor) else Tensor(np.asarray(z.z, dtype=params.store.dtype))
    amp_sets, noise3 = decode_poly_batch(
        ad.reshape(zt, (t, 1, c.z_dim)), feats,
        loudness_feature(loud)[:, None, :], params,
    )
    voices = tuple(ad.reshape(a, (t, c.n_harmonics)) for a in amp_sets)
    return PolyControls(voices, ad.reshape(noise3, (t, c.n_noise)), c.hop)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _arch_hash(config: ModelConfig) -> bytes:
    payload = config.canonical_text() + "\n" + nn.GRU_CONVENTION
    return hashlib.sha256(payload.encode("utf-8")).digest()


def _write_block(fh, data: bytes) -> None:
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _read_block(fh) -> bytes:
    raw = fh.read(4)
    if len(raw) != 4:
        raise DataError("truncated checkpoint")
    (n,) = struct.unpack("<I", raw)
    data = fh.read(n)
    if len(data) != n:
        raise DataError("truncated checkpoint")
    return data


def save_checkpoint(params: ModelParams, path) -> None:
    """Binary little-endian dump: config text, arch hash, named tensors."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<q", params.store.seed))
    buf.write(_arch_hash(params.config))
    _write_block(buf, params.config.canonical_text().encode("utf-8"))
    names = params.store.names()
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        tensor = params.store[name]
        _write_block(buf, name.encode("utf-8"))
        _write_block(buf, str(tensor.data.dtype).encode("ascii"))
        buf.write(struct.pack("<I", tensor.data.ndim))
        for dim in tensor.data.shape:
            buf.write(struct.pack("<q", dim))
        data = np.ascontiguousarray(tensor.data)
        buf.write(struct.pack("<Q", data.nbytes))
        buf.write(data.tobytes())
    # write-then-rename so a crash never leaves a half-written checkpoint
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path, expect_variant: str | None = None) -> ModelParams:
    """Rebuild a model bit-exactly from a checkpoint file.

    Rejects wrong magic, unknown version, architecture-hash mismatch,
    and (when expect_variant is given) a checkpoint of another variant.
    """
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from None
    with fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (seed,) = struct.unpack("<q", fh.read(8))
        stored_hash = fh.read(32)
        config = ModelConfig.from_text(_read_block(fh).decode("utf-8"))
        if stored_hash != _arch_hash(config):
            raise DataError(f"{path}: architecture hash mismatch (incompatible build)")
        if expect_variant is not None and config.variant != expect_variant:
            raise UsageError(
                f"checkpoint holds a {config.variant} model, {expect_variant} required"
            )
        (n_tensors,) = struct.unpack("<I", fh.read(4))
        values: dict[str, np.ndarray] = {}
        dtype = None
        for _ in range(n_tensors):
            name = _read_block(fh).decode("utf-8")
            dt = np.dtype(_read_block(fh).decode("ascii"))
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<q", fh.read(8))[0] for _ in range(ndim))
            (nbytes,) = struct.unpack("<Q", fh.read(8))
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise DataError("truncated checkpoint")
            values[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
            dtype = dt
    params = init_model(config, seed, dtype=dtype or np.float32)
    expected = set(params.store.names())
    if set(values) != expected:
        missing = expected - set(values)
        extra = set(values) - expected
        raise DataError(f"checkpoint tensor set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    params.store.set_values(values)
    return params
