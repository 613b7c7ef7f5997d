"""Dataset construction: synthetic clip generators and WAV-corpus ingestion.

Synthetic clips are fully described by a small metadata record, so the
manifest stores generator parameters instead of audio and any clip can be
re-rendered bit-exactly from its record. Real recordings are ingested by
reference: the manifest keeps (file, offset) pairs and segments are cut
at load time.

Mono recipe: a harmonic series with 1/h^2 amplitudes at a constant
fundamental, plus pink noise 10 dB below the harmonic part, both shaped
by an attack-sustain-decay envelope, scaled by a global gain. Poly clips
mix several such notes (distinct pitch classes) with per-note gains.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, load_wav
from .dsp import frame_count, pink_noise
from .errors import DataError, UsageError
from .pitch import MultiPitchTrack, PitchTrack, midi_to_hz
from .synth import asd_envelope

__all__ = [
    "SynthClipMeta",
    "IngestClip",
    "DatasetManifest",
    "gen_mono_clip",
    "gen_poly_clip",
    "poly_note_metas",
    "gen_mono_dataset",
    "gen_poly_dataset",
    "ingest_corpus",
    "render_clip",
]

MANIFEST_HEADER = "format: bwe-lab dataset manifest v1"

MIDI_RANGE = (48, 92)  # C3 .. G#6
H_GEN_CHOICES = (10, 15, 20)
NOISE_SNR_DB = 10.0
MONO_GAIN_RANGE = (0.75, 1.0)
POLY_GAIN_RANGE = (0.5, 1.0)
ATTACK_RANGE_S = (0.0, 0.3)
DECAY_RANGE_S = (0.0, 0.3)
SUSTAIN_LEVEL_RANGE = (0.5, 1.0)
SUSTAIN_RANGE_S = (0.0, 2.0)
CLIP_SECONDS = 4.0
SAMPLE_RATE = 16_000
HOP = 256

# chord intervals above the root: stacked thirds, distinct pitch classes
CHORD_OFFSETS = (0, 4, 7, 11, 14)
POLY_SIZES = (2, 3, 4, 5)


@dataclass(frozen=True)
class SynthClipMeta:
    """Everything needed to re-render one synthetic clip."""

    clip_id: str
    midi_pitches: tuple
    n_harmonics: int
    attack_s: float
    decay_s: float
    sustain_level: float
    sustain_s: float
    note_gains: tuple
    seed: int
    split: str
    duration_s: float = CLIP_SECONDS
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        object.__setattr__(self, "midi_pitches", tuple(int(p) for p in self.midi_pitches))
        object.__setattr__(self, "note_gains", tuple(float(g) for g in self.note_gains))
        if not self.midi_pitches:
            raise UsageError("midi_pitches is empty")
        lo, hi = MIDI_RANGE
        for p in self.midi_pitches:
            if not lo <= p <= hi:
                raise UsageError(f"MIDI pitch {p} outside [{lo}, {hi}]")
        if self.n_harmonics not in H_GEN_CHOICES:
            raise UsageError(f"n_harmonics must be one of {H_GEN_CHOICES}")
        if len(self.note_gains) != len(self.midi_pitches):
            raise UsageError("need one gain per pitch")
        g_lo, g_hi = MONO_GAIN_RANGE if len(self.midi_pitches) == 1 else POLY_GAIN_RANGE
        for g in self.note_gains:
            if not g_lo <= g <= g_hi:
                raise UsageError(f"gain {g} outside [{g_lo}, {g_hi}]")
        if self.split not in ("train", "test"):
            raise UsageError(f"split must be train or test, got {self.split!r}")
        for name in ("attack_s", "decay_s", "sustain_s", "duration_s"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be >= 0")
        if not 0.0 <= self.sustain_level <= 1.0:
            raise UsageError("sustain_level must be in [0, 1]")

    @property
    def f0_hz_list(self) -> tuple:
        """Ground-truth fundamentals; consumed by the oracle pitch provider."""
        return tuple(midi_to_hz(p) for p in self.midi_pitches)

    @property
    def n_notes(self) -> int:
        return len(self.midi_pitches)


@dataclass(frozen=True)
class IngestClip:
    """A fixed-length window into an audio file on disk."""

    clip_id: str
    path: str
    start_s: float
    duration_s: float
    split: str
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.start_s < 0 or self.duration_s <= 0:
            raise UsageError("bad segment bounds")
        if self.split not in ("train", "test"):
            raise UsageError(f"split must be train or test, got {self.split!r}")


@dataclass(frozen=True)
class DatasetManifest:
    """An ordered clip list with a deterministic text serialization."""

    kind: str  # synth-mono | synth-poly | ingest
    seed: int
    clips: tuple = field(default_factory=tuple)

    def __post_init__(self):
        ids = [c.clip_id for c in self.clips]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate clip ids in manifest")

    def __len__(self) -> int:
        return len(self.clips)

    def split_clips(self, split: str) -> tuple:
        return tuple(c for c in self.clips if c.split == split)

    @property
    def train_clips(self) -> tuple:
        return self.split_clips("train")

    @property
    def test_clips(self) -> tuple:
        return self.split_clips("test")

    def canonical_text(self) -> str:
        """Stable rendering: floats via repr so values round-trip exactly."""
        out = [MANIFEST_HEADER, f"kind: {self.kind}", f"seed: {self.seed}",
               f"clips: {len(self.clips)}", ""]
        for c in self.clips:
            out.append("[clip]")
            if isinstance(c, SynthClipMeta):
                out.append(f"id={c.clip_id}")
                out.append(f"split={c.split}")
                out.append("midi_pitches=" + ",".join(str(p) for p in c.midi_pitches))
                out.append(f"n_harmonics={c.n_harmonics}")
                for name in ("attack_s", "decay_s", "sustain_level", "sustain_s", "duration_s"):
                    out.append(f"{name}={getattr(c, name)!r}")
                out.append("note_gains=" + ",".join(repr(g) for g in c.note_gains))
                out.append(f"seed={c.seed}")
                out.append(f"sample_rate={c.sample_rate}")
            else:
                out.append(f"id={c.clip_id}")
                out.append(f"split={c.split}")
                out.append(f"path={c.path}")
                out.append(f"start_s={c.start_s!r}")
                out.append(f"duration_s={c.duration_s!r}")
                out.append(f"sample_rate={c.sample_rate}")
            out.append("")
        return "\n".join(out)

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.canonical_text())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read manifest: {exc}") from None
        return cls.from_text(text)

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        lines = text.splitlines()
        if not lines or lines[0] != MANIFEST_HEADER:
            raise DataError("not a dataset manifest (missing format header)")
        head = {}
        i = 1
        while i < len(lines) and lines[i].strip():
            key, _, val = lines[i].partition(":")
            head[key.strip()] = val.strip()
            i += 1
        for req in ("kind", "seed", "clips"):
            if req not in head:
                raise DataError(f"manifest header missing {req!r}")
        clips = []
        fields: dict[str, str] = {}
        for ln in lines[i:]:
            ln = ln.strip()
            if ln == "[clip]":
                fields = {}
            elif ln:
                key, sep, val = ln.partition("=")
                if not sep:
                    raise DataError(f"malformed manifest line: {ln!r}")
                fields[key] = val
            elif fields:
                clips.append(_clip_from_fields(fields))
                fields = {}
        if fields:
            clips.append(_clip_from_fields(fields))
        if len(clips) != int(head["clips"]):
            raise DataError(f"manifest declares {head['clips']} clips, found {len(clips)}")
        return cls(kind=head["kind"], seed=int(head["seed"]), clips=tuple(clips))


def _clip_from_fields(fields: dict[str, str]):
    try:
        if "path" in fields:
            return IngestClip(
                clip_id=fields["id"], path=fields["path"],
                start_s=float(fields["start_s"]), duration_s=float(fields["duration_s"]),
                split=fields["split"], sample_rate=int(fields["sample_rate"]),
            )
        return SynthClipMeta(
            clip_id=fields["id"],
            midi_pitches=tuple(int(p) for p in fields["midi_pitches"].split(",")),
            n_harmonics=int(fields["n_harmonics"]),
            attack_s=float(fields["attack_s"]),
            decay_s=float(fields["decay_s"]),
            sustain_level=float(fields["sustain_level"]),
            sustain_s=float(fields["sustain_s"]),
            note_gains=tuple(float(g) for g in fields["note_gains"].split(",")),
            seed=int(fields["seed"]),
            split=fields["split"],
            duration_s=float(fields["duration_s"]),
            sample_rate=int(fields["sample_rate"]),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed clip record: {exc}") from None


# ---------------------------------------------------------------------------
# Signal building blocks
# ---------------------------------------------------------------------------


def _mono_parts(meta: SynthClipMeta) -> tuple[np.ndarray, np.ndarray]:
    """Harmonic and noise parts whose sum is the final clip.

    Both carry the envelope, the note gain, and the shared peak
    normalization, so their power ratio is the configured SNR exactly.
    """
    if meta.n_notes != 1:
        raise UsageError(f"mono generator got {meta.n_notes} pitches")
    fs = meta.sample_rate
    n = int(round(meta.duration_s * fs))
    f0 = midi_to_hz(meta.midi_pitches[0])

    phase_ss, noise_ss = np.random.SeedSequence(meta.seed).spawn(2)
    phases = np.random.default_rng(phase_ss).uniform(0.0, 2.0 * np.pi, meta.n_harmonics)

    t = np.arange(n) / fs
    harm = np.zeros(n)
    for h in range(1, meta.n_harmonics + 1):
        if h * f0 >= fs / 2:
            break
        harm += np.sin(2.0 * np.pi * h * f0 * t + phases[h - 1]) / h**2

    env = asd_envelope(meta.attack_s, meta.decay_s, meta.sustain_level,
                       meta.sustain_s, meta.duration_s, fs).samples
    harm *= env
    noise = pink_noise(n, np.random.default_rng(noise_ss)).samples * env

    p_harm = np.mean(harm * harm)
    p_noise = np.mean(noise * noise)
    if p_harm > 0 and p_noise > 0:
        noise *= np.sqrt(p_harm / (p_noise * 10.0 ** (NOISE_SNR_DB / 10.0)))
    else:
        noise[:] = 0.0

    gain = meta.note_gains[0]
    harm *= gain
    noise *= gain
    peak = np.max(np.abs(harm + noise))
    if peak > 1.0:
        harm /= peak
        noise /= peak
    return harm, noise


def _truth_track(f0: float, n_samples: int, hop: int) -> PitchTrack:
    return PitchTrack(np.full(frame_count(n_samples, hop), f0), hop=hop)


def gen_mono_clip(meta: SynthClipMeta) -> tuple[AudioBuffer, PitchTrack]:
    """Render one synthetic note and its ground-truth pitch track."""
    harm, noise = _mono_parts(meta)
    x = harm + noise
    f0 = midi_to_hz(meta.midi_pitches[0])
    return AudioBuffer(x, meta.sample_rate), _truth_track(f0, len(x), HOP)


def poly_note_metas(meta: SynthClipMeta) -> tuple:
    """Per-note mono records a chord clip mixes; unit note gains.

    Note seeds come from the chord's own seeded stream, so a chord record
    re-renders identically and each note gets independent phases/noise.
    """
    rng = np.random.default_rng(meta.seed)
    seeds = rng.integers(0, 2**63, size=meta.n_notes)
    return tuple(
        replace(
            meta,
            clip_id=f"{meta.clip_id}~note{i}",
            midi_pitches=(p,),
            note_gains=(1.0,),
            seed=int(seeds[i]),
        )
        for i, p in enumerate(meta.midi_pitches)
    )


def gen_poly_clip(meta: SynthClipMeta) -> tuple[AudioBuffer, MultiPitchTrack]:
    """Render a chord: a gain-weighted mix of mono notes, one per pitch.

    Pitch classes must be distinct (the same note name in two octaves is
    rejected). The mix is exactly sum(gain_i * note_i); a single shared
    rescale applies only if the mix peaks above full scale.
    """
    if not 2 <= meta.n_notes <= 5:
        raise UsageError(f"chord needs 2..5 notes, got {meta.n_notes}")
    classes = [p % 12 for p in meta.midi_pitches]
    if len(set(classes)) != len(classes):
        raise UsageError(f"duplicate pitch class in {meta.midi_pitches}")
    n = int(round(meta.duration_s * meta.sample_rate))
    mix = np.zeros(n)
    for gain, note_meta in zip(meta.note_gains, poly_note_metas(meta)):
        note, _ = gen_mono_clip(note_meta)
        mix += gain * note.samples
    peak = np.max(np.abs(mix))
    if peak > 1.0:
        mix /= peak
    tracks = tuple(_truth_track(f0, n, HOP) for f0 in meta.f0_hz_list)
    return AudioBuffer(mix, meta.sample_rate), MultiPitchTrack(tracks)


# ---------------------------------------------------------------------------
# Dataset builders
# ---------------------------------------------------------------------------


def _draw_envelope(rng: np.random.Generator) -> dict:
    return {
        "attack_s": rng.uniform(*ATTACK_RANGE_S),
        "decay_s": rng.uniform(*DECAY_RANGE_S),
        "sustain_level": rng.uniform(*SUSTAIN_LEVEL_RANGE),
        "sustain_s": rng.uniform(*SUSTAIN_RANGE_S),
    }


def _assign_splits(n: int, rng: np.random.Generator, train_fraction: float = 0.9) -> list[str]:
    """Random permutation; floor(fraction * n) clips train, rest test."""
    n_train = int(np.floor(train_fraction * n))
    order = rng.permutation(n)
    splits = ["test"] * n
    for idx in order[:n_train]:
        splits[idx] = "train"
    return splits


def gen_mono_dataset(seed: int) -> DatasetManifest:
    """One clip per (pitch, harmonic count): 45 x 3 = 135 records."""
    rng = np.random.default_rng(seed)
    combos = [(p, h) for p in range(MIDI_RANGE[0], MIDI_RANGE[1] + 1) for h in H_GEN_CHOICES]
    drawn = []
    for pitch, h_gen in combos:
        env = _draw_envelope(rng)
        gain = rng.uniform(*MONO_GAIN_RANGE)
        clip_seed = int(rng.integers(0, 2**63))
        drawn.append((pitch, h_gen, env, gain, clip_seed))
    splits = _assign_splits(len(drawn), rng)
    clips = tuple(
        SynthClipMeta(
            clip_id=f"mono_p{pitch:03d}_h{h_gen:02d}",
            midi_pitches=(pitch,), n_harmonics=h_gen,
            note_gains=(gain,), seed=clip_seed, split=split, **env,
        )
        for (pitch, h_gen, env, gain, clip_seed), split in zip(drawn, splits)
    )
    return DatasetManifest(kind="synth-mono", seed=seed, clips=clips)


def _chord_pitches(root: int, size: int) -> tuple:
    """Stacked thirds above the root, folded down into the MIDI range."""
    pitches = []
    for off in CHORD_OFFSETS[:size]:
        p = root + off
        while p > MIDI_RANGE[1]:
            p -= 12
        pitches.append(p)
    return tuple(pitches)


def gen_poly_dataset(seed: int) -> DatasetManifest:
    """One chord per (root pitch, chord size): 45 x 4 = 180 records."""
    rng = np.random.default_rng(seed)
    drawn = []
    for root in range(MIDI_RANGE[0], MIDI_RANGE[1] + 1):
        for size in POLY_SIZES:
            env = _draw_envelope(rng)
            gains = tuple(float(g) for g in rng.uniform(*POLY_GAIN_RANGE, size=size))
            h_gen = H_GEN_CHOICES[int(rng.integers(len(H_GEN_CHOICES)))]
            clip_seed = int(rng.integers(0, 2**63))
            drawn.append((root, size, h_gen, env, gains, clip_seed))
    splits = _assign_splits(len(drawn), rng)
    clips = tuple(
        SynthClipMeta(
            clip_id=f"poly_p{root:03d}_i{size}",
            midi_pitches=_chord_pitches(root, size), n_harmonics=h_gen,
            note_gains=gains, seed=clip_seed, split=split, **env,
        )
        for (root, size, h_gen, env, gains, clip_seed), split in zip(drawn, splits)
    )
    return DatasetManifest(kind="synth-poly", seed=seed, clips=clips)


def ingest_corpus(
    corpus_dir, clip_seconds: float = 4.0, split_ratio: float = 0.9, seed: int = 0
) -> DatasetManifest:
    """Index a directory of WAV files as fixed-length clip references.

    Files are split train/test as whole files (a file never spans both
    splits); each contributes floor(duration / clip_seconds) clips.
    Unreadable files are skipped with a warning.
    """
    root = Path(corpus_dir)
    if not root.is_dir():
        raise DataError(f"not a directory: {corpus_dir}")
    if clip_seconds <= 0:
        raise UsageError("clip_seconds must be positive")
    paths = sorted(p for p in root.rglob("*") if p.suffix.lower() == ".wav")
    rng = np.random.default_rng(seed)
    readable = []
    for p in paths:
        try:
            buf = load_wav(p)
        except Exception as exc:  # noqa: BLE001 - any decode failure skips the file
            warnings.warn(f"skipping unreadable file {p}: {exc}", stacklevel=2)
            continue
        readable.append((p, buf.duration_s))
    order = rng.permutation(len(readable))
    n_train = int(np.floor(split_ratio * len(readable)))
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[idx] = "train" if rank < n_train else "test"
    clips = []
    for idx, (p, duration) in enumerate(readable):
        n_clips = int(np.floor(duration / clip_seconds))
        # id from the path relative to the corpus root so equal stems in
        # different subdirectories cannot collide
        base = str(p.relative_to(root).with_suffix("")).replace("/", "_")
        for j in range(n_clips):
            clips.append(IngestClip(
                clip_id=f"{base}_c{j:03d}",
                path=str(p),
                start_s=j * clip_seconds,
                duration_s=clip_seconds,
                split=split_of[idx],
            ))
    return DatasetManifest(kind="ingest", seed=seed, clips=tuple(clips))


# ---------------------------------------------------------------------------
# Unified clip loading
# ---------------------------------------------------------------------------


def render_clip(entry) -> tuple[AudioBuffer, object]:
    """Materialize any manifest entry as (audio, ground truth or None)."""
    if isinstance(entry, SynthClipMeta):
        if entry.n_notes == 1:
            return gen_mono_clip(entry)
        return gen_poly_clip(entry)
    if isinstance(entry, IngestClip):
        buf = load_wav(entry.path, target_rate=entry.sample_rate)
        i0 = int(round(entry.start_s * entry.sample_rate))
        i1 = i0 + int(round(entry.duration_s * entry.sample_rate))
        if i1 > len(buf.samples):
            raise DataError(f"{entry.clip_id}: segment extends past end of file")
        return AudioBuffer(buf.samples[i0:i1], entry.sample_rate), None
    raise UsageError(f"unknown manifest entry type {type(entry).__name__}")
