"""Synthetic generators, manifests, and corpus ingestion."""

import numpy as np
import pytest

from bwe_lab.audio import AudioBuffer, save_wav
from bwe_lab.data import (
    DatasetManifest,
    IngestClip,
    SynthClipMeta,
    _mono_parts,
    gen_mono_clip,
    gen_mono_dataset,
    gen_poly_clip,
    gen_poly_dataset,
    ingest_corpus,
    poly_note_metas,
    render_clip,
)
from bwe_lab.errors import DataError, UsageError
from bwe_lab.pitch import MultiPitchTrack, PitchTrack, oracle_pitch

FS = 16000


def mono_meta(pitch=60, h=10, seed=123, **over):
    base = dict(clip_id="m0", midi_pitches=(pitch,), n_harmonics=h,
                attack_s=0.05, decay_s=0.1, sustain_level=0.8, sustain_s=1.5,
                note_gains=(0.9,), seed=seed, split="train")
    base.update(over)
    return SynthClipMeta(**base)


def poly_meta(pitches=(60, 64, 67), seed=77, **over):
    base = dict(clip_id="p0", midi_pitches=pitches, n_harmonics=10,
                attack_s=0.05, decay_s=0.1, sustain_level=0.8, sustain_s=1.5,
                note_gains=(0.8,) * len(pitches), seed=seed, split="train")
    base.update(over)
    return SynthClipMeta(**base)


class TestMeta:
    def test_pitch_range_enforced(self):
        with pytest.raises(UsageError):
            mono_meta(pitch=47)
        with pytest.raises(UsageError):
            mono_meta(pitch=93)

    def test_h_gen_restricted(self):
        with pytest.raises(UsageError):
            mono_meta(h=12)

    def test_gain_ranges_differ_by_arity(self):
        with pytest.raises(UsageError):
            mono_meta(note_gains=(0.6,))  # mono floor is 0.75
        poly_meta(note_gains=(0.6, 0.6, 0.6))  # poly floor is 0.5
        with pytest.raises(UsageError):
            poly_meta(note_gains=(0.4, 0.6, 0.6))

    def test_gain_count_must_match(self):
        with pytest.raises(UsageError):
            poly_meta(note_gains=(0.8, 0.8))

    def test_f0_list_matches_midi(self):
        m = mono_meta(pitch=69)
        np.testing.assert_allclose(m.f0_hz_list, [440.0])


class TestMonoClip:
    def test_duration_and_rate(self):
        buf, truth = gen_mono_clip(mono_meta())
        assert buf.sample_rate == FS
        assert len(buf.samples) == FS * 4
        assert isinstance(truth, PitchTrack)

    def test_truth_is_constant_f0(self):
        buf, truth = gen_mono_clip(mono_meta(pitch=48))
        assert np.all(truth.f0 == truth.f0[0])
        # C3 reference frequency
        assert abs(truth.f0[0] - 130.81) < 0.1

    def test_harmonic_amplitude_rolloff(self):
        # steady sustain portion: harmonic 2 sits 12.04 dB under harmonic 1
        meta = mono_meta(pitch=60, attack_s=0.01, decay_s=0.01, sustain_level=1.0,
                         sustain_s=2.0, note_gains=(1.0,), seed=5)
        harm, _ = _mono_parts(meta)
        f0 = 440.0 * 2.0 ** ((60 - 69) / 12)
        seg = harm[8000:8000 + 16384]
        win = np.hanning(len(seg))
        spec = np.abs(np.fft.rfft(seg * win))
        freqs = np.fft.rfftfreq(len(seg), 1 / FS)
        def peak_at(f):
            k = np.argmin(np.abs(freqs - f))
            return spec[k - 2:k + 3].max()
        ratio_db = 20 * np.log10(peak_at(2 * f0) / peak_at(f0))
        assert abs(ratio_db - (-12.04)) < 0.5

    def test_snr_is_10db(self):
        for seed in (1, 2, 3):
            harm, noise = _mono_parts(mono_meta(seed=seed))
            snr = 10 * np.log10(np.mean(harm**2) / np.mean(noise**2))
            assert abs(snr - 10.0) < 0.1

    def test_parts_sum_to_clip(self):
        meta = mono_meta(seed=9)
        harm, noise = _mono_parts(meta)
        buf, _ = gen_mono_clip(meta)
        assert np.array_equal(buf.samples, harm + noise)

    def test_peak_within_full_scale(self):
        for seed in range(6):
            buf, _ = gen_mono_clip(mono_meta(seed=seed, note_gains=(1.0,)))
            assert buf.peak() <= 1.0 + 1e-12

    def test_deterministic(self):
        a, _ = gen_mono_clip(mono_meta(seed=4))
        b, _ = gen_mono_clip(mono_meta(seed=4))
        assert np.array_equal(a.samples, b.samples)
        c, _ = gen_mono_clip(mono_meta(seed=5))
        assert not np.array_equal(a.samples, c.samples)

    def test_nyquist_guard_for_high_pitch(self):
        # MIDI 92 with 20 harmonics: partials above 8 kHz must be absent
        meta = mono_meta(pitch=92, h=20, seed=11)
        harm, _ = _mono_parts(meta)
        spec = np.abs(np.fft.rfft(harm))
        freqs = np.fft.rfftfreq(len(harm), 1 / FS)
        f0 = 440.0 * 2.0 ** ((92 - 69) / 12)
        # energy near the 5th partial (8306 Hz, aliased if present) ~ zero
        band = (freqs > 7950.0)
        assert spec[band].max() < 1e-6 * spec.max()

    def test_rejects_poly_meta(self):
        with pytest.raises(UsageError):
            gen_mono_clip(poly_meta())


class TestPolyClip:
    def test_mix_is_exact_weighted_sum(self):
        meta = poly_meta(seed=31)
        notes = [gen_mono_clip(nm)[0].samples for nm in poly_note_metas(meta)]
        expected = sum(g * x for g, x in zip(meta.note_gains, notes))
        peak = np.max(np.abs(expected))
        if peak > 1.0:
            expected = expected / peak
        buf, _ = gen_poly_clip(meta)
        assert np.array_equal(buf.samples, expected)

    def test_truth_track_count(self):
        for pitches in ((60, 64), (60, 64, 67), (60, 64, 67, 71), (60, 64, 67, 71, 74)):
            meta = poly_meta(pitches=pitches, note_gains=(0.7,) * len(pitches))
            _, truth = gen_poly_clip(meta)
            assert isinstance(truth, MultiPitchTrack)
            assert truth.n_voices == len(pitches)

    def test_duplicate_pitch_class_rejected(self):
        # C3 and C4 share a pitch class
        meta = poly_meta(pitches=(48, 60), note_gains=(0.7, 0.7))
        with pytest.raises(UsageError):
            gen_poly_clip(meta)

    def test_note_count_bounds(self):
        meta = mono_meta()
        with pytest.raises(UsageError):
            gen_poly_clip(meta)

    def test_deterministic(self):
        a, _ = gen_poly_clip(poly_meta(seed=8))
        b, _ = gen_poly_clip(poly_meta(seed=8))
        assert np.array_equal(a.samples, b.samples)

    def test_peak_guard(self):
        meta = poly_meta(pitches=(60, 64, 67, 71, 74), note_gains=(1.0,) * 5, seed=2)
        buf, _ = gen_poly_clip(meta)
        assert buf.peak() <= 1.0 + 1e-12


class TestMonoDataset:
    def test_count_and_split_sizes(self):
        man = gen_mono_dataset(seed=7)
        assert len(man) == 135
        assert len(man.train_clips) == 121
        assert len(man.test_clips) == 14

    def test_covers_all_combinations(self):
        man = gen_mono_dataset(seed=7)
        combos = {(c.midi_pitches[0], c.n_harmonics) for c in man.clips}
        assert len(combos) == 135
        pitches = {p for p, _ in combos}
        assert min(pitches) == 48 and max(pitches) == 92

    def test_same_seed_identical(self):
        a = gen_mono_dataset(seed=3)
        b = gen_mono_dataset(seed=3)
        assert a.canonical_text() == b.canonical_text()
        assert a.content_hash() == b.content_hash()

    def test_different_seed_differs(self):
        assert gen_mono_dataset(1).content_hash() != gen_mono_dataset(2).content_hash()


class TestPolyDataset:
    def test_count_and_split_sizes(self):
        man = gen_poly_dataset(seed=7)
        assert len(man) == 180
        assert len(man.train_clips) == 162
        assert len(man.test_clips) == 18

    def test_all_clips_satisfy_chord_constraints(self):
        man = gen_poly_dataset(seed=7)
        for c in man.clips:
            assert 2 <= c.n_notes <= 5
            classes = [p % 12 for p in c.midi_pitches]
            assert len(set(classes)) == len(classes)
            assert all(48 <= p <= 92 for p in c.midi_pitches)

    def test_renders_without_error(self):
        man = gen_poly_dataset(seed=7)
        buf, truth = gen_poly_clip(man.clips[0])
        assert len(buf.samples) == FS * 4
        assert truth.n_voices == man.clips[0].n_notes

    def test_deterministic(self):
        assert gen_poly_dataset(5).content_hash() == gen_poly_dataset(5).content_hash()


class TestManifestIO:
    def test_round_trip_bit_exact(self, tmp_path):
        man = gen_mono_dataset(seed=11)
        p = tmp_path / "data.manifest"
        man.save(p)
        back = DatasetManifest.load(p)
        assert back == man
        assert back.content_hash() == man.content_hash()

    def test_poly_round_trip(self, tmp_path):
        man = gen_poly_dataset(seed=11)
        p = tmp_path / "data.manifest"
        man.save(p)
        back = DatasetManifest.load(p)
        assert back == man

    def test_ground_truth_survives_round_trip(self, tmp_path):
        man = gen_mono_dataset(seed=11)
        p = tmp_path / "data.manifest"
        man.save(p)
        back = DatasetManifest.load(p)
        a, _ = gen_mono_clip(man.clips[0])
        b, _ = gen_mono_clip(back.clips[0])
        assert np.array_equal(a.samples, b.samples)

    def test_header_rejected(self, tmp_path):
        p = tmp_path / "bad.manifest"
        p.write_text("something\n")
        with pytest.raises(DataError):
            DatasetManifest.load(p)

    def test_count_mismatch_rejected(self):
        man = gen_mono_dataset(seed=1)
        text = man.canonical_text().replace("clips: 135", "clips: 10")
        with pytest.raises(DataError):
            DatasetManifest.from_text(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            DatasetManifest.load(tmp_path / "none.manifest")

    def test_duplicate_ids_rejected(self):
        c = mono_meta()
        with pytest.raises(DataError):
            DatasetManifest(kind="synth-mono", seed=0, clips=(c, c))

    def test_oracle_pitch_reads_manifest_meta(self):
        man = gen_poly_dataset(seed=2)
        meta = man.clips[0]
        truth = oracle_pitch(meta, n_frames=250)
        assert truth.n_voices == meta.n_notes


class TestIngest:
    def make_corpus(self, tmp_path, n_files=4, seconds=9.0):
        d = tmp_path / "corpus"
        d.mkdir()
        rng = np.random.default_rng(0)
        for i in range(n_files):
            x = 0.1 * rng.standard_normal(int(FS * seconds))
            save_wav(d / f"take{i}.wav", AudioBuffer(x, FS))
        return d

    def test_clip_arithmetic(self, tmp_path):
        d = self.make_corpus(tmp_path, n_files=2, seconds=9.0)
        man = ingest_corpus(d, clip_seconds=4.0, seed=1)
        # floor(9 / 4) = 2 clips per file
        assert len(man) == 4
        for c in man.clips:
            assert c.duration_s == 4.0

    def test_file_level_split(self, tmp_path):
        d = self.make_corpus(tmp_path, n_files=5, seconds=9.0)
        man = ingest_corpus(d, clip_seconds=4.0, split_ratio=0.8, seed=3)
        by_path = {}
        for c in man.clips:
            by_path.setdefault(c.path, set()).add(c.split)
        assert all(len(s) == 1 for s in by_path.values())
        train_files = sum(1 for s in by_path.values() if s == {"train"})
        assert train_files == 4  # floor(0.8 * 5)

    def test_unreadable_skipped_with_warning(self, tmp_path):
        d = self.make_corpus(tmp_path, n_files=2, seconds=5.0)
        (d / "broken.wav").write_bytes(b"RIFFnope")
        with pytest.warns(UserWarning, match="broken"):
            man = ingest_corpus(d, clip_seconds=4.0, seed=1)
        assert all("broken" not in c.clip_id for c in man.clips)

    def test_deterministic(self, tmp_path):
        d = self.make_corpus(tmp_path, n_files=3)
        a = ingest_corpus(d, seed=9)
        b = ingest_corpus(d, seed=9)
        assert a.canonical_text() == b.canonical_text()

    def test_round_trip(self, tmp_path):
        d = self.make_corpus(tmp_path, n_files=2)
        man = ingest_corpus(d, seed=1)
        p = tmp_path / "ingest.manifest"
        man.save(p)
        assert DatasetManifest.load(p) == man

    def test_render_clip_segments(self, tmp_path):
        d = self.make_corpus(tmp_path, n_files=1, seconds=9.0)
        man = ingest_corpus(d, clip_seconds=4.0, seed=1)
        buf, truth = render_clip(man.clips[1])
        assert truth is None
        assert len(buf.samples) == FS * 4
        # second segment starts 4 s in
        whole, _ = render_clip(IngestClip("w", man.clips[1].path, 0.0, 9.0, "train"))
        assert np.array_equal(buf.samples, whole.samples[FS * 4:FS * 8])

    def test_missing_dir(self, tmp_path):
        with pytest.raises(DataError):
            ingest_corpus(tmp_path / "absent")


class TestRenderClip:
    def test_dispatch_mono_and_poly(self):
        m_mono = mono_meta()
        buf, truth = render_clip(m_mono)
        assert isinstance(truth, PitchTrack)
        m_poly = poly_meta()
        buf, truth = render_clip(m_poly)
        assert isinstance(truth, MultiPitchTrack)

    def test_unknown_entry_rejected(self):
        with pytest.raises(UsageError):
            render_clip({"id": "x"})
