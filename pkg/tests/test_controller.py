"""Encoder-decoder controller tests: shapes, wiring, checkpoints, gradients."""

import numpy as np
import pytest

from bwe_lab import autodiff as ad
from bwe_lab import nn
from bwe_lab.audio import AudioBuffer
from bwe_lab.controller import (
    ModelConfig,
    decode_mono,
    decode_noise,
    decode_poly,
    encode,
    encode_batch,
    decode_mono_batch,
    encoder_features,
    f0_feature,
    init_model,
    load_checkpoint,
    loudness_feature,
    save_checkpoint,
)
from bwe_lab.dsp import LoudnessTrack, a_weighted_loudness, frame_count
from bwe_lab.errors import DataError, UsageError
from bwe_lab.pitch import MultiPitchTrack, PitchTrack
from bwe_lab.synth import ControlFrames

FS = 16000


def tiny_config(variant="mono_dec", **over):
    base = dict(variant=variant, n_harmonics=10, n_noise=9,
                gru_units=8, mlp_width=8, z_dim=8, max_voices=2)
    base.update(over)
    return ModelConfig(**base)


def make_clip(seconds=1.0, freq=440.0, amp=0.3):
    t = np.arange(int(FS * seconds)) / FS
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t), FS)


def conditioning(params, x):
    z = encode(x, params)
    loud = a_weighted_loudness(x)
    f0 = PitchTrack(np.full(z.n_frames, 440.0), hop=params.config.hop)
    return z, f0, loud


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


class TestModelConfig:
    def test_text_round_trip(self):
        cfg = tiny_config("poly_dec", cutoff_hz=1500.0)
        assert ModelConfig.from_text(cfg.canonical_text()) == cfg

    def test_file_round_trip(self, tmp_path):
        cfg = tiny_config("noise_only")
        p = tmp_path / "model.cfg"
        cfg.save(p)
        assert ModelConfig.load(p) == cfg

    def test_bad_header_rejected(self):
        with pytest.raises(DataError):
            ModelConfig.from_text("something else\nvariant='mono_dec'\n")

    def test_unknown_key_rejected(self):
        cfg = tiny_config()
        with pytest.raises(DataError):
            ModelConfig.from_text(cfg.canonical_text() + "bogus=1\n")

    def test_unknown_variant_rejected(self):
        with pytest.raises(UsageError):
            ModelConfig(variant="stereo_dec")

    def test_cutoff_must_be_below_nyquist(self):
        with pytest.raises(UsageError):
            tiny_config(cutoff_hz=9000.0)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


class TestInit:
    def test_same_seed_bitwise_identical(self):
        cfg = tiny_config()
        a = init_model(cfg, seed=11)
        b = init_model(cfg, seed=11)
        assert a.store.names() == b.store.names()
        for k in a.store.names():
            assert np.array_equal(a.store[k].data, b.store[k].data)

    def test_different_seeds_differ(self):
        cfg = tiny_config()
        a = init_model(cfg, seed=11)
        b = init_model(cfg, seed=12)
        assert any(
            not np.array_equal(a.store[k].data, b.store[k].data)
            for k in a.store.names()
        )

    def test_voice_slot_counts(self):
        assert len(init_model(tiny_config("mono_dec"), 0).mlp_f0) == 1
        assert len(init_model(tiny_config("noise_only"), 0).mlp_f0) == 0
        poly = init_model(tiny_config("poly_dec", max_voices=3), 0)
        assert len(poly.mlp_f0) == 3
        assert len(poly.head_harm) == 3


# ---------------------------------------------------------------------------
# Conditioning features
# ---------------------------------------------------------------------------


class TestFeatures:
    def test_f0_feature_is_midi_over_127(self):
        tr = PitchTrack(np.full(5, 440.0), hop=256)
        feat = f0_feature(tr)
        assert feat.shape == (5, 1)
        np.testing.assert_allclose(feat, 69.0 / 127.0)

    def test_f0_feature_holds_through_gaps(self):
        tr = PitchTrack(np.array([0.0, 0.0, 440.0, 0.0, 880.0]), hop=256)
        feat = f0_feature(tr)[:, 0]
        assert feat[0] == 0.0 and feat[1] == 0.0  # leading silence stays zero
        np.testing.assert_allclose(feat[2], 69.0 / 127.0)
        np.testing.assert_allclose(feat[3], 69.0 / 127.0)  # held
        np.testing.assert_allclose(feat[4], 81.0 / 127.0)

    def test_loudness_feature_range_endpoints(self):
        lt = LoudnessTrack(np.array([-90.0, -45.0, 0.0]), hop=256)
        np.testing.assert_allclose(loudness_feature(lt)[:, 0], [0.0, 0.5, 1.0])

    def test_encoder_features_frame_grid_matches_loudness(self):
        x = make_clip(0.8)
        cfg = tiny_config()
        feats = encoder_features(x, cfg)
        loud = a_weighted_loudness(x)
        assert feats.shape == (len(loud.values), cfg.n_mfcc)
        assert feats.shape[0] == frame_count(len(x.samples), cfg.hop)


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


class TestEncode:
    def test_latent_shape_full_size(self):
        cfg = ModelConfig(variant="mono_dec")
        params = init_model(cfg, seed=0)
        x = make_clip(4.0)
        z = encode(x, params)
        assert z.array.shape == (250, 512)

    def test_deterministic(self):
        params = init_model(tiny_config(), seed=5)
        x = make_clip(0.5)
        a = encode(x, params).array
        b = encode(x, params).array
        assert np.array_equal(a, b)

    def test_distinct_inputs_distinct_latents(self):
        params = init_model(tiny_config(), seed=5)
        za = encode(make_clip(0.5, freq=300.0), params).array
        zb = encode(make_clip(0.5, freq=1200.0), params).array
        assert not np.allclose(za, zb)

    def test_sample_rate_mismatch_rejected(self):
        params = init_model(tiny_config(), seed=0)
        x = AudioBuffer(np.zeros(8000), 8000)
        with pytest.raises(UsageError):
            encode(x, params)


# ---------------------------------------------------------------------------
# Mono decoder
# ---------------------------------------------------------------------------


class TestDecodeMono:
    def test_output_shapes_full_size(self):
        cfg = ModelConfig(variant="mono_dec")
        params = init_model(cfg, seed=0)
        x = make_clip(4.0)
        z, f0, loud = conditioning(params, x)
        ctrl = decode_mono(z, f0, loud, params)
        assert isinstance(ctrl, ControlFrames)
        a = ctrl.harmonic_amps.data
        n = ctrl.noise_coeffs.data
        assert a.shape == (250, 100)
        assert n.shape == (250, 65)

    def test_output_ranges(self):
        params = init_model(tiny_config(), seed=1)
        z, f0, loud = conditioning(params, make_clip())
        ctrl = decode_mono(z, f0, loud, params)
        a = ctrl.harmonic_amps.data
        n = ctrl.noise_coeffs.data
        assert np.all(a >= 0) and np.all(np.isfinite(a))
        # positive-sigmoid output lives in (1e-7, 2 + 1e-7)
        assert np.all(n > 0) and np.all(n < 2.0 + 1e-6)

    def test_zeroed_head_gives_uniform_distribution(self):
        # zero head weights: softmax is uniform, global amp is sigmoid(0)
        params = init_model(tiny_config(), seed=1)
        c = params.config
        params.store.set_values({
            "dec.head_harm0.w": np.zeros((c.mlp_width, 1 + c.n_harmonics)),
            "dec.head_harm0.b": np.zeros(1 + c.n_harmonics),
        })
        z, f0, loud = conditioning(params, make_clip())
        amps = decode_mono(z, f0, loud, params).harmonic_amps.data
        expected = (2.0 * 0.5 ** np.log(10.0) + 1e-7) / c.n_harmonics
        np.testing.assert_allclose(amps, expected, rtol=1e-5)

    def test_harmonic_rows_sum_to_global_amp_bound(self):
        # softmax rows sum to 1, so row sums equal the sigmoid amp: < 2.1
        params = init_model(tiny_config(), seed=2)
        z, f0, loud = conditioning(params, make_clip())
        amps = decode_mono(z, f0, loud, params).harmonic_amps.data
        sums = amps.sum(axis=1)
        assert np.all(sums > 0) and np.all(sums < 2.0 + 1e-5)

    def test_deterministic(self):
        params = init_model(tiny_config(), seed=3)
        z, f0, loud = conditioning(params, make_clip())
        a = decode_mono(z, f0, loud, params).harmonic_amps.data
        b = decode_mono(z, f0, loud, params).harmonic_amps.data
        assert np.array_equal(a, b)

    def test_pitch_changes_output(self):
        # at zero-bias init the first layer norm cancels the scale of a
        # positive scalar input, so nudge one bias off zero first
        params = init_model(tiny_config(), seed=3)
        params.store.set_values({"dec.f0_mlp0.l0.b": np.linspace(-0.4, 0.4, 8)})
        z, f0, loud = conditioning(params, make_clip())
        other = PitchTrack(np.full(f0.n_frames, 220.0), hop=256)
        a = decode_mono(z, f0, loud, params).harmonic_amps.data
        b = decode_mono(z, other, loud, params).harmonic_amps.data
        assert not np.allclose(a, b)

    def test_extreme_loudness_stays_finite(self):
        params = init_model(tiny_config(), seed=4)
        z, f0, _ = conditioning(params, make_clip())
        for db in (-90.0, 0.0):
            loud = LoudnessTrack(np.full(z.n_frames, db), hop=256)
            ctrl = decode_mono(z, f0, loud, params)
            assert np.all(np.isfinite(ctrl.harmonic_amps.data))
            assert np.all(np.isfinite(ctrl.noise_coeffs.data))

    def test_variant_guard(self):
        params = init_model(tiny_config("noise_only"), seed=0)
        z, f0, loud = conditioning(params, make_clip())
        with pytest.raises(UsageError):
            decode_mono(z, f0, loud, params)

    def test_frame_mismatch_rejected(self):
        params = init_model(tiny_config(), seed=0)
        z, f0, loud = conditioning(params, make_clip())
        short = PitchTrack(f0.f0[:-3], hop=256)
        with pytest.raises(UsageError):
            decode_mono(z, short, loud, params)


# ---------------------------------------------------------------------------
# Noise-only decoder
# ---------------------------------------------------------------------------


class TestDecodeNoise:
    def test_harmonics_identically_zero(self):
        params = init_model(tiny_config("noise_only"), seed=1)
        x = make_clip()
        z = encode(x, params)
        loud = a_weighted_loudness(x)
        ctrl = decode_noise(z, loud, params)
        harm = np.asarray(ctrl.harmonic_amps)
        assert np.all(harm == 0.0)
        n = ctrl.noise_coeffs.data
        assert n.shape == (z.n_frames, 9)
        assert np.all(n > 0) and np.all(n < 2.0 + 1e-6)

    def test_variant_guard(self):
        params = init_model(tiny_config("mono_dec"), seed=1)
        x = make_clip()
        z = encode(x, params)
        loud = a_weighted_loudness(x)
        with pytest.raises(UsageError):
            decode_noise(z, loud, params)


# ---------------------------------------------------------------------------
# Polyphonic decoder
# ---------------------------------------------------------------------------


class TestDecodePoly:
    def make(self, seed=1, max_voices=2):
        params = init_model(tiny_config("poly_dec", max_voices=max_voices), seed=seed)
        x = make_clip()
        z = encode(x, params)
        loud = a_weighted_loudness(x)
        return params, z, loud

    def track(self, hz, n):
        return PitchTrack(np.full(n, float(hz)), hop=256)

    def test_all_slots_computed(self):
        params, z, loud = self.make()
        mf = MultiPitchTrack((self.track(440, z.n_frames),))
        pc = decode_poly(z, mf, loud, params)
        # one active track still yields max_voices amp sets; extras are
        # computed against a zero f0 feature and ignored downstream
        assert pc.n_voices == 2
        assert pc.voices[0].data.shape == (z.n_frames, 10)
        assert pc.noise_coeffs.data.shape == (z.n_frames, 9)

    def test_missing_slot_equals_zero_track(self):
        params, z, loud = self.make()
        a = self.track(440, z.n_frames)
        zero = self.track(0, z.n_frames)
        short = decode_poly(z, MultiPitchTrack((a,)), loud, params)
        padded = decode_poly(z, MultiPitchTrack((a, zero)), loud, params)
        for i in range(2):
            assert np.array_equal(short.voices[i].data, padded.voices[i].data)
        assert np.array_equal(short.noise_coeffs.data, padded.noise_coeffs.data)

    def test_permuting_tracks_changes_slot_outputs(self):
        params, z, loud = self.make()
        # break the zero-bias scale invariance so slot inputs matter
        params.store.set_values({
            "dec.f0_mlp0.l0.b": np.linspace(-0.4, 0.4, 8),
            "dec.f0_mlp1.l0.b": np.linspace(0.4, -0.4, 8),
        })
        a = self.track(440, z.n_frames)
        b = self.track(660, z.n_frames)
        ab = decode_poly(z, MultiPitchTrack((a, b)), loud, params)
        ba = decode_poly(z, MultiPitchTrack((b, a)), loud, params)
        # head 0 sees f0=440 in one call and f0=660 in the other
        assert not np.allclose(ab.voices[0].data, ba.voices[0].data)
        assert not np.allclose(ab.voices[1].data, ba.voices[1].data)

    def test_deterministic(self):
        params, z, loud = self.make(seed=9)
        mf = MultiPitchTrack((self.track(440, z.n_frames), self.track(550, z.n_frames)))
        p1 = decode_poly(z, mf, loud, params)
        p2 = decode_poly(z, mf, loud, params)
        assert np.array_equal(p1.voices[0].data, p2.voices[0].data)
        assert np.array_equal(p1.noise_coeffs.data, p2.noise_coeffs.data)

    def test_too_many_tracks_rejected(self):
        params, z, loud = self.make(max_voices=2)
        tracks = tuple(self.track(200 + 100 * i, z.n_frames) for i in range(3))
        with pytest.raises(UsageError):
            decode_poly(z, MultiPitchTrack(tracks), loud, params)

    def test_variant_guard(self):
        params = init_model(tiny_config("mono_dec"), seed=1)
        x = make_clip()
        z = encode(x, params)
        loud = a_weighted_loudness(x)
        mf = MultiPitchTrack((self.track(440, z.n_frames),))
        with pytest.raises(UsageError):
            decode_poly(z, mf, loud, params)

    def test_voice_controls_pairs_amps_with_silent_noise(self):
        params, z, loud = self.make()
        mf = MultiPitchTrack((self.track(440, z.n_frames),))
        pc = decode_poly(z, mf, loud, params)
        vc = pc.voice_controls(0)
        assert np.array_equal(vc.harmonic_amps.data, pc.voices[0].data)
        assert np.all(np.asarray(vc.noise_coeffs) == 0.0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params = init_model(tiny_config("poly_dec", max_voices=3), seed=21)
        p = tmp_path / "model.ckpt"
        save_checkpoint(params, p)
        back = load_checkpoint(p)
        assert back.config == params.config
        assert back.store.seed == 21
        assert back.store.names() == params.store.names()
        for k in params.store.names():
            assert np.array_equal(back.store[k].data, params.store[k].data)
            assert back.store[k].data.dtype == params.store[k].data.dtype

    def test_loaded_model_reproduces_outputs(self, tmp_path):
        params = init_model(tiny_config(), seed=8)
        x = make_clip()
        z, f0, loud = conditioning(params, x)
        want = decode_mono(z, f0, loud, params).harmonic_amps.data
        p = tmp_path / "model.ckpt"
        save_checkpoint(params, p)
        back = load_checkpoint(p)
        z2 = encode(x, back)
        got = decode_mono(z2, f0, loud, back).harmonic_amps.data
        assert np.array_equal(want, got)

    def test_tampered_magic_rejected(self, tmp_path):
        params = init_model(tiny_config(), seed=0)
        p = tmp_path / "model.ckpt"
        save_checkpoint(params, p)
        raw = bytearray(p.read_bytes())
        raw[0] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(DataError):
            load_checkpoint(p)

    def test_tampered_config_fails_hash(self, tmp_path):
        params = init_model(tiny_config(gru_units=8), seed=0)
        p = tmp_path / "model.ckpt"
        save_checkpoint(params, p)
        raw = p.read_bytes()
        assert b"gru_units=8" in raw
        p.write_bytes(raw.replace(b"gru_units=8", b"gru_units=9", 1))
        with pytest.raises(DataError):
            load_checkpoint(p)

    def test_truncated_rejected(self, tmp_path):
        params = init_model(tiny_config(), seed=0)
        p = tmp_path / "model.ckpt"
        save_checkpoint(params, p)
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(DataError):
            load_checkpoint(p)

    def test_cross_variant_load_rejected(self, tmp_path):
        params = init_model(tiny_config("noise_only"), seed=0)
        p = tmp_path / "model.ckpt"
        save_checkpoint(params, p)
        with pytest.raises(UsageError):
            load_checkpoint(p, expect_variant="mono_dec")
        # without the expectation the load is fine
        assert load_checkpoint(p).config.variant == "noise_only"

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "absent.ckpt")


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


class TestGradients:
    def test_every_parameter_reaches_loss(self):
        cfg = tiny_config()
        params = init_model(cfg, seed=3, dtype=np.float64)
        x = make_clip(0.25)
        z, f0, loud = conditioning(params, x)
        ctrl = decode_mono(z, f0, loud, params)
        loss = ad.sum_(ctrl.harmonic_amps * ctrl.harmonic_amps) + ad.sum_(ctrl.noise_coeffs)
        loss.backward()
        for k in params.store.names():
            g = params.store[k].grad
            assert g is not None and np.abs(g).max() > 0, k

    def test_full_finite_difference_check(self):
        # every scalar parameter, central differences on a 0.25 s clip
        cfg = tiny_config()
        params = init_model(cfg, seed=3, dtype=np.float64)
        x = make_clip(0.25)
        feats = encoder_features(x, cfg)[:, None, :]
        t = feats.shape[0]
        f0f = f0_feature(PitchTrack(np.full(t, 440.0), hop=256))[:, None, :]
        lf = loudness_feature(a_weighted_loudness(x))[:, None, :]

        def f():
            z = encode_batch(feats, params)
            amps, noise = decode_mono_batch(z, f0f, lf, params)
            return ad.sum_(amps * amps) + ad.sum_(noise * noise)

        report = nn.grad_check(f, params.store)
        assert report.fraction_within(1e-3) >= 0.95, report.summary()
