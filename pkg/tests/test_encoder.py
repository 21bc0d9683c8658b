"""Toy speaker encoders: forward map, hand VJPs, training, and handles.

The backward pass is checked against central finite differences on
small instances, which is the same oracle the attack-chain tests use.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvforge.audio import StftConfig, Waveform, feature_normalize
from mvforge.encoder import (
    STOCK_ARCHS,
    EncoderHandle,
    ToyEncoder,
    blackbox_score,
    cosine,
    embed_waveform,
    encode,
    encode_backward,
    features_grad,
    make_encoder,
    raw_features,
    train_encoder,
    waveform_grad,
)
from mvforge.voicegen import PopulationSpec, generate_population

SMALL = StftConfig(window_len=64, hop=32, fft_size=64)


def tiny_encoder(k=5, h=4, e=3, seed=0):
    return make_encoder("tiny", input_kind="spectrogram", hidden_dim=h,
                        embed_dim=e, init_seed=seed,
                        stft=StftConfig(window_len=2 * (k - 1), hop=k - 1,
                                        fft_size=2 * (k - 1)))


def directional_fd(f, x, d, eps=1e-6):
    return (f(x + eps * d) - f(x - eps * d)) / (2 * eps)


@pytest.fixture(scope="module")
def population():
    return generate_population(PopulationSpec(10, 3, seed=13))


@pytest.fixture(scope="module")
def encoder():
    return make_encoder("spec-a")


class TestMakeEncoder:
    def test_stock_archs_resolve(self):
        for arch, (kind, seed) in STOCK_ARCHS.items():
            enc = make_encoder(arch)
            assert enc.input_kind == kind
            assert enc.init_seed == seed
            assert enc.feature_dim == (257 if kind == "spectrogram" else 24)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            make_encoder("custom", input_kind="mfcc")

    def test_same_arch_same_weights(self):
        a, b = make_encoder("spec-a"), make_encoder("spec-a")
        np.testing.assert_array_equal(a.w1, b.w1)
        np.testing.assert_array_equal(a.w2, b.w2)

    def test_different_seeds_differ(self):
        a = make_encoder("x", input_kind="spectrogram", init_seed=1)
        b = make_encoder("x", input_kind="spectrogram", init_seed=2)
        assert not np.array_equal(a.w1, b.w1)


class TestEncode:
    def test_unit_norm_output(self):
        enc = tiny_encoder()
        rng = np.random.default_rng(0)
        for _ in range(5):
            f = encode(enc, rng.standard_normal((5, 7)))
            assert np.linalg.norm(f) == pytest.approx(1.0, abs=1e-6)

    def test_frame_permutation_invariance(self):
        """Mean pooling ignores frame order."""
        enc = tiny_encoder()
        rng = np.random.default_rng(1)
        a = rng.standard_normal((5, 9))
        perm = rng.permutation(9)
        np.testing.assert_allclose(encode(enc, a), encode(enc, a[:, perm]),
                                   atol=1e-12)

    def test_temporal_duplication_invariance(self):
        """encode(A ++ A) == encode(A): the pooled mean is unchanged."""
        enc = tiny_encoder()
        a = np.random.default_rng(2).standard_normal((5, 6))
        np.testing.assert_allclose(encode(enc, a),
                                   encode(enc, np.concatenate([a, a], axis=1)),
                                   atol=1e-9)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            encode(tiny_encoder(), np.zeros((7, 4)))

    def test_embed_waveform_scale_invariant(self):
        """Per-frame standardization cancels global amplitude."""
        enc = make_encoder("spec-a")
        w = Waveform(0.4 * np.sin(np.linspace(0, 700, 4000)))
        half = Waveform(0.5 * w.samples)
        np.testing.assert_allclose(embed_waveform(enc, w),
                                   embed_waveform(enc, half), atol=1e-9)


class TestEncodeBackward:
    def test_zero_upstream_gives_zero_gradient(self):
        enc = tiny_encoder()
        a = np.random.default_rng(3).standard_normal((5, 6))
        g = encode_backward(enc, a, np.zeros(3))
        np.testing.assert_array_equal(g, 0)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_matches_finite_differences(self, seed):
        """Analytic VJP equals central differences, rel err <= 1e-4."""
        rng = np.random.default_rng(seed)
        enc = tiny_encoder(seed=int(seed % 1000))
        a = rng.standard_normal((5, 6))
        upstream = rng.standard_normal(3)

        def f(x):
            return float(encode(enc, x) @ upstream)

        g = encode_backward(enc, a, upstream)
        d = rng.standard_normal((5, 6))
        fd = directional_fd(f, a, d)
        assert abs(fd - (g * d).sum()) <= 1e-4 * max(abs(fd), 1e-8)

    def test_duplicated_frames_halve_per_frame_gradient(self):
        """Doubling T doubles the pooling denominator."""
        enc = tiny_encoder()
        rng = np.random.default_rng(4)
        a = rng.standard_normal((5, 6))
        upstream = rng.standard_normal(3)
        g1 = encode_backward(enc, a, upstream)
        g2 = encode_backward(enc, np.concatenate([a, a], axis=1), upstream)
        np.testing.assert_allclose(g2[:, :6], 0.5 * g1, atol=1e-12)
        np.testing.assert_allclose(g2[:, 6:], 0.5 * g1, atol=1e-12)


class TestWaveformChainGradients:
    def test_waveform_grad_matches_fd_both_kinds(self):
        """Full chain (STFT -> features -> normalize -> encode) VJP."""
        rng = np.random.default_rng(5)
        x = 0.3 * rng.uniform(-1, 1, 400)
        for kind, bands in (("spectrogram", 24), ("filterbank", 6)):
            enc = make_encoder("probe", input_kind=kind, hidden_dim=4,
                               embed_dim=3, init_seed=9, stft=SMALL, bands=bands)
            upstream = rng.standard_normal(3)

            def f(s):
                return float(embed_waveform(enc, Waveform(np.clip(s, -1, 1))) @ upstream)

            g = waveform_grad(enc, x, upstream)
            for _ in range(3):
                d = rng.standard_normal(400)
                fd = directional_fd(f, x, d)
                assert abs(fd - g @ d) <= 1e-4 * max(abs(fd), 1e-8), kind

    def test_features_grad_matches_fd(self):
        rng = np.random.default_rng(6)
        enc = tiny_encoder()
        raw = rng.uniform(0.1, 2.0, (5, 6))
        upstream = rng.standard_normal(3)

        def f(r):
            return float(encode(enc, feature_normalize(r)) @ upstream)

        g = features_grad(enc, raw, upstream)
        d = rng.standard_normal((5, 6))
        fd = directional_fd(f, raw, d)
        assert abs(fd - (g * d).sum()) <= 1e-4 * max(abs(fd), 1e-8)


class TestTrainEncoder:
    def test_loss_decreases_and_accuracy_beats_chance(self, population):
        enc = make_encoder("spec-a")
        trained, hist = train_encoder(enc, population, epochs=20, lr=0.05,
                                      rng=np.random.default_rng(1))
        losses = hist["loss"]
        assert np.isfinite(losses).all()
        assert losses[-1] < losses[0]
        assert hist["train_accuracy"] > 1 / len(population)

    def test_training_is_deterministic(self, population):
        runs = []
        for _ in range(2):
            enc = make_encoder("spec-a")
            trained, _ = train_encoder(enc, population, epochs=3, lr=0.05,
                                       rng=np.random.default_rng(7))
            runs.append(trained)
        np.testing.assert_array_equal(runs[0].w1, runs[1].w1)
        np.testing.assert_array_equal(runs[0].w2, runs[1].w2)

    def test_head_discarded(self, population):
        trained, _ = train_encoder(make_encoder("spec-a"), population,
                                   epochs=2, lr=0.05, rng=np.random.default_rng(2))
        assert trained.classifier_head is None

    def test_single_speaker_rejected(self, population):
        sid = next(iter(population))
        with pytest.raises(ValueError):
            train_encoder(make_encoder("spec-a"), {sid: population[sid]},
                          epochs=1, lr=0.05, rng=np.random.default_rng(3))

    def test_embeddings_separate_speakers(self, population):
        """Trained embeddings score own-speaker pairs above cross-speaker."""
        trained, _ = train_encoder(make_encoder("spec-a"), population,
                                   epochs=20, lr=0.05, rng=np.random.default_rng(4))
        embs = {sid: np.stack([embed_waveform(trained, u) for u in rec.utterances])
                for sid, rec in population.items()}
        within, between = [], []
        sids = list(embs)
        for i, sid in enumerate(sids):
            e = embs[sid]
            within.extend((e @ e.T)[np.triu_indices(3, 1)])
            for other in sids[i + 1:]:
                between.extend((e @ embs[other].T).ravel())
        assert np.mean(within) > np.mean(between) + 0.2


class TestCosine:
    def test_identity(self):
        f = np.array([0.6, 0.8])
        assert cosine(f, f) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(0.0)

    def test_antipodal(self):
        f = np.array([0.6, 0.8])
        assert cosine(f, -f) == pytest.approx(-1.0)


class TestEncoderHandle:
    def test_white_box_exposes_encoder(self, encoder):
        handle = EncoderHandle(encoder, "white_box")
        assert handle.encoder is encoder

    def test_black_box_refuses_parameters(self, encoder):
        handle = EncoderHandle(encoder, "black_box")
        with pytest.raises(PermissionError):
            _ = handle.encoder
        with pytest.raises(PermissionError):
            handle.embed(Waveform(np.zeros(1000)))

    def test_unknown_mode_rejected(self, encoder):
        with pytest.raises(ValueError):
            EncoderHandle(encoder, "grey_box")

    def test_black_box_score_is_self_consistent(self, encoder):
        """Scoring against the sample's own embedding returns 1."""
        w = Waveform(0.3 * np.sin(np.linspace(0, 300, 3000)))
        f = embed_waveform(encoder, w)
        handle = EncoderHandle(encoder, "black_box")
        assert blackbox_score(handle, w, f[None]) == pytest.approx(1.0, abs=1e-9)

    def test_score_of_copies_matches_single(self, encoder):
        rng = np.random.default_rng(8)
        w = Waveform(0.3 * rng.uniform(-1, 1, 3000))
        e = rng.standard_normal(64)
        e /= np.linalg.norm(e)
        handle = EncoderHandle(encoder, "black_box")
        single = blackbox_score(handle, w, e[None])
        stacked = blackbox_score(handle, w, np.tile(e, (5, 1)))
        assert stacked == pytest.approx(single, abs=1e-12)

    def test_score_equals_brute_force_mean(self, encoder):
        rng = np.random.default_rng(9)
        w = Waveform(0.3 * rng.uniform(-1, 1, 3000))
        batch = rng.standard_normal((6, 64))
        batch /= np.linalg.norm(batch, axis=1, keepdims=True)
        handle = EncoderHandle(encoder, "black_box")
        f = embed_waveform(encoder, w)
        brute = np.mean([cosine(f, b) for b in batch])
        assert blackbox_score(handle, w, batch) == pytest.approx(brute, abs=1e-12)


class TestEmbedBatch:
    def test_rows_match_single_calls(self, encoder):
        """Batched embedding equals per-waveform embedding row by row."""
        from mvforge.encoder import embed_batch
        rng = np.random.default_rng(11)
        samples = 0.2 * rng.uniform(-1, 1, (7, 4000))
        batch = embed_batch(encoder, samples)
        for i in range(7):
            single = embed_waveform(encoder, Waveform(samples[i]))
            np.testing.assert_allclose(batch[i], single, atol=1e-12)

    def test_score_batch_matches_serial(self, encoder):
        from mvforge.encoder import embed_batch
        rng = np.random.default_rng(12)
        samples = 0.2 * rng.uniform(-1, 1, (5, 4000))
        gallery = rng.standard_normal((4, 64))
        gallery /= np.linalg.norm(gallery, axis=1, keepdims=True)
        handle = EncoderHandle(encoder, "black_box")
        batched = handle.score_batch(samples, gallery)
        serial = [blackbox_score(handle, Waveform(s), gallery)
                  for s in samples]
        np.testing.assert_allclose(batched, serial, atol=1e-9)


class TestSaveLoad:
    def test_roundtrip_bit_identical(self, tmp_path, population):
        """Weights and embeddings survive a save/load cycle exactly."""
        from mvforge.encoder import load_encoder, save_encoder
        trained, _ = train_encoder(make_encoder("spec-a"), population,
                                   epochs=2, lr=0.05,
                                   rng=np.random.default_rng(6))
        path = tmp_path / "enc.json"
        save_encoder(trained, path)
        loaded = load_encoder(path)
        np.testing.assert_array_equal(loaded.w1, trained.w1)
        np.testing.assert_array_equal(loaded.b1, trained.b1)
        np.testing.assert_array_equal(loaded.w2, trained.w2)
        np.testing.assert_array_equal(loaded.b2, trained.b2)
        assert loaded.arch_id == trained.arch_id
        assert loaded.input_kind == trained.input_kind
        assert loaded.stft == trained.stft
        assert loaded.bands == trained.bands
        w = Waveform(0.2 * np.sin(np.linspace(0, 200, 4000)))
        np.testing.assert_array_equal(embed_waveform(loaded, w),
                                      embed_waveform(trained, w))

    def test_wrong_format_rejected(self, tmp_path):
        from mvforge.encoder import load_encoder
        path = tmp_path / "junk.json"
        path.write_text('{"format": "something-else"}')
        with pytest.raises(ValueError):
            load_encoder(path)
