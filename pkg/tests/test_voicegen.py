"""Synthetic speaker populations and the embedding-conditioned cloner.

Separation statements (within vs. between speaker) are Monte-Carlo
checks over seeded draws, so they are deterministic for the test run.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvforge.audio import CLIP_SAMPLES
from mvforge.voicegen import (
    DEFAULT_TOKENS,
    GENDER_A_F0,
    GENDER_B_F0,
    PARAM_RANGES,
    CloneModel,
    PopulationSpec,
    SpeakerProfile,
    estimate_f0,
    generate_population,
    generate_speech,
    get_speaker_embedding,
)


def profile(f0=120.0, formants=((500.0, 80.0), (1500.0, 110.0), (2800.0, 140.0)),
            timbre=(-1.0, 0.1), gender="a"):
    return SpeakerProfile(f0=f0, formants=formants, timbre=np.asarray(timbre),
                          gender_label=gender)


def small_population(num=8, utts=3, seed=11):
    return generate_population(PopulationSpec(num, utts, seed=seed))


class TestSpeakerProfile:
    def test_f0_bounds_enforced(self):
        with pytest.raises(ValueError):
            profile(f0=30.0)
        with pytest.raises(ValueError):
            profile(f0=500.0)

    def test_formants_must_increase(self):
        with pytest.raises(ValueError):
            profile(formants=((1500.0, 80.0), (500.0, 110.0), (2800.0, 140.0)))

    def test_formants_capped_below_8khz(self):
        with pytest.raises(ValueError):
            profile(formants=((500.0, 80.0), (1500.0, 110.0), (9000.0, 140.0)))

    def test_noise_mix_nonnegative(self):
        with pytest.raises(ValueError):
            profile(timbre=(-1.0, -0.2))

    def test_gender_label_restricted(self):
        with pytest.raises(ValueError):
            profile(gender="c")

    def test_timbre_accessors(self):
        p = profile(timbre=(-1.3, 0.08))
        assert p.tilt == pytest.approx(-1.3)
        assert p.noise_mix == pytest.approx(0.08)


class TestPopulationSpec:
    def test_counts_validated(self):
        with pytest.raises(ValueError):
            PopulationSpec(0, 5)
        with pytest.raises(ValueError):
            PopulationSpec(4, 0)

    def test_balance_range(self):
        with pytest.raises(ValueError):
            PopulationSpec(4, 2, gender_balance=1.2)

    def test_jitter_cap(self):
        with pytest.raises(ValueError):
            PopulationSpec(4, 2, jitter=0.05)


class TestGeneratePopulation:
    def test_deterministic_given_seed(self):
        """Equal seeds produce bit-identical datasets."""
        a = small_population(6, 2, seed=7)
        b = small_population(6, 2, seed=7)
        assert list(a) == list(b)
        for sid in a:
            for u, v in zip(a[sid].utterances, b[sid].utterances):
                np.testing.assert_array_equal(u.samples, v.samples)

    def test_different_seeds_differ(self):
        a = small_population(4, 1, seed=1)
        b = small_population(4, 1, seed=2)
        assert any(not np.array_equal(a[s].utterances[0].samples,
                                      b[s].utterances[0].samples) for s in a)

    def test_exact_gender_counts(self):
        pop = generate_population(PopulationSpec(10, 1, gender_balance=0.5, seed=3))
        assert sum(1 for r in pop.values() if r.gender == "a") == 5
        pop = generate_population(PopulationSpec(10, 1, gender_balance=0.3, seed=3))
        assert sum(1 for r in pop.values() if r.gender == "a") == 3

    def test_utterances_standardized(self):
        """Every utterance is a full-length clip inside [-1, 1]."""
        pop = small_population(4, 2)
        for rec in pop.values():
            assert len(rec.utterances) == 2
            for u in rec.utterances:
                assert len(u) == CLIP_SAMPLES
                assert u.samples.min() >= -1.0 and u.samples.max() <= 1.0

    def test_profile_matches_gender_label(self):
        pop = small_population(10, 1)
        for rec in pop.values():
            assert rec.profile.gender_label == rec.gender
            lo, hi = (GENDER_A_F0 if rec.gender == "a" else GENDER_B_F0)
            assert lo <= rec.profile.f0 <= hi

    def test_f0_estimates_split_by_gender(self):
        """Estimated f0 of every A utterance sits below every B utterance."""
        pop = small_population(8, 2, seed=19)
        est = {g: [] for g in "ab"}
        for rec in pop.values():
            for u in rec.utterances:
                est[rec.gender].append(estimate_f0(u.samples)[0])
        assert max(est["a"]) < min(est["b"])

    def test_within_speaker_correlation_beats_between(self):
        """Same-speaker waveforms correlate more than cross-speaker ones."""
        pop = small_population(10, 3, seed=23)
        recs = list(pop.values())
        within, between = [], []
        for i, rec in enumerate(recs):
            utts = [u.samples for u in rec.utterances]
            for a in range(3):
                for b in range(a + 1, 3):
                    within.append(abs(np.corrcoef(utts[a], utts[b])[0, 1]))
            for other in recs[i + 1:]:
                between.append(abs(np.corrcoef(utts[0], other.utterances[0].samples)[0, 1]))
        assert np.mean(within) > np.mean(between)

    def test_speaker_ids_are_stable(self):
        pop = small_population(4, 1)
        assert list(pop) == ["s0000", "s0001", "s0002", "s0003"]


class TestGetSpeakerEmbedding:
    def test_range_contract(self):
        pop = small_population(4, 1)
        for rec in pop.values():
            e = get_speaker_embedding(rec.utterances[0])
            assert e.shape == (32,)
            assert e.min() >= 0.0 and e.max() <= 1.0

    def test_silence_fallback(self):
        from mvforge.audio import Waveform
        e = get_speaker_embedding(Waveform(np.zeros(CLIP_SAMPLES)))
        np.testing.assert_array_equal(e, 0.5)

    def test_deterministic(self):
        u = small_population(2, 1)["s0000"].utterances[0]
        np.testing.assert_array_equal(get_speaker_embedding(u),
                                      get_speaker_embedding(u))

    def test_same_speaker_embeddings_closer(self):
        """Mean within-speaker L2 distance < mean between-speaker."""
        pop = small_population(8, 3, seed=31)
        embs = {sid: [get_speaker_embedding(u) for u in rec.utterances]
                for sid, rec in pop.items()}
        within, between = [], []
        sids = list(embs)
        for i, sid in enumerate(sids):
            for a in range(3):
                for b in range(a + 1, 3):
                    within.append(np.linalg.norm(embs[sid][a] - embs[sid][b]))
            for other in sids[i + 1:]:
                between.append(np.linalg.norm(embs[sid][0] - embs[other][0]))
        assert np.mean(within) < np.mean(between)

    def test_alternate_dimensions(self):
        u = small_population(2, 1)["s0000"].utterances[0]
        e16 = get_speaker_embedding(u, CloneModel(embed_dim=16))
        assert e16.shape == (16,)
        e40 = get_speaker_embedding(u, CloneModel(embed_dim=40))
        assert e40.shape == (40,)
        np.testing.assert_array_equal(e40[32:], 0.5)


class TestParamMap:
    def test_cube_midpoint_decodes_to_range_midpoints(self):
        """param_map(0.5 * ones) hits the midpoint of every range."""
        p = CloneModel().param_map(np.full(32, 0.5))
        mids = PARAM_RANGES.mean(axis=1)
        got = [p.f0,
               p.formants[0][0], p.formants[1][0], p.formants[2][0],
               p.formants[0][1], p.formants[1][1], p.formants[2][1],
               p.tilt, p.noise_mix]
        np.testing.assert_allclose(got, mids, rtol=1e-12)

    def test_outside_cube_rejected(self):
        with pytest.raises(ValueError):
            CloneModel().param_map(np.full(32, 1.1))
        with pytest.raises(ValueError):
            CloneModel().param_map(np.full(32, -0.01))

    def test_wrong_shape_rejected(self):
        with pytest.raises(ValueError):
            CloneModel().param_map(np.full(16, 0.5))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_full_cube_maps_to_valid_profiles(self, seed):
        """Every cube point decodes without violating profile invariants."""
        v = np.random.default_rng(seed).uniform(size=32)
        p = CloneModel().param_map(v)
        lo, hi = PARAM_RANGES[:, 0], PARAM_RANGES[:, 1]
        assert lo[0] <= p.f0 <= hi[0]
        assert p.formants[0][0] < p.formants[1][0] < p.formants[2][0]

    def test_corners_hit_range_ends(self):
        p_lo = CloneModel().param_map(np.zeros(32))
        p_hi = CloneModel().param_map(np.ones(32))
        assert p_lo.f0 == pytest.approx(PARAM_RANGES[0, 0])
        assert p_hi.f0 == pytest.approx(PARAM_RANGES[0, 1])
        assert p_lo.gender_label == "a" and p_hi.gender_label == "b"


class TestGenerateSpeech:
    def test_deterministic_given_seed(self):
        f = np.full(32, 0.5)
        a = generate_speech(DEFAULT_TOKENS, f, 16000, np.random.default_rng(4))
        b = generate_speech(DEFAULT_TOKENS, f, 16000, np.random.default_rng(4))
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_stochastic_across_draws(self):
        f = np.full(32, 0.5)
        a = generate_speech(DEFAULT_TOKENS, f, 16000, np.random.default_rng(5))
        b = generate_speech(DEFAULT_TOKENS, f, 16000, np.random.default_rng(6))
        assert not np.array_equal(a.samples, b.samples)

    def test_exact_output_length(self):
        f = np.full(32, 0.5)
        for n in (3199, 3200, 16001, CLIP_SAMPLES):
            out = generate_speech("abc", f, n, np.random.default_rng(7))
            assert len(out) == n

    def test_out_of_cube_rejected(self):
        with pytest.raises(ValueError):
            generate_speech("abc", np.full(32, 1.5), 8000, np.random.default_rng(8))

    def test_token_validation(self):
        f = np.full(32, 0.5)
        with pytest.raises(ValueError):
            generate_speech("", f, 8000, np.random.default_rng(9))
        with pytest.raises(ValueError):
            generate_speech("voix!", f, 8000, np.random.default_rng(9))
        with pytest.raises(ValueError):
            generate_speech([99], f, 8000, np.random.default_rng(9))
        out = generate_speech([0, 1, 2], f, 8000, np.random.default_rng(9))
        assert len(out) == 8000

    def test_fixed_embedding_is_more_consistent_than_random(self):
        """Clone outputs of one f' agree more than outputs of random f'."""
        rng = np.random.default_rng(41)
        fixed = rng.uniform(0.2, 0.8, 32)
        def emb_of(f, seed):
            w = generate_speech(DEFAULT_TOKENS, f, 16000, np.random.default_rng(seed))
            return get_speaker_embedding(w)
        fixed_embs = np.stack([emb_of(fixed, 100 + i) for i in range(10)])
        rand_embs = np.stack([emb_of(rng.uniform(size=32), 200 + i) for i in range(10)])
        def mean_cos(embs):
            g = embs @ embs.T
            n = np.linalg.norm(embs, axis=1)
            g = g / np.outer(n, n)
            return g[np.triu_indices(len(embs), 1)].mean()
        assert mean_cos(fixed_embs) > mean_cos(rand_embs)

    def test_waveform_invariant_respected(self):
        out = generate_speech("zzz", np.ones(32), 8000, np.random.default_rng(10))
        assert out.samples.min() >= -1.0 and out.samples.max() <= 1.0


class TestEstimateF0:
    def test_pure_tone_recovered(self):
        t = np.arange(16000) / 16000
        for f0 in (110.0, 180.0, 240.0):
            est, periodicity = estimate_f0(0.4 * np.sin(2 * np.pi * f0 * t))
            assert est == pytest.approx(f0, rel=0.02)
            assert periodicity > 0.9

    def test_silence_degenerates(self):
        est, periodicity = estimate_f0(np.zeros(4000))
        assert est == 0.0 and periodicity == 0.0

    def test_noise_has_low_periodicity(self):
        x = np.random.default_rng(12).standard_normal(16000)
        _, periodicity = estimate_f0(x)
        assert periodicity < 0.5
