"""Synthetic speaker population and a small cloning front end.

Speakers are source-filter voices: a harmonic source at a per-speaker
fundamental (with bounded per-utterance pitch wobble) driven through
three second-order formant resonators, plus breath noise scaled by the
speaker's timbre. Two gender clusters live on disjoint fundamental
ranges, cluster A at 85-165 Hz and cluster B at 165-255 Hz (165 itself
belongs to B).

The cloning side is deliberately tiny: a fixed feature extractor maps
any waveform into the unit cube [0, 1]^d, and an affine parameter map
decodes a cube point back into a speaker profile that the token-driven
synthesizer can voice. The synthesizer output is stochastic per call,
which is exactly what makes it a black box worth attacking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .audio import (
    CLIP_SAMPLES,
    SAMPLE_RATE,
    Spectrogram,
    StftConfig,
    Waveform,
    mel_filter_matrix,
    spectrogram,
)

GENDER_A_F0 = (85.0, 165.0)
GENDER_B_F0 = (165.0, 255.0)
# Profile draws stay inside the cluster with margin so that pitch wobble
# and estimator error cannot push an utterance across the 165 Hz split.
_F0_DRAW = {"a": (87.0, 158.0), "b": (172.0, 251.0)}

# (low, high) per decoded profile parameter, in decode order:
# f0, three formant centers, three bandwidths, tilt, noise mix.
PARAM_RANGES = np.array([
    (85.0, 255.0),
    (280.0, 850.0),
    (950.0, 2450.0),
    (2600.0, 3400.0),
    (60.0, 120.0),
    (80.0, 160.0),
    (100.0, 180.0),
    (-1.6, -0.7),
    (0.05, 0.25),
])

SEGMENT_SAMPLES = 3200  # 0.2 s per token at 16 kHz
VOCABULARY = "abcdefghijklmnopqrstuvwxyz "
DEFAULT_TOKENS = "unlock the demo door now"

# Quiet nominal level: leaves clipping headroom for playback chains and
# additive perturbations.
_TARGET_RMS = 0.03

__all__ = [
    "SpeakerProfile",
    "SpeakerRecord",
    "PopulationSpec",
    "CloneModel",
    "generate_population",
    "generate_speech",
    "get_speaker_embedding",
    "estimate_f0",
    "DEFAULT_TOKENS",
    "VOCABULARY",
]


@dataclass(frozen=True)
class SpeakerProfile:
    """Source-filter parameters for one synthetic speaker."""

    f0: float
    formants: tuple  # three (center_hz, bandwidth_hz) pairs, increasing centers
    timbre: np.ndarray  # (harmonic amplitude tilt, noise mix)
    gender_label: str

    def __post_init__(self):
        if not (60.0 <= self.f0 <= 400.0):
            raise ValueError(f"f0 {self.f0} outside [60, 400]")
        centers = [f[0] for f in self.formants]
        if len(centers) != 3 or any(c <= p for p, c in zip(centers, centers[1:])):
            raise ValueError("need three strictly increasing formant centers")
        if max(centers) >= 8000.0:
            raise ValueError("formant centers must stay below 8 kHz")
        timbre = np.asarray(self.timbre, dtype=np.float64)
        if timbre.shape != (2,):
            raise ValueError("timbre is (tilt, noise_mix)")
        if timbre[1] < 0:
            raise ValueError("noise mix must be nonnegative")
        if self.gender_label not in ("a", "b"):
            raise ValueError(f"unknown gender label {self.gender_label!r}")
        object.__setattr__(self, "timbre", timbre)

    @property
    def tilt(self) -> float:
        return float(self.timbre[0])

    @property
    def noise_mix(self) -> float:
        return float(self.timbre[1])


@dataclass
class SpeakerRecord:
    speaker_id: str
    gender: str
    profile: SpeakerProfile
    utterances: list


@dataclass(frozen=True)
class PopulationSpec:
    """Size, gender balance, jitter bound, and seed for one population."""

    num_speakers: int
    utterances_per_speaker: int
    gender_balance: float = 0.5
    seed: int = 0
    jitter: float = 0.03

    def __post_init__(self):
        if self.num_speakers < 1 or self.utterances_per_speaker < 1:
            raise ValueError("population needs at least one speaker and utterance")
        if not (0.0 <= self.gender_balance <= 1.0):
            raise ValueError("gender_balance must lie in [0, 1]")
        if not (0.0 <= self.jitter <= 0.03):
            raise ValueError("per-utterance jitter is capped at 3%")


def _resonator_coeffs(center: float, bandwidth: float):
    r = np.exp(-np.pi * bandwidth / SAMPLE_RATE)
    theta = 2.0 * np.pi * center / SAMPLE_RATE
    return np.array([1.0]), np.array([1.0, -2.0 * r * np.cos(theta), r * r])


def _smooth_noise(n: int, rng: np.random.Generator, points_per_s: float = 10.0) -> np.ndarray:
    k = max(int(points_per_s * n / SAMPLE_RATE), 2)
    ctrl = rng.standard_normal(k)
    return np.interp(np.linspace(0.0, k - 1.0, n), np.arange(k), ctrl)


def _synthesize(profile: SpeakerProfile, num_samples: int, rng: np.random.Generator,
                jitter: float, segments: np.ndarray | None = None) -> Waveform:
    """Voice one utterance. segments is an optional (k, 2) array of
    (pitch multiplier, amplitude) spans of 0.2 s each."""
    if segments is None:
        segments = np.array([[1.0, 1.0]])
    seg_idx = np.minimum(np.arange(num_samples) // SEGMENT_SAMPLES, len(segments) - 1)
    pitch_mult = segments[seg_idx, 0]
    seg_amp = segments[seg_idx, 1]

    # Bounded pitch wobble: vibrato-style so long-range phase stays put
    # and same-speaker utterances keep correlating in the time domain.
    t = np.arange(num_samples) / SAMPLE_RATE
    depth = jitter * rng.uniform(0.3, 1.0)
    rate = rng.uniform(4.0, 7.0)
    vib_phase = rng.uniform(0.0, 2.0 * np.pi)
    f_inst = profile.f0 * pitch_mult * (1.0 + depth * np.sin(2.0 * np.pi * rate * t + vib_phase))

    phase = 2.0 * np.pi * np.cumsum(f_inst) / SAMPLE_RATE
    # Harmonics past the top formant are buried by the resonator rolloff
    # and the breath noise, so the stack stops at 4.2 kHz.
    n_harm = min(36, int(4200.0 / max(float(f_inst.max()), 1.0)))
    n_harm = max(n_harm, 1)
    h = np.arange(1, n_harm + 1)
    amps = h.astype(np.float64) ** profile.tilt
    x = np.sin(np.outer(phase, h)) @ amps

    env = seg_amp * (1.0 + 0.08 * _smooth_noise(num_samples, rng))
    ramp = min(80, num_samples // 4)
    if ramp > 0:
        env = env.copy()
        env[:ramp] *= np.linspace(0.0, 1.0, ramp)
        env[-ramp:] *= np.linspace(1.0, 0.0, ramp)
    x = x * env

    for center, bandwidth in profile.formants:
        b, a = _resonator_coeffs(center, bandwidth)
        x = lfilter(b, a, x)

    rms = np.sqrt(np.mean(x * x))
    x *= _TARGET_RMS / max(rms, 1e-12)
    x += profile.noise_mix * _TARGET_RMS * rng.standard_normal(num_samples)
    return Waveform(np.clip(x, -1.0, 1.0))


# Population layout. Each gender cluster is a two-regime menagerie
# around a prototype voice: a thin, crowded inner shell of "typical"
# speakers and a sparse distinctive tail, separated by an empty margin.
# Every shell speaker is a factor sqrt(2) closer to the prototype than
# shell speakers typically are to each other, so a probe at the
# prototype outperforms any single enrolled voice structurally. The
# shell population is deliberately small: its mutual impostor pairs all
# score in the near-genuine range, and capping their count keeps them
# inside a 1% false-accept budget instead of dragging percentile
# thresholds up into that range (which is what an uncapped pile of
# near-twins does). Axis weights keep speaker identity on parameters a
# spectral front end can actually hear (pitch and the lower formant
# centers); the quiet axes (bandwidths, tilt) only add texture, so no
# two "distinct" speakers differ solely in ways an encoder cannot see.
# Per-utterance articulation jitter (formant centers, breath level)
# keeps same-speaker trials honestly imperfect.
_DRAW_WIDTH = 1.0
_LAMB_COUNT = 24
_LAMB_RADIUS = 0.07
_LAMB_SPREAD = 0.01
_TAIL_RADIUS_MIN = 0.42
_TAIL_RADIUS_MAX = 0.48
_TAIL_RADIUS_EXP = 1.0
_AXIS_WEIGHTS = np.array([1.0, 1.0, 1.0, 0.3, 0.1, 0.1, 0.1, 0.1, 0.15])
_FORMANT_JITTER = 0.02
_NOISE_JITTER = 0.1


def _draw_box(gender: str, width: float) -> np.ndarray:
    """(9, 2) lo/hi parameter bounds for draws at the given width."""
    rows = []
    for lo, hi in [list(_F0_DRAW[gender])] + list(PARAM_RANGES[1:]):
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * width
        rows.append([mid - half, mid + half])
    return np.array(rows)


def _utterance_profile(profile: SpeakerProfile, rng: np.random.Generator) -> SpeakerProfile:
    """One utterance's articulation: jittered formants and breath level."""
    factors = 1.0 + _FORMANT_JITTER * np.clip(rng.standard_normal(3), -2.5, 2.5)
    bw_factors = 1.0 + 0.5 * _FORMANT_JITTER * np.clip(rng.standard_normal(3), -2.5, 2.5)
    formants = tuple((c * f, bw * bf) for (c, bw), f, bf
                     in zip(profile.formants, factors, bw_factors))
    noise = profile.noise_mix * (1.0 + _NOISE_JITTER * (rng.uniform() - 0.5))
    timbre = np.array([profile.tilt, max(noise, 0.0)])
    return SpeakerProfile(f0=profile.f0, formants=formants, timbre=timbre,
                          gender_label=profile.gender_label)


def _profile_at(coords: np.ndarray, gender: str) -> SpeakerProfile:
    """Profile for normalized coordinates in the gender's wide box."""
    wide = _draw_box(gender, _DRAW_WIDTH)
    p = wide[:, 0] + np.clip(coords, 0.0, 1.0) * (wide[:, 1] - wide[:, 0])
    return SpeakerProfile(f0=float(p[0]),
                          formants=((p[1], p[4]), (p[2], p[5]), (p[3], p[6])),
                          timbre=np.array([p[7], p[8]]), gender_label=gender)


def _menagerie_coords(position: int, rng: np.random.Generator) -> np.ndarray:
    """Place one speaker around the gender prototype.

    The first _LAMB_COUNT speakers of a gender land on the thin typical
    shell; the rest draw a power-law radius over the distinctive band,
    denser at its inner edge. Directions are uniform after axis
    weighting in both regimes.
    """
    d = rng.standard_normal(9) * _AXIS_WEIGHTS
    d /= np.linalg.norm(d)
    if position < _LAMB_COUNT:
        r = _LAMB_RADIUS + _LAMB_SPREAD * (2.0 * rng.uniform() - 1.0)
    else:
        r = _TAIL_RADIUS_MIN + ((_TAIL_RADIUS_MAX - _TAIL_RADIUS_MIN)
                                * rng.uniform() ** _TAIL_RADIUS_EXP)
    return np.full(9, 0.5) + r * d


def generate_population(spec: PopulationSpec) -> dict[str, SpeakerRecord]:
    """Synthesize a speaker population keyed by speaker id.

    Gender counts are exact: round(num_speakers * gender_balance) cluster-A
    speakers, the rest cluster B. Fully determined by spec.seed.
    """
    root = np.random.default_rng(spec.seed)
    num_a = round(spec.num_speakers * spec.gender_balance)
    population: dict[str, SpeakerRecord] = {}
    position = {"a": 0, "b": 0}
    for i in range(spec.num_speakers):
        gender = "a" if i < num_a else "b"
        rng = np.random.default_rng(root.integers(0, 2 ** 63))
        profile = _profile_at(_menagerie_coords(position[gender], rng), gender)
        position[gender] += 1
        utts = [
            _synthesize(_utterance_profile(profile, rng), CLIP_SAMPLES, rng, spec.jitter)
            for _ in range(spec.utterances_per_speaker)
        ]
        sid = f"s{i:04d}"
        population[sid] = SpeakerRecord(speaker_id=sid, gender=gender,
                                        profile=profile, utterances=utts)
    return population


def estimate_f0(samples: np.ndarray, fmin: float = 60.0, fmax: float = 400.0):
    """Autocorrelation pitch estimate.

    Returns (f0_hz, periodicity) where periodicity is the normalized
    autocorrelation peak in [0, 1]. Subharmonic (octave-down) peaks are
    folded back and the peak lag is refined by parabolic interpolation.
    """
    x = np.asarray(samples, dtype=np.float64)
    x = x - x.mean()
    n = x.size
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(x, nfft)
    r = np.fft.irfft(spec * np.conj(spec), nfft)[: n]
    if r[0] <= 0:
        return 0.0, 0.0
    r = r / r[0]
    lag_min = max(int(SAMPLE_RATE / fmax), 2)
    lag_max = min(int(SAMPLE_RATE / fmin), n - 2)
    lag = lag_min + int(np.argmax(r[lag_min:lag_max + 1]))
    for div in (2, 3):
        cand = int(round(lag / div))
        if cand >= lag_min and r[cand] >= 0.9 * r[lag]:
            lag = cand
    denom = r[lag - 1] - 2.0 * r[lag] + r[lag + 1]
    delta = 0.0 if abs(denom) < 1e-12 else 0.5 * (r[lag - 1] - r[lag + 1]) / denom
    delta = float(np.clip(delta, -0.5, 0.5))
    return SAMPLE_RATE / (lag + delta), float(np.clip(r[lag], 0.0, 1.0))


@dataclass(frozen=True)
class CloneModel:
    """Embedding geometry and decoding rules for the cloning black box."""

    embed_dim: int = 32
    jitter: float = 0.02  # per-call pitch jitter of the synthesizer
    vocabulary: str = VOCABULARY

    def __post_init__(self):
        if self.embed_dim < 9 + 1:
            raise ValueError("embedding must cover the nine profile parameters")

    def _aux_groups(self) -> list[np.ndarray]:
        aux = np.arange(9, self.embed_dim)
        return [aux[i::9] for i in range(9)]

    def param_map(self, v: np.ndarray) -> SpeakerProfile:
        """Affine map from the unit cube onto valid profile ranges.

        The first nine coordinates carry most of the weight for their
        parameter; the remaining coordinates contribute through fixed
        group means so that no direction of the cube is inert. The cube
        midpoint decodes to the midpoint of every parameter range.
        """
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.embed_dim,):
            raise ValueError(f"expected shape ({self.embed_dim},), got {v.shape}")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("embedding must lie inside the unit cube")
        groups = self._aux_groups()
        blend = np.empty(9)
        for i in range(9):
            aux = v[groups[i]].mean() if groups[i].size else 0.5
            blend[i] = 0.75 * v[i] + 0.25 * aux
        lo, hi = PARAM_RANGES[:, 0], PARAM_RANGES[:, 1]
        p = lo + (hi - lo) * blend
        gender = "a" if p[0] < GENDER_B_F0[0] else "b"
        return SpeakerProfile(
            f0=float(p[0]),
            formants=((p[1], p[4]), (p[2], p[5]), (p[3], p[6])),
            timbre=np.array([p[7], p[8]]),
            gender_label=gender,
        )

    def token_params(self, tokens) -> np.ndarray:
        """(pitch multiplier, amplitude) per token symbol."""
        if isinstance(tokens, str):
            try:
                ids = [self.vocabulary.index(c) for c in tokens]
            except ValueError as exc:
                raise ValueError(f"token outside vocabulary: {exc}") from None
        else:
            ids = [int(t) for t in tokens]
            if any(t < 0 or t >= len(self.vocabulary) for t in ids):
                raise ValueError("token id outside vocabulary")
        if not ids:
            raise ValueError("token sequence is empty")
        out = np.empty((len(ids), 2))
        for row, t in enumerate(ids):
            if self.vocabulary[t] == " ":
                out[row] = (1.0, 0.15)
            else:
                out[row, 0] = 0.88 + 0.24 * t / (len(self.vocabulary) - 1)
                out[row, 1] = 0.55 + 0.45 * ((t * 7) % 27) / 26.0
        return out


_EMBED_BANDS = 23
_FORMANT_WINDOWS = ((200.0, 950.0), (950.0, 2450.0), (2450.0, 3600.0))
_TILT_DB_RANGE = (-40.0, 10.0)
_F0_FEATURE_RANGE = (85.0, 255.0)


def get_speaker_embedding(w: Waveform, model: CloneModel = CloneModel()) -> np.ndarray:
    """Fixed feature extractor into [0, 1]^embed_dim.

    Features: pitch estimate, three in-window spectral centroids and
    spreads, a high/low band tilt, a noisiness score, and relative log
    band energies. Deterministic; silence maps to the cube midpoint.
    """
    x = w.samples
    rms = float(np.sqrt(np.mean(x * x))) if len(w) else 0.0
    if rms < 1e-6:
        return np.full(model.embed_dim, 0.5)
    cfg = StftConfig()
    mag = spectrogram(w, cfg).mag
    power = (mag ** 2).mean(axis=1)
    freqs = np.arange(cfg.num_bins) * (SAMPLE_RATE / cfg.fft_size)
    total = float(power.sum())

    feats = np.empty(32)
    f0, periodicity = estimate_f0(x)
    lo, hi = _F0_FEATURE_RANGE
    feats[0] = (f0 - lo) / (hi - lo)
    for i, (wlo, whi) in enumerate(_FORMANT_WINDOWS):
        sel = (freqs >= wlo) & (freqs < whi)
        p = power[sel]
        f = freqs[sel]
        psum = max(float(p.sum()), 1e-30)
        centroid = float((f * p).sum()) / psum
        spread = float(np.sqrt(((f - centroid) ** 2 * p).sum() / psum))
        feats[1 + i] = (centroid - wlo) / (whi - wlo)
        feats[4 + i] = spread / (whi - wlo) * 2.0
    lo_band = power[(freqs >= 100.0) & (freqs < 1000.0)].sum()
    hi_band = power[(freqs >= 1500.0) & (freqs < 6000.0)].sum()
    tilt_db = 10.0 * np.log10(max(hi_band, 1e-30) / max(lo_band, 1e-30))
    feats[7] = (tilt_db - _TILT_DB_RANGE[0]) / (_TILT_DB_RANGE[1] - _TILT_DB_RANGE[0])
    feats[8] = 1.0 - periodicity
    mat, _ = mel_filter_matrix(_EMBED_BANDS, cfg)
    band = mat @ power
    rel = np.log10(np.maximum(band, 1e-30) / max(total, 1e-30))
    feats[9:32] = 1.0 + rel / 6.0

    out = np.clip(feats, 0.0, 1.0)
    if model.embed_dim == 32:
        return out
    if model.embed_dim < 32:
        return out[: model.embed_dim]
    padded = np.full(model.embed_dim, 0.5)
    padded[:32] = out
    return padded


def generate_speech(tokens, f_prime: np.ndarray, max_len: int,
                    rng: np.random.Generator, model: CloneModel = CloneModel()) -> Waveform:
    """Voice a token sequence as the speaker encoded by f_prime.

    The embedding must already lie inside the unit cube; out-of-cube
    points are rejected rather than clipped so that optimizers own the
    projection. Output length is exactly max_len samples. Each call
    draws fresh pitch and amplitude jitter from rng.
    """
    profile = model.param_map(np.asarray(f_prime, dtype=np.float64))
    segments = model.token_params(tokens)
    need = -(-max_len // SEGMENT_SAMPLES)
    reps = -(-need // len(segments))
    segments = np.tile(segments, (reps, 1))[:need]
    return _synthesize(profile, max_len, rng, model.jitter, segments)
