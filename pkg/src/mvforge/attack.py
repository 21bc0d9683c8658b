"""Master-voice optimization: white-box ascent, NES estimation, playback.

The attack maximizes the mean embedding similarity between one evolving
sample and an optimization gallery, in one of three domains: additive
waveform perturbations, additive magnitude-spectrogram perturbations
(inverted to audio only at the very end), or the input embedding of a
voice-cloning synthesizer. White-box mode uses the hand-written VJPs
from the audio and encoder modules; black-box mode estimates gradients
from similarity queries alone via antithetic NES.

Playback simulation chains speaker, room, and microphone impulse
responses with additive white noise. It can wrap the attack sample both
at evaluation time and inside the optimization loop (augmentation); in
white-box mode gradients flow through the convolutions analytically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve

from .audio import (
    CLIP_SAMPLES,
    StftConfig,
    Waveform,
    feature_normalize,
    feature_normalize_grad,
    filterbank_from_magnitude,
    griffin_lim,
    mel_filter_matrix,
    snr_db,
    spectrogram,
    LOG_FLOOR,
)
from .encoder import (
    ToyEncoder,
    embed_waveform,
    encode,
    encode_backward,
    waveform_grad,
)
from .verification import Gallery, Policy, impersonation_rate
from .voicegen import CloneModel, generate_speech

DOMAINS = ("waveform", "spectrogram", "clone")

__all__ = [
    "AttackConfig",
    "NesConfig",
    "PlaybackKernels",
    "MasterVoice",
    "similarity_objective",
    "normalize_gradient",
    "apply_domain",
    "whitebox_optimize",
    "nes_gradient",
    "blackbox_optimize",
    "playback",
    "default_playback_kernels",
]


@dataclass(frozen=True)
class AttackConfig:
    """Domain, step schedule, and normalization for one optimization run."""

    domain: str
    step_size: float | None = None
    epochs: int = 10
    batch_size: int = 128
    norm_mode: str = "l2"  # "l2" or "linf_sign"
    linf_budget: float | None = None
    playback_augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown attack domain {self.domain!r}")
        if self.norm_mode not in ("l2", "linf_sign"):
            raise ValueError(f"unknown norm mode {self.norm_mode!r}")
        if self.norm_mode == "linf_sign":
            if self.linf_budget is None or self.linf_budget <= 0:
                raise ValueError("linf_sign mode needs a positive linf_budget")
            if self.step_size is None:
                object.__setattr__(self, "step_size", self.linf_budget / 10.0)
        if self.step_size is None or self.step_size < 0:
            raise ValueError("step_size must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.playback_augment and self.domain == "spectrogram":
            raise ValueError("playback augmentation needs a time-domain sample, "
                             "not a spectrogram perturbation")


@dataclass(frozen=True)
class NesConfig:
    """Antithetic NES estimator settings: 2 * samples objective calls per step."""

    samples: int = 100
    sigma: float = 0.001

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class PlaybackKernels:
    """Impulse-response database plus the AWGN strength scale."""

    speaker_irs: tuple
    room_irs: tuple
    mic_irs: tuple
    noise_scale_sigma: float = 0.025

    def __post_init__(self):
        for name, irs in (("speaker", self.speaker_irs), ("room", self.room_irs),
                          ("mic", self.mic_irs)):
            if len(irs) == 0:
                raise ValueError(f"no {name} impulse responses")
            for k in irs:
                if not np.all(np.isfinite(k)):
                    raise ValueError(f"non-finite {name} impulse response")
        if self.noise_scale_sigma < 0:
            raise ValueError("noise_scale_sigma must be >= 0")


@dataclass
class MasterVoice:
    """Finished attack sample with its optimization telemetry."""

    waveform: Waveform
    domain: str
    seed_id: str
    attack_vector: np.ndarray
    ir_history: list
    objective_history: list
    distortion_snr: float


def similarity_objective(f: np.ndarray, batch: np.ndarray) -> float:
    """Arithmetic mean of cosines between f and each embedding in batch."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    return float((batch @ f).mean())


def normalize_gradient(g: np.ndarray, mode: str) -> np.ndarray:
    """L2: g / ||g|| (zero stays zero). linf_sign: elementwise sign."""
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("gradient contains NaN or Inf")
    if mode == "l2":
        norm = np.linalg.norm(g)
        return g if norm == 0.0 else g / norm
    if mode == "linf_sign":
        return np.sign(g)
    raise ValueError(f"unknown norm mode {mode!r}")


# ---------------------------------------------------------------------------
# Domains


def apply_domain(domain: str, w0: Waveform | None, v: np.ndarray, *,
                 synth: CloneModel | None = None, tokens=None,
                 rng: np.random.Generator | None = None,
                 stft: StftConfig = StftConfig(),
                 finalize: bool = False, gl_iters: int = 50):
    """Realize the attack vector v in its domain.

    waveform: clip(w0 + v). spectrogram: the floored perturbed magnitude
    max(A(w0) + v, 0) during optimization; with finalize=True the
    magnitude is inverted by griffin_lim (rng required) and padded to the
    seed length. clone: v is clipped into the unit cube and voiced by
    generate_speech (synth, tokens, rng required); output length matches
    the fixed enrollment clip length.
    """
    if domain == "waveform":
        if v.shape != w0.samples.shape:
            raise ValueError("waveform perturbation shape mismatch")
        return Waveform(np.clip(w0.samples + v, -1.0, 1.0))
    if domain == "spectrogram":
        mag = spectrogram(w0, stft).mag
        if v.shape != mag.shape:
            raise ValueError("spectrogram perturbation shape mismatch")
        pert = np.maximum(mag + v, 0.0)
        if not finalize:
            return pert
        if rng is None:
            raise ValueError("finalizing the spectrogram domain needs an rng")
        wav = griffin_lim(pert, gl_iters, rng, cfg=stft)
        out = np.zeros(len(w0))
        take = min(len(wav), len(w0))
        out[:take] = wav.samples[:take]
        return Waveform(out)
    if domain == "clone":
        if synth is None:
            raise ValueError("clone domain needs a CloneModel synthesizer")
        if rng is None:
            raise ValueError("clone domain synthesis needs an rng")
        tokens = synth_tokens_default(tokens)
        return generate_speech(tokens, np.clip(v, 0.0, 1.0), CLIP_SAMPLES, rng, synth)
    raise ValueError(f"unknown attack domain {domain!r}")


def synth_tokens_default(tokens):
    if tokens is None:
        from .voicegen import DEFAULT_TOKENS
        return DEFAULT_TOKENS
    return tokens


# ---------------------------------------------------------------------------
# Playback simulation


def default_playback_kernels(seed: int = 1234, noise_scale_sigma: float = 0.025) -> PlaybackKernels:
    """Synthetic impulse-response database: 4 speakers, 9 rooms, 7 mics.

    Speaker IRs are short lowpass bursts, room IRs exponentially decaying
    noise tails with 50-300 ms decay, mic IRs short band-shaping bursts.
    Every IR is normalized to unit energy.
    """
    rng = np.random.default_rng(seed)

    def _unit(k):
        return k / max(np.linalg.norm(k), 1e-12)

    speakers = []
    for _ in range(4):
        n = int(0.002 * 16000)
        t = np.arange(n)
        k = np.exp(-t / rng.uniform(4.0, 12.0)) * np.cos(2 * np.pi * rng.uniform(0.02, 0.1) * t)
        speakers.append(_unit(k))
    rooms = []
    for _ in range(9):
        decay = rng.uniform(0.050, 0.300)
        n = int(decay * 16000)
        k = rng.standard_normal(n) * np.exp(-3.0 * np.arange(n) / n)
        k[0] = 1.0
        rooms.append(_unit(k))
    mics = []
    for _ in range(7):
        n = int(rng.uniform(0.001, 0.005) * 16000)
        t = np.arange(n)
        k = np.exp(-t / rng.uniform(3.0, 10.0)) * np.cos(2 * np.pi * rng.uniform(0.05, 0.25) * t)
        mics.append(_unit(k))
    return PlaybackKernels(speaker_irs=tuple(speakers), room_irs=tuple(rooms),
                           mic_irs=tuple(mics), noise_scale_sigma=noise_scale_sigma)


# method="auto" keeps tiny kernels on the exact direct path (a length-1
# delta must be a bitwise identity) and long room tails on the FFT path.
def _conv_trim(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    return convolve(x, k, mode="full", method="auto")[: x.size]


def _conv_trim_adjoint(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    return convolve(g, k[::-1], mode="full", method="auto")[k.size - 1: k.size - 1 + g.size]


def _playback_draw(kernels: PlaybackKernels, rng: np.random.Generator, n: int):
    """One random playback setting: kernel triple and a fixed noise vector."""
    ks = kernels.speaker_irs[int(rng.integers(len(kernels.speaker_irs)))]
    kr = kernels.room_irs[int(rng.integers(len(kernels.room_irs)))]
    km = kernels.mic_irs[int(rng.integers(len(kernels.mic_irs)))]
    z = rng.normal(0.0, kernels.noise_scale_sigma)
    noise = abs(z) * rng.standard_normal(n)  # AWGN with variance z**2
    return ks, kr, km, noise


def _playback_apply(samples: np.ndarray, draw) -> tuple[np.ndarray, np.ndarray]:
    """Forward chain. Returns (output, gradient mask of the final clip)."""
    ks, kr, km, noise = draw
    y = _conv_trim(_conv_trim(_conv_trim(samples, ks) + noise, kr), km)
    mask = (y > -1.0) & (y < 1.0)
    return np.clip(y, -1.0, 1.0), mask


def _playback_adjoint(g: np.ndarray, draw, mask: np.ndarray) -> np.ndarray:
    ks, kr, km, _ = draw
    g = g * mask
    return _conv_trim_adjoint(_conv_trim_adjoint(_conv_trim_adjoint(g, km), kr), ks)


def playback(w: Waveform, kernels: PlaybackKernels, rng: np.random.Generator) -> Waveform:
    """Simulate one playback: speaker IR, additive noise, room IR, mic IR.

    Kernels are picked uniformly per category, the AWGN variance is the
    square of a draw z ~ N(0, noise_scale_sigma), and every convolution
    is trimmed back to the input length. Output is clipped to [-1, 1].
    """
    draw = _playback_draw(kernels, rng, len(w))
    out, _ = _playback_apply(w.samples, draw)
    return Waveform(out)


# ---------------------------------------------------------------------------
# Internal forward/backward for the two analytic domains


def _spec_domain_embed(enc: ToyEncoder, pert_mag: np.ndarray) -> np.ndarray:
    if enc.input_kind == "spectrogram":
        raw = pert_mag
    else:
        raw = filterbank_from_magnitude(pert_mag, enc.bands, enc.stft)
    return encode(enc, feature_normalize(raw))


def _spec_domain_grad(enc: ToyEncoder, pert_mag: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """dS/d(perturbed magnitude) through the encoder's front end."""
    if enc.input_kind == "spectrogram":
        g_norm = encode_backward(enc, feature_normalize(pert_mag), upstream)
        return feature_normalize_grad(pert_mag, g_norm)
    mat, _ = mel_filter_matrix(enc.bands, enc.stft)
    energy = mat @ (pert_mag ** 2)
    raw = np.log(np.maximum(energy, LOG_FLOOR))
    g_norm = encode_backward(enc, feature_normalize(raw), upstream)
    g_raw = feature_normalize_grad(raw, g_norm)
    g_energy = np.where(energy > LOG_FLOOR, g_raw / np.maximum(energy, LOG_FLOOR), 0.0)
    return 2.0 * pert_mag * (mat.T @ g_energy)


def _derive_streams(seed: int, count: int) -> list[np.random.SeedSequence]:
    """Independent named child streams of one run seed."""
    return np.random.SeedSequence(seed).spawn(count)


def _monitor_ir(f: np.ndarray, gallery: Gallery | None, policy: Policy | None) -> float | None:
    if gallery is None or policy is None:
        return None
    return impersonation_rate([f], gallery, policy)


def _batches(total: int, batch_size: int):
    for start in range(0, total, batch_size):
        yield slice(start, min(start + batch_size, total))


# ---------------------------------------------------------------------------
# White-box optimization


def whitebox_optimize(w0: Waveform, gallery: Gallery, enc: ToyEncoder,
                      cfg: AttackConfig, monitor: Policy | None = None,
                      kernels: PlaybackKernels | None = None,
                      seed_id: str = "", gl_iters: int = 50) -> MasterVoice:
    """Gradient-ascent master-voice optimization with analytic gradients.

    Runs cfg.epochs passes over the gallery embeddings (pre-shuffled once
    per run) in batches, stepping the attack vector along the normalized
    gradient of the mean-similarity objective. With monitor set, records
    the optimization-population impersonation rate after every epoch; in
    the spectrogram domain that measurement stays in the feature domain,
    no inversion. playback_augment draws a fresh playback setting per
    batch and differentiates through it.
    """
    if cfg.domain == "clone":
        raise ValueError("the clone synthesizer exposes no analytic gradient; "
                         "use blackbox_optimize")
    if cfg.playback_augment and kernels is None:
        raise ValueError("playback_augment needs a PlaybackKernels database")
    embeddings = gallery.all_embeddings()
    streams = _derive_streams(cfg.seed, 3)
    shuffle_rng = np.random.default_rng(streams[0])
    playback_rng = np.random.default_rng(streams[1])
    finalize_rng = np.random.default_rng(streams[2])
    shuffled = embeddings[shuffle_rng.permutation(embeddings.shape[0])]

    lam = float(cfg.step_size)
    ir_history: list[float] = []
    objective_history: list[float] = []

    if cfg.domain == "waveform":
        v = np.zeros(len(w0))
        base = w0.samples
        for _ in range(cfg.epochs):
            for sl in _batches(shuffled.shape[0], cfg.batch_size):
                batch = shuffled[sl]
                pre = base + v
                att = np.clip(pre, -1.0, 1.0)
                clip_mask = (pre > -1.0) & (pre < 1.0)
                if cfg.playback_augment:
                    draw = _playback_draw(kernels, playback_rng, att.size)
                    played, pb_mask = _playback_apply(att, draw)
                    sample = Waveform(played)
                else:
                    sample = Waveform(att)
                upstream = batch.mean(axis=0)
                g = waveform_grad(enc, sample, upstream)
                if cfg.playback_augment:
                    g = _playback_adjoint(g, draw, pb_mask)
                g *= clip_mask
                v = v + lam * normalize_gradient(g, cfg.norm_mode)
                if cfg.norm_mode == "linf_sign":
                    v = np.clip(v, -cfg.linf_budget, cfg.linf_budget)
            current = Waveform(np.clip(base + v, -1.0, 1.0))
            f = embed_waveform(enc, current)
            objective_history.append(similarity_objective(f, shuffled))
            ir = _monitor_ir(f, gallery, monitor)
            if ir is not None:
                ir_history.append(ir)
        final = Waveform(np.clip(base + v, -1.0, 1.0))

    else:  # spectrogram domain
        mag0 = spectrogram(w0, enc.stft).mag
        v = np.zeros_like(mag0)
        for _ in range(cfg.epochs):
            for sl in _batches(shuffled.shape[0], cfg.batch_size):
                batch = shuffled[sl]
                pre = mag0 + v
                pert = np.maximum(pre, 0.0)
                upstream = batch.mean(axis=0)
                g = _spec_domain_grad(enc, pert, upstream) * (pre > 0.0)
                v = v + lam * normalize_gradient(g, cfg.norm_mode)
                if cfg.norm_mode == "linf_sign":
                    v = np.clip(v, -cfg.linf_budget, cfg.linf_budget)
            f = _spec_domain_embed(enc, np.maximum(mag0 + v, 0.0))
            objective_history.append(similarity_objective(f, shuffled))
            ir = _monitor_ir(f, gallery, monitor)
            if ir is not None:
                ir_history.append(ir)
        final = apply_domain("spectrogram", w0, v, stft=enc.stft, finalize=True,
                             rng=finalize_rng, gl_iters=gl_iters)

    return MasterVoice(waveform=final, domain=cfg.domain, seed_id=seed_id,
                       attack_vector=v, ir_history=ir_history,
                       objective_history=objective_history,
                       distortion_snr=snr_db(w0, final))


# ---------------------------------------------------------------------------
# Black-box optimization


def nes_gradient(objective, x: np.ndarray, nes: NesConfig, rng: np.random.Generator,
                 batch_objective=None) -> np.ndarray:
    """Antithetic NES gradient estimate.

    Draws nes.samples standard normal directions and combines the 2s
    objective values as (1 / (2 s sigma)) * sum of (s(x + sigma d) -
    s(x - sigma d)) * d. Evaluations run in a fixed serial order
    (direction index ascending, + before -), so seeded runs reproduce.
    A constant objective cancels pairwise to an exactly zero estimate.

    batch_objective, when given, replaces the 2s serial calls with one
    call on the stacked query points (all + points, then all - points)
    returning a (2s,) value array. The direction draw consumes the rng
    stream identically either way, so both paths see the same
    perturbations; only the summation order of the estimate differs.
    """
    x = np.asarray(x, dtype=np.float64)
    if batch_objective is not None:
        deltas = rng.standard_normal((nes.samples,) + x.shape)
        points = np.concatenate([x[None] + nes.sigma * deltas,
                                 x[None] - nes.sigma * deltas])
        vals = np.asarray(batch_objective(points), dtype=np.float64)
        if vals.shape != (2 * nes.samples,):
            raise ValueError(f"batch objective returned shape {vals.shape}, "
                             f"expected ({2 * nes.samples},)")
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("objective returned a non-finite value")
        diff = vals[:nes.samples] - vals[nes.samples:]
        return np.tensordot(diff, deltas, axes=1) / (2.0 * nes.samples * nes.sigma)
    grad = np.zeros_like(x)
    for _ in range(nes.samples):
        delta = rng.standard_normal(x.shape)
        up = float(objective(x + nes.sigma * delta))
        down = float(objective(x - nes.sigma * delta))
        if not (math.isfinite(up) and math.isfinite(down)):
            raise FloatingPointError("objective returned a non-finite value")
        grad += (up - down) * delta
    return grad / (2.0 * nes.samples * nes.sigma)


def blackbox_optimize(seed_sample, score_fn, cfg: AttackConfig, nes: NesConfig,
                      gallery: Gallery | None = None, monitor: Policy | None = None,
                      monitor_embed=None, kernels: PlaybackKernels | None = None,
                      synth: CloneModel | None = None, tokens=None,
                      seed_id: str = "", seed_waveform: Waveform | None = None,
                      gl_iters: int = 50, score_batch_fn=None) -> MasterVoice:
    """Query-only master-voice optimization via NES.

    seed_sample is the seed Waveform for the waveform and spectrogram
    domains, or the initial embedding vector (inside [0, 1]^d) for the
    clone domain. score_fn(sample, batch) must return the mean-similarity
    score, e.g. a blackbox_score closure over an EncoderHandle. The loop
    mirrors whitebox_optimize batch for batch with nes_gradient in place
    of the analytic gradient; the clone domain re-clips the embedding
    into the cube after every step. Monitoring requires monitor_embed,
    an experimenter-side embedding function for the current sample.

    In the clone domain every objective call voices the candidate with a
    fresh deterministic RNG derived from the call index, so the attack
    faces the synthesizer's sampling noise honestly.

    score_batch_fn(samples_2d, batch) -> (stack,) scores, when provided,
    lets waveform-domain runs answer each NES step's 2s queries in one
    vectorized call (e.g. EncoderHandle.score_batch). Other domains and
    playback-augmented runs keep the serial path.
    """
    if cfg.playback_augment and kernels is None:
        raise ValueError("playback_augment needs a PlaybackKernels database")
    if monitor is not None and monitor_embed is None:
        raise ValueError("monitoring a black-box run needs monitor_embed")
    if gallery is None:
        raise ValueError("blackbox_optimize needs the optimization gallery embeddings")
    embeddings = gallery.all_embeddings()
    streams = _derive_streams(cfg.seed, 6)
    shuffle_rng = np.random.default_rng(streams[0])
    playback_rng = np.random.default_rng(streams[1])
    finalize_rng = np.random.default_rng(streams[2])
    nes_rng = np.random.default_rng(streams[3])
    eval_stream = streams[4]  # one child per clone synthesis call
    monitor_stream = streams[5]
    shuffled = embeddings[shuffle_rng.permutation(embeddings.shape[0])]
    lam = float(cfg.step_size)

    if cfg.domain == "clone":
        if synth is None:
            raise ValueError("clone domain needs a CloneModel synthesizer")
        v = np.asarray(seed_sample, dtype=np.float64).copy()
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("clone seed embedding must lie inside the unit cube")
        tokens = synth_tokens_default(tokens)
    elif cfg.domain == "waveform":
        w0 = seed_sample
        v = np.zeros(len(w0))
    else:
        w0 = seed_sample
        mag0 = spectrogram(w0, StftConfig()).mag
        v = np.zeros_like(mag0)

    sample_len = CLIP_SAMPLES if cfg.domain == "clone" else len(seed_sample)

    def realize(vec, rng_eval=None):
        if cfg.domain == "clone":
            return apply_domain("clone", None, vec, synth=synth, tokens=tokens,
                                rng=rng_eval)
        if cfg.domain == "waveform":
            return apply_domain("waveform", w0, vec)
        return apply_domain("spectrogram", w0, vec)

    ir_history: list[float] = []
    objective_history: list[float] = []
    for _ in range(cfg.epochs):
        epoch_scores = []
        for sl in _batches(shuffled.shape[0], cfg.batch_size):
            batch = shuffled[sl]
            draw = None
            if cfg.playback_augment:
                draw = _playback_draw(kernels, playback_rng, sample_len)

            def objective(vec):
                if cfg.domain == "clone":
                    sample = realize(vec, np.random.default_rng(eval_stream.spawn(1)[0]))
                else:
                    sample = realize(vec)
                if draw is not None:
                    played, _ = _playback_apply(sample.samples, draw)
                    sample = Waveform(played)
                return score_fn(sample, batch)

            batch_obj = None
            if (score_batch_fn is not None and cfg.domain == "waveform"
                    and draw is None):
                def batch_obj(points, batch=batch):
                    clipped = np.clip(w0.samples[None, :] + points, -1.0, 1.0)
                    return score_batch_fn(clipped, batch)

            epoch_scores.append(objective(v))
            g = nes_gradient(objective, v, nes, nes_rng, batch_objective=batch_obj)
            v = v + lam * normalize_gradient(g, cfg.norm_mode)
            if cfg.norm_mode == "linf_sign":
                v = np.clip(v, -cfg.linf_budget, cfg.linf_budget)
            if cfg.domain == "clone":
                v = np.clip(v, 0.0, 1.0)
        objective_history.append(float(np.mean(epoch_scores)))
        if monitor is not None:
            current = realize(v, np.random.default_rng(monitor_stream.spawn(1)[0]))
            ir = _monitor_ir(monitor_embed(current), gallery, monitor)
            if ir is not None:
                ir_history.append(ir)

    if cfg.domain == "clone":
        final = realize(v, finalize_rng)
        ref = seed_waveform
    elif cfg.domain == "waveform":
        final = realize(v)
        ref = w0
    else:
        final = apply_domain("spectrogram", w0, v, finalize=True, rng=finalize_rng,
                             gl_iters=gl_iters)
        ref = w0
    snr = snr_db(ref, final) if ref is not None and len(ref) == len(final) else math.nan
    return MasterVoice(waveform=final, domain=cfg.domain, seed_id=seed_id,
                       attack_vector=v, ir_history=ir_history,
                       objective_history=objective_history, distortion_snr=snr)
