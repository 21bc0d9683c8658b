"""Fixed-rate audio containers, STFT features, and spectrogram inversion.

All audio in this package is mono float64 at 16 kHz with samples in
[-1, 1]. Feature extraction is magnitude-based (not power) so that the
attack code can run gradients through the exact same transform the
verifier uses. Every feature routine therefore comes with a hand-written
vector-Jacobian product; there is no autodiff anywhere in the package.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field

import numpy as np

SAMPLE_RATE = 16000
CLIP_SECONDS = 2.58
CLIP_SAMPLES = 41280  # 2.58 s at 16 kHz

# Epsilon under the square root when differentiating |X|; keeps the
# magnitude gradient finite in empty time-frequency cells.
MAG_GRAD_EPS = 1e-12
# Per-column standard deviation floor used by feature_normalize.
NORM_EPS = 1e-8
LOG_FLOOR = 1e-10
MEL_FMIN = 0.0
MEL_FMAX = 8000.0

__all__ = [
    "SAMPLE_RATE",
    "CLIP_SECONDS",
    "CLIP_SAMPLES",
    "Waveform",
    "StftConfig",
    "Spectrogram",
    "FilterBankFeatures",
    "frame_count",
    "standardize",
    "spectrogram",
    "spectrogram_grad",
    "mel_filter_matrix",
    "filterbank",
    "filterbank_from_magnitude",
    "feature_normalize",
    "feature_normalize_grad",
    "griffin_lim",
    "istft_least_squares",
    "snr_db",
    "load_wav",
    "save_wav",
]


@dataclass(frozen=True)
class Waveform:
    """Mono 16 kHz audio with every sample in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-d, got shape {samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"unsupported sample rate {self.sample_rate}, expected {SAMPLE_RATE}")
        if samples.size and (samples.min() < -1.0 or samples.max() > 1.0):
            raise ValueError("waveform samples must lie in [-1, 1]")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """Analysis parameters: 25 ms Hamming window, 10 ms hop, 512-point FFT."""

    window_len: int = 400
    hop: int = 160
    fft_size: int = 512

    def __post_init__(self):
        if self.window_len <= 0 or self.hop <= 0:
            raise ValueError("window_len and hop must be positive")
        if self.fft_size < self.window_len:
            raise ValueError("fft_size must be >= window_len")

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass(frozen=True)
class Spectrogram:
    """One-sided STFT magnitudes, shape (num_bins, num_frames)."""

    mag: np.ndarray
    config: StftConfig


@dataclass(frozen=True)
class FilterBankFeatures:
    """Log mel-band energies, shape (bands, num_frames)."""

    energies: np.ndarray
    band_edges: np.ndarray


_WINDOW_CACHE: dict[int, np.ndarray] = {}


def _window(cfg: StftConfig) -> np.ndarray:
    win = _WINDOW_CACHE.get(cfg.window_len)
    if win is None:
        win = np.hamming(cfg.window_len)
        _WINDOW_CACHE[cfg.window_len] = win
    return win


def frame_count(num_samples: int, cfg: StftConfig) -> int:
    """Number of full analysis frames in a signal of num_samples."""
    if num_samples < cfg.window_len:
        raise ValueError(f"signal too short for analysis: {num_samples} < {cfg.window_len}")
    return (num_samples - cfg.window_len) // cfg.hop + 1


def standardize(w: Waveform, target_len: int = CLIP_SAMPLES, mode: str = "auto",
                rng: np.random.Generator | None = None) -> Waveform:
    """Bring a waveform to target_len samples.

    mode 'pad' appends zeros, 'crop' takes a random offset window drawn
    from rng, 'auto' picks whichever applies. Cropping without an rng is
    rejected so that callers cannot silently lose determinism.
    """
    if mode not in ("auto", "pad", "crop"):
        raise ValueError(f"unknown standardize mode {mode!r}")
    n = len(w)
    if n == target_len:
        return w
    if n < target_len:
        if mode == "crop":
            raise ValueError("cannot crop a waveform shorter than target_len")
        out = np.zeros(target_len)
        out[:n] = w.samples
        return Waveform(out)
    if mode == "pad":
        raise ValueError("cannot pad a waveform longer than target_len")
    if rng is None:
        raise ValueError("cropping requires an rng for the offset draw")
    offset = int(rng.integers(0, n - target_len + 1))
    return Waveform(w.samples[offset:offset + target_len].copy())


def _frames(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    t = frame_count(samples.size, cfg)
    view = np.lib.stride_tricks.sliding_window_view(samples, cfg.window_len)
    return view[::cfg.hop][:t]


def _stft_complex(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """One-sided complex STFT, shape (num_frames, num_bins)."""
    frames = _frames(samples, cfg) * _window(cfg)
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1)


def _stft_mag_batch(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Magnitude spectrograms of a (stack, length) array of signals.

    Returns (stack, num_frames, num_bins) in time-major layout; each
    slice transposed equals the single-signal spectrogram of its row.
    """
    t = frame_count(samples.shape[1], cfg)
    view = np.lib.stride_tricks.sliding_window_view(samples, cfg.window_len, axis=1)
    frames = view[:, ::cfg.hop][:, :t] * _window(cfg)
    return np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=2))


def spectrogram(w: Waveform, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Magnitude spectrogram of shape (fft_size // 2 + 1, num_frames)."""
    mag = np.abs(_stft_complex(w.samples, cfg)).T
    return Spectrogram(mag=mag, config=cfg)


def spectrogram_grad(samples: np.ndarray, cfg: StftConfig, upstream: np.ndarray) -> np.ndarray:
    """VJP of the magnitude spectrogram with respect to the waveform.

    Args:
        samples: waveform samples the forward pass saw.
        cfg: analysis parameters of the forward pass.
        upstream: cotangent on the magnitudes, shape (num_bins, num_frames).

    Returns:
        Gradient with the same shape as samples. Cells where the forward
        magnitude is exactly zero contribute the subgradient zero.
    """
    x = _stft_complex(samples, cfg)
    g = upstream.T
    if g.shape != x.shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match spectrogram")
    stab = np.sqrt(x.real ** 2 + x.imag ** 2 + MAG_GRAD_EPS)
    gc = g * x / stab
    # Adjoint of the one-sided rfft: interior bins stand for a conjugate
    # pair each, so they enter the inverse transform at half weight.
    gc[:, 1:-1] *= 0.5
    frames_g = np.fft.irfft(gc, n=cfg.fft_size, axis=1)[:, :cfg.window_len] * cfg.fft_size
    frames_g *= _window(cfg)
    out = np.zeros_like(samples)
    for t in range(frames_g.shape[0]):
        s = t * cfg.hop
        out[s:s + cfg.window_len] += frames_g[t]
    return out


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


_MEL_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def mel_filter_matrix(bands: int, cfg: StftConfig = StftConfig(),
                      fmin: float = MEL_FMIN, fmax: float = MEL_FMAX) -> tuple[np.ndarray, np.ndarray]:
    """Triangular mel filterbank.

    Returns (matrix, band_edges): matrix has shape (bands, num_bins) and
    band_edges the bands + 2 edge frequencies in Hz.
    """
    key = (bands, cfg.fft_size, fmin, fmax)
    cached = _MEL_CACHE.get(key)
    if cached is not None:
        return cached
    if bands < 1:
        raise ValueError("need at least one band")
    if bands > cfg.fft_size // 2:
        raise ValueError(f"{bands} bands cannot fit {cfg.fft_size // 2} usable bins")
    edges_hz = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), bands + 2))
    freqs = np.arange(cfg.num_bins) * (SAMPLE_RATE / cfg.fft_size)
    mat = np.zeros((bands, cfg.num_bins))
    for b in range(bands):
        lo, mid, hi = edges_hz[b], edges_hz[b + 1], edges_hz[b + 2]
        rising = (freqs - lo) / max(mid - lo, 1e-9)
        falling = (hi - freqs) / max(hi - mid, 1e-9)
        mat[b] = np.clip(np.minimum(rising, falling), 0.0, None)
    result = (mat, edges_hz)
    _MEL_CACHE[key] = result
    return result


def filterbank_from_magnitude(mag: np.ndarray, bands: int = 24,
                              cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Log mel-band energies from a magnitude spectrogram (bins, frames)."""
    mat, _ = mel_filter_matrix(bands, cfg)
    energy = mat @ (mag ** 2)
    return np.log(np.maximum(energy, LOG_FLOOR))


def filterbank(w: Waveform, cfg: StftConfig = StftConfig(), bands: int = 24) -> FilterBankFeatures:
    """Log mel filterbank features, same frame count as the spectrogram."""
    mag = spectrogram(w, cfg).mag
    _, edges = mel_filter_matrix(bands, cfg)
    return FilterBankFeatures(energies=filterbank_from_magnitude(mag, bands, cfg), band_edges=edges)


def filterbank_grad(samples: np.ndarray, cfg: StftConfig, upstream: np.ndarray,
                    bands: int = 24) -> np.ndarray:
    """VJP of the log mel filterbank with respect to the waveform."""
    mat, _ = mel_filter_matrix(bands, cfg)
    mag = np.abs(_stft_complex(samples, cfg)).T
    energy = mat @ (mag ** 2)
    g_energy = np.where(energy > LOG_FLOOR, upstream / np.maximum(energy, LOG_FLOOR), 0.0)
    g_mag = 2.0 * mag * (mat.T @ g_energy)
    return spectrogram_grad(samples, cfg, g_mag)


def _as_feature_array(a) -> np.ndarray:
    if isinstance(a, Spectrogram):
        return a.mag
    if isinstance(a, FilterBankFeatures):
        return a.energies
    return np.asarray(a, dtype=np.float64)


def feature_normalize(a):
    """Standardize each time step: zero mean, unit variance over frequency.

    Columns whose standard deviation falls below the epsilon floor come
    out all zero instead of dividing by zero. Accepts a Spectrogram,
    FilterBankFeatures, or plain array and returns the same type.
    """
    arr = _as_feature_array(a)
    mu = arr.mean(axis=0)
    sd = arr.std(axis=0)
    out = (arr - mu) / np.maximum(sd, NORM_EPS)
    if isinstance(a, Spectrogram):
        return Spectrogram(mag=out, config=a.config)
    if isinstance(a, FilterBankFeatures):
        return FilterBankFeatures(energies=out, band_edges=a.band_edges)
    return out


def feature_normalize_grad(raw: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """VJP of feature_normalize with respect to the raw feature matrix."""
    mu = raw.mean(axis=0)
    sd = raw.std(axis=0)
    s = np.maximum(sd, NORM_EPS)
    z = (raw - mu) / s
    g_bar = upstream.mean(axis=0)
    # The variance term only exists where the std is live, not floored.
    gz = np.where(sd > NORM_EPS, (upstream * z).mean(axis=0), 0.0)
    return (upstream - g_bar - z * gz) / s


def istft_least_squares(spec: np.ndarray, cfg: StftConfig, length: int | None = None) -> np.ndarray:
    """Least-squares inverse STFT via windowed overlap-add.

    spec has shape (num_frames, num_bins). The output minimizes the sum of
    squared per-frame spectral errors, which is what makes the alternating
    projection in griffin_lim monotone.
    """
    frames_time = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, :cfg.window_len]
    t = frames_time.shape[0]
    n = (t - 1) * cfg.hop + cfg.window_len if length is None else length
    win = _window(cfg)
    num = np.zeros(n)
    den = np.zeros(n)
    for i in range(t):
        s = i * cfg.hop
        e = min(s + cfg.window_len, n)
        num[s:e] += win[:e - s] * frames_time[i, :e - s]
        den[s:e] += win[:e - s] ** 2
    return num / np.maximum(den, 1e-12)


def griffin_lim(mag, iters: int, rng: np.random.Generator,
                cfg: StftConfig | None = None, callback=None) -> Waveform:
    """Recover a waveform whose spectrogram magnitude approximates mag.

    Classic alternating projection. Each frequency bin starts from a
    uniform random phase drawn from rng, advanced across frames by the
    bin's natural per-hop increment (2*pi*k*hop/fft_size), i.e. the
    progression a stationary signal in that bin would exhibit. This
    time-coherent start converges markedly faster than cell-wise noise
    while every bin's initial phase stays uniformly random. callback,
    when given, is invoked per iteration as callback(i, samples,
    rel_error) where rel_error is the relative spectral magnitude error
    of the current estimate.

    Args:
        mag: Spectrogram or array of shape (num_bins, num_frames).
        iters: number of projection iterations, >= 1.
        rng: seeded generator for the phase initialization.

    Returns:
        Waveform of length (num_frames - 1) * hop + window_len, clipped
        into [-1, 1].
    """
    if isinstance(mag, Spectrogram):
        cfg = mag.config if cfg is None else cfg
        target = mag.mag
    else:
        cfg = StftConfig() if cfg is None else cfg
        target = np.asarray(mag, dtype=np.float64)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if target.ndim != 2 or target.shape[0] != cfg.num_bins:
        raise ValueError(f"magnitude shape {target.shape} does not match config")
    if target.min() < 0:
        raise ValueError("magnitudes must be nonnegative")
    m = target.T  # (frames, bins)
    m_norm = np.linalg.norm(m)
    bins = np.arange(m.shape[1])
    ramp = np.outer(np.arange(m.shape[0]), bins) * cfg.hop / cfg.fft_size
    phase = np.exp(2j * np.pi * (rng.random((1, m.shape[1])) + ramp))
    samples = istft_least_squares(m * phase, cfg)
    for i in range(iters):
        x = _stft_complex(samples, cfg)
        err = np.linalg.norm(np.abs(x) - m) / max(m_norm, 1e-300)
        if callback is not None:
            callback(i, samples, err)
        phase = x / np.maximum(np.abs(x), 1e-12)
        samples = istft_least_squares(m * phase, cfg)
    return Waveform(np.clip(samples, -1.0, 1.0))


def snr_db(reference: Waveform, test: Waveform) -> float:
    """Signal-to-noise ratio of test against reference in dB.

    Identical signals return math.inf. Length mismatch is an error.
    """
    if len(reference) != len(test):
        raise ValueError("snr_db requires equal-length waveforms")
    noise = reference.samples - test.samples
    p_noise = float(noise @ noise)
    if p_noise == 0.0:
        return math.inf
    p_ref = float(reference.samples @ reference.samples)
    return 10.0 * math.log10(p_ref / p_noise)


def save_wav(w: Waveform, path) -> None:
    """Write 16-bit PCM mono RIFF at 16 kHz."""
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def load_wav(path) -> Waveform:
    """Read a mono 16-bit 16 kHz RIFF file; anything else is rejected."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        if fh.getframerate() != SAMPLE_RATE:
            raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz, got {fh.getframerate()}")
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    # Full-scale -32768 would land just below -1 under the /32767 scale.
    return Waveform(np.clip(pcm.astype(np.float64) / 32767.0, -1.0, 1.0))
