"""Small analytically differentiable speaker encoders.

Each encoder is a per-frame tanh projection, a temporal mean pool, and a
linear map onto the unit sphere. That is deliberately shallow: it trains
in seconds on the synthetic population, separates speakers well enough
to calibrate sensible thresholds, and every gradient the attacks need is
written out by hand, so nothing in the package depends on autodiff.

Two stock architectures consume magnitude spectrograms and one consumes
log mel filterbanks, mirroring a front-end split between verification
back ends. Training attaches a temporary softmax speaker-classification
head that is discarded afterwards; only the embedding trunk ships.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .audio import (
    LOG_FLOOR,
    NORM_EPS,
    FilterBankFeatures,
    Spectrogram,
    StftConfig,
    Waveform,
    _stft_mag_batch,
    feature_normalize,
    feature_normalize_grad,
    filterbank_from_magnitude,
    filterbank_grad,
    mel_filter_matrix,
    spectrogram,
    spectrogram_grad,
)

DEFAULT_HIDDEN = 32
DEFAULT_EMBED = 64
DEFAULT_BANDS = 24

# arch_id -> (input_kind, default init seed)
STOCK_ARCHS = {
    "spec-a": ("spectrogram", 101),
    "spec-b": ("spectrogram", 202),
    "fbank-x": ("filterbank", 303),
}

__all__ = [
    "ToyEncoder",
    "EncoderHandle",
    "STOCK_ARCHS",
    "make_encoder",
    "encode",
    "encode_backward",
    "raw_features",
    "embed_waveform",
    "embed_batch",
    "waveform_grad",
    "features_grad",
    "train_encoder",
    "save_encoder",
    "load_encoder",
    "cosine",
    "blackbox_score",
]


@dataclass(frozen=True)
class ToyEncoder:
    """Frame projection + mean pool + linear map, embeddings on the unit sphere."""

    arch_id: str
    input_kind: str  # "spectrogram" or "filterbank"
    w1: np.ndarray  # (hidden, feature_dim)
    b1: np.ndarray
    w2: np.ndarray  # (embed_dim, hidden)
    b2: np.ndarray
    init_seed: int
    classifier_head: np.ndarray | None = None  # (num_classes, embed_dim), training only
    stft: StftConfig = StftConfig()
    bands: int = DEFAULT_BANDS

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w2.shape[0]


def make_encoder(arch_id: str, input_kind: str | None = None,
                 hidden_dim: int = DEFAULT_HIDDEN, embed_dim: int = DEFAULT_EMBED,
                 init_seed: int | None = None, stft: StftConfig = StftConfig(),
                 bands: int = DEFAULT_BANDS) -> ToyEncoder:
    """Build an untrained encoder. Stock arch ids fill in kind and seed."""
    if arch_id in STOCK_ARCHS:
        stock_kind, stock_seed = STOCK_ARCHS[arch_id]
        input_kind = stock_kind if input_kind is None else input_kind
        init_seed = stock_seed if init_seed is None else init_seed
    if input_kind not in ("spectrogram", "filterbank"):
        raise ValueError(f"unknown input kind {input_kind!r}")
    if init_seed is None:
        init_seed = 0
    k = stft.num_bins if input_kind == "spectrogram" else bands
    rng = np.random.default_rng(init_seed)
    w1 = rng.standard_normal((hidden_dim, k)) / np.sqrt(k)
    w2 = rng.standard_normal((embed_dim, hidden_dim)) / np.sqrt(hidden_dim)
    return ToyEncoder(arch_id=arch_id, input_kind=input_kind, w1=w1,
                      b1=np.zeros(hidden_dim), w2=w2, b2=np.zeros(embed_dim),
                      init_seed=init_seed, stft=stft, bands=bands)


def _feat_array(feats) -> np.ndarray:
    if isinstance(feats, Spectrogram):
        return feats.mag
    if isinstance(feats, FilterBankFeatures):
        return feats.energies
    return np.asarray(feats, dtype=np.float64)


def encode(enc: ToyEncoder, feats) -> np.ndarray:
    """Unit-norm embedding of a (feature_dim, frames) matrix."""
    a = _feat_array(feats)
    if a.ndim != 2 or a.shape[0] != enc.feature_dim:
        raise ValueError(f"features of shape {a.shape} do not fit feature_dim {enc.feature_dim}")
    h = np.tanh(enc.w1 @ a + enc.b1[:, None])
    out = enc.w2 @ h.mean(axis=1) + enc.b2
    return out / max(np.linalg.norm(out), 1e-12)


def encode_backward(enc: ToyEncoder, feats, upstream: np.ndarray) -> np.ndarray:
    """VJP of encode with respect to the input features.

    upstream is the cotangent on the unit-norm embedding; the projection
    through the normalization, pooling, and tanh stages is analytic.
    """
    a = _feat_array(feats)
    t = a.shape[1]
    h = np.tanh(enc.w1 @ a + enc.b1[:, None])
    out = enc.w2 @ h.mean(axis=1) + enc.b2
    norm = max(np.linalg.norm(out), 1e-12)
    f = out / norm
    g_out = (upstream - (upstream @ f) * f) / norm
    g_m = enc.w2.T @ g_out
    g_z = (g_m[:, None] / t) * (1.0 - h * h)
    return enc.w1.T @ g_z


def raw_features(enc: ToyEncoder, w: Waveform) -> np.ndarray:
    """Pre-normalization feature matrix in the encoder's input kind."""
    mag = spectrogram(w, enc.stft).mag
    if enc.input_kind == "spectrogram":
        return mag
    return filterbank_from_magnitude(mag, enc.bands, enc.stft)


def embed_waveform(enc: ToyEncoder, w: Waveform) -> np.ndarray:
    """Full verification front end: waveform -> features -> normalize -> encode."""
    return encode(enc, feature_normalize(raw_features(enc, w)))


def embed_batch(enc: ToyEncoder, samples: np.ndarray) -> np.ndarray:
    """Unit-norm embeddings of a (stack, length) array of raw samples.

    Row-for-row equal to embed_waveform, vectorized. One call replaces
    hundreds of per-sample front-end passes, which is what keeps
    query-hungry black-box attacks inside their time budgets. Large
    stacks are processed in slabs so the frame tensors stay cache-sized.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError("expected a (stack, length) sample array")
    slab = 4
    if samples.shape[0] > slab:
        return np.concatenate([embed_batch(enc, samples[i:i + slab])
                               for i in range(0, samples.shape[0], slab)])
    # Time-major (stack, frames, bins) layout throughout: per-time-step
    # normalization then runs over the contiguous last axis.
    feats = _stft_mag_batch(samples, enc.stft)
    if enc.input_kind == "filterbank":
        mat, _ = mel_filter_matrix(enc.bands, enc.stft)
        feats = np.log(np.maximum((feats ** 2) @ mat.T, LOG_FLOOR))
    mu = feats.mean(axis=2, keepdims=True)
    sd = feats.std(axis=2, keepdims=True)
    z = (feats - mu) / np.maximum(sd, NORM_EPS)
    h = np.tanh(z @ enc.w1.T + enc.b1)
    out = h.mean(axis=1) @ enc.w2.T + enc.b2
    norms = np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-12)
    return out / norms


def waveform_grad(enc: ToyEncoder, samples: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """VJP of embed_waveform back to the raw samples."""
    w = Waveform(np.clip(samples, -1.0, 1.0)) if isinstance(samples, np.ndarray) else samples
    raw = raw_features(enc, w)
    g_raw = features_grad(enc, raw, upstream)
    if enc.input_kind == "spectrogram":
        return spectrogram_grad(w.samples, enc.stft, g_raw)
    return filterbank_grad(w.samples, enc.stft, g_raw, enc.bands)


def features_grad(enc: ToyEncoder, raw: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """VJP of normalize + encode with respect to the raw feature matrix."""
    g_norm = encode_backward(enc, feature_normalize(raw), upstream)
    return feature_normalize_grad(raw, g_norm)


def cosine(f1: np.ndarray, f2: np.ndarray) -> float:
    """Cosine similarity of two unit-norm embeddings (plain dot product)."""
    if f1.shape != f2.shape:
        raise ValueError("embedding dimension mismatch")
    return float(f1 @ f2)


def _dataset_features(enc: ToyEncoder, dataset) -> tuple[np.ndarray, np.ndarray, list]:
    speaker_ids = list(dataset.keys())
    feats, labels = [], []
    for idx, sid in enumerate(speaker_ids):
        entry = dataset[sid]
        utts = entry.utterances if hasattr(entry, "utterances") else entry
        for w in utts:
            feats.append(feature_normalize(raw_features(enc, w)))
            labels.append(idx)
    shapes = {f.shape for f in feats}
    if len(shapes) != 1:
        raise ValueError(f"training utterances disagree on feature shape: {shapes}")
    return np.stack(feats), np.asarray(labels), speaker_ids


def train_encoder(enc: ToyEncoder, dataset, epochs: int, lr: float,
                  rng: np.random.Generator, batch_size: int = 64):
    """Train by softmax speaker classification with plain minibatch SGD.

    dataset maps speaker_id to an utterance list (or to any object with
    an .utterances attribute). Returns (trained_encoder, history) where
    history carries the per-epoch mean loss and the final training
    accuracy; the classification head is dropped from the result.
    """
    if len(dataset) < 2:
        raise ValueError("training needs at least two speakers")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    feats, labels, _ = _dataset_features(enc, dataset)
    n, _, t = feats.shape
    num_classes = int(labels.max()) + 1
    one_hot = np.eye(num_classes)[labels]

    w1, b1, w2, b2 = enc.w1.copy(), enc.b1.copy(), enc.w2.copy(), enc.b2.copy()
    head = enc.classifier_head
    if head is None or head.shape != (num_classes, enc.embed_dim):
        head = rng.standard_normal((num_classes, enc.embed_dim)) / np.sqrt(enc.embed_dim)
    else:
        head = head.copy()

    def forward(a):
        z = np.matmul(w1[None], a) + b1[None, :, None]
        hid = np.tanh(z)
        pooled = hid.mean(axis=2)
        out = pooled @ w2.T + b2
        norms = np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-12)
        emb = out / norms
        logits = emb @ head.T
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        return hid, pooled, norms, emb, p

    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            sel = order[start:start + batch_size]
            a, y = feats[sel], one_hot[sel]
            b = len(sel)
            hid, pooled, norms, emb, p = forward(a)
            epoch_loss += float(-np.log(np.maximum((p * y).sum(axis=1), 1e-300)).sum())

            d_logits = (p - y) / b
            d_head = d_logits.T @ emb
            d_emb = d_logits @ head
            d_out = (d_emb - (d_emb * emb).sum(axis=1, keepdims=True) * emb) / norms
            d_w2 = d_out.T @ pooled
            d_b2 = d_out.sum(axis=0)
            d_pool = d_out @ w2
            d_z = (d_pool[:, :, None] / t) * (1.0 - hid * hid)
            d_w1 = np.tensordot(d_z, a, axes=((0, 2), (0, 2)))
            d_b1 = d_z.sum(axis=(0, 2))

            head -= lr * d_head
            w2 -= lr * d_w2
            b2 -= lr * d_b2
            w1 -= lr * d_w1
            b1 -= lr * d_b1
        losses.append(epoch_loss / n)

    _, _, _, _, p = forward(feats)
    accuracy = float((p.argmax(axis=1) == labels).mean())
    trained = replace(enc, w1=w1, b1=b1, w2=w2, b2=b2, classifier_head=None)
    return trained, {"loss": losses, "train_accuracy": accuracy}


def save_encoder(enc: ToyEncoder, path) -> None:
    """Serialize an encoder to JSON.

    Layout: format tag, arch_id, input_kind, init_seed, stft
    {window_len, hop, fft_size}, bands, and the four parameter arrays as
    row-major nested lists. Floats use repr, so a load round-trips
    bit-identically. The classifier head is training-only state and is
    not persisted.
    """
    doc = {
        "format": "mvforge-encoder-v1",
        "arch_id": enc.arch_id,
        "input_kind": enc.input_kind,
        "init_seed": enc.init_seed,
        "stft": {"window_len": enc.stft.window_len, "hop": enc.stft.hop,
                 "fft_size": enc.stft.fft_size},
        "bands": enc.bands,
        "w1": enc.w1.tolist(),
        "b1": enc.b1.tolist(),
        "w2": enc.w2.tolist(),
        "b2": enc.b2.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_encoder(path) -> ToyEncoder:
    """Load an encoder serialized by save_encoder."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "mvforge-encoder-v1":
        raise ValueError(f"not an encoder file: {path}")
    return ToyEncoder(arch_id=doc["arch_id"], input_kind=doc["input_kind"],
                      w1=np.asarray(doc["w1"], dtype=np.float64),
                      b1=np.asarray(doc["b1"], dtype=np.float64),
                      w2=np.asarray(doc["w2"], dtype=np.float64),
                      b2=np.asarray(doc["b2"], dtype=np.float64),
                      init_seed=doc["init_seed"],
                      stft=StftConfig(window_len=doc["stft"]["window_len"],
                                      hop=doc["stft"]["hop"],
                                      fft_size=doc["stft"]["fft_size"]),
                      bands=doc["bands"])


class EncoderHandle:
    """Attack-facing wrapper around a deployed encoder.

    mode 'white_box' exposes the encoder and its gradients; 'black_box'
    answers similarity queries only and refuses any parameter access.
    """

    def __init__(self, enc: ToyEncoder, mode: str):
        if mode not in ("white_box", "black_box"):
            raise ValueError(f"unknown handle mode {mode!r}")
        self._enc = enc
        self.mode = mode

    @property
    def encoder(self) -> ToyEncoder:
        if self.mode != "white_box":
            raise PermissionError("black-box handle does not expose the encoder")
        return self._enc

    def embed(self, sample) -> np.ndarray:
        if self.mode != "white_box":
            raise PermissionError("black-box handle does not expose embeddings")
        return self._embed(sample)

    def _embed(self, sample) -> np.ndarray:
        if isinstance(sample, Waveform):
            return embed_waveform(self._enc, sample)
        # Raw feature matrix in the encoder's input representation.
        return encode(self._enc, feature_normalize(_feat_array(sample)))

    def score(self, sample, batch: np.ndarray) -> float:
        """Mean cosine similarity between sample and a batch of embeddings."""
        return float((np.atleast_2d(batch) @ self._embed(sample)).mean())

    def score_batch(self, samples: np.ndarray, batch: np.ndarray) -> np.ndarray:
        """Mean cosine of each sample row against a batch of embeddings.

        Query-only like score: returns similarity values, never
        embeddings, so black-box handles answer it too.
        """
        embs = embed_batch(self._enc, samples)
        return (embs @ np.atleast_2d(batch).T).mean(axis=1)


def blackbox_score(handle: EncoderHandle, sample, batch: np.ndarray) -> float:
    """Query-only similarity: mean cosine of sample against batch embeddings."""
    return handle.score(sample, batch)
