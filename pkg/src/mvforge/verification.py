"""Enrollment, scoring policies, calibration curves, and attack metrics.

A gallery holds n enrolled unit-norm embeddings per user. Two decision
policies exist: 'any' compares a probe against each enrolled embedding
and takes the maximum cosine, 'avg' scores the probe against the
arithmetic mean of the enrolled embeddings. The mean is used as-is (its
norm is below one), which makes 'avg' scores systematically smaller
than raw pairwise cosines; normalize_avg restores unit norm for callers
who want the lenient variant. Acceptance is strict: score > tau.

Calibration is empirical: the ROC is evaluated on the exact grid of
observed scores, never on a parametric fit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.stats import rankdata

__all__ = [
    "Policy",
    "Gallery",
    "ScoreSet",
    "MenagerieRecord",
    "score",
    "verify",
    "roc",
    "auc",
    "eer",
    "threshold_at_far",
    "impersonation_rate",
    "menagerie",
    "spearman",
]

_UNIT_TOL = 1e-6


@dataclass(frozen=True)
class Policy:
    """Decision rule: 'any'/'avg' over n enrolled embeddings at threshold tau."""

    rho: str
    n: int
    tau: float
    normalize_avg: bool = False

    def __post_init__(self):
        if self.rho not in ("any", "avg"):
            raise ValueError(f"unknown policy rho {self.rho!r}")
        if self.n < 1:
            raise ValueError("policy needs n >= 1")
        if not (-1.0 <= self.tau <= 1.0):
            raise ValueError("tau must lie in [-1, 1]")


class Gallery:
    """Per-user enrollment store with cached mean embeddings."""

    def __init__(self, n: int, population_id: str = ""):
        if n < 1:
            raise ValueError("enrollment size must be >= 1")
        self.n = n
        self.population_id = population_id
        self.entries: dict[str, np.ndarray] = {}
        self.mean_cache: dict[str, np.ndarray] = {}

    def enroll(self, user_id: str, embeddings: np.ndarray) -> None:
        """Register exactly n unit-norm embeddings for a new user."""
        if user_id in self.entries:
            raise ValueError(f"user {user_id!r} already enrolled")
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != self.n:
            raise ValueError(f"expected {self.n} embeddings, got shape {emb.shape}")
        norms = np.linalg.norm(emb, axis=1)
        if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
            raise ValueError("enrolled embeddings must be unit-norm")
        self.entries[user_id] = emb
        self.mean_cache[user_id] = emb.mean(axis=0)

    def users(self) -> list[str]:
        return list(self.entries.keys())

    def all_embeddings(self) -> np.ndarray:
        """All enrolled embeddings stacked in user order, shape (users*n, e)."""
        if not self.entries:
            raise ValueError("gallery is empty")
        return np.concatenate(list(self.entries.values()), axis=0)

    def __len__(self) -> int:
        return len(self.entries)


def score(f: np.ndarray, gallery: Gallery, user_id: str, rho: str,
          normalize_avg: bool = False) -> float:
    """Similarity of probe embedding f against one user's enrollment."""
    if user_id not in gallery.entries:
        raise KeyError(f"unknown user {user_id!r}")
    if rho == "any":
        return float((gallery.entries[user_id] @ f).max())
    if rho == "avg":
        mean = gallery.mean_cache[user_id]
        if normalize_avg:
            mean = mean / max(np.linalg.norm(mean), 1e-12)
        return float(mean @ f)
    raise ValueError(f"unknown policy rho {rho!r}")


def verify(f: np.ndarray, gallery: Gallery, user_id: str, policy: Policy) -> bool:
    """Accept iff the policy score strictly exceeds tau."""
    if policy.n != gallery.n:
        raise ValueError(f"policy n={policy.n} does not match gallery n={gallery.n}")
    return score(f, gallery, user_id, policy.rho, policy.normalize_avg) > policy.tau


@dataclass
class ScoreSet:
    """Genuine and impostor trial scores plus a label for provenance."""

    genuine: np.ndarray
    impostor: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64)
        self.impostor = np.asarray(self.impostor, dtype=np.float64)


def collect_scores(gallery: Gallery, trials, rho: str = "any",
                   normalize_avg: bool = False, label: str = "") -> ScoreSet:
    """Score (embedding, claimed_user, is_genuine) trials under one policy."""
    genuine, impostor = [], []
    for f, user_id, is_genuine in trials:
        s = score(f, gallery, user_id, rho, normalize_avg)
        (genuine if is_genuine else impostor).append(s)
    return ScoreSet(genuine=np.array(genuine), impostor=np.array(impostor), label=label)


def roc(scores: ScoreSet) -> np.ndarray:
    """Empirical ROC table with columns (threshold, far, frr).

    Thresholds are the observed score values plus one sentinel below the
    minimum so the far=1 endpoint is present. far is the fraction of
    impostor scores strictly above the threshold, frr the fraction of
    genuine scores at or below it. Rows are sorted by threshold, so far
    is non-increasing and frr non-decreasing down the table.
    """
    if scores.genuine.size == 0 or scores.impostor.size == 0:
        raise ValueError("need both genuine and impostor scores")
    all_scores = np.concatenate([scores.genuine, scores.impostor])
    grid = np.unique(all_scores)
    grid = np.concatenate([[grid[0] - 1.0], grid])
    gen = np.sort(scores.genuine)
    imp = np.sort(scores.impostor)
    far = 1.0 - np.searchsorted(imp, grid, side="right") / imp.size
    frr = np.searchsorted(gen, grid, side="right") / gen.size
    return np.column_stack([grid, far, frr])


def auc(roc_table: np.ndarray) -> float:
    """Area under the (far, 1 - frr) curve by trapezoid.

    Integrates in descending-threshold order, along which far and the
    true-positive rate both ascend; sorting by far alone would order
    tied-far rows arbitrarily and clip the curve at shared vertices.
    """
    far = roc_table[::-1, 1]
    tpr = 1.0 - roc_table[::-1, 2]
    return float(integrate.trapezoid(tpr, far))


def eer(roc_table: np.ndarray) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Picks the grid row minimizing |far - frr| and returns the midpoint
    of the two rates there along with the threshold.
    """
    far, frr = roc_table[:, 1], roc_table[:, 2]
    i = int(np.argmin(np.abs(far - frr)))
    return float((far[i] + frr[i]) / 2.0), float(roc_table[i, 0])


def threshold_at_far(roc_table: np.ndarray, target_far: float) -> float:
    """Smallest threshold whose empirical far does not exceed target_far."""
    if not (0.0 <= target_far <= 1.0):
        raise ValueError("target_far must lie in [0, 1]")
    far = roc_table[:, 1]
    # A single repeated impostor score gives a degenerate two-step curve
    # that can only calibrate far = 0 or 1; refuse rather than mislead.
    if np.unique(far[far > 0]).size <= 1 and np.any(far == 0) and np.any(far == 1):
        raise ValueError("impostor scores are degenerate, cannot calibrate far target")
    ok = np.nonzero(far <= target_far)[0]
    if ok.size == 0:
        raise ValueError(f"no threshold reaches far <= {target_far}")
    return float(roc_table[ok[0], 0])


def impersonation_rate(samples, gallery: Gallery, policy: Policy, embed_fn=None) -> float:
    """Fraction of gallery users matched by at least one sample.

    samples may be embeddings or Waveforms; the latter require embed_fn.
    Per user the count of matching samples saturates at one, so a single
    strong sample and five redundant ones score the same.
    """
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    embs = []
    for s in samples:
        if isinstance(s, np.ndarray) and s.ndim == 1:
            embs.append(s)
        else:
            if embed_fn is None:
                raise ValueError("waveform samples require an embed_fn")
            embs.append(embed_fn(s))
    if not embs:
        raise ValueError("no samples given")
    hit = 0
    for user_id in gallery.users():
        if any(verify(f, gallery, user_id, policy) for f in embs):
            hit += 1
    return hit / len(gallery)


@dataclass(frozen=True)
class MenagerieRecord:
    """Per-user average genuine and impostor scores."""

    user_id: str
    avg_genuine: float
    avg_impostor: float


def menagerie(gallery: Gallery, probes_by_user: dict[str, np.ndarray]) -> list[MenagerieRecord]:
    """Per-user matching propensity summary.

    avg_genuine is the mean cosine between a user's probes and their own
    enrollment, avg_impostor the mean against everyone else's. Every
    enrolled user needs at least two probes.
    """
    users = gallery.users()
    if set(probes_by_user) != set(users):
        raise ValueError("probes must cover exactly the enrolled users")
    for uid, probes in probes_by_user.items():
        if np.asarray(probes).shape[0] < 2:
            raise ValueError(f"user {uid!r} has fewer than two probes")
    records = []
    for uid in users:
        probes = np.asarray(probes_by_user[uid])
        own = gallery.entries[uid]
        avg_genuine = float((probes @ own.T).mean())
        others = [gallery.entries[o] for o in users if o != uid]
        if others:
            rest = np.concatenate(others, axis=0)
            avg_impostor = float((probes @ rest.T).mean())
        else:
            avg_impostor = 0.0
        records.append(MenagerieRecord(uid, avg_genuine, avg_impostor))
    return records


def spearman(x, y) -> float:
    """Rank correlation: Pearson correlation of average-tie fractional ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two equal-length vectors")
    if x.size < 3:
        raise ValueError("need at least three observations")
    rx, ry = rankdata(x), rankdata(y)
    if rx.std() == 0 or ry.std() == 0:
        raise ValueError("constant input has no rank ordering")
    return float(np.corrcoef(rx, ry)[0, 1])
