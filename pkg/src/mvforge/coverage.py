"""Multi-attempt dictionary selection: who to present, in what order.

A binary impersonation matrix records which candidate samples match
which enrolled users under a fixed policy. The selectors then pick an
ordered dictionary of c candidates: by individual match counts
(independent), by greedy marginal gain over still-uncovered users
(complementary), uniformly at random, or by exhaustive search (the
testing oracle). Greedy maximum coverage carries the usual (1 - 1/e)
guarantee against the exhaustive optimum.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from .verification import Gallery, Policy, verify

__all__ = [
    "ImpersonationMatrix",
    "SelectionResult",
    "impersonation_matrix",
    "select_independent",
    "select_complementary",
    "select_random",
    "brute_force_optimal",
    "selection_curve",
    "evaluate_selection",
]


@dataclass(frozen=True)
class ImpersonationMatrix:
    """Binary candidates x users matrix of verification outcomes."""

    b: np.ndarray
    candidate_ids: tuple
    user_ids: tuple

    def __post_init__(self):
        b = np.asarray(self.b)
        if b.ndim != 2:
            raise ValueError("matrix must be 2-d (candidates x users)")
        if not np.isin(b, (0, 1)).all():
            raise ValueError("matrix entries must be 0 or 1")
        if b.shape != (len(self.candidate_ids), len(self.user_ids)):
            raise ValueError("matrix shape does not match the id lists")
        object.__setattr__(self, "b", b.astype(np.int8))


@dataclass(frozen=True)
class SelectionResult:
    """Ordered dictionary of candidate ids with cumulative coverage."""

    chosen: tuple
    per_attempt_coverage: tuple

    def __post_init__(self):
        cov = self.per_attempt_coverage
        if any(b < a - 1e-12 for a, b in zip(cov, cov[1:])):
            raise ValueError("cumulative coverage must be non-decreasing")

    @property
    def coverage(self) -> float:
        return self.per_attempt_coverage[-1] if self.per_attempt_coverage else 0.0


def impersonation_matrix(candidates, gallery: Gallery, policy: Policy,
                         embed_fn=None, candidate_ids=None) -> ImpersonationMatrix:
    """Verify every candidate against every enrolled user.

    Candidates may be unit embeddings (1-d arrays) or raw samples, in
    which case embed_fn maps a sample to its embedding.
    """
    if len(candidates) == 0:
        raise ValueError("no candidates")
    users = gallery.users()
    if candidate_ids is None:
        candidate_ids = tuple(f"c{i:03d}" for i in range(len(candidates)))
    if len(candidate_ids) != len(candidates):
        raise ValueError("candidate_ids length mismatch")
    b = np.zeros((len(candidates), len(users)), dtype=np.int8)
    for ci, cand in enumerate(candidates):
        if isinstance(cand, np.ndarray) and cand.ndim == 1:
            f = cand
        elif embed_fn is not None:
            f = embed_fn(cand)
        else:
            raise ValueError("non-embedding candidates need embed_fn")
        for ui, user in enumerate(users):
            b[ci, ui] = verify(f, gallery, user, policy)
    return ImpersonationMatrix(b=b, candidate_ids=tuple(candidate_ids),
                               user_ids=tuple(users))


def _coverage_curve(b: np.ndarray, order: list[int]) -> tuple:
    m = b.shape[1]
    covered = np.zeros(m, dtype=bool)
    curve = []
    for idx in order:
        covered |= b[idx].astype(bool)
        curve.append(covered.sum() / m)
    return tuple(curve)


def _result(matrix: ImpersonationMatrix, order: list[int]) -> SelectionResult:
    return SelectionResult(chosen=tuple(matrix.candidate_ids[i] for i in order),
                           per_attempt_coverage=_coverage_curve(matrix.b, order))


def select_independent(matrix: ImpersonationMatrix, c: int) -> SelectionResult:
    """Top-c candidates by individual user count, ties to the lower index."""
    if c < 1:
        raise ValueError("c must be >= 1")
    sums = matrix.b.sum(axis=1)
    # argsort on (-sum, index) pairs keeps ties in index order
    order = sorted(range(len(sums)), key=lambda i: (-sums[i], i))[: min(c, len(sums))]
    return _result(matrix, order)


def _independent_order(b: np.ndarray) -> list[int]:
    sums = b.sum(axis=1)
    return sorted(range(len(sums)), key=lambda i: (-sums[i], i))


def select_complementary(matrix: ImpersonationMatrix, c: int) -> SelectionResult:
    """Greedy maximum coverage over the still-uncovered users.

    Each step picks the candidate with the largest marginal gain (ties
    to the lower index) and stops early once every coverable user is
    covered; remaining slots are filled by independent ranking so the
    dictionary always has min(c, c') entries.
    """
    if c < 1:
        raise ValueError("c must be >= 1")
    b = matrix.b.astype(bool)
    cprime = b.shape[0]
    take = min(c, cprime)
    covered = np.zeros(b.shape[1], dtype=bool)
    order: list[int] = []
    remaining = set(range(cprime))
    while len(order) < take:
        gains = [(int((b[i] & ~covered).sum()), i) for i in sorted(remaining)]
        gain, best = max(gains, key=lambda t: (t[0], -t[1]))
        if gain == 0:
            break
        order.append(best)
        remaining.discard(best)
        covered |= b[best]
    for i in _independent_order(matrix.b):
        if len(order) >= take:
            break
        if i in remaining:
            order.append(i)
            remaining.discard(i)
    return _result(matrix, order)


def select_random(matrix: ImpersonationMatrix, c: int, rng: np.random.Generator) -> SelectionResult:
    """Uniform dictionary without replacement, in drawn order."""
    if c < 1:
        raise ValueError("c must be >= 1")
    cprime = matrix.b.shape[0]
    order = list(rng.permutation(cprime)[: min(c, cprime)])
    return _result(matrix, [int(i) for i in order])


def brute_force_optimal(matrix: ImpersonationMatrix, c: int) -> SelectionResult:
    """Exhaustive maximum-coverage oracle; refuses instances over 1e6 subsets."""
    if c < 1:
        raise ValueError("c must be >= 1")
    cprime = matrix.b.shape[0]
    take = min(c, cprime)
    if comb(cprime, take) > 10 ** 6:
        raise ValueError("instance too large for exhaustive search")
    b = matrix.b.astype(bool)
    best_cov, best_combo = -1, None
    for combo in combinations(range(cprime), take):
        cov = int(np.logical_or.reduce(b[list(combo)]).sum())
        if cov > best_cov:
            best_cov, best_combo = cov, combo
    return _result(matrix, list(best_combo))


def selection_curve(chosen, gallery: Gallery, policy: Policy, embed_fn=None) -> tuple:
    """Cumulative matched fraction after each presented attempt."""
    if len(chosen) == 0:
        raise ValueError("no samples chosen")
    matrix = impersonation_matrix(chosen, gallery, policy, embed_fn=embed_fn)
    return _coverage_curve(matrix.b, list(range(matrix.b.shape[0])))


def evaluate_selection(chosen, gallery: Gallery, policy: Policy, embed_fn=None) -> float:
    """Multi-attempt impersonation rate of an ordered dictionary.

    A user counts as matched if any presented sample matches; returns
    the matched fraction over the gallery, identical to the union row
    of an impersonation matrix on the same inputs.
    """
    return selection_curve(chosen, gallery, policy, embed_fn=embed_fn)[-1]
