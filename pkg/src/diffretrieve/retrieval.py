"""Differentiable patch selection with Gumbel-perturbed temperature softmax.

``iterative_retrieve`` picks one patch per candidate group in ``n`` relaxed
rounds.  Each round scores every candidate by ``-||f_i - query||`` plus fresh
Gumbel noise, subtracts the accumulated group-exclusion penalties
``log(1 - max_group s)``, takes a temperature softmax, and moves the query
halfway towards the score-weighted patch feature.

Alongside the relaxed scores a hard reading is tracked: each round picks the
argmax of the perturbed logits with already-picked groups masked out, so the
hard picks always land in distinct groups whatever the temperature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bank import CandidateSet, PatchRecord
from .diffmath import (
    SENTINEL,
    AffineParams,
    InvalidArgument,
    Tensor,
    as_tensor,
    exp,
    group_max,
    gumbel_noise,
    l2_dist,
    log,
    matmul,
    maximum,
    mlp_forward,
    softmax_tau,
    stack,
    sum_,
    value_of,
)

EXCLUSION_EPS = 1e-12
QUERY_INITS = ("random-candidate", "given-feature")
NOISE_MODES = ("gumbel", "disabled")


@dataclass(frozen=True)
class RetrievalConfig:
    tau: float = 0.1
    k: int = 10
    query_init: str = "random-candidate"
    noise: str = "gumbel"

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidArgument(f"tau must be positive, got {self.tau}")
        if self.k < 1:
            raise InvalidArgument("k must be positive")
        if self.query_init not in QUERY_INITS:
            raise InvalidArgument(f"query_init must be one of {QUERY_INITS}")
        if self.noise not in NOISE_MODES:
            raise InvalidArgument(f"noise must be one of {NOISE_MODES}")


@dataclass
class SelectionVector:
    scores: Tensor
    per_iteration: list[Tensor]
    selected_hard: list[int]
    query_index: int | None = None


def embed_patches(layers: Sequence[AffineParams], base_features) -> Tensor:
    """Patch embedding: fully-connected layers on the stored base features."""
    return mlp_forward(layers, base_features)


def compute_pi(query, patch_features) -> Tensor:
    """Unnormalized selection weights ``exp(-||f_i - query||)``."""
    return exp(-l2_dist(patch_features, query))


def _noise(config: RetrievalConfig, rng, shape, noise, t=None):
    if config.noise == "disabled":
        return None
    if noise is not None:
        g = np.asarray(noise, dtype=np.float64)
        return g if t is None else g[t]
    if rng is None:
        raise InvalidArgument("gumbel noise needs a seeded rng or explicit noise")
    return gumbel_noise(rng, shape)


def select_single(pi, config: RetrievalConfig, rng=None, noise=None) -> Tensor:
    """Relaxed one-hot sample ``softmax((g + log pi) / tau)``.

    ``noise`` may carry a leading batch axis to draw many samples at once.
    """
    pi = as_tensor(pi)
    if not (pi.value > 0).all():
        raise InvalidArgument("selection weights must be positive")
    logits = log(pi)
    g = _noise(config, rng, pi.shape, noise)
    if g is not None:
        logits = logits + g
    return softmax_tau(logits, config.tau)


def _group_index(candidates) -> tuple[np.ndarray, int]:
    if isinstance(candidates, CandidateSet):
        if any(len(g) == 0 for g in candidates.groups):
            raise InvalidArgument("candidate set has an empty group")
        return candidates.group_of, candidates.n_groups
    group_of = np.asarray(candidates, dtype=np.int64)
    if group_of.ndim != 1 or group_of.size == 0:
        raise InvalidArgument("group map must be a non-empty 1-d integer array")
    n = int(group_of.max()) + 1
    if group_of.min() < 0 or np.bincount(group_of, minlength=n).min() == 0:
        raise InvalidArgument("candidate groups must be numbered 0..n-1 with none empty")
    return group_of, n


def iterative_retrieve(
    candidates,
    features,
    config: RetrievalConfig,
    *,
    rng: np.random.Generator | None = None,
    query=None,
    noise=None,
) -> SelectionVector:
    """Select one candidate per group; differentiable in ``features`` and ``query``.

    ``candidates`` is a :class:`CandidateSet` or a flat-index -> group array.
    ``noise``, when given, has shape ``(n_groups, n_candidates)`` and replaces
    the per-round Gumbel draws.
    """
    group_of, n = _group_index(candidates)
    feats = as_tensor(features)
    if feats.ndim != 2 or feats.shape[0] != len(group_of):
        raise InvalidArgument("features must have one row per flat candidate")
    size = feats.shape[0]

    query_index = None
    if query is None:
        if config.query_init != "random-candidate":
            raise InvalidArgument("given-feature query_init needs a query")
        if rng is None:
            raise InvalidArgument("random-candidate query_init needs a seeded rng")
        query_index = int(rng.integers(size))
        query = feats[query_index]
    q = as_tensor(query)

    penalty = None
    blocked = np.zeros(n, dtype=bool)
    per_iteration: list[Tensor] = []
    hard: list[int] = []
    for t in range(n):
        logits = -l2_dist(feats, q)
        g = _noise(config, rng, size, noise, t)
        if g is not None:
            logits = logits + g
        hard_logits = np.where(blocked[group_of], SENTINEL, logits.value)
        pick = int(np.argmax(hard_logits))
        hard.append(pick)
        blocked[group_of[pick]] = True

        s = softmax_tau(logits if penalty is None else logits + penalty, config.tau)
        per_iteration.append(s)
        step = log(maximum(1.0 - group_max(s, group_of, n), EXCLUSION_EPS))[group_of]
        penalty = step if penalty is None else penalty + step
        q = (q + matmul(s, feats)) * 0.5

    scores = sum_(stack(per_iteration), axis=0)
    return SelectionVector(scores, per_iteration, hard, query_index)


def wrs_subset(pi, n: int, config: RetrievalConfig, rng=None, noise=None) -> SelectionVector:
    """Relaxed weighted subset of size ``n``: one Gumbel perturbation, ``n`` softmax rounds.

    No groups and no query updates; the hard reading is the top ``n`` of the
    perturbed log-weights.
    """
    pi = as_tensor(pi)
    size = pi.shape[0]
    if n > size:
        raise InvalidArgument(f"subset size {n} exceeds {size} items")
    if n < 1:
        raise InvalidArgument("subset size must be positive")
    if not (pi.value > 0).all():
        raise InvalidArgument("selection weights must be positive")
    logits = log(pi)
    g = _noise(config, rng, size, noise)
    if g is not None:
        logits = logits + g
    taken = np.zeros(size, dtype=bool)
    per_iteration, hard = [], []
    current = logits
    for _ in range(n):
        pick = int(np.argmax(np.where(taken, SENTINEL, logits.value)))
        hard.append(pick)
        taken[pick] = True
        s = softmax_tau(current, config.tau)
        per_iteration.append(s)
        current = current + log(maximum(1.0 - s, EXCLUSION_EPS))
    return SelectionVector(sum_(stack(per_iteration), axis=0), per_iteration, hard)


def hard_retrieve(
    candidates: CandidateSet,
    features,
    config: RetrievalConfig,
    *,
    rng: np.random.Generator | None = None,
    query=None,
    noise=None,
) -> list[PatchRecord]:
    """Hard picks of :func:`iterative_retrieve`, one record per group in group order."""
    sel = iterative_retrieve(candidates, features, config, rng=rng, query=query, noise=noise)
    flat = candidates.flat
    by_group = sorted(sel.selected_hard, key=lambda i: candidates.group_of[i])
    return [flat[i] for i in by_group]


def group_soft_features(candidates, scores, base_features) -> Tensor:
    """Per-group score-weighted features ``sum_{i in group} s_i f_i``, shape (n, D)."""
    group_of, n = _group_index(candidates)
    member = (group_of[None, :] == np.arange(n)[:, None]).astype(np.float64)
    return matmul(as_tensor(member) * as_tensor(scores), as_tensor(base_features))


def hard_by_group(candidates, selection: SelectionVector) -> list[int]:
    """Flat index of the hard pick for each group."""
    group_of, n = _group_index(candidates)
    out = [-1] * n
    for i in selection.selected_hard:
        out[int(group_of[i])] = i
    return out


