"""Leave-one-out top-K evaluation over per-user models."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import SplitDataset

PHASES = ("validation", "test")


def recall_at_k(rank: int | None, k: int) -> float:
    """1 if the held-out item made the top k, else 0 (misses count as 0)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 if rank is not None and rank <= k else 0.0


def ndcg_at_k(rank: int | None, k: int) -> float:
    """Position-discounted gain of the single held-out item."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


@dataclass(eq=False)
class UserEvalModel:
    """Everything needed to rank one user's catalog.

    ``excluded`` are the non-candidates: training items plus any pseudo items
    the local graph currently claims. The held-out item can land in there (a
    pseudo draw may swallow it), which scores as a miss.
    """

    user_embedding: np.ndarray
    item_rows: np.ndarray
    excluded: frozenset[int]


@dataclass(eq=False)
class EvalResult:
    k: int
    recall: float
    ndcg: float
    per_user: tuple[tuple[int, int | None], ...] | None = None


def target_rank(
    model: UserEvalModel, target: int, extra_excluded: frozenset[int] = frozenset()
) -> int | None:
    """1-based rank of ``target`` among candidates, or None if excluded.

    Candidates are all items outside the exclusion set; ordering is by
    descending score with ties to the smaller item id.
    """
    excluded = model.excluded | extra_excluded
    if target in excluded:
        return None
    scores = model.item_rows @ model.user_embedding
    target_score = scores[target]
    keep = np.ones(len(scores), dtype=bool)
    if excluded:
        keep[list(excluded)] = False
    ahead = keep & (
        (scores > target_score)
        | ((scores == target_score) & (np.arange(len(scores)) < target))
    )
    return int(np.count_nonzero(ahead)) + 1


def _held_out(split: SplitDataset, phase: str) -> Mapping[int, int]:
    if phase == "validation":
        return split.validation
    if phase == "test":
        return split.test
    raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")


def user_ranks(
    split: SplitDataset, models: Mapping[int, UserEvalModel], phase: str
) -> dict[int, int | None]:
    """Rank of each user's held-out item. For the test phase the validation
    item is excluded from candidacy as well."""
    held = _held_out(split, phase)
    ranks: dict[int, int | None] = {}
    for user in sorted(models):
        if user not in held:
            raise ValueError(f"user {user} has no held-out {phase} item")
        extra = (
            frozenset({split.validation[user]}) if phase == "test" else frozenset()
        )
        ranks[user] = target_rank(models[user], held[user], extra)
    return ranks


def evaluate_cutoffs(
    split: SplitDataset,
    models: Mapping[int, UserEvalModel],
    cutoffs: Sequence[int],
    phase: str,
) -> dict[int, EvalResult]:
    """Recall@K / NDCG@K averaged over users, ranks computed once."""
    ranks = user_ranks(split, models, phase)
    detail = tuple(sorted(ranks.items()))
    results = {}
    for k in cutoffs:
        recalls = [recall_at_k(r, k) for _, r in detail]
        ndcgs = [ndcg_at_k(r, k) for _, r in detail]
        results[k] = EvalResult(
            k, float(np.mean(recalls)), float(np.mean(ndcgs)), detail
        )
    return results


def evaluate(
    split: SplitDataset,
    models: Mapping[int, UserEvalModel],
    k: int,
    phase: str,
) -> EvalResult:
    """Single-cutoff convenience wrapper around :func:`evaluate_cutoffs`."""
    return evaluate_cutoffs(split, models, (k,), phase)[k]
