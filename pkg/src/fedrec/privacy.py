"""Privacy stack: pseudo items, interaction masking, LDP randomization.

All sampling is driven by explicit generators so per-client streams keyed by
(round, client) reproduce identically under any scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .gnn import GradientUpdate


@dataclass(frozen=True)
class LdpConfig:
    """Elementwise clip bound and Laplace noise strength for uploads."""

    clip_threshold: float
    laplace_scale: float
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be > 0")
        if self.laplace_scale < 0:
            raise ValueError("laplace_scale must be >= 0")


@dataclass(frozen=True)
class PrivacyConfig:
    """Knobs for the client-side obfuscation pipeline."""

    mask_ratio: float = 0.0
    pseudo_items_p: int = 0
    ldp: LdpConfig = field(default_factory=lambda: LdpConfig(0.1, 0.2, enabled=False))

    def __post_init__(self) -> None:
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must be in [0, 1)")
        if self.pseudo_items_p < 0:
            raise ValueError("pseudo_items_p must be >= 0")


def sample_pseudo_items(
    catalog_size: int, true_items: Iterable[int], p: int, rng: np.random.Generator
) -> frozenset[int]:
    """Up to ``p`` distinct items drawn uniformly outside ``true_items``."""
    if p < 0:
        raise ValueError("p must be >= 0")
    if p == 0:
        return frozenset()
    true_arr = np.fromiter(true_items, dtype=np.int64)
    pool = np.setdiff1d(np.arange(catalog_size, dtype=np.int64), true_arr)
    if len(pool) <= p:
        return frozenset(int(x) for x in pool)
    return frozenset(int(x) for x in rng.choice(pool, size=p, replace=False))


def mask_interacted_items(
    true_items: Iterable[int], mask_ratio: float, rng: np.random.Generator
) -> tuple[frozenset[int], frozenset[int]]:
    """Hide floor(mask_ratio * n) of the user's items; returns (kept, masked).

    Masked items behave as non-interacted during local training. When the
    count is zero no random draw is consumed.
    """
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError("mask_ratio must be in [0, 1)")
    items = sorted(true_items)
    count = math.floor(mask_ratio * len(items))
    if count == 0:
        return frozenset(items), frozenset()
    masked = frozenset(int(x) for x in rng.choice(items, size=count, replace=False))
    return frozenset(items) - masked, masked


def laplace_noise(rng: np.random.Generator, scale: float, size) -> np.ndarray:
    """Laplace(0, scale) samples via the inverse CDF of a uniform draw."""
    u = rng.random(size) - 0.5
    inner = np.maximum(1.0 - 2.0 * np.abs(u), np.finfo(np.float64).tiny)
    return -scale * np.sign(u) * np.log(inner)


def randomize_vector(
    vec: np.ndarray, cfg: LdpConfig, rng: np.random.Generator
) -> np.ndarray:
    """Clip each entry to [-delta, delta] and add i.i.d. Laplace noise."""
    out = np.clip(vec, -cfg.clip_threshold, cfg.clip_threshold)
    if cfg.laplace_scale > 0:
        out = out + laplace_noise(rng, cfg.laplace_scale, out.shape)
    return out


def ldp_randomize(
    update: GradientUpdate, cfg: LdpConfig, rng: np.random.Generator
) -> GradientUpdate:
    """Randomize every gradient entry; the data count passes through.

    Rows are processed in ascending id order (users before items) so the
    noise draws are reproducible. A disabled config returns the update as-is.
    """
    if not cfg.enabled:
        return update
    user_grads = {
        u: randomize_vector(update.user_grads[u], cfg, rng)
        for u in sorted(update.user_grads)
    }
    item_grads = {
        i: randomize_vector(update.item_grads[i], cfg, rng)
        for i in sorted(update.item_grads)
    }
    return GradientUpdate(user_grads, item_grads, update.data_count)


def privacy_budget(cfg: LdpConfig) -> float:
    """Per-upload budget bound 2*delta/lambda."""
    if cfg.laplace_scale == 0:
        raise ValueError("no noise, unbounded budget")
    return 2.0 * cfg.clip_threshold / cfg.laplace_scale


def pseudo_item_gradients(
    pseudo_items: Iterable[int],
    real_item_grads: Mapping[int, np.ndarray],
    rng: np.random.Generator,
) -> dict[int, np.ndarray]:
    """Decoy gradients for pseudo items.

    Entries are zero-mean Gaussians whose standard deviation matches the
    pooled per-entry spread of the real item gradients, so real and decoy
    rows look alike before the LDP stage.
    """
    pseudo = sorted(pseudo_items)
    if not pseudo:
        return {}
    if not real_item_grads:
        raise ValueError("need real item gradients to imitate")
    pool = np.concatenate(
        [np.ravel(real_item_grads[i]) for i in sorted(real_item_grads)]
    )
    std = float(pool.std())
    dim = len(next(iter(real_item_grads.values())))
    return {int(i): rng.normal(0.0, std, dim) for i in pseudo}
