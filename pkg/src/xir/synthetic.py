"""Synthetic interaction data with latent-factor structure and a long tail."""

from __future__ import annotations

import numpy as np

from .data import InteractionStore


def zipf_probs(n: int, exponent: float = 1.0) -> np.ndarray:
    """Zipf(s) probabilities over item ids 0..n-1 (id 0 most popular)."""
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** exponent
    return w / w.sum()


def generate_synthetic(
    num_users: int = 2000,
    num_items: int = 3000,
    mean_items_per_user: float = 30.0,
    latent_dim: int = 16,
    zipf_exponent: float = 1.0,
    affinity_scale: float = 3.0,
    seed: int = 0,
    user_chunk: int = 256,
) -> InteractionStore:
    """Draw per-user item sets from exp(affinity) * zipf popularity.

    Each user u gets a latent vector x_u and each item a latent vector y_i;
    the user's items are sampled without replacement from the distribution
    proportional to exp(scale * <x_u, y_i>) * zipf(i), so rankings have a
    recoverable low-rank signal on top of a popularity skew.  Item-set sizes
    are Poisson around the requested mean (floored at 5).
    """
    rng = np.random.default_rng(seed)
    scale = latent_dim**0.25
    x = rng.normal(size=(num_users, latent_dim)) / scale
    y = rng.normal(size=(num_items, latent_dim)) / scale
    log_pop = np.log(zipf_probs(num_items, zipf_exponent))

    sizes = np.maximum(rng.poisson(mean_items_per_user, size=num_users), 5)
    sizes = np.minimum(sizes, num_items)
    users: list[np.ndarray] = []
    items: list[np.ndarray] = []
    for lo in range(0, num_users, user_chunk):
        hi = min(lo + user_chunk, num_users)
        logits = affinity_scale * (x[lo:hi] @ y.T) + log_pop[None, :]
        # Gumbel perturbation: top-n of (logit + gumbel) is an exact
        # without-replacement sample from the softmax of the logits
        gumbel = -np.log(-np.log(rng.random(logits.shape)))
        order = np.argsort(-(logits + gumbel), axis=1)
        for r, user in enumerate(range(lo, hi)):
            n_u = sizes[user]
            users.append(np.full(n_u, user, dtype=np.int64))
            items.append(order[r, :n_u].astype(np.int64))

    return InteractionStore(
        np.concatenate(users), np.concatenate(items), num_users=num_users, num_items=num_items
    )
