"""Small generated interaction datasets for smoke runs and direction checks."""

from __future__ import annotations

import numpy as np

from .dataset import InteractionDataset


def separable_toy(users_per_block=10, items_per_block=20, test_per_user=2, seed=0) -> InteractionDataset:
    """Two user blocks, each interacting only with its own item block.

    Every user holds its whole block except ``test_per_user`` items, which
    go to the test split; the held-out items rotate across users so each
    item stays a train positive for most of its block.
    """
    rng = np.random.default_rng(seed)
    train, test = [], []
    for block in range(2):
        items = np.arange(items_per_block) + block * items_per_block
        for k in range(users_per_block):
            u = block * users_per_block + k
            start = (k * test_per_user) % items_per_block
            held = set(items[(start + np.arange(test_per_user)) % items_per_block].tolist())
            for i in rng.permutation(items):
                (test if int(i) in held else train).append((u, int(i)))
    return InteractionDataset.from_edges(train, test, 2 * users_per_block, 2 * items_per_block)


def clustered_dataset(num_users=1000, num_items=1500, num_clusters=10, latent_dim=8,
                      interactions_per_user=30, test_fraction=0.2, spread=0.6,
                      temperature=10.0, zipf=0.8, seed=0) -> InteractionDataset:
    """Latent-cluster preference model.

    Users and items are noisy copies of ``num_clusters`` centres in a
    ``latent_dim`` space; each user draws ``interactions_per_user`` distinct
    items (Gumbel top-k) with logits ``temperature * <u, v> + log(pop)``,
    where ``pop`` is a Zipf weight. A ``test_fraction`` of each user's
    items is held out.
    """
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(num_clusters, latent_dim))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    item_cluster = rng.integers(0, num_clusters, num_items)
    user_cluster = rng.integers(0, num_clusters, num_users)
    scale = spread / np.sqrt(latent_dim)
    items = centres[item_cluster] + scale * rng.normal(size=(num_items, latent_dim))
    users = centres[user_cluster] + scale * rng.normal(size=(num_users, latent_dim))
    log_pop = -zipf * np.log1p(rng.permutation(num_items))

    n_test = max(1, int(round(test_fraction * interactions_per_user)))
    train, test = [], []
    for u in range(num_users):
        logits = temperature * (items @ users[u]) + log_pop + rng.gumbel(size=num_items)
        chosen = np.argsort(-logits, kind="stable")[:interactions_per_user]
        chosen = rng.permutation(chosen)
        for i in chosen[:n_test]:
            test.append((u, int(i)))
        for i in chosen[n_test:]:
            train.append((u, int(i)))
    return InteractionDataset.from_edges(train, test, num_users, num_items)
