"""Synthetic block-structured datasets for oracles and smoke experiments.

Users and items fall into latent groups; a user interacts (almost) only
with items of the matching group, and the side-information vectors encode
the group with some distractor noise. A model that learns anything useful
must push training positives toward 1 and cross-block pairs toward 0.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

from .data import Dataset, InteractionMatrix, SideInfo, leave_one_out_split


def block_dataset(n_users: int = 20, n_items: int = 30, n_blocks: int = 2,
                  density: float = 0.9, noise: float = 0.02, feat_dim: int = 6,
                  seed: int = 0, n_negatives: int = 20) -> Dataset:
    """Block-diagonal feedback with group-coded side info.

    `density` is the positive rate inside a matching block, `noise` the rate
    outside it. Side-info rows are a one-hot group code plus uniform noise
    columns, so priors can actually learn the block from features.
    """
    rng = np.random.default_rng(seed)
    user_group = np.arange(n_users) % n_blocks
    item_group = np.arange(n_items) % n_blocks
    match = user_group[:, None] == item_group[None, :]
    rate = np.where(match, density, noise)
    grid = rng.random((n_users, n_items)) < rate
    users, items = np.nonzero(grid)
    # timestamps in raster order so leave-one-out picks each user's last item
    ts = np.arange(len(users))
    interactions = InteractionMatrix.from_pairs(n_users, n_items, users, items, ts)

    def features(groups, dim):
        one_hot = np.eye(n_blocks)[groups]
        distract = rng.random((len(groups), max(dim - n_blocks, 0)))
        return sparse.csr_array(np.hstack([one_hot, distract]))

    side = SideInfo(features(user_group, feat_dim), features(item_group, feat_dim))
    train, cases = leave_one_out_split(interactions, n_negatives=n_negatives, seed=seed)
    return Dataset("synthetic-blocks", interactions, train, cases, side, seed)


def structural_negatives(dataset: Dataset, n_blocks: int = 2,
                         max_pairs: int = 200, seed: int = 0):
    """Cross-block (user, item) pairs that were never observed."""
    inter = dataset.interactions
    rng = np.random.default_rng(seed)
    users, items = [], []
    for u in range(inter.n_users):
        for j in range(inter.n_items):
            if u % n_blocks != j % n_blocks and not inter.has(u, j):
                users.append(u)
                items.append(j)
    users, items = np.asarray(users), np.asarray(items)
    if len(users) > max_pairs:
        pick = rng.choice(len(users), size=max_pairs, replace=False)
        users, items = users[pick], items[pick]
    return users, items
