"""Synthetic corpora: long-tail interaction tables and a popularity-shift benchmark.

The benchmark plants block-structured user/item group preferences, exposes
them through a Zipf popularity filter at train time, and samples the test
set from the preferences alone, so train rankings overfit popularity while
the test rewards the invariant structure.
"""

import numpy as np

from .data import InteractionTable, SplitBundle
from .seeding import numpy_rng


def zipf_weights(num_items: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, num_items + 1, dtype=np.float64)
    weights = ranks ** (-exponent)
    return weights / weights.sum()


def long_tail_table(num_users: int = 2000, num_items: int = 1000,
                    per_user: int = 25, exponent: float = 1.2,
                    seed: int = 0) -> InteractionTable:
    """Interactions whose item popularity follows a Zipf law."""
    rng = numpy_rng(seed, "long_tail")
    weights = zipf_weights(num_items, exponent)
    users, items = [], []
    for u in range(num_users):
        k = min(per_user, num_items)
        chosen = rng.choice(num_items, size=k, replace=False, p=weights)
        users.extend([u] * k)
        items.extend(chosen.tolist())
    ts = np.arange(len(users), dtype=np.int64)
    return InteractionTable(users, items, ts, num_users=num_users,
                            num_items=num_items)


def popularity_shift_benchmark(num_users: int = 500, num_items: int = 300,
                               n_groups: int = 5, train_per_user: int = 20,
                               valid_per_user: int = 3, test_per_user: int = 5,
                               zipf_exponent: float = 1.2,
                               affinity_boost: float = 3.0,
                               seed: int = 0) -> SplitBundle:
    """Zipf-popularity train set, uniform-popularity test set, shared preferences."""
    rng = numpy_rng(seed, "popularity_shift_benchmark")
    pop = zipf_weights(num_items, zipf_exponent)
    item_groups = np.arange(num_items) % n_groups

    def sample(pool: np.ndarray, probs: np.ndarray, k: int) -> np.ndarray:
        p = probs[pool]
        return rng.choice(pool, size=min(k, len(pool)), replace=False,
                          p=p / p.sum())

    tr_u, tr_i, va_u, va_i, te_u, te_i = [], [], [], [], [], []
    for u in range(num_users):
        affinity = 1.0 + affinity_boost * (item_groups == (u % n_groups))
        pool = np.arange(num_items)
        train_items = sample(pool, affinity * pop, train_per_user)
        pool = np.setdiff1d(pool, train_items, assume_unique=False)
        valid_items = sample(pool, affinity * pop, valid_per_user)
        pool = np.setdiff1d(pool, valid_items, assume_unique=False)
        test_items = sample(pool, affinity, test_per_user)
        tr_u.extend([u] * len(train_items)); tr_i.extend(train_items.tolist())
        va_u.extend([u] * len(valid_items)); va_i.extend(valid_items.tolist())
        te_u.extend([u] * len(test_items)); te_i.extend(test_items.tolist())

    def table(us, its):
        return InteractionTable(us, its, num_users=num_users,
                                num_items=num_items)

    bundle = SplitBundle(table(tr_u, tr_i), table(va_u, va_i),
                         table(te_u, te_i), "popularity")
    bundle.validate()
    return bundle
