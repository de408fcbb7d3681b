"""Planted-structure interaction logs for tests, benchmarks and calibration."""

import numpy as np

from .data import Interaction


def markov_transitions(num_items, p_follow, rng, successors=1):
    """Row-stochastic matrix over items 0..num_items-1 with planted successors.

    Each item sends ``p_follow`` of its mass to ``successors`` fixed items
    (split evenly) and spreads the rest uniformly. Successors come from
    derangements, so every item has the same in-degree and the stationary
    distribution is uniform (popularity carries no signal).
    """
    P = np.full((num_items, num_items), (1 - p_follow) / num_items)
    rows = np.arange(num_items)
    for _ in range(successors):
        perm = rng.permutation(num_items)
        while np.any(perm == rows):
            perm = rng.permutation(num_items)
        P[rows, perm] += p_follow / successors
    return P


def planted_markov(num_users, num_items, mean_len, p_follow=0.8, seed=0, successors=1, len_spread=5):
    """First-order Markov walks; returns (interactions, transition matrix).

    External ids are ``u<k>`` / ``i<k>``; transition row/column k refers to
    item ``i<k>``.
    """
    rng = np.random.default_rng(seed)
    P = markov_transitions(num_items, p_follow, rng, successors)
    cum = P.cumsum(axis=1)
    out = []
    for u in range(num_users):
        length = int(rng.integers(mean_len - len_spread, mean_len + len_spread + 1))
        cur = int(rng.integers(num_items))
        for t in range(length):
            out.append(Interaction(f"u{u}", f"i{cur}", t))
            cur = min(int(np.searchsorted(cum[cur], rng.random())), num_items - 1)
    return out, P


def clustered(num_users, num_clusters, items_per_cluster, mean_len, seed=0, len_spread=3, switch=0.0):
    """Items drawn uniformly from one cluster at a time.

    With probability ``switch`` each step moves to another cluster, so a
    sequence is a chain of single-cluster runs of random length. With
    ``switch=0`` every user stays in one cluster.
    """
    rng = np.random.default_rng(seed)
    out = []
    for u in range(num_users):
        c = int(rng.integers(num_clusters))
        length = int(rng.integers(mean_len - len_spread, mean_len + len_spread + 1))
        for t in range(length):
            if t and rng.random() < switch:
                c = (c + int(rng.integers(1, num_clusters))) % num_clusters
            item = c * items_per_cluster + int(rng.integers(items_per_cluster))
            out.append(Interaction(f"u{u}", f"i{item}", t))
    return out


def ring_walk(num_users, num_items, mean_len, width=3, p_follow=0.8, seed=0, len_spread=5):
    """Walks on a hidden ring of items: each step moves up to ``width`` slots either way.

    With probability ``1 - p_follow`` the walk jumps to a uniform item. The
    neighbourhood relation is symmetric, and item ids are a random
    relabelling of ring positions.
    """
    rng = np.random.default_rng(seed)
    label = rng.permutation(num_items)
    out = []
    for u in range(num_users):
        length = int(rng.integers(mean_len - len_spread, mean_len + len_spread + 1))
        pos = int(rng.integers(num_items))
        for t in range(length):
            out.append(Interaction(f"u{u}", f"i{label[pos]}", t))
            if rng.random() < p_follow:
                step = int(rng.integers(1, width + 1))
                pos = (pos + (step if rng.random() < 0.5 else -step)) % num_items
            else:
                pos = int(rng.integers(num_items))
    return out


def periodic(num_users, num_items, mean_len, period=4, noise=0.2, seed=0, len_spread=3):
    """Each user repeats a private motif of ``period`` distinct items.

    The next item is the one ``period`` steps back, so only position (not
    item content) tells a model which earlier action to look at. Each step
    is replaced by a uniform item with probability ``noise``.
    """
    rng = np.random.default_rng(seed)
    out = []
    for u in range(num_users):
        motif = rng.choice(num_items, period, replace=False)
        length = int(rng.integers(mean_len - len_spread, mean_len + len_spread + 1))
        for t in range(length):
            item = motif[t % period] if rng.random() >= noise else rng.integers(num_items)
            out.append(Interaction(f"u{u}", f"i{int(item)}", t))
    return out
