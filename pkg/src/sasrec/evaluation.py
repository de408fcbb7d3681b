"""Sampled top-N ranking: ground truth vs. 100 sampled negatives per user."""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .rng import derive

CANDIDATE_POLICY = "uniform-without-replacement;exclude-full-history;ties-pessimistic"


@dataclass
class MetricsReport:
    hit_at_10: float
    ndcg_at_10: float
    users_evaluated: int
    negatives_per_user: int
    seed: int
    split: str
    candidate_policy: str = CANDIDATE_POLICY
    users_with_fewer_negatives: int = 0

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def oracle_rank(scores, truth_index):
    """Rank of ``scores[truth_index]`` by exhaustive comparison; ties rank it lower."""
    t = scores[truth_index]
    rank = 1
    for j, s in enumerate(scores):
        if j != truth_index and s >= t:
            rank += 1
    return rank


def truth_ranks(scores, valid=None):
    """Vectorized rank of column 0 within each row, ignoring invalid columns."""
    scores = np.asarray(scores)
    if valid is None:
        valid = np.ones(scores.shape, dtype=bool)
    return kernels.pessimistic_ranks(scores, valid)


def hit_at_k(ranks, k=10):
    return (np.asarray(ranks) <= k).astype(np.float64)


# One relevant item per user: recall@k is the same quantity as hit@k.
recall_at_k = hit_at_k


def ndcg_at_k(ranks, k=10):
    ranks = np.asarray(ranks)
    return np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)


def ndcg_of_rank(rank, k=10):
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def sample_candidates(split_store, split, seed, num_negatives=100):
    """Candidates per user with the ground truth in column 0.

    Negatives are drawn without replacement from items the user never
    touched (train, valid and test). Users with fewer eligible items get
    all of them; the remaining columns are marked invalid.
    """
    rng = derive(seed, "eval", split)
    sets = split_store.full_sets()
    truth = split_store.truth(split)
    num_items = split_store.num_items
    universe = np.arange(1, num_items + 1, dtype=np.int64)
    cands = np.empty((len(split_store), num_negatives + 1), dtype=np.int64)
    valid = np.ones(cands.shape, dtype=bool)
    short = 0
    for r in range(len(split_store)):
        seen = sets.row(r)
        cands[r, 0] = truth[r]
        eligible = np.setdiff1d(universe, seen, assume_unique=True)
        if len(eligible) >= num_negatives:
            cands[r, 1:] = rng.choice(eligible, num_negatives, replace=False)
        else:
            short += 1
            cands[r, 1:1 + len(eligible)] = eligible
            cands[r, 1 + len(eligible):] = truth[r]
            valid[r, 1 + len(eligible):] = False
    return cands, valid, short


def evaluate(model, split_store, split="test", seed=0, num_negatives=100, k=10, chunk=1024):
    """Hit@k / NDCG@k of ``model.score(histories, users, candidates)``."""
    cands, valid, short = sample_candidates(split_store, split, seed, num_negatives)
    hist = split_store.history(split)
    ranks = []
    for lo in range(0, len(split_store), chunk):
        hi = lo + chunk
        scores = model.score(hist[lo:hi], split_store.users[lo:hi], cands[lo:hi])
        ranks.append(truth_ranks(scores, valid[lo:hi]))
    ranks = np.concatenate(ranks)
    return MetricsReport(
        hit_at_10=float(hit_at_k(ranks, k).mean()),
        ndcg_at_10=float(ndcg_at_k(ranks, k).mean()),
        users_evaluated=int(len(ranks)),
        negatives_per_user=num_negatives,
        seed=int(seed),
        split=split,
        users_with_fewer_negatives=short,
    )
