"""Popularity ranking and the factorized first-order Markov chain."""

import math

import numpy as np

from . import tensor as T
from .data import sample_negatives
from .errors import DataError
from .model import bce_loss
from .rng import derive
from .trainer import TrainConfig, fit


class PopRec:
    """Ranks items by their number of training actions."""

    kind = "poprec"

    def __init__(self, counts):
        self.counts = np.asarray(counts, dtype=np.int64)
        self.counts[0] = 0
        self.params = {}

    @classmethod
    def fit(cls, split_store):
        seqs = [s for s in split_store.train if len(s)]
        flat = np.concatenate(seqs) if seqs else np.zeros(0, dtype=np.int64)
        return cls(np.bincount(flat, minlength=split_store.num_items + 1))

    @property
    def num_items(self):
        return len(self.counts) - 1

    def pop_score(self, item):
        return float(self.counts[item]) if 0 < item <= self.num_items else 0.0

    def ranking(self, candidates=None):
        """Candidates by count descending, then internal index ascending."""
        cand = np.arange(1, self.num_items + 1) if candidates is None else np.asarray(candidates)
        return cand[np.lexsort((cand, -self.counts[cand]))]

    def score(self, histories, users, candidates):
        return self.counts[np.asarray(candidates)].astype(np.float64)

    def score_all(self, history, user=None):
        r = self.counts.astype(np.float64)
        r[0] = -np.inf
        return r

    def config_dict(self):
        return {"num_items": self.num_items}

    def arrays(self):
        return {"count": self.counts.astype(np.float32)}

    @classmethod
    def from_checkpoint(cls, config, arrays):
        return cls(np.rint(arrays["count"]).astype(np.int64))


class FMC:
    """score(i, j) = M_in[i] . N_out[j], depending on the last item only."""

    kind = "fmc"

    def __init__(self, num_items, d, params=None, rng=None):
        self.num_items, self.d = num_items, d
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            lim = 1.0 / math.sqrt(d)
            params = {}
            for name in ("M_in", "N_out"):
                t = T.Tensor(rng.uniform(-lim, lim, size=(num_items + 1, d)), requires_grad=True)
                t.data[0] = 0
                params[name] = t
        self.params = params

    def pinned_rows(self):
        return {"M_in": [0], "N_out": [0]}

    def fmc_score(self, i, j):
        return float(self.params["M_in"].data[i] @ self.params["N_out"].data[j])

    def loss(self, src, dst, neg):
        src_e = T.embedding(self.params["M_in"], src)
        pos = T.sum_last(T.mul(src_e, T.embedding(self.params["N_out"], dst)))
        negs = T.sum_last(T.mul(src_e, T.embedding(self.params["N_out"], neg)))
        return bce_loss(pos, negs, dst)

    def score(self, histories, users, candidates):
        last = np.array([h[-1] for h in histories], dtype=np.int64)
        M = self.params["M_in"].data[last]
        return np.einsum("bd,bcd->bc", M, self.params["N_out"].data[np.asarray(candidates)])

    def score_all(self, history, user=None):
        r = self.params["N_out"].data @ self.params["M_in"].data[int(history[-1])]
        r = r.astype(np.float64)
        r[0] = -np.inf
        return r

    def config_dict(self):
        return {"num_items": self.num_items, "d": self.d}

    def arrays(self):
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_checkpoint(cls, config, arrays):
        params = {k: T.Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(config["num_items"], config["d"], params)


def transition_pairs(train_seqs):
    """(source, target, row) for every adjacent pair in each training sequence."""
    src, dst, row = [], [], []
    for r, s in enumerate(train_seqs):
        if len(s) >= 2:
            src.append(s[:-1])
            dst.append(s[1:])
            row.append(np.full(len(s) - 1, r, dtype=np.int64))
    if not src:
        raise DataError("no consecutive training pairs to fit FMC on")
    return np.concatenate(src), np.concatenate(dst), np.concatenate(row)


def fmc_batches(model, split_store, config):
    src, dst, row = transition_pairs(split_store.train)
    sets = split_store.train_sets()

    def batches(epoch):
        neg = sample_negatives(dst[:, None], row, sets, split_store.num_items,
                               derive(config.seed, "fmc-negatives", epoch))[:, 0]
        order = derive(config.seed, "fmc-shuffle", epoch).permutation(len(src))
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            yield model.loss(src[idx], dst[idx], neg[idx])

    return batches


def train_fmc(split_store, d, train_config, validate=None, log_path=None, checkpoint_path=None):
    """Fit FMC with the BCE / one-negative objective and Adam; returns a ``TrainResult``."""
    model = FMC(split_store.num_items, d, rng=derive(train_config.seed, "fmc-init"))
    return fit(model, fmc_batches(model, split_store, train_config), train_config,
               validate=validate, log_path=log_path, checkpoint_path=checkpoint_path)


def fmc_train(split_store, d, epochs=50, lr=0.001, seed=0, batch_size=128):
    """Fixed-epoch FMC fit without validation."""
    cfg = TrainConfig(learning_rate=lr, max_epochs=epochs, seed=seed, batch_size=batch_size)
    return train_fmc(split_store, d, cfg).model
