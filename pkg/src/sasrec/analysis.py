"""Average attention weights by position and by item group.

Only causally valid weights between real (non-pad) items are counted, and
every average divides by the number of such weights, so short, padded
sequences do not dilute the statistics. Heads are averaged.
"""

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import training_arrays
from .errors import ConfigurationError, DataError
from .model import forward

log = logging.getLogger(__name__)


@dataclass
class PositionHeatmap:
    """values[a, c]: mean weight of time step n-k+a on position n-k+c (NaN where never valid)."""

    block: int
    k: int
    values: np.ndarray
    counts: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_offset", "position_offset", "value", "count"])
            for a in range(self.k):
                for c in range(self.k):
                    v = self.values[a, c]
                    w.writerow([self.k - 1 - a, self.k - 1 - c,
                                "" if np.isnan(v) else repr(float(v)), int(self.counts[a, c])])

    def sidecar(self):
        return {"kind": "positions", "block": self.block, "k": self.k,
                "offsets": "0 = most recent time step / position"}


@dataclass
class GroupHeatmap:
    query_labels: list
    key_labels: list
    values: np.ndarray
    counts: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["query_group", "key_group", "value", "count"])
            for a, ql in enumerate(self.query_labels):
                for c, kl in enumerate(self.key_labels):
                    v = self.values[a, c]
                    w.writerow([ql, kl, "" if np.isnan(v) else repr(float(v)), int(self.counts[a, c])])

    def sidecar(self):
        return {"kind": "groups", "query_labels": self.query_labels, "key_labels": self.key_labels}


def write_heatmap(heatmap, csv_path, extra=None):
    heatmap.to_csv(csv_path)
    meta = {**heatmap.sidecar(), **(extra or {})}
    with open(str(csv_path) + ".json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _attention_batches(model, split_store, block, batch_size):
    cfg = model.config
    if cfg.blocks == 0:
        raise ConfigurationError("model has no self-attention blocks")
    if not 0 <= block < cfg.blocks:
        raise ConfigurationError(f"block {block} out of range for a {cfg.blocks}-block model")
    inputs, targets = training_arrays(split_store.train, cfg.n)
    rows = np.flatnonzero((inputs != 0).any(axis=1))
    causal = np.tril(np.ones((cfg.n, cfg.n), dtype=bool))
    with T.no_grad():
        for lo in range(0, len(rows), batch_size):
            idx = rows[lo:lo + batch_size]
            inp = inputs[idx]
            _, tr = forward(inp, model.params, cfg, train=False, users=split_store.users[idx], trace=True)
            real = inp != 0
            valid = causal[None] & real[:, :, None] & real[:, None, :]
            yield inp, tr.attention[block].astype(np.float64).mean(axis=1), valid


def position_attention(model, split_store, block=0, k=15, batch_size=256):
    """Mean attention on the last ``k`` positions at the last ``k`` time steps."""
    n = model.config.n
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    if k > n:
        log.warning("k=%d exceeds n=%d; using k=n", k, n)
        k = n
    acc = np.zeros((k, k))
    cnt = np.zeros((k, k), dtype=np.int64)
    for _, w, valid in _attention_batches(model, split_store, block, batch_size):
        win = valid[:, n - k:, n - k:]
        acc += np.where(win, w[:, n - k:, n - k:], 0.0).sum(axis=0)
        cnt += win.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(cnt > 0, acc / cnt, np.nan)
    return PositionHeatmap(block, k, values, cnt)


def group_attention(model, split_store, query_groups, key_groups, block=0, batch_size=256):
    """Mean attention from query-group items to key-group items.

    ``query_groups`` / ``key_groups`` map internal item index -> label.
    """
    if not query_groups or not key_groups:
        raise DataError("group maps must be nonempty")
    q_labels = sorted(set(query_groups.values()), key=str)
    k_labels = sorted(set(key_groups.values()), key=str)
    size = model.config.num_items + 1
    qlab = np.full(size, -1, dtype=np.int64)
    klab = np.full(size, -1, dtype=np.int64)
    qpos = {lab: i for i, lab in enumerate(q_labels)}
    kpos = {lab: i for i, lab in enumerate(k_labels)}
    for item, lab in query_groups.items():
        qlab[item] = qpos[lab]
    for item, lab in key_groups.items():
        klab[item] = kpos[lab]
    acc = np.zeros((len(q_labels), len(k_labels)))
    cnt = np.zeros(acc.shape, dtype=np.int64)
    for inp, w, valid in _attention_batches(model, split_store, block, batch_size):
        ql = qlab[inp]
        kl = klab[inp]
        sel = valid & (ql[:, :, None] >= 0) & (kl[:, None, :] >= 0)
        b, i, j = np.nonzero(sel)
        np.add.at(acc, (ql[b, i], kl[b, j]), w[b, i, j])
        np.add.at(cnt, (ql[b, i], kl[b, j]), 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(cnt > 0, acc / cnt, np.nan)
    return GroupHeatmap(q_labels, k_labels, values, cnt)


def read_group_map(path, item_index):
    """Two-column ``item_id,label`` text (tab, comma or whitespace separated).

    Returns ({internal index: label}, [unknown external ids]). Raises when
    no listed item is in the vocabulary.
    """
    mapping, missing = {}, []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            sep = "\t" if "\t" in line else ("," if "," in line else None)
            parts = [p.strip() for p in line.split(sep, 1)] if sep else line.split(None, 1)
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'item_id<sep>label'")
            item, label = parts
            if item in item_index:
                mapping[item_index[item]] = label
            else:
                missing.append(item)
    if not mapping:
        raise DataError(f"{path}: none of the listed items are in the vocabulary; missing: {missing}")
    if missing:
        log.warning("%s: %d items not in vocabulary: %s", path, len(missing), missing[:20])
    return mapping, missing
