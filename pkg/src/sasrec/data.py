"""Interaction logs -> filtered, split, padded training instances.

Internal item indices run from 1 to |I|; index 0 is the padding item and
never appears inside a stored sequence.
"""

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import DataError

log = logging.getLogger(__name__)

DATA_MAGIC = b"SASRDATA"
DATA_VERSION = 1

DELIMITERS = {"tab": "\t", "comma": ",", "::": "::", "whitespace": None}


class Interaction(NamedTuple):
    user: str
    item: str
    timestamp: int


@dataclass
class LineFormat:
    """How to cut a line into (user, item, timestamp); other columns are dropped."""

    delimiter: str = "tab"
    user_col: int = 0
    item_col: int = 1
    time_col: int = 2
    skip_malformed: bool = False
    header: bool = False

    def splitter(self):
        sep = DELIMITERS.get(self.delimiter, self.delimiter)
        return (lambda s: s.split()) if sep is None else (lambda s: s.split(sep))


ML1M_FORMAT = LineFormat(delimiter="::", user_col=0, item_col=1, time_col=3)


def _lines(source):
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            yield from fh
    elif isinstance(source, (bytes, bytearray)):
        yield from io.BytesIO(source)
    else:
        yield from source


def ingest(source, fmt=None):
    """Parse a line-oriented log into interactions, in file order.

    ``source`` is a path, a bytes blob or an iterable of lines (bytes or str).
    Malformed lines raise ``DataError`` naming the line number unless
    ``fmt.skip_malformed`` is set, in which case they are counted and skipped.
    """
    fmt = fmt or LineFormat()
    split = fmt.splitter()
    need = max(fmt.user_col, fmt.item_col, fmt.time_col) + 1
    out, skipped = [], 0
    for lineno, raw in enumerate(_lines(source), start=1):
        line = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
        line = line.rstrip("\r\n")
        if not line.strip() or (fmt.header and lineno == 1):
            continue
        parts = split(line)
        try:
            if len(parts) < need:
                raise ValueError(f"expected at least {need} fields, got {len(parts)}")
            ts = int(parts[fmt.time_col])
            out.append(Interaction(parts[fmt.user_col].strip(), parts[fmt.item_col].strip(), ts))
        except ValueError as exc:
            if not fmt.skip_malformed:
                raise DataError(f"line {lineno}: {exc}: {line!r}") from None
            skipped += 1
    if skipped:
        log.warning("skipped %d malformed lines", skipped)
    return out


@dataclass
class SequenceStore:
    item_ids: list  # external id of internal item i is item_ids[i - 1]
    user_ids: list
    sequences: list  # per user, chronologically ordered int64 arrays
    filter_mode: str = "single-pass"
    min_count: int = 5
    dropped_short: int = 0

    @property
    def num_items(self):
        return len(self.item_ids)

    @property
    def num_users(self):
        return len(self.user_ids)

    @property
    def num_actions(self):
        return int(sum(len(s) for s in self.sequences))

    def item_index(self):
        return {ext: i for i, ext in enumerate(self.item_ids, start=1)}

    def user_index(self):
        return {ext: u for u, ext in enumerate(self.user_ids)}

    def stats(self):
        return {
            "users": self.num_users,
            "items": self.num_items,
            "actions": self.num_actions,
            "avg_actions_per_user": self.num_actions / self.num_users,
            "avg_actions_per_item": self.num_actions / self.num_items,
        }


def _factorize(values):
    codes = {}
    arr = np.fromiter((codes.setdefault(v, len(codes)) for v in values), dtype=np.int64, count=len(values))
    return arr, list(codes)


def five_core_filter(interactions, min_count=5, iterate=False):
    """Drop users, then items, with fewer than ``min_count`` actions.

    One pass by default (user counts on the raw log, item counts after the
    user cut); ``iterate=True`` repeats until a true k-core fixpoint.
    Users left with fewer than 3 actions cannot be split and are dropped
    with a warning. Timestamp ties keep file order.
    """
    if not interactions:
        raise DataError("no interactions to filter")
    users, user_names = _factorize([x.user for x in interactions])
    items, item_names = _factorize([x.item for x in interactions])
    ts = np.fromiter((x.timestamp for x in interactions), dtype=np.int64, count=len(interactions))

    keep = np.ones(len(interactions), dtype=bool)
    while True:
        before = int(keep.sum())
        ucount = np.bincount(users[keep], minlength=len(user_names))
        keep &= ucount[users] >= min_count
        icount = np.bincount(items[keep], minlength=len(item_names))
        keep &= icount[items] >= min_count
        if not iterate or int(keep.sum()) == before:
            break

    ucount = np.bincount(users[keep], minlength=len(user_names))
    short = keep & (ucount[users] < 3)
    dropped_short = int(np.count_nonzero((ucount > 0) & (ucount < 3)))
    if dropped_short:
        log.warning("dropping %d users with fewer than 3 actions after filtering", dropped_short)
    keep &= ~short

    rows = np.flatnonzero(keep)
    if not rows.size:
        raise DataError("dataset too sparse: nothing survives the %d-core filter" % min_count)

    # vocabularies in order of first appearance among surviving rows
    _, first_u = np.unique(users[rows], return_index=True)
    u_order = users[rows][np.sort(first_u)]
    _, first_i = np.unique(items[rows], return_index=True)
    i_order = items[rows][np.sort(first_i)]
    u_map = np.full(len(user_names), -1, dtype=np.int64)
    u_map[u_order] = np.arange(len(u_order))
    i_map = np.zeros(len(item_names), dtype=np.int64)
    i_map[i_order] = np.arange(1, len(i_order) + 1)

    new_u = u_map[users[rows]]
    order = np.lexsort((rows, ts[rows], new_u))
    sorted_items = i_map[items[rows]][order]
    bounds = np.cumsum(np.bincount(new_u, minlength=len(u_order)))[:-1]
    sequences = [s.astype(np.int64) for s in np.split(sorted_items, bounds)]

    return SequenceStore(
        item_ids=[item_names[i] for i in i_order],
        user_ids=[user_names[u] for u in u_order],
        sequences=sequences,
        filter_mode="iterate" if iterate else "single-pass",
        min_count=min_count,
        dropped_short=dropped_short,
    )


@dataclass
class ItemSets:
    """Per-row sorted unique item sets in CSR form (for membership tests)."""

    indptr: np.ndarray
    items: np.ndarray

    @classmethod
    def from_sequences(cls, seqs):
        uniq = [np.unique(s) for s in seqs]
        indptr = np.zeros(len(uniq) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(u) for u in uniq])
        items = np.concatenate(uniq).astype(np.int64) if uniq else np.zeros(0, np.int64)
        return cls(indptr, items)

    def sizes(self):
        return np.diff(self.indptr)

    def row(self, r):
        return self.items[self.indptr[r]:self.indptr[r + 1]]

    def contains(self, cand, rows):
        cand = np.asarray(cand, dtype=np.int64)
        squeeze = cand.ndim == 1
        c2 = cand[:, None] if squeeze else cand
        out = kernels.isin_rows(c2, np.asarray(rows, dtype=np.int64), self.indptr, self.items)
        return out[:, 0] if squeeze else out


@dataclass
class Split:
    """Leave-one-out split: per kept user a train prefix, a valid and a test item."""

    store: SequenceStore
    users: np.ndarray  # store user index of each row
    train: list
    valid: np.ndarray
    test: np.ndarray
    excluded: int = 0
    _full_sets: ItemSets = field(default=None, repr=False)
    _train_sets: ItemSets = field(default=None, repr=False)

    @property
    def num_items(self):
        return self.store.num_items

    def __len__(self):
        return len(self.users)

    def history(self, split):
        """Model input per user: train for validation, train + valid for test."""
        if split == "valid":
            return self.train
        if split == "test":
            return [np.append(t, v) for t, v in zip(self.train, self.valid)]
        raise ValueError(f"split must be 'valid' or 'test', got {split!r}")

    def truth(self, split):
        return self.valid if split == "valid" else self.test

    def full_sets(self):
        if self._full_sets is None:
            self._full_sets = ItemSets.from_sequences(
                [np.concatenate([t, [v, s]]) for t, v, s in zip(self.train, self.valid, self.test)])
        return self._full_sets

    def train_sets(self):
        if self._train_sets is None:
            self._train_sets = ItemSets.from_sequences(self.train)
        return self._train_sets


def split_leave_one_out(store):
    keep, train, valid, test = [], [], [], []
    excluded = 0
    for u, seq in enumerate(store.sequences):
        if len(seq) < 3:
            excluded += 1
            continue
        keep.append(u)
        train.append(seq[:-2])
        valid.append(seq[-2])
        test.append(seq[-1])
    if excluded:
        log.warning("excluded %d users with sequences shorter than 3", excluded)
    if not keep:
        raise DataError("no user has at least 3 actions")
    return Split(store, np.asarray(keep, dtype=np.int64), train,
                 np.asarray(valid, dtype=np.int64), np.asarray(test, dtype=np.int64), excluded)


@dataclass
class TrainingInstance:
    input: np.ndarray
    target: np.ndarray
    negatives: np.ndarray


def left_pad(seqs, n):
    """Keep the most recent ``n`` items of each sequence, left-padded with 0."""
    out = np.zeros((len(seqs), n), dtype=np.int64)
    for r, s in enumerate(seqs):
        s = s[-n:]
        if len(s):
            out[r, n - len(s):] = s
    return out


def training_arrays(train_seqs, n):
    """Inputs and shifted targets for each training sequence.

    The input is the sequence minus its last action; the target at each real
    position is the following action, so the last real position targets the
    final training action. Sequences shorter than 2 yield no supervision.
    """
    inputs = left_pad([s[:-1] for s in train_seqs], n)
    targets = left_pad([s[1:] for s in train_seqs], n)
    return inputs, targets


def sample_negatives(targets, rows, sets, num_items, rng):
    """One uniform negative per supervised position, outside the row's item set.

    Collisions are redrawn until every draw is valid.
    """
    if np.any(sets.sizes()[rows] >= num_items):
        raise DataError("a user has interacted with every item; no negative can be sampled")
    negs = np.zeros_like(targets)
    r, c = np.nonzero(targets)
    owner = np.asarray(rows)[r]
    cand = rng.integers(1, num_items + 1, size=len(r))
    bad = sets.contains(cand, owner)
    while bad.any():
        idx = np.flatnonzero(bad)
        cand[idx] = rng.integers(1, num_items + 1, size=len(idx))
        bad[idx] = sets.contains(cand[idx], owner[idx])
    negs[r, c] = cand
    return negs


def build_instance(train_seq, n, rng, num_items):
    """Padded input, targets and fresh negatives for one training sequence."""
    train_seq = np.asarray(train_seq, dtype=np.int64)
    if len(train_seq) < 2:
        raise DataError("training sequence needs at least 2 actions to form an instance")
    inputs, targets = training_arrays([train_seq], n)
    sets = ItemSets.from_sequences([train_seq])
    negs = sample_negatives(targets, np.zeros(1, dtype=np.int64), sets, num_items, rng)
    return TrainingInstance(inputs[0], targets[0], negs[0])


# ---------------------------------------------------------------------------
# processed dataset file
# ---------------------------------------------------------------------------

def write_dataset(path, store, seed=0):
    """JSON manifest followed by length-prefixed little-endian u32 sequences."""
    split = split_leave_one_out(store)
    header = {
        "format_version": DATA_VERSION,
        "num_users": store.num_users,
        "num_items": store.num_items,
        "num_actions": store.num_actions,
        "seed": int(seed),
        "filter": {"mode": store.filter_mode, "min_count": store.min_count,
                   "dropped_short_users": store.dropped_short},
        "split": {"users": len(split), "train_actions": int(sum(len(t) for t in split.train)),
                  "valid_actions": len(split), "test_actions": len(split)},
        "item_vocab": list(store.item_ids),
        "user_vocab": list(store.user_ids),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    body = bytearray()
    for seq in store.sequences:
        body += struct.pack("<I", len(seq))
        body += np.asarray(seq, dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC + struct.pack("<II", DATA_VERSION, len(blob)))
        fh.write(blob)
        fh.write(bytes(body))


def read_dataset(path):
    raw = Path(path).read_bytes()
    if raw[:8] != DATA_MAGIC:
        raise DataError(f"{path}: not a processed dataset file")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != DATA_VERSION:
        raise DataError(f"{path}: unsupported dataset version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    pos = 16 + hlen
    seqs = []
    for _ in range(header["num_users"]):
        (length,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        seqs.append(np.frombuffer(raw, dtype="<u4", count=length, offset=pos).astype(np.int64))
        pos += 4 * length
    if pos != len(raw):
        raise DataError(f"{path}: trailing bytes after sequence section")
    flt = header["filter"]
    return SequenceStore(header["item_vocab"], header["user_vocab"], seqs,
                         filter_mode=flt["mode"], min_count=flt["min_count"],
                         dropped_short=flt["dropped_short_users"])
