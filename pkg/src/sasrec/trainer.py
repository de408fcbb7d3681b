"""Epoch loop with fresh negatives, Adam updates and validation early stopping."""

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import write_checkpoint
from .data import sample_negatives, training_arrays
from .errors import ConfigurationError, NumericalError
from .evaluation import evaluate
from .model import ModelConfig, SASRec
from .optim import Adam
from .rng import derive

log = logging.getLogger(__name__)

# n and dropout per dataset density (ML-1M style vs. sparse review data)
PROFILES = {
    "ml-1m": {"n": 200, "dropout_p": 0.2},
    "dense": {"n": 200, "dropout_p": 0.2},
    "sparse": {"n": 50, "dropout_p": 0.5},
}


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 20
    eval_every: int = 1
    seed: int = 0
    eval_negatives: int = 100

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.eval_every < 1 or self.max_epochs < 1:
            raise ConfigurationError("eval_every and max_epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")


@dataclass
class EpochRecord:
    epoch: int
    seconds: float
    loss: float
    val_ndcg: float = None
    val_hit: float = None
    best: bool = False

    def to_json(self, timing=False):
        d = asdict(self)
        if not timing:
            del d["seconds"]
        return json.dumps(d, sort_keys=True)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_epoch: int = 0

    def losses(self):
        return [r.loss for r in self.records]

    def to_jsonl(self, timing=False):
        """One JSON object per epoch; wall-clock seconds only when ``timing``."""
        return "".join(r.to_json(timing) + "\n" for r in self.records)


@dataclass
class TrainResult:
    model: object
    log: TrainLog
    best_epoch: int
    best_ndcg: float = None


def fit(model, batches, config, validate=None, log_path=None, checkpoint_path=None):
    """Generic loop shared by every trainable model.

    ``batches(epoch)`` yields loss tensors; ``validate(model)`` returns a
    report with ``ndcg_at_10``/``hit_at_10``. The best-validation parameters
    are restored into ``model`` on exit (ties keep the earlier epoch).
    """
    opt = Adam(model.params, lr=config.learning_rate, pinned_rows=model.pinned_rows())
    trail = TrainLog()
    best, best_arrays, since_best = -np.inf, None, 0
    sink = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            total, count = 0.0, 0
            for loss in batches(epoch):
                value = float(loss.data)
                if not np.isfinite(value):
                    _diagnostic(model, checkpoint_path, epoch, config.seed)
                    raise NumericalError(f"non-finite loss {value} at epoch {epoch}")
                T.backward(loss)
                opt.step()
                total += value
                count += 1
            if not all(np.isfinite(p.data).all() for p in model.params.values()):
                _diagnostic(model, checkpoint_path, epoch, config.seed)
                raise NumericalError(f"non-finite parameters after epoch {epoch}")
            rec = EpochRecord(epoch, max(time.perf_counter() - t0, 1e-9), total / max(count, 1))
            stop = False
            if validate is not None and epoch % config.eval_every == 0:
                rep = validate(model)
                rec.val_ndcg, rec.val_hit = rep.ndcg_at_10, rep.hit_at_10
                if rep.ndcg_at_10 > best:
                    best, since_best = rep.ndcg_at_10, 0
                    rec.best = True
                    trail.best_epoch = epoch
                    best_arrays = {k: v.data.copy() for k, v in model.params.items()}
                    if checkpoint_path:
                        save_model(checkpoint_path, model, config.seed, epoch)
                else:
                    since_best += config.eval_every
                    stop = since_best >= config.patience
            trail.records.append(rec)
            log.info("epoch %d loss %.5f (%.2fs)%s", epoch, rec.loss, rec.seconds,
                     "" if rec.val_ndcg is None else f" val ndcg {rec.val_ndcg:.4f}")
            if sink:
                sink.write(rec.to_json() + "\n")
                sink.flush()
            if stop:
                break
    finally:
        if sink:
            sink.close()
    if best_arrays is not None:
        for k, v in best_arrays.items():
            model.params[k].data[...] = v
    else:
        trail.best_epoch = trail.records[-1].epoch
        if checkpoint_path:
            save_model(checkpoint_path, model, config.seed, trail.best_epoch)
    return TrainResult(model, trail, trail.best_epoch, None if best == -np.inf else best)


def save_model(path, model, seed=0, epoch=0):
    write_checkpoint(path, model.kind, model.config_dict(), model.arrays(), seed=seed, epoch=epoch)


def _diagnostic(model, checkpoint_path, epoch, seed):
    if checkpoint_path:
        save_model(str(checkpoint_path) + ".diagnostic", model, seed, epoch)


def sasrec_batches(model, split_store, config, shuffle=True):
    """Closure yielding one loss per mini-batch; one instance per user per epoch."""
    inputs, targets = training_arrays(split_store.train, model.config.n)
    rows = np.flatnonzero((targets != 0).any(axis=1))
    inputs, targets = inputs[rows], targets[rows]
    users = split_store.users[rows]
    sets = split_store.train_sets()
    num_items = split_store.num_items

    def batches(epoch):
        negs = sample_negatives(targets, rows, sets, num_items, derive(config.seed, "negatives", epoch))
        order = (derive(config.seed, "shuffle", epoch).permutation(len(rows)) if shuffle
                 else np.arange(len(rows)))
        drop = derive(config.seed, "dropout", epoch)
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            yield model.loss(inputs[idx], targets[idx], negs[idx], users=users[idx], rng=drop)

    return batches


def validator(split_store, config):
    def validate(model):
        return evaluate(model, split_store, "valid", seed=config.seed, num_negatives=config.eval_negatives)
    return validate


def train(split_store, model_config, train_config, validate="default", log_path=None, checkpoint_path=None):
    """Train SASRec with early stopping on validation NDCG@10."""
    model = SASRec(model_config, rng=derive(train_config.seed, "init"))
    if validate == "default":
        validate = validator(split_store, train_config)
    return fit(model, sasrec_batches(model, split_store, train_config), train_config,
               validate=validate, log_path=log_path, checkpoint_path=checkpoint_path)


def measure_epoch_time(split_store, n_values, base_config, train_config):
    """Seconds for one training epoch at each maximum length n."""
    out = []
    for n in n_values:
        cfg = ModelConfig.from_dict({**base_config.to_dict(), "n": int(n)})
        model = SASRec(cfg, rng=derive(train_config.seed, "init"))
        batches = sasrec_batches(model, split_store, train_config)
        opt = Adam(model.params, lr=train_config.learning_rate, pinned_rows=model.pinned_rows())
        t0 = time.perf_counter()
        for loss in batches(1):
            T.backward(loss)
            opt.step()
        out.append((int(n), time.perf_counter() - t0))
    return out
