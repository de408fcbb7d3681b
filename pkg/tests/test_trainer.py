import json
import math
from types import SimpleNamespace

import numpy as np
import pytest

from sasrec import tensor as T
from sasrec.checkpoint import load_model
from sasrec.data import five_core_filter, split_leave_one_out
from sasrec.errors import ConfigurationError, NumericalError
from sasrec.model import ModelConfig, SASRec
from sasrec.synthetic import ring_walk
from sasrec.trainer import PROFILES, TrainConfig, fit, measure_epoch_time, sasrec_batches, train


def mcfg(split, **kw):
    return ModelConfig(**{"num_items": split.num_items, "d": 16, "n": 20, **kw})


def scripted(values):
    it = iter(values)

    def validate(model):
        v = next(it)
        return SimpleNamespace(ndcg_at_10=v, hit_at_10=v)
    return validate


def test_profiles():
    assert PROFILES["ml-1m"] == {"n": 200, "dropout_p": 0.2}
    assert PROFILES["sparse"] == {"n": 50, "dropout_p": 0.5}


@pytest.mark.parametrize("bad", [dict(patience=0), dict(batch_size=0), dict(learning_rate=0), dict(eval_every=0)])
def test_train_config_validation(bad):
    with pytest.raises(ConfigurationError):
        TrainConfig(**bad)


def test_early_stop_on_falling_metric(small_split, tmp_path):
    model_cfg = mcfg(small_split)
    snapshots = []

    def validate(model):
        snapshots.append(model.params["item_emb"].data.copy())
        return scripted([0.5, 0.4, 0.3, 0.2])(model) if len(snapshots) == 1 else \
            SimpleNamespace(ndcg_at_10=0.5 - 0.1 * (len(snapshots) - 1), hit_at_10=0.0)

    ckpt = tmp_path / "best.ckpt"
    res = train(small_split, model_cfg, TrainConfig(max_epochs=10, patience=1, seed=0),
                validate=validate, checkpoint_path=ckpt)
    assert len(res.log.records) == 2 and res.best_epoch == 1
    assert np.array_equal(res.model.params["item_emb"].data, snapshots[0])
    saved, header = load_model(ckpt)
    assert header["epoch"] == 1
    assert np.array_equal(saved.params["item_emb"].data, snapshots[0])


def test_best_is_never_below_an_earlier_evaluation(small_split):
    vals = [0.2, 0.3, 0.25, 0.3, 0.1, 0.05]
    res = train(small_split, mcfg(small_split), TrainConfig(max_epochs=6, patience=3, seed=0),
                validate=scripted(vals))
    seen = [r.val_ndcg for r in res.log.records]
    assert res.best_ndcg == max(seen)
    assert res.best_epoch == 2  # tie at epoch 4 keeps the earlier epoch
    assert len(seen) == 5  # three evaluations without strict improvement


def test_eval_every_counts_epochs(small_split):
    res = train(small_split, mcfg(small_split), TrainConfig(max_epochs=20, patience=4, eval_every=2, seed=0),
                validate=scripted([0.5, 0.4, 0.3, 0.2, 0.1]))
    evaluated = [r.epoch for r in res.log.records if r.val_ndcg is not None]
    assert evaluated == [2, 4, 6] and len(res.log.records) == 6


def test_same_seed_same_losses(small_split):
    tc = TrainConfig(max_epochs=3, seed=7)
    a = train(small_split, mcfg(small_split), tc, validate=None)
    b = train(small_split, mcfg(small_split), tc, validate=None)
    assert a.log.losses() == b.log.losses()
    for k in a.model.params:
        assert a.model.params[k].data.tobytes() == b.model.params[k].data.tobytes()
    c = train(small_split, mcfg(small_split), TrainConfig(max_epochs=3, seed=8), validate=None)
    assert c.log.losses() != a.log.losses()


def test_negatives_resampled_each_epoch():
    inter = ring_walk(200, 20, 12, seed=0)
    sp = split_leave_one_out(five_core_filter(inter))
    model = SASRec(mcfg(sp, n=10), rng=np.random.default_rng(0))
    captured = {}
    orig = model.loss

    def spy(inputs, targets, negatives, users=None, rng=None):
        captured.setdefault(spy.epoch, {}).update({int(u): negatives[i].copy() for i, u in enumerate(users)})
        return orig(inputs, targets, negatives, users=users, rng=rng)

    model.loss = spy
    batches = sasrec_batches(model, sp, TrainConfig(seed=0, batch_size=64))
    for spy.epoch in (1, 2):
        for _ in batches(spy.epoch):
            pass
    users = sorted(captured[1])
    differ = np.mean([not np.array_equal(captured[1][u], captured[2][u]) for u in users])
    assert differ > 0.95


def test_initial_loss_near_two_ln2(small_split):
    # random logits near zero; softplus is convex so the mean sits at or just above 2 ln 2
    model = SASRec(mcfg(small_split), rng=np.random.default_rng(0))
    loss = float(next(iter(sasrec_batches(model, small_split, TrainConfig(seed=0))(1))).data)
    assert 2 * math.log(2) - 0.02 <= loss <= 1.15 * 2 * math.log(2)


def test_training_reduces_loss(small_split):
    res = train(small_split, mcfg(small_split), TrainConfig(max_epochs=8, seed=0, batch_size=32), validate=None)
    losses = res.log.losses()
    assert losses[-1] < losses[0]


def test_log_file_has_no_wall_clock(small_split, tmp_path):
    p = tmp_path / "log.jsonl"
    train(small_split, mcfg(small_split), TrainConfig(max_epochs=2, seed=0), log_path=p)
    rows = [json.loads(line) for line in p.read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2]
    assert all("seconds" not in r and "val_ndcg" in r for r in rows)


def test_nonfinite_loss_raises_with_diagnostic(small_split, tmp_path):
    model = SASRec(mcfg(small_split), rng=np.random.default_rng(0))
    w = model.params["item_emb"]

    def batches(epoch):
        yield T.mul_const(T.total(T.embedding(w, np.array([[1]]))), float("nan"))

    ckpt = tmp_path / "m.ckpt"
    with pytest.raises(NumericalError):
        fit(model, batches, TrainConfig(max_epochs=2), checkpoint_path=ckpt)
    assert (tmp_path / "m.ckpt.diagnostic").exists()


def test_epoch_time_trend():
    inter = ring_walk(150, 300, 110, seed=0)
    sp = split_leave_one_out(five_core_filter(inter))
    base = ModelConfig(num_items=sp.num_items, d=50, n=10, use_dropout=False)
    tc = TrainConfig(seed=0)
    measure_epoch_time(sp, [10], base, tc)  # warm up jit and caches
    times = dict(measure_epoch_time(sp, [50, 100], base, tc))
    assert 1.2 <= times[100] / times[50] <= 6
    (_, a), (_, b) = measure_epoch_time(sp, [10, 10], base, tc)
    assert 0.5 <= a / b <= 2
