import struct

import numpy as np
import pytest

from sasrec.baselines import FMC, PopRec
from sasrec.checkpoint import MAGIC, load_model, read_checkpoint, write_checkpoint
from sasrec.errors import DataError
from sasrec.trainer import save_model

from oracles import toy_model


def test_round_trip_is_bit_exact(tmp_path):
    m = toy_model(0, heads=2, share_item_embedding=False)
    p = tmp_path / "m.ckpt"
    save_model(p, m, seed=4, epoch=9)
    back, header = load_model(p)
    assert header["kind"] == "sasrec" and header["seed"] == 4 and header["epoch"] == 9
    assert back.config == m.config
    for k, v in m.arrays().items():
        assert back.params[k].data.tobytes() == v.astype("<f4").tobytes()
    p2 = tmp_path / "m2.ckpt"
    save_model(p2, back, seed=4, epoch=9)
    assert p.read_bytes() == p2.read_bytes()


def test_layout(tmp_path):
    p = tmp_path / "x.ckpt"
    write_checkpoint(p, "test", {"a": 1}, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    raw = p.read_bytes()
    assert raw[:8] == MAGIC
    version, hlen = struct.unpack_from("<II", raw, 8)
    assert version == 1
    assert np.frombuffer(raw[16 + hlen:], dtype="<f4").tolist() == list(range(6))
    header, arrays = read_checkpoint(p)
    assert header["arrays"] == [{"name": "w", "offset": 0, "shape": [2, 3]}]


@pytest.mark.parametrize("model", [PopRec(np.array([0, 4, 1, 7])), FMC(5, 3, rng=np.random.default_rng(0))])
def test_baseline_round_trip(tmp_path, model):
    p = tmp_path / "b.ckpt"
    save_model(p, model)
    back, header = load_model(p)
    assert header["kind"] == model.kind
    h = np.array([1, 2])
    assert back.score_all(h).tobytes() == model.score_all(h).tobytes()


def test_rejects_foreign_file(tmp_path):
    p = tmp_path / "junk"
    p.write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(DataError):
        read_checkpoint(p)


def test_rejects_unknown_kind(tmp_path):
    p = tmp_path / "k.ckpt"
    write_checkpoint(p, "mystery", {}, {})
    with pytest.raises(DataError):
        load_model(p)
