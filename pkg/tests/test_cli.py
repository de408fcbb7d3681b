import json

import numpy as np
import pytest

from sasrec.checkpoint import load_model
from sasrec.cli import build_parser, main, resolve_run_config
from sasrec.data import read_dataset
from sasrec.synthetic import planted_markov

FAST = ["--d", "16", "--max-epochs", "2", "--set", "n=10", "--set", "eval_every=1"]


@pytest.fixture(scope="module")
def raw(tmp_path_factory):
    inter, _ = planted_markov(120, 30, 15, seed=1)
    path = tmp_path_factory.mktemp("raw") / "log.tsv"
    path.write_text("".join(f"{r.user}\t{r.item}\t{r.timestamp}\n" for r in inter))
    return path


@pytest.fixture(scope="module")
def dataset(raw, tmp_path_factory):
    out = tmp_path_factory.mktemp("prep")
    assert main(["prepare", str(raw), "--out", str(out)]) == 0
    return out / "dataset.bin"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    runs = {}
    for kind in ("sasrec", "fmc", "poprec"):
        out = tmp_path_factory.mktemp(kind)
        assert main(["train", "--data", str(dataset), "--out", str(out), "--model", kind, *FAST]) == 0
        runs[kind] = out
    return runs


def test_prepare_summary_and_rerun(raw, tmp_path, capsys):
    assert main(["prepare", str(raw), "--out", str(tmp_path / "a")]) == 0
    text = capsys.readouterr().out
    for key in ("users\t", "items\t", "avg actions/user\t", "avg actions/item\t", "actions\t"):
        assert key in text
    main(["prepare", str(raw), "--out", str(tmp_path / "b")])
    assert (tmp_path / "a/dataset.bin").read_bytes() == (tmp_path / "b/dataset.bin").read_bytes()


def test_prepare_missing_file(tmp_path, capsys):
    missing = tmp_path / "nope.tsv"
    assert main(["prepare", str(missing), "--out", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_usage_exits_one(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 1


def _resolve(argv, num_items=3416, num_users=6040):
    args = build_parser().parse_args(["train", "--data", "x", "--out", "y", *argv])
    return resolve_run_config(args, num_items, num_users)


@pytest.mark.parametrize("profile,n,p", [("ml-1m", 200, 0.2), ("sparse", 50, 0.5)])
def test_profiles(profile, n, p):
    mc = _resolve(["--profile", profile])["model_config"]
    assert (mc.n, mc.dropout_p, mc.blocks, mc.d, mc.share_item_embedding) == (n, p, 2, 50, True)


def test_default_profile_is_ml1m():
    assert _resolve([])["model_config"].n == 200


def test_precedence(tmp_path):
    cfg = tmp_path / "c.conf"
    cfg.write_text("# comment\nprofile = sparse\nd = 32\nblocks = 3\n")
    run = _resolve(["--config", str(cfg), "--set", "blocks=1", "--set", "d=24", "--d", "40"])
    mc = run["model_config"]
    assert (mc.n, mc.d, mc.blocks) == (50, 40, 1)


def test_committed_configs():
    import pathlib
    root = pathlib.Path(__file__).resolve().parents[1] / "configs"
    assert _resolve(["--config", str(root / "ml1m.json")])["model_config"].n == 200
    mc = _resolve(["--config", str(root / "sparse.conf")])["model_config"]
    assert (mc.n, mc.dropout_p) == (50, 0.5)


def test_train_writes_resolved_profile(dataset, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--out", str(out), "--profile", "sparse",
                 "--max-epochs", "1", "--d", "8"]) == 0
    rc = json.loads((out / "run_config.json").read_text())
    assert rc["model_config"]["n"] == 50 and rc["model_config"]["dropout_p"] == 0.5


def test_heads_must_divide_d(dataset, tmp_path, capsys):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--d", "50", "--heads", "3"]) == 1
    assert "heads" in capsys.readouterr().err


def test_unknown_config_key(dataset, tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"learning_rat": 0.1}))
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--config", str(cfg)]) == 1
    assert "learning_rat" in capsys.readouterr().err


def test_fmc_form_variant_trains(dataset, tmp_path):
    out = tmp_path / "r"
    argv = ["train", "--data", str(dataset), "--out", str(out), "--blocks", "0", "--no-pe", "--unshared-ie", *FAST]
    assert main(argv) == 0
    model, _ = load_model(out / "model.ckpt")
    cfg = model.config
    assert cfg.blocks == 0 and not cfg.use_positional_embedding and not cfg.share_item_embedding


def test_train_log_is_deterministic(dataset, trained, tmp_path):
    out = tmp_path / "again"
    main(["train", "--data", str(dataset), "--out", str(out), "--model", "sasrec", *FAST])
    for name in ("model.ckpt", "train_log.jsonl", "run_config.json"):
        assert (out / name).read_bytes() == (trained["sasrec"] / name).read_bytes()


def test_evaluate_poprec(dataset, trained, tmp_path, capsys):
    ckpt = str(trained["poprec"] / "model.ckpt")
    assert main(["evaluate", ckpt, "--data", str(dataset), "--out", str(tmp_path)]) == 0
    first = capsys.readouterr().out
    main(["evaluate", ckpt, "--data", str(dataset)])
    assert capsys.readouterr().out == first
    rep = json.loads(first)
    assert rep["hit_at_10"] >= rep["ndcg_at_10"]
    assert (tmp_path / "metrics_test.json").read_text().strip() == first.strip()


def test_evaluate_vocab_mismatch(trained, tmp_path, capsys):
    inter, _ = planted_markov(60, 12, 12, seed=5)
    raw = tmp_path / "other.tsv"
    raw.write_text("".join(f"{r.user}\t{r.item}\t{r.timestamp}\n" for r in inter))
    main(["prepare", str(raw), "--out", str(tmp_path)])
    other = tmp_path / "dataset.bin"
    n_other = read_dataset(other).num_items
    capsys.readouterr()
    ckpt = trained["sasrec"] / "model.ckpt"
    assert main(["evaluate", str(ckpt), "--data", str(other)]) == 2
    err = capsys.readouterr().err
    assert "30 items" in err and f"{n_other} items" in err


def _recommend(capsys, ckpt, dataset, *extra):
    capsys.readouterr()
    code = main(["recommend", str(ckpt), "--data", str(dataset), *extra])
    rows = [line.split("\t") for line in capsys.readouterr().out.splitlines()]
    return code, rows


def test_recommend_fmc_matches_fmc_score(dataset, trained, capsys):
    ckpt = trained["fmc"] / "model.ckpt"
    store = read_dataset(dataset)
    model, _ = load_model(ckpt)
    last = store.item_ids[4]
    code, rows = _recommend(capsys, ckpt, dataset, "--history", last, "--top-k", "10")
    assert code == 0
    li = store.item_index()[last]
    cands = [j for j in range(1, store.num_items + 1) if j != li]
    scores = np.array([model.fmc_score(li, j) for j in cands])
    want = [store.item_ids[cands[k] - 1] for k in np.lexsort((cands, -scores))[:10]]
    assert [r[1] for r in rows] == want


def test_recommend_clamps_and_excludes_history(dataset, trained, capsys):
    store = read_dataset(dataset)
    hist = list(store.item_ids[:3])
    code, rows = _recommend(capsys, trained["sasrec"] / "model.ckpt", dataset, "--history", *hist, "--top-k", "1000")
    assert code == 0 and len(rows) == store.num_items - 3
    assert not set(hist) & {r[1] for r in rows}
    assert [r[0] for r in rows] == [str(k) for k in range(1, len(rows) + 1)]
    scores = [float(r[2]) for r in rows]
    assert scores == sorted(scores, reverse=True)


def test_recommend_empty_history(dataset, trained, capsys):
    code, _ = _recommend(capsys, trained["sasrec"] / "model.ckpt", dataset, "--history", "not-an-item")
    assert code == 2


def test_attn_export_positions(dataset, trained, tmp_path, capsys):
    ckpt = trained["sasrec"] / "model.ckpt"
    assert main(["attn-export", str(ckpt), "--data", str(dataset), "--out", str(tmp_path), "--k", "5"]) == 0
    for b in (0, 1):
        lines = (tmp_path / f"attention_positions_block{b}.csv").read_text().splitlines()
        assert len(lines) == 26
        assert (tmp_path / f"attention_positions_block{b}.csv.json").exists()


def test_attn_export_groups(dataset, trained, tmp_path):
    store = read_dataset(dataset)
    groups = tmp_path / "g.txt"
    groups.write_text("".join(f"{item}\t{'ab'[k % 2]}\n" for k, item in enumerate(store.item_ids)))
    ckpt = trained["sasrec"] / "model.ckpt"
    argv = ["attn-export", str(ckpt), "--data", str(dataset), "--out", str(tmp_path), "--mode", "groups",
            "--groups", str(groups)]
    assert main(argv) == 0
    lines = (tmp_path / "attention_groups_block0.csv").read_text().splitlines()
    assert lines[0] == "query_group,key_group,value,count" and len(lines) == 5


def test_attn_export_rejects_baseline(dataset, trained, tmp_path):
    ckpt = trained["fmc"] / "model.ckpt"
    assert main(["attn-export", str(ckpt), "--data", str(dataset), "--out", str(tmp_path)]) == 1


def test_epoch_time(dataset, capsys):
    assert main(["epoch-time", "--data", str(dataset), "--lengths", "5", "10", "--d", "8"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert [line.split("\t")[0] for line in out] == ["n=5", "n=10"]
