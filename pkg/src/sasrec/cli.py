"""Command-line entry point: prepare, train, evaluate, recommend, attn-export, epoch-time.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numerical failure.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, NumericalError

log = logging.getLogger("sasrec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

MODEL_KEYS = ("d", "n", "blocks", "heads", "dropout_p", "use_positional_embedding",
              "share_item_embedding", "use_residual", "use_dropout", "use_explicit_user",
              "final_ln", "ln_epsilon")
TRAIN_KEYS = ("learning_rate", "batch_size", "max_epochs", "patience", "eval_every", "eval_negatives")
RUN_KEYS = ("model", "profile", "seed", "threads", "precision")
CONFIG_KEYS = frozenset(MODEL_KEYS + TRAIN_KEYS + RUN_KEYS)


class Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _coerce(key, value):
    """Cast a config value to the type of the field it targets."""
    from .model import ModelConfig
    from .trainer import TrainConfig

    kinds = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    kinds.update({f.name: f.type for f in dataclasses.fields(TrainConfig)})
    kinds.update({"model": "str", "profile": "str", "seed": "int", "threads": "int", "precision": "str"})
    kind = kinds[key]
    kind = getattr(kind, "__name__", kind)
    try:
        if kind == "bool":
            if isinstance(value, bool):
                return value
            low = str(value).strip().lower()
            if low in ("1", "true", "on", "yes"):
                return True
            if low in ("0", "false", "off", "no"):
                return False
            raise ValueError
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"config key {key!r}: cannot use {value!r} as {kind}") from None


def read_config(path):
    """JSON object or ``key = value`` lines (``#`` comments). Unknown keys are rejected."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON: {exc}") from None
    else:
        raw = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = value
    return check_keys(raw, str(path))


def check_keys(raw, where):
    unknown = sorted(set(raw) - CONFIG_KEYS)
    if unknown:
        raise ConfigurationError(f"{where}: unknown config keys {unknown}; allowed: {sorted(CONFIG_KEYS)}")
    return {k: _coerce(k, v) for k, v in raw.items()}


def resolve_run_config(args, num_items, num_users):
    """Defaults < profile < config file < --set < dedicated flags."""
    from .model import ModelConfig
    from .trainer import PROFILES, TrainConfig

    file_cfg = read_config(args.config) if args.config else {}
    sets = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        sets[k.strip()] = v.strip()
    merged = {**file_cfg, **check_keys(sets, "--set")}

    flags = {}
    if args.model is not None:
        flags["model"] = args.model
    if args.profile is not None:
        flags["profile"] = args.profile
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.no_pe:
        flags["use_positional_embedding"] = False
    if args.unshared_ie:
        flags["share_item_embedding"] = False
    if args.no_rc:
        flags["use_residual"] = False
    if args.no_dropout:
        flags["use_dropout"] = False
    if args.blocks is not None:
        flags["blocks"] = args.blocks
    if args.heads is not None:
        flags["heads"] = args.heads
    if args.final_ln is not None:
        flags["final_ln"] = args.final_ln == "on"
    if args.d is not None:
        flags["d"] = args.d
    if args.max_epochs is not None:
        flags["max_epochs"] = args.max_epochs
    merged.update(flags)

    profile = merged.get("profile", "ml-1m")
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    model_kind = merged.get("model", "sasrec")
    if model_kind not in ("sasrec", "fmc", "poprec"):
        raise ConfigurationError(f"unknown model {model_kind!r}")
    mkw = {**PROFILES[profile], **{k: merged[k] for k in MODEL_KEYS if k in merged}}
    tkw = {k: merged[k] for k in TRAIN_KEYS if k in merged}
    seed = merged.get("seed", 0)
    model_cfg = ModelConfig(num_items=num_items, num_users=num_users, **mkw)
    train_cfg = TrainConfig(seed=seed, **tkw)
    return {
        "model": model_kind, "profile": profile, "seed": seed,
        "threads": merged.get("threads"), "precision": merged.get("precision", "float32"),
        "model_config": model_cfg, "train_config": train_cfg,
    }


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(path):
    from .data import read_dataset, split_leave_one_out

    if not Path(path).is_file():
        raise DataError(f"dataset file not found: {path}")
    store = read_dataset(path)
    return store, split_leave_one_out(store)


def _load_checkpoint(path):
    from .checkpoint import load_model

    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    return load_model(path)


def _check_vocab(model, store, ckpt_path, data_path):
    n_model = model.config.num_items if hasattr(model, "config") else model.num_items
    if n_model != store.num_items:
        raise DataError(f"vocabulary mismatch: checkpoint {ckpt_path} has {n_model} items, "
                        f"dataset {data_path} has {store.num_items} items")


def _set_threads(threads):
    if threads is None:
        return
    if threads < 1:
        raise ConfigurationError("--threads must be >= 1")
    try:
        import numba
    except ImportError:
        return
    numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_prepare(args):
    from .data import LineFormat, ML1M_FORMAT, five_core_filter, ingest, write_dataset

    src = Path(args.raw)
    if not src.is_file():
        raise DataError(f"input file not found: {src}")
    if args.format == "ml1m":
        fmt = dataclasses.replace(ML1M_FORMAT, skip_malformed=args.skip_malformed)
    else:
        fmt = LineFormat(delimiter=args.delimiter, user_col=args.user_col, item_col=args.item_col,
                         time_col=args.time_col, skip_malformed=args.skip_malformed, header=args.header)
    store = five_core_filter(ingest(src, fmt), min_count=args.min_count, iterate=args.kcore_iterate)
    out = _out_dir(args)
    path = out / args.name
    write_dataset(path, store, seed=args.seed)
    s = store.stats()
    print(f"users\t{s['users']}")
    print(f"items\t{s['items']}")
    print(f"avg actions/user\t{s['avg_actions_per_user']:.1f}")
    print(f"avg actions/item\t{s['avg_actions_per_item']:.1f}")
    print(f"actions\t{s['actions']}")
    print(f"filter\t{store.filter_mode} (k={store.min_count})")
    print(f"wrote\t{path}")
    return EXIT_OK


def cmd_train(args):
    from . import tensor as T
    from .baselines import PopRec, train_fmc
    from .trainer import save_model, train, validator

    store, split = _load_split(args.data)
    run = resolve_run_config(args, store.num_items, store.num_users)
    _set_threads(run["threads"])
    T.set_precision(run["precision"])
    out = _out_dir(args)
    ckpt = out / "model.ckpt"
    log_path = out / "train_log.jsonl"
    mc, tc = run["model_config"], run["train_config"]
    resolved = {"model": run["model"], "profile": run["profile"], "seed": run["seed"],
                "model_config": mc.to_dict(), "train_config": dataclasses.asdict(tc)}
    _write_json(out / "run_config.json", resolved)

    if run["model"] == "poprec":
        model = PopRec.fit(split)
        save_model(ckpt, model, run["seed"], 0)
        print(f"wrote\t{ckpt}")
        return EXIT_OK
    if run["model"] == "fmc":
        result = train_fmc(split, mc.d, tc, validate=validator(split, tc),
                           log_path=log_path, checkpoint_path=ckpt)
    else:
        result = train(split, mc, tc, log_path=log_path, checkpoint_path=ckpt)
    (out / "timing.jsonl").write_text(result.log.to_jsonl(timing=True))
    best = "n/a" if result.best_ndcg is None else f"{result.best_ndcg:.4f}"
    print(f"best epoch\t{result.best_epoch}")
    print(f"best valid NDCG@10\t{best}")
    print(f"wrote\t{ckpt}")
    return EXIT_OK


def cmd_evaluate(args):
    from .evaluation import evaluate

    store, split = _load_split(args.data)
    model, header = _load_checkpoint(args.checkpoint)
    _check_vocab(model, store, args.checkpoint, args.data)
    report = evaluate(model, split, args.split, seed=args.seed, num_negatives=args.negatives)
    text = report.to_json()
    print(text)
    if args.out:
        out = _out_dir(args)
        (out / f"metrics_{args.split}.json").write_text(text + "\n")
    return EXIT_OK


def recommend(model, store, history_ids, top_k, user=None):
    """Rank every catalog item outside the history; returns [(item_id, score)]."""
    index = store.item_index()
    hist = []
    for ext in history_ids:
        if ext in index:
            hist.append(index[ext])
        else:
            log.warning("skipping unknown item %r", ext)
    if not hist:
        raise DataError("history is empty after dropping unknown items")
    if top_k < 1:
        raise ConfigurationError("top_k must be >= 1")
    scores = np.asarray(model.score_all(np.asarray(hist, dtype=np.int64), user), dtype=np.float64)
    cand = np.setdiff1d(np.arange(1, store.num_items + 1), hist)
    order = cand[np.lexsort((cand, -scores[cand]))][:top_k]
    return [(store.item_ids[i - 1], float(scores[i])) for i in order]


def cmd_recommend(args):
    store = _load_split(args.data)[0]
    model, _ = _load_checkpoint(args.checkpoint)
    _check_vocab(model, store, args.checkpoint, args.data)
    user = None
    if args.user is not None:
        uidx = store.user_index()
        if args.user not in uidx:
            raise DataError(f"unknown user {args.user!r}")
        user = uidx[args.user]
    cfg = getattr(model, "config", None)
    if cfg is not None and cfg.use_explicit_user and user is None:
        raise ConfigurationError("this checkpoint uses a user embedding; pass --user")
    history = list(args.history)
    if args.history_file:
        history += Path(args.history_file).read_text(encoding="utf-8").split()
    for rank, (item, score) in enumerate(recommend(model, store, history, args.top_k, user), start=1):
        print(f"{rank}\t{item}\t{score:.6g}")
    return EXIT_OK


def cmd_attn_export(args):
    from .analysis import group_attention, position_attention, read_group_map, write_heatmap

    store, split = _load_split(args.data)
    model, header = _load_checkpoint(args.checkpoint)
    if header["kind"] != "sasrec":
        raise ConfigurationError(f"attention export needs a sasrec checkpoint, got {header['kind']}")
    _check_vocab(model, store, args.checkpoint, args.data)
    out = _out_dir(args)
    meta = {"checkpoint": str(args.checkpoint), "dataset": str(args.data)}
    if args.mode == "positions":
        blocks = range(model.config.blocks) if args.block is None else [args.block]
        for b in blocks:
            hm = position_attention(model, split, block=b, k=args.k)
            path = out / f"attention_positions_block{b}.csv"
            write_heatmap(hm, path, meta)
            print(f"wrote\t{path}")
    else:
        if not args.groups:
            raise ConfigurationError("--mode groups needs --groups FILE")
        index = store.item_index()
        qmap, _ = read_group_map(args.groups, index)
        kmap = read_group_map(args.key_groups, index)[0] if args.key_groups else qmap
        b = 0 if args.block is None else args.block
        hm = group_attention(model, split, qmap, kmap, block=b)
        path = out / f"attention_groups_block{b}.csv"
        write_heatmap(hm, path, meta)
        print(f"wrote\t{path}")
    return EXIT_OK


def cmd_epoch_time(args):
    from .trainer import measure_epoch_time

    store, split = _load_split(args.data)
    run = resolve_run_config(args, store.num_items, store.num_users)
    _set_threads(run["threads"])
    for n, secs in measure_epoch_time(split, args.lengths, run["model_config"], run["train_config"]):
        print(f"n={n}\t{secs:.3f}s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _model_flags(p):
    p.add_argument("--config", help="JSON or key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--model", choices=("sasrec", "fmc", "poprec"))
    p.add_argument("--profile", choices=("ml-1m", "dense", "sparse"))
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--d", type=int, help="latent dimension")
    p.add_argument("--blocks", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--no-pe", action="store_true", help="drop the positional embedding")
    p.add_argument("--unshared-ie", action="store_true", help="separate output item embedding")
    p.add_argument("--no-rc", action="store_true", help="drop residual connections")
    p.add_argument("--no-dropout", action="store_true")
    p.add_argument("--final-ln", choices=("on", "off"))


def build_parser():
    parser = Parser(prog="sasrec", description="Self-attentive sequential recommendation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("prepare", help="filter, index and split a raw interaction log")
    p.add_argument("raw")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--name", default="dataset.bin")
    p.add_argument("--format", choices=("ml1m", "custom"), default="custom")
    p.add_argument("--delimiter", default="tab", help="tab, comma, ::, whitespace or a literal")
    p.add_argument("--user-col", type=int, default=0)
    p.add_argument("--item-col", type=int, default=1)
    p.add_argument("--time-col", type=int, default=2)
    p.add_argument("--header", action="store_true", help="skip the first line")
    p.add_argument("--skip-malformed", action="store_true")
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--kcore-iterate", action="store_true", help="repeat the filter to a fixpoint")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a prepared dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="sampled Hit@10 / NDCG@10 of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--negatives", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="top-k items for a history")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--history", nargs="*", default=[], help="item ids, oldest first")
    p.add_argument("--history-file")
    p.add_argument("--user")
    p.add_argument("--top-k", type=int, default=10)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("attn-export", help="average attention heatmaps as CSV")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("positions", "groups"), default="positions")
    p.add_argument("--block", type=int)
    p.add_argument("--k", type=int, default=15)
    p.add_argument("--groups", help="item_id,label file for query (and key) items")
    p.add_argument("--key-groups", help="separate item_id,label file for key items")
    p.set_defaults(func=cmd_attn_export)

    p = sub.add_parser("epoch-time", help="seconds per training epoch for several n")
    p.add_argument("--data", required=True)
    p.add_argument("--lengths", type=int, nargs="+", default=[10, 50, 100, 200, 300, 400, 500, 600])
    _model_flags(p)
    p.set_defaults(func=cmd_epoch_time)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
