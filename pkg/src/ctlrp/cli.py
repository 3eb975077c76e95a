"""``ctlrp`` command line: gen-data, train, explain, eval.

Option values resolve as: command-line flag, then ``--config`` JSON file,
then the built-in default.  Errors go to stderr as
``ctlrp: error[<kind>]: <message>`` with exit status 1.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__
from .errors import ConfigError, CtlrpError, InputError
from .evalharness import DEFAULT_LEVELS, EvalConfig, sweep
from .explain import METHODS, explain
from .graphdata import (
    SyntheticConfig,
    Vocabulary,
    atomic_write_text,
    generate_synthetic,
    load_events,
    save_events,
    save_registry,
)
from .highlight import render_page
from .model import BiGcnModel, ModelConfig, TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("ctlrp")

EVENTS_FILE = "events.jsonl"
VOCAB_FILE = "vocab.json"
REGISTRY_FILE = "registry.json"
CHECKPOINT_FILE = "model.ckpt.json"
TRAIN_LOG_FILE = "train_log.json"
EXPLANATIONS_FILE = "explanations.json"
HTML_FILE = "explanations.html"
REPORT_CSV = "report.csv"
REPORT_JSON = "report.json"
RUNTIME_FILE = "runtime.json"


def _csv_list(text):
    return [s.strip() for s in text.split(",") if s.strip()] if isinstance(text, str) else list(text)


def _float_list(text):
    return [float(s) for s in _csv_list(text)]


def _pair(text):
    vals = [int(s) for s in _csv_list(text)] if isinstance(text, str) else [int(s) for s in text]
    if len(vals) != 2:
        raise ConfigError(f"expected MIN,MAX, got {text!r}")
    return tuple(vals)


# (dest, flag, type, default, help); type also converts config-file values
COMMON = [
    ("seed", "--seed", int, 0, "random seed"),
    ("out", "--out", str, "out", "output directory"),
    ("jobs", "--jobs", int, 1, "parallel workers for per-event work"),
]
OPTIONS = {
    "gen-data": [
        ("events", "--events", int, 500, "number of events"),
        ("classes", "--classes", int, 4, "number of classes"),
        ("vocab", "--vocab", int, 200, "vocabulary size including PAD/UNK"),
        ("tree_size", "--tree-size", _pair, (4, 12), "MIN,MAX posts per event"),
        ("tokens_per_post", "--tokens-per-post", _pair, (3, 6), "MIN,MAX tokens per post"),
        ("planted", "--planted", int, 5, "planted tokens per class"),
        ("noise", "--noise", float, 0.2, "noise rate in [0, 1]"),
    ],
    "train": [
        ("data", "--data", str, None, "JSONL dataset"),
        ("vocab_file", "--vocab-file", str, None, "vocabulary JSON (sets vocab size)"),
        ("classes", "--classes", int, None, "class count (default: max label + 1)"),
        ("epochs", "--epochs", int, 200, "maximum epochs"),
        ("patience", "--patience", int, 10, "early-stop patience in epochs"),
        ("lr", "--lr", float, 1e-3, "learning rate"),
        ("batch_size", "--batch-size", int, 16, "mini-batch size"),
        ("val_fraction", "--val-fraction", float, 0.2, "held-out validation fraction"),
        ("embed_dim", "--embed-dim", int, 32, "token embedding width"),
        ("hidden_dim", "--hidden-dim", int, 64, "graph-conv width"),
        ("pooling", "--pooling", str, "mean", "mean, max or mlp"),
        ("bias", "--bias", int, 1, "1 to use bias terms, 0 for a bias-free model"),
    ],
    "explain": [
        ("checkpoint", "--checkpoint", str, None, "model checkpoint"),
        ("data", "--data", str, None, "JSONL dataset"),
        ("method", "--method", str, "ct-lrp", f"one of: {', '.join(METHODS)}"),
        ("event_ids", "--event-ids", _csv_list, None, "comma-separated event ids (default: all)"),
        ("eps", "--eps", float, 1e-6, "LRP epsilon"),
        ("mode", "--mode", str, "conserving", "pooling LRP mode: conserving or paper-literal"),
        ("html", "--html", int, 0, "1 to also write an HTML report"),
        ("vocab_file", "--vocab-file", str, None, "vocabulary JSON for token text in HTML"),
    ],
    "eval": [
        ("checkpoint", "--checkpoint", str, None, "model checkpoint"),
        ("data", "--data", str, None, "JSONL dataset"),
        ("methods", "--methods", _csv_list, list(METHODS), "comma-separated methods"),
        ("levels", "--levels", _float_list, list(DEFAULT_LEVELS), "comma-separated sparsity levels"),
        ("threshold", "--threshold", float, 0.01, "attribution threshold"),
        ("folds", "--folds", int, 5, "folds for mean/std"),
        ("eps", "--eps", float, 1e-6, "LRP epsilon"),
        ("mode", "--mode", str, "conserving", "pooling LRP mode"),
        ("dataset_name", "--dataset-name", str, "dataset", "dataset label in reports"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctlrp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ctlrp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON file of option values")
        p.add_argument("-v", "--verbose", action="store_true")
        for dest, flag, typ, default, help_ in [*COMMON, *opts]:
            p.add_argument(flag, dest=dest, type=typ, default=None, help=f"{help_} (default: {default})")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flag > config file > default for the chosen command."""
    specs = {dest: (typ, default) for dest, _, typ, default, _ in [*COMMON, *OPTIONS[args.command]]}
    file_values = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(file_values) - set(specs))
        if unknown:
            raise ConfigError(f"unknown config key(s) for {args.command}: {', '.join(unknown)}")
    out = {}
    for dest, (typ, default) in specs.items():
        flag_value = getattr(args, dest)
        if flag_value is not None:
            out[dest] = flag_value
        elif dest in file_values:
            try:
                out[dest] = typ(file_values[dest])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config key {dest!r}: {exc}") from None
        else:
            out[dest] = default
    return out


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def cmd_gen_data(cfg) -> int:
    config = SyntheticConfig(
        num_events=cfg["events"], num_classes=cfg["classes"], vocab_size=cfg["vocab"],
        tree_size_range=tuple(cfg["tree_size"]), tokens_per_post_range=tuple(cfg["tokens_per_post"]),
        planted_tokens_per_class=cfg["planted"], noise_rate=cfg["noise"], seed=cfg["seed"],
    )
    ds = generate_synthetic(config)
    out = Path(cfg["out"])
    save_events(ds.events, out / EVENTS_FILE)
    ds.vocabulary.save(out / VOCAB_FILE)
    save_registry(ds.registry, out / REGISTRY_FILE)
    counts = [sum(ev.label == c for ev in ds.events) for c in range(config.num_classes)]
    print(f"events={len(ds.events)} classes={config.num_classes} vocab={len(ds.vocabulary)} "
          f"nodes={sum(e.num_nodes for e in ds.events)} tokens={sum(e.num_tokens for e in ds.events)} "
          f"per_class={counts} out={out}")
    return 0


def _load_dataset(cfg, num_classes=None):
    _require(cfg, "data")
    return load_events(cfg["data"], num_classes)


def cmd_train(cfg) -> int:
    events = _load_dataset(cfg)
    if not events:
        raise InputError(f"{cfg['data']}: no events")
    meta = {"dataset_sha256": _sha256(cfg["data"])}
    if cfg["vocab_file"]:
        vocab_size = len(Vocabulary.load(cfg["vocab_file"]))
        meta["vocab_sha256"] = _sha256(cfg["vocab_file"])
    else:
        vocab_size = 1 + max(t for ev in events for p in ev.posts for t in p.tokens)
    num_classes = cfg["classes"] or 1 + max(ev.label for ev in events)
    _check_compat(events, vocab_size, num_classes)
    model_cfg = ModelConfig(vocab_size, num_classes, cfg["embed_dim"], cfg["hidden_dim"],
                            cfg["pooling"], bool(cfg["bias"]))
    train_cfg = TrainConfig(cfg["epochs"], cfg["patience"], cfg["lr"], cfg["batch_size"],
                            cfg["val_fraction"], cfg["seed"])
    model = BiGcnModel.init(model_cfg, cfg["seed"])
    result = train(model, events, train_cfg)
    meta["train_config"] = train_cfg.__dict__
    meta["best_epoch"] = result.best_epoch
    out = Path(cfg["out"])
    save_checkpoint(result.model, out / CHECKPOINT_FILE, meta)
    atomic_write_text(out / TRAIN_LOG_FILE, _dump({"history": result.history, "best_epoch": result.best_epoch,
                                                   "stopped_early": result.stopped_early}))
    last = result.history[-1]
    print(f"epochs={len(result.history)} best_epoch={result.best_epoch} "
          + " ".join(f"{k}={v:.4f}" for k, v in last.items() if k != "epoch"))
    return 0


def _check_compat(events, vocab_size, num_classes):
    for ev in events:
        if ev.label >= num_classes:
            raise InputError(f"event {ev.event_id!r} has label {ev.label} but the model has {num_classes} classes")
        top = max(t for p in ev.posts for t in p.tokens)
        if top >= vocab_size:
            raise InputError(f"event {ev.event_id!r} uses token {top} outside the model vocabulary ({vocab_size})")


def _load_model_and_events(cfg):
    _require(cfg, "checkpoint", "data")
    model, _meta = load_checkpoint(cfg["checkpoint"])
    events = _load_dataset(cfg)
    _check_compat(events, model.config.vocab_size, model.num_classes)
    return model, events


def _pmap(fn, items, jobs):
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def cmd_explain(cfg) -> int:
    if cfg["method"] not in METHODS:
        raise ConfigError(f"unknown method {cfg['method']!r}; valid methods: {', '.join(METHODS)}")
    model, events = _load_model_and_events(cfg)
    if cfg["event_ids"]:
        by_id = {ev.event_id: ev for ev in events}
        missing = [i for i in cfg["event_ids"] if i not in by_id]
        if missing:
            raise InputError(f"unknown event id(s): {', '.join(missing)}")
        events = [by_id[i] for i in cfg["event_ids"]]
    explanations = _pmap(lambda ev: explain(model, ev, cfg["method"], cfg["eps"], cfg["mode"]), events, cfg["jobs"])
    out = Path(cfg["out"])
    payload = {"method": cfg["method"], "explanations": [x.to_dict(ev) for x, ev in zip(explanations, events)]}
    atomic_write_text(out / EXPLANATIONS_FILE, _dump(payload))
    if cfg["html"]:
        vocab = Vocabulary.load(cfg["vocab_file"]) if cfg["vocab_file"] else None
        atomic_write_text(out / HTML_FILE, render_page(explanations, events, vocab,
                                                       title=f"{cfg['method']} explanations"))
    print(f"explained={len(explanations)} method={cfg['method']} out={out}")
    return 0


def cmd_eval(cfg) -> int:
    model, events = _load_model_and_events(cfg)
    config = EvalConfig(tuple(cfg["levels"]), cfg["threshold"], tuple(cfg["methods"]), cfg["folds"],
                        cfg["seed"], cfg["eps"], cfg["mode"])
    start = time.perf_counter()
    report = sweep(model, events, config=config, dataset=cfg["dataset_name"], jobs=cfg["jobs"])
    out = Path(cfg["out"])
    atomic_write_text(out / REPORT_CSV, report.to_csv())
    atomic_write_text(out / REPORT_JSON, report.to_json(include_runtime=False))
    runtime = {s.method: s.explain_seconds for s in report.summaries}
    runtime["total_seconds"] = time.perf_counter() - start
    atomic_write_text(out / RUNTIME_FILE, _dump(runtime))
    for s in report.summaries:
        print(f"{s.method}: fidelity={s.fidelity_mean:.3f}+-{s.fidelity_std:.3f} "
              f"sparsity={s.sparsity_mean:.3f} fid_sparsity={s.fid_sparsity:.3f}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "explain": cmd_explain, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except CtlrpError as exc:
        print(f"ctlrp: error[{exc.kind}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"ctlrp: error[io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
