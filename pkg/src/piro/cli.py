"""Command-line entry point: gen-data, train, eval, export-embeddings.

Every option can also come from a ``key = value`` config file (``--config``);
flags given on the command line win. Exit codes: 0 success, 2 configuration
or validation error, 3 numerical failure during training.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .data import ManifestError, SyntheticConfig, generate_synthetic, load_manifest, save_manifest
from .encoder import attention_weights, embed_single_views, load_checkpoint
from .evaluation import TASKS, embed_objects, evaluate_embeddings, task_from_cli
from .io import atomic_write_text
from .losses import Margins
from .trainer import NumericalError, TrainConfig, train

log = logging.getLogger("piro")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
CONFIG_ECHO = "effective_config.txt"


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _widths(text: str) -> tuple[int, ...]:
    return tuple(int(w) for w in str(text).replace(",", " ").split())


def _tasks(text: str) -> tuple[str, ...]:
    return tuple(task_from_cli(t) for t in str(text).split(",") if t.strip())


def _optional_int(text: str) -> int | None:
    return None if str(text).strip().lower() in ("", "none", "auto") else int(text)


# key -> (parser, default). The union of every command's settings; each
# command reads what it needs and the config file may hold any of them.
KEYS: dict[str, tuple[Callable[[str], Any], Any]] = {
    # synthetic data
    "categories": (int, 10),
    "objects": (int, 8),
    "views_per_object": (int, 8),
    "dim": (int, 32),
    "noise": (float, SyntheticConfig.noise),
    "object_scale": (float, SyntheticConfig.object_scale),
    "pose_scale": (float, SyntheticConfig.pose_scale),
    "test_fraction": (float, SyntheticConfig.test_fraction),
    "data_seed": (int, 0),
    # training
    "epochs": (int, TrainConfig.epochs),
    "pairs_per_epoch": (int, TrainConfig.pairs_per_epoch),
    "batch_pairs": (int, TrainConfig.batch_pairs),
    "views": (_optional_int, None),
    "learning_rate": (float, TrainConfig.learning_rate),
    "lr_halving_period": (int, TrainConfig.lr_halving_period),
    "dropout_rate": (float, TrainConfig.dropout_rate),
    "seed": (int, TrainConfig.seed),
    "backbone_widths": (_widths, TrainConfig.backbone_widths),
    "d_obj": (int, TrainConfig.d_obj),
    "d_cat": (int, TrainConfig.d_cat),
    "dual_space": (_bool, True),
    "use_cat": (_bool, True),
    "use_picat": (_bool, True),
    "use_piobj": (_bool, True),
    "use_inter": (_bool, True),
    "alpha": (float, Margins.alpha),
    "beta": (float, Margins.beta),
    "theta": (float, Margins.theta),
    "gamma": (int, Margins.gamma),
    "lambda_start": (float, TrainConfig.lambda_start),
    "lambda_decay": (float, TrainConfig.lambda_decay),
    "lambda_min": (float, TrainConfig.lambda_min),
    "checkpoint_every": (int, TrainConfig.checkpoint_every),
    "head_init_gain": (float, TrainConfig.head_init_gain),
    "backbone_lr_scale": (float, TrainConfig.backbone_lr_scale),
    # evaluation / export
    "tasks": (_tasks, TASKS),
    "num_views": (_optional_int, None),
    "split": (str, "test"),
    "per_query_csv": (str, None),
    # paths
    "data": (str, None),
    "checkpoint": (str, None),
    "out": (str, None),
}


def read_config_file(path: Path) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, Any] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = KEYS[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return out


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then the config file, then explicit flags."""
    cfg = {k: default for k, (_, default) in KEYS.items()}
    if args.config:
        cfg.update(read_config_file(args.config))
    for key in KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def format_config(cfg: dict[str, Any]) -> str:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if value is None:
            continue
        if isinstance(value, bool):
            value = str(value).lower()
        elif isinstance(value, tuple):
            value = ",".join(str(v).replace("_", "-") if key == "tasks" else str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _require(cfg: dict, key: str, what: str) -> Path:
    if not cfg.get(key):
        raise ConfigError(f"missing --{key.replace('_', '-')} ({what})")
    return Path(cfg[key])


def _existing_file(cfg: dict, key: str, what: str) -> Path:
    path = _require(cfg, key, what)
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _out_dir(cfg: dict) -> Path:
    out = _require(cfg, "out", "output directory")
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path exists and is not a directory: {out}")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def synthetic_config(cfg: dict) -> SyntheticConfig:
    return SyntheticConfig(
        num_categories=cfg["categories"], objects_per_category=cfg["objects"],
        views_per_object=cfg["views_per_object"], input_dim=cfg["dim"], noise=cfg["noise"],
        seed=cfg["data_seed"], object_scale=cfg["object_scale"], pose_scale=cfg["pose_scale"],
        test_fraction=cfg["test_fraction"],
    )


def train_config(cfg: dict) -> TrainConfig:
    margins = Margins(alpha=cfg["alpha"], beta=cfg["beta"], theta=cfg["theta"], gamma=cfg["gamma"])
    names = (
        "epochs", "pairs_per_epoch", "batch_pairs", "views", "learning_rate", "lr_halving_period",
        "dropout_rate", "seed", "backbone_widths", "d_obj", "d_cat", "dual_space", "use_cat", "use_picat",
        "use_piobj", "use_inter", "lambda_start", "lambda_decay", "lambda_min", "checkpoint_every",
        "head_init_gain", "backbone_lr_scale",
    )
    return TrainConfig(margins=margins, **{k: cfg[k] for k in names})


def _load_model(cfg: dict):
    ckpt = _existing_file(cfg, "checkpoint", "checkpoint")
    dataset = load_manifest(_existing_file(cfg, "data", "manifest"))
    try:
        params, classifier, record = load_checkpoint(ckpt)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad checkpoint {ckpt}: {exc}") from None
    categories = record.get("categories")
    if categories is not None and list(categories) != dataset.category_ids:
        raise ConfigError("checkpoint categories do not match the dataset's")
    if params.config.input_dim != dataset.input_dim:
        raise ConfigError(f"checkpoint expects {params.config.input_dim}-d views, dataset has {dataset.input_dim}")
    objects = dataset.split(cfg["split"]) if cfg["split"] in ("train", "test") else None
    if objects is None:
        raise ConfigError(f"split must be 'train' or 'test', got {cfg['split']!r}")
    if not objects:
        raise ConfigError(f"{cfg['split']} split is empty")
    return dataset, params, classifier, objects


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: dict) -> int:
    synth = synthetic_config(cfg)
    if synth.num_categories < 2:
        raise ConfigError(
            f"--categories {synth.num_categories}: need >= 2 categories (pair sampling draws two "
            "objects of one category, and category tasks need more than one category)"
        )
    out = _out_dir(cfg)
    dataset = generate_synthetic(synth)
    manifest = save_manifest(dataset, out)
    atomic_write_text(out / CONFIG_ECHO, format_config(cfg))
    print(f"wrote {len(dataset.objects)} objects to {manifest}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    config = train_config(cfg)
    dataset = load_manifest(_existing_file(cfg, "data", "manifest"))
    out = _out_dir(cfg)
    atomic_write_text(out / CONFIG_ECHO, format_config(cfg))
    print(f"margins {config.margins.describe()}")
    print(f"space {'dual' if config.dual_space else 'single'}; terms " + " ".join(
        f"{name}={'on' if on else 'off'}" for name, on in (
            ("cat", config.use_cat), ("picat", config.use_picat), ("piobj", config.use_piobj),
            ("separation", config.use_inter and config.use_piobj),
        )
    ))

    def report(entry):
        rho = "n/a" if entry.rho is None else f"{entry.rho:.4f}"
        print(f"epoch {entry.epoch:3d} loss {entry.loss:.6f} lr {entry.lr:.3g} rho {rho}", flush=True)

    try:
        train(config, dataset, out_dir=out, on_epoch=report)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"checkpoint {out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    dataset, params, classifier, objects = _load_model(cfg)
    if classifier is None:
        raise ConfigError("checkpoint has no classifier")
    out = _out_dir(cfg)
    index = {c: dataset.category_index(c) for c in dataset.categories}
    emb = embed_objects(params, objects, index, cfg["num_views"])
    report = evaluate_embeddings(emb, classifier, cfg["tasks"])
    atomic_write_text(out / "eval_report.json", report.to_json())
    atomic_write_text(out / CONFIG_ECHO, format_config(cfg))
    if cfg["per_query_csv"]:
        atomic_write_text(Path(cfg["per_query_csv"]), report.per_query_csv())
    print(report.summary())
    return EXIT_OK


def embedding_rows(params, objects, num_views: int | None = None) -> tuple[list[str], list[list], dict]:
    """One row per single view and one per object (multi-view), both spaces,
    plus each object's attention matrices."""
    emb = embed_objects(params, objects, {o.category_id: 0 for o in objects}, num_views)
    d_obj, d_cat = emb.obj_mv.shape[1], emb.cat_mv.shape[1]
    header = ["kind", "object_id", "category_id", "view"] + [f"o{i}" for i in range(d_obj)] + [f"c{i}" for i in range(d_cat)]
    rows, attention = [], {}
    for i, oid in enumerate(emb.object_ids):
        cid = emb.category_ids[i]
        for k, (o, c) in enumerate(zip(emb.obj_single[i], emb.cat_single[i])):
            rows.append(["single", oid, cid, k] + [repr(float(x)) for x in o] + [repr(float(x)) for x in c])
        rows.append(["multi", oid, cid, -1] + [repr(float(x)) for x in emb.obj_mv[i]] + [repr(float(x)) for x in emb.cat_mv[i]])
        weights = attention_weights(params, {"obj": emb.obj_single[i], "cat": emb.cat_single[i]})
        attention[oid] = {space: w.tolist() for space, w in sorted(weights.items())}
    return header, rows, attention


def cmd_export_embeddings(cfg: dict) -> int:
    _, params, _, objects = _load_model(cfg)
    out = _out_dir(cfg)
    header, rows, attention = embedding_rows(params, objects, cfg["num_views"])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(out / "embeddings.csv", buf.getvalue())
    atomic_write_text(out / "attention.json", json.dumps(attention, sort_keys=True) + "\n")
    atomic_write_text(out / CONFIG_ECHO, format_config(cfg))
    print(f"wrote {len(rows)} embedding rows and {len(attention)} attention sets to {out}")
    return EXIT_OK


def load_embedding_csv(path) -> dict[str, list]:
    """Read an ``embeddings.csv`` dump back into arrays (for external tools and tests)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        obj_cols = [i for i, h in enumerate(header) if h.startswith("o") and h[1:].isdigit()]
        cat_cols = [i for i, h in enumerate(header) if h.startswith("c") and h[1:].isdigit()]
        out: dict[str, list] = {"kind": [], "object_id": [], "category_id": [], "view": [], "obj": [], "cat": []}
        for row in reader:
            out["kind"].append(row[0])
            out["object_id"].append(row[1])
            out["category_id"].append(row[2])
            out["view"].append(int(row[3]))
            out["obj"].append(np.array([float(row[i]) for i in obj_cols]))
            out["cat"].append(np.array([float(row[i]) for i in cat_cols]))
    return out


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value settings file; flags override it")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _add_model_io(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset manifest (TSV)")
    p.add_argument("--checkpoint", help="checkpoint JSON written by train")
    p.add_argument("--out", help="output directory")
    p.add_argument("--split", choices=("train", "test"), help="objects to use (default test)")
    p.add_argument("--num-views", dest="num_views", type=int, help="use the first N views of each object (default all)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="piro", description="Pose-invariant dual-space embeddings for multi-view objects.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic multi-view dataset")
    _add_common(g)
    g.add_argument("--categories", type=int, help="number of categories (default 10)")
    g.add_argument("--objects", type=int, help="objects per category (default 8)")
    g.add_argument("--views", dest="views_per_object", type=int, help="views per object (default 8)")
    g.add_argument("--dim", type=int, help="feature dimension (default 32)")
    g.add_argument("--noise", type=float, help="per-view Gaussian noise std")
    g.add_argument("--object-scale", dest="object_scale", type=float, help="std of object offsets from their category prototype")
    g.add_argument("--pose-scale", dest="pose_scale", type=float, help="typical rotation angle of the per-view pose transforms")
    g.add_argument("--test-fraction", dest="test_fraction", type=float, help="fraction of each category's objects held out")
    g.add_argument("--seed", dest="data_seed", type=int, help="generator seed")
    g.add_argument("--out", help="output directory")

    t = sub.add_parser("train", help="train encoder and classifier")
    _add_common(t)
    t.add_argument("--data", help="dataset manifest (TSV)")
    t.add_argument("--out", help="output directory for log and checkpoints")
    t.add_argument("--epochs", type=int)
    t.add_argument("--pairs-per-epoch", dest="pairs_per_epoch", type=int)
    t.add_argument("--batch-pairs", dest="batch_pairs", type=int, help="same-category pairs per update")
    t.add_argument("--views", type=int, help="views sampled per object (default min(4, available))")
    t.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    t.add_argument("--lr-halving-period", dest="lr_halving_period", type=int, help="epochs between learning-rate halvings")
    t.add_argument("--dropout", dest="dropout_rate", type=float, help="attention dropout rate")
    t.add_argument("--seed", type=int)
    t.add_argument("--widths", dest="backbone_widths", type=_widths, help="backbone layer widths, e.g. 64,64")
    t.add_argument("--d-obj", dest="d_obj", type=int, help="object embedding dimension")
    t.add_argument("--d-cat", dest="d_cat", type=int, help="category embedding dimension")
    t.add_argument("--alpha", type=float, help="object clustering margin")
    t.add_argument("--beta", type=float, help="object separation margin")
    t.add_argument("--theta", type=float, help="category clustering margin")
    t.add_argument("--gamma", type=int, help="angular margin multiplier of the category softmax")
    t.add_argument("--head-init-gain", dest="head_init_gain", type=float, help="scale of the initial head weights")
    t.add_argument("--backbone-lr-scale", dest="backbone_lr_scale", type=float, help="learning-rate multiplier for the backbone")
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, help="epochs between intermediate checkpoints")
    t.add_argument("--single-space", dest="dual_space", action="store_const", const=False, help="share one embedding space between both loss families")
    t.add_argument("--no-cat", dest="use_cat", action="store_const", const=False, help="drop the category softmax term")
    t.add_argument("--no-picat", dest="use_picat", action="store_const", const=False, help="drop the category clustering term")
    t.add_argument("--no-piobj", dest="use_piobj", action="store_const", const=False, help="drop the object clustering and separation terms")
    t.add_argument("--no-separation", dest="use_inter", action="store_const", const=False, help="keep object clustering, drop object separation")

    e = sub.add_parser("eval", help="evaluate a checkpoint on the eight tasks")
    _add_common(e)
    _add_model_io(e)
    e.add_argument("--tasks", type=_tasks, help="comma-separated subset, e.g. sv-obj-retr,mv-cat-cls")
    e.add_argument("--per-query-csv", dest="per_query_csv", help="also write per-query scores to this CSV")

    x = sub.add_parser("export-embeddings", help="dump embeddings (CSV) and attention matrices (JSON)")
    _add_common(x)
    _add_model_io(x)
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-embeddings": cmd_export_embeddings,
}


def _thread_limit():
    raw = os.environ.get("PIRO_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"PIRO_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        with _thread_limit():
            return COMMANDS[args.command](cfg)
    except (ConfigError, ManifestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
