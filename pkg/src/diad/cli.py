"""Command-line entry point: ``diad {train,finetune,score,explain,benchmark}``."""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .benchmark import config_from_section, load_experiment, run_benchmark
from .config import FINETUNE_LOSSES, FinetuneConfig, TrainConfig
from .data import auc_metric, load_csv
from .errors import DiadError, MissingFileError
from .explain import explain_sample, extract_interaction, extract_main_effect, fit_baseline, tree_sets
from .io import load_model, save_model
from .pid import score_samples, train_unsupervised
from .semisup import finetune, lr_search

logger = logging.getLogger("diad")


class UsageError(Exception):
    pass


def _load_train_config(path: str | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    p = Path(path)
    if not p.is_file():
        raise MissingFileError(f"no such config file: {p}")
    parser = configparser.ConfigParser()
    parser.read_string(p.read_text(encoding="utf-8"))
    if "train" not in parser:
        raise UsageError(f"{p} has no [train] section")
    return TrainConfig(**config_from_section(TrainConfig, parser["train"]))


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    cfg = _load_train_config(args.config)
    if args.steps is not None:
        cfg = cfg.scaled(args.steps)
    if args.n_trees is not None:
        cfg = cfg.replace(n_trees=args.n_trees)
    if args.batch_size is not None:
        cfg = cfg.replace(batch_size=args.batch_size)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    ds = load_csv(args.data, args.label_column)
    out = Path(args.out_dir)
    model, log = train_unsupervised(cfg, ds.X, log_path=out / "train_log.jsonl")
    fit_baseline(model, ds.X, seed=cfg.seed)
    model.config["columns"] = ds.columns
    path = save_model(model, args.model or out / "model.npz")
    logger.info("trained %d steps on %d rows; model written to %s", cfg.steps, len(ds), path)
    if ds.has_labels and len(np.unique(ds.y)) == 2:
        logger.info("training-set AUC %.4f", auc_metric(score_samples(model, ds.X), ds.y))
    return 0


def cmd_finetune(args) -> int:
    model = load_model(args.model)
    train = load_csv(args.labeled, args.label_column)
    if not train.has_labels:
        raise UsageError("finetune needs --label-column")
    X_val = y_val = None
    if args.val is not None:
        val = load_csv(args.val, args.label_column)
        X_val, y_val = val.X, val.y
    cfg = FinetuneConfig(loss=args.loss, max_epochs=args.epochs, patience=args.patience)
    if args.lr is not None:
        cfg = cfg.replace(lr=args.lr)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = Path(args.out_dir)
    histories = []

    def fit(c):
        tuned, hist = finetune(model, train.X, train.y, X_val, y_val, c)
        histories.append((c.lr, hist))
        return tuned

    grid = tuple(args.lr_grid or ()) if X_val is not None else ()
    tuned, lr = lr_search(fit, cfg, grid, X_val, y_val)
    for hist_lr, hist in histories:
        if hist_lr == lr:
            hist.write_jsonl(out / "finetune_history.jsonl")
    path = save_model(tuned, args.model_out or out / "model_finetuned.npz")
    logger.info("fine-tuned with lr %g; model written to %s", lr, path)
    return 0


def cmd_score(args) -> int:
    model = load_model(args.model)
    ds = load_csv(args.data, args.label_column)
    scores = score_samples(model, ds.X)
    path = Path(args.out_dir) / (args.output or "scores.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("row_id,score\n")
        for i, s in enumerate(scores):
            fh.write(f"{i},{float(s)!r}\n")
    logger.info("wrote %d scores to %s", len(scores), path)
    if ds.has_labels and len(np.unique(ds.y)) == 2:
        logger.info("AUC %.4f", auc_metric(scores, ds.y))
    return 0


def cmd_explain(args) -> int:
    model = load_model(args.model)
    ds = load_csv(args.data, args.label_column)
    if model.baseline is None:
        fit_baseline(model, ds.X)
    names = model.config.get("columns") or ds.columns
    out = Path(args.out_dir)
    if args.all_graphs:
        sets = sorted(set(tree_sets(model)), key=lambda k: (len(k), k))
        for j in range(model.n_features):
            g = extract_main_effect(model, j, args.grid_size)
            g.names = [names[j]]
            _write_json(out / f"main_{j}.json", g.to_dict())
        for key in (k for k in sets if len(k) == 2):
            g = extract_interaction(model, key, min(args.grid_size, 64))
            g.names = [names[key[0]], names[key[1]]]
            _write_json(out / f"interaction_{key[0]}_{key[1]}.json", g.to_dict())
        logger.info("wrote %d main-effect and %d interaction graphs to %s", model.n_features, sum(len(k) == 2 for k in sets), out)
        return 0
    if args.sample is not None:
        idx = args.sample
        if not 0 <= idx < len(ds):
            raise UsageError(f"sample index {idx} out of range for {len(ds)} rows")
    else:
        idx = int(np.argmax(score_samples(model, ds.X)))
    expl = explain_sample(model, ds.X[idx], args.top_k, sample_id=idx)
    payload = {"sample_id": idx, "score": expl.score, "bias": expl.bias, "contributions": expl.to_records(names)}
    _write_json(out / f"sample_{idx}.json", payload)
    if not args.quiet:
        print(f"row {idx}: score {expl.score:.6f}, bias {expl.bias:.6f}")
        for rec in payload["contributions"]:
            print(f"  {' x '.join(map(str, rec['features'])):<30} {rec['contribution']:+.6f}")
    return 0


def cmd_benchmark(args) -> int:
    exp = load_experiment(args.experiment)
    if args.seed is not None:
        exp.seeds = (args.seed,)
    report = run_benchmark(exp, args.out_dir)
    if not args.quiet:
        print(report.summary())
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed override")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="directory for output files (default: .)")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="only log warnings")

    parser = argparse.ArgumentParser(prog="diad", description="Interpretable tree-ensemble anomaly detection.", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="unsupervised training on a CSV")
    p.add_argument("data", help="training CSV (header row, numeric cells)")
    p.add_argument("--label-column", help="column to exclude from the features (used only for reporting)")
    p.add_argument("--config", help="INI file with a [train] section of TrainConfig fields")
    p.add_argument("--steps", type=int, help="training steps (warmup and annealing scale along)")
    p.add_argument("--n-trees", type=int, help="trees per layer")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--model", help="output model path (default: OUT_DIR/model.npz)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune a model on labeled rows")
    p.add_argument("model", help="model file from 'train'")
    p.add_argument("labeled", help="labeled CSV")
    p.add_argument("--label-column", default="label")
    p.add_argument("--val", help="labeled validation CSV used for checkpoint and learning-rate selection")
    p.add_argument("--loss", choices=FINETUNE_LOSSES, default="auc")
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-grid", type=float, nargs="*", help="learning rates to search (needs --val)")
    p.add_argument("--epochs", type=int, default=FinetuneConfig.max_epochs)
    p.add_argument("--patience", type=int, default=FinetuneConfig.patience)
    p.add_argument("--model-out", help="output path (default: OUT_DIR/model_finetuned.npz)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("score", parents=[common], help="write per-row anomaly scores")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--label-column")
    p.add_argument("--output", help="file name inside OUT_DIR (default: scores.csv)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("explain", parents=[common], help="shape functions or per-row attributions")
    p.add_argument("model")
    p.add_argument("data", help="CSV whose rows are explained")
    p.add_argument("--label-column")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--sample", type=int, help="row index to explain (default: the highest-scoring row)")
    group.add_argument("--all-graphs", action="store_true", help="write every main-effect and interaction graph")
    p.add_argument("--top-k", type=int, default=4)
    p.add_argument("--grid-size", type=int, default=101)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("benchmark", parents=[common], help="run an experiment sweep")
    p.add_argument("experiment", help="experiment INI file")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed = getattr(args, "seed", None)
    args.out_dir = getattr(args, "out_dir", ".")
    args.quiet = getattr(args, "quiet", False)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except (UsageError, FileNotFoundError) as exc:
        print(f"diad: error: {exc}", file=sys.stderr)
        return 2
    except DiadError as exc:
        print(f"diad: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
