"""Experiment sweeps: pretrain, optionally fine-tune, score the test split.

An experiment is described by an INI-style text file::

    [experiment]
    datasets = synthetic:blob, data/thyroid.csv
    label_column = label
    seeds = 0, 1, 2
    budgets = 0, 15
    noise_k = 0
    stages = unsupervised, finetuned
    lr_grid = 5e-3, 2e-3, 1e-3, 5e-4

    [train]
    steps = 500
    n_trees = 32

    [finetune]
    loss = auc

Keys in ``[train]`` and ``[finetune]`` are :class:`TrainConfig` and
:class:`FinetuneConfig` field names; their ``seed`` is replaced by the run
seed.  ``synthetic:blob`` and ``synthetic:conflict`` name built-in tasks.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .config import FinetuneConfig, TrainConfig
from .data import (
    Dataset,
    SplitSpec,
    add_noise_features,
    auc_metric,
    load_csv,
    make_blob_with_outliers,
    make_conflict_task,
    split,
    subsample_labels,
)
from .errors import ContractError, MissingFileError
from .pid import score_samples, train_unsupervised
from .semisup import finetune, lr_search, train_from_scratch

logger = logging.getLogger(__name__)

STAGES = ("unsupervised", "finetuned", "scratch")
REPORT_COLUMNS = ("dataset", "seed", "n_anomalies", "noise_k", "stage", "auc", "error")
SYNTHETIC = {"synthetic:blob": make_blob_with_outliers, "synthetic:conflict": make_conflict_task}


@dataclass
class ExperimentConfig:
    datasets: list[str]
    label_column: str = "label"
    seeds: tuple[int, ...] = (0,)
    budgets: tuple[int, ...] = (0,)
    noise_k: tuple[int, ...] = (0,)
    stages: tuple[str, ...] = ("unsupervised", "finetuned")
    lr_grid: tuple[float, ...] = ()
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    base_dir: Path = Path(".")

    def __post_init__(self):
        bad = set(self.stages) - set(STAGES)
        if bad:
            raise ContractError(f"unknown stages {sorted(bad)}; choose from {STAGES}")
        if not self.datasets:
            raise ContractError("experiment lists no datasets")


def _split_list(text: str, cast) -> tuple:
    return tuple(cast(v.strip()) for v in text.split(",") if v.strip())


def config_from_section(cls, section: configparser.SectionProxy) -> dict:
    """Keyword arguments for dataclass ``cls`` from an INI section, typed by field defaults."""
    types = {f.name: type(f.default) for f in dataclasses.fields(cls)}
    out = {}
    for key in section:
        if key not in types:
            raise ContractError(f"unknown {cls.__name__} field {key!r}")
        kind = types[key]
        out[key] = section.getboolean(key) if kind is bool else kind(section[key])
    return out


def parse_experiment(text: str, base_dir: str | Path = ".") -> ExperimentConfig:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    if "experiment" not in parser:
        raise ContractError("experiment file needs an [experiment] section")
    exp = parser["experiment"]
    known = {"datasets", "label_column", "seeds", "budgets", "noise_k", "stages", "lr_grid"}
    unknown = set(exp) - known
    if unknown:
        raise ContractError(f"unknown experiment keys {sorted(unknown)}")
    kwargs: dict = {"datasets": list(_split_list(exp.get("datasets", ""), str)), "base_dir": Path(base_dir)}
    if "label_column" in exp:
        kwargs["label_column"] = exp["label_column"].strip()
    for key, cast in (("seeds", int), ("budgets", int), ("noise_k", int), ("stages", str), ("lr_grid", float)):
        if key in exp:
            kwargs[key] = _split_list(exp[key], cast)
    if "train" in parser:
        kwargs["train"] = TrainConfig(**config_from_section(TrainConfig, parser["train"]))
    if "finetune" in parser:
        kwargs["finetune"] = FinetuneConfig(**config_from_section(FinetuneConfig, parser["finetune"]))
    return ExperimentConfig(**kwargs)


def load_experiment(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such experiment file: {path}")
    return parse_experiment(path.read_text(encoding="utf-8"), base_dir=path.parent)


def _load_dataset(name: str, exp: ExperimentConfig, seed: int) -> Dataset:
    if name in SYNTHETIC:
        return SYNTHETIC[name](seed=seed)
    path = Path(name)
    if not path.is_absolute():
        path = exp.base_dir / path
    return load_csv(path, exp.label_column)


@dataclass
class BenchmarkReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        row.setdefault("error", "")
        self.rows.append(row)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: row.get(k, "") for k in REPORT_COLUMNS})

    def cells(self) -> dict[tuple[str, str], tuple[float, float, int]]:
        """``(dataset, method) -> (mean, standard error, n)`` over successful seeds."""
        groups: dict[tuple[str, str], list[float]] = {}
        for row in self.rows:
            if row["error"]:
                continue
            groups.setdefault((row["dataset"], method_label(row)), []).append(row["auc"])
        return {k: mean_se(v) + (len(v),) for k, v in groups.items()}

    def summary(self) -> str:
        cells = self.cells()
        datasets = sorted({d for d, _ in cells})
        methods = sorted({m for _, m in cells})
        table = {d: {m: cells[(d, m)][0] for m in methods if (d, m) in cells} for d in datasets}
        agg = average_and_rank(table)
        width = max([len(m) for m in methods] + [12])
        lines = ["dataset".ljust(24) + "".join(m.rjust(width + 2) for m in methods)]
        for d in datasets:
            vals = []
            for m in methods:
                if (d, m) in cells:
                    mu, se, _ = cells[(d, m)]
                    vals.append(f"{100 * mu:.1f}±{100 * se:.1f}".rjust(width + 2))
                else:
                    vals.append("-".rjust(width + 2))
            lines.append(Path(d).name[:24].ljust(24) + "".join(vals))
        lines.append("Average".ljust(24) + "".join(f"{100 * agg[m][0]:.1f}".rjust(width + 2) for m in methods))
        lines.append("Rank".ljust(24) + "".join(f"{agg[m][1]:.2f}".rjust(width + 2) for m in methods))
        failed = sum(1 for r in self.rows if r["error"])
        if failed:
            lines.append(f"{failed} failed run(s); see the error column of the report")
        return "\n".join(lines)


def method_label(row: dict) -> str:
    label = row["stage"]
    if row["n_anomalies"]:
        label += f"@{row['n_anomalies']}"
    if row["noise_k"]:
        label += f"+noise{row['noise_k']}"
    return label


def mean_se(values) -> tuple[float, float]:
    """Mean and standard error ``sample std / sqrt(n)`` (0 for a single value)."""
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


def average_and_rank(table: dict[str, dict[str, float]]) -> dict[str, tuple[float, float]]:
    """Per method: mean score over datasets and mean per-dataset rank (1 = best, ties share)."""
    methods = sorted({m for row in table.values() for m in row})
    scores: dict[str, list[float]] = {m: [] for m in methods}
    ranks: dict[str, list[float]] = {m: [] for m in methods}
    for row in table.values():
        names = [m for m in methods if m in row]
        r = rankdata([-row[m] for m in names])
        for m, rank in zip(names, r):
            scores[m].append(row[m])
            ranks[m].append(float(rank))
    return {m: (float(np.mean(scores[m])), float(np.mean(ranks[m]))) for m in methods}


def run_benchmark(exp: ExperimentConfig, out_dir: str | Path | None = None) -> BenchmarkReport:
    """Sweep datasets x seeds x noise settings x label budgets.

    Failures of individual runs are logged and recorded in the report's
    ``error`` column; the sweep continues.
    """
    report = BenchmarkReport()
    for name in exp.datasets:
        for seed in exp.seeds:
            for k in exp.noise_k:
                base = dict(dataset=name, seed=seed, noise_k=k)
                try:
                    ds = add_noise_features(_load_dataset(name, exp, seed), k, seed + 1000)
                    train, val, test = split(ds, SplitSpec(seed=seed))
                    t0 = time.perf_counter()
                    model, _ = train_unsupervised(exp.train.replace(seed=seed), train.X)
                    logger.info("%s seed %d: pretrained in %.1fs", name, seed, time.perf_counter() - t0)
                except Exception as exc:  # noqa: BLE001 - recorded, not fatal
                    logger.warning("%s seed %d noise %d failed: %s", name, seed, k, exc)
                    report.add(**base, n_anomalies=0, stage="unsupervised", auc=float("nan"), error=str(exc))
                    continue
                if "unsupervised" in exp.stages:
                    report.add(**base, n_anomalies=0, stage="unsupervised", auc=auc_metric(score_samples(model, test.X), test.y))
                for budget in exp.budgets:
                    if budget == 0:
                        continue
                    for stage in ("finetuned", "scratch"):
                        if stage not in exp.stages:
                            continue
                        try:
                            labeled, _ = subsample_labels(train, budget, seed)

                            def fit(cfg, stage=stage):
                                if stage == "finetuned":
                                    return finetune(model, labeled.X, labeled.y, val.X, val.y, cfg)[0]
                                return train_from_scratch(
                                    exp.train.replace(seed=seed), train.X, labeled.X, labeled.y, val.X, val.y, cfg
                                )[0]

                            result, _ = lr_search(fit, exp.finetune.replace(seed=seed), exp.lr_grid, val.X, val.y)
                            auc = auc_metric(score_samples(result, test.X), test.y)
                            report.add(**base, n_anomalies=budget, stage=stage, auc=auc)
                        except Exception as exc:  # noqa: BLE001
                            logger.warning("%s seed %d budget %d %s failed: %s", name, seed, budget, stage, exc)
                            report.add(**base, n_anomalies=budget, stage=stage, auc=float("nan"), error=str(exc))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "report.csv")
        (out / "summary.txt").write_text(report.summary() + "\n", encoding="utf-8")
    return report
