"""
Command-line entry point: ``python -m bup.cli {train,eval,ood,analyze}``.

Artifacts under ``--out``:
    checkpoints/<run>.json            one per (seed, method)
    traces/<run>.csv                  epoch, train_nll, val_nll, val_acc
    splits/<dataset>-pc<k>-<mode>-seed<s>.json
    reports/<run>.json, <run>.nodes.csv
    aggregate.csv                     mean/std over seeds per (dataset, per_class)
    ood/<run>.summary.json, <run>.nodes.csv, <dataset>-pc<k>-<mode>.summary.csv
    analysis/<run>.degree_buckets.csv, <run>.correlations.json, <dataset>-pc<k>-<mode>.correlations.csv
where <run> is <dataset>-pc<k>-<mode>-<method>-seed<s> and <mode> is ``normal`` or ``ood<c>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from bup.artifacts import write_csv_atomic, write_json_atomic
from bup.bup_model import (
    BupParameters,
    Checkpoint,
    GaussianMessageField,
    forward_mean,
    load_checkpoint,
    message_field,
    predict_probability,
    save_checkpoint,
    softmax_probability,
)
from bup.dataset_io import (
    Dataset,
    Split,
    head_size,
    load_planetoid,
    make_ood_split,
    make_split,
    prepare_dataset,
    save_split,
)
from bup.errors import EXIT_OK, BupError, CheckpointError, InputError, exit_code_for
from bup.eval_metrics import EvalReport, build_report, ood_summary, topology_analysis
from bup.experiment_config import METHODS, MODES, ExperimentConfig, ExperimentConfigStore
from bup.graph_core import build_kernel
from bup.trainer import architecture_of, train, train_gcn_baseline

AGGREGATE_METRICS = ("acc", "ece", "ace")
AGGREGATE_STD = "population standard deviation over seeds (ddof=0)"


def mode_tag(mode: str, ood_class: Optional[int]) -> str:
    return f"ood{ood_class}" if mode == "ood" else "normal"


def run_tag(dataset: str, per_class: int, mode: str, ood_class: Optional[int], method: str, seed: int) -> str:
    return f"{dataset}-pc{per_class}-{mode_tag(mode, ood_class)}-{method}-seed{seed}"


@dataclass(frozen=True)
class RunInfo:
    """What a checkpoint was trained on; stored in its metadata."""

    dataset: str
    per_class: int
    val_size: int
    test_size: int
    mode: str
    ood_class: Optional[int]
    method: str
    seed: int

    @property
    def tag(self) -> str:
        return run_tag(self.dataset, self.per_class, self.mode, self.ood_class, self.method, self.seed)

    @property
    def group(self) -> str:
        return f"{self.dataset}-pc{self.per_class}-{mode_tag(self.mode, self.ood_class)}"

    def to_metadata(self) -> Dict[str, Any]:
        return {
            "dataset": self.dataset,
            "per_class": self.per_class,
            "val_size": self.val_size,
            "test_size": self.test_size,
            "mode": self.mode,
            "ood_class": self.ood_class,
            "method": self.method,
            "seed": self.seed,
        }

    @staticmethod
    def from_checkpoint(checkpoint: Checkpoint, path: Path) -> "RunInfo":
        meta = checkpoint.metadata
        try:
            info = RunInfo(
                dataset=str(meta["dataset"]),
                per_class=int(meta["per_class"]),
                val_size=int(meta["val_size"]),
                test_size=int(meta["test_size"]),
                mode=str(meta["mode"]),
                ood_class=None if meta.get("ood_class") is None else int(meta["ood_class"]),
                method=str(meta["method"]),
                seed=int(meta["seed"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path} metadata does not describe its run: {exc}") from exc
        if info.method != checkpoint.kind:
            raise CheckpointError(f"{path} metadata says {info.method} but holds {checkpoint.kind} weights")
        return info


@dataclass(frozen=True, eq=False)
class Evaluation:
    info: RunInfo
    report: EvalReport
    field: Optional[GaussianMessageField]
    split: Split


class ExperimentRunner:
    """Owns the dataset for one resolved config and writes every artifact under its output dir."""

    def __init__(self, config: ExperimentConfig) -> None:
        self.config = config
        self.out = config.output_dir
        self.log = logging.getLogger(self.__class__.__name__)
        self._raw: Optional[Dataset] = None
        self._prepared: Dict[bool, Dataset] = {}

    # data

    def raw_dataset(self) -> Dataset:
        if self._raw is None:
            self._raw = load_planetoid(
                self.config.content_path, self.config.cites_path, name=self.config.dataset_name
            )
        return self._raw

    def dataset(self, normalize: bool) -> Dataset:
        if normalize not in self._prepared:
            self._prepared[normalize] = prepare_dataset(self.raw_dataset(), normalize)
        return self._prepared[normalize]

    def run_info(self, method: str, seed: int, mode: Optional[str] = None) -> RunInfo:
        mode = mode or self.config.mode
        return RunInfo(
            dataset=self.config.dataset_name,
            per_class=self.config.per_class,
            val_size=self.config.val_size,
            test_size=self.config.test_size,
            mode=mode,
            ood_class=self.ood_class() if mode == "ood" else None,
            method=method,
            seed=seed,
        )

    def ood_class(self) -> int:
        """Configured withheld class, else the last class index."""
        if self.config.ood_class is not None:
            return self.config.ood_class
        return self.raw_dataset().num_classes - 1

    def split_for(self, info: RunInfo) -> Split:
        ds = self.raw_dataset()
        if info.mode == "ood":
            if info.ood_class is None:
                raise InputError("ood mode needs an ood_class")
            return make_ood_split(ds, info.per_class, info.val_size, info.test_size, info.seed, info.ood_class)
        return make_split(ds, info.per_class, info.val_size, info.test_size, info.seed)

    # paths

    def checkpoint_path(self, info: RunInfo) -> Path:
        return self.out / "checkpoints" / f"{info.tag}.json"

    def split_path(self, info: RunInfo) -> Path:
        return self.out / "splits" / f"{info.group}-seed{info.seed}.json"

    def provenance(self, info: Optional[RunInfo] = None, **extra: Any) -> Dict[str, Any]:
        if info is None:
            return self.config.provenance(**extra)
        return self.config.provenance(seed=info.seed, run=info.to_metadata(), **extra)

    def _seeds(self, desc: str) -> Sequence[int]:
        return tqdm(self.config.seeds, desc=desc, unit="seed", disable=not self.config.progress)

    # training

    def train_run(self, info: RunInfo) -> Path:
        ds = self.dataset(self.config.normalize_features)
        split = self.split_for(info)
        save_split(split, self.split_path(info), provenance=self.provenance(info))
        train_config = self.config.train_config(info.seed)
        if info.method == "bup":
            params, trace = train(train_config, ds, split, progress=self.config.progress)
        else:
            params, trace = train_gcn_baseline(train_config, ds, split, progress=self.config.progress)

        metadata = {**info.to_metadata(), "best_epoch": trace.best_epoch, "epochs_run": trace.epochs_run}
        path = save_checkpoint(
            self.checkpoint_path(info),
            params,
            architecture=architecture_of(params, train_config),
            normalize_features=self.config.normalize_features,
            metadata=metadata,
            provenance=self.provenance(info),
        )
        write_csv_atomic(self.out / "traces" / f"{info.tag}.csv", trace.to_frame(), provenance=self.provenance(info))
        self.log.info("Wrote %s (best epoch %s of %s).", path, trace.best_epoch, trace.epochs_run)
        return path

    def train_all(self, mode: Optional[str] = None) -> List[Path]:
        paths: List[Path] = []
        for seed in self._seeds("Training seeds"):
            for method in self.config.methods:
                paths.append(self.train_run(self.run_info(method, seed, mode)))
        return paths

    # evaluation

    def default_checkpoints(self, mode: Optional[str] = None) -> List[Path]:
        paths = [
            self.checkpoint_path(self.run_info(method, seed, mode))
            for seed in self.config.seeds
            for method in self.config.methods
        ]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise InputError(f"{len(missing)} checkpoints missing, e.g. {missing[0]}; run `train` first")
        return paths

    def evaluate(self, path: Path) -> Evaluation:
        checkpoint = load_checkpoint(path)
        info = RunInfo.from_checkpoint(checkpoint, path)
        if info.dataset != self.config.dataset_name:
            raise CheckpointError(f"{path} was trained on {info.dataset}, not {self.config.dataset_name}")
        ds = self.dataset(checkpoint.normalize_features)
        split = self.split_for(info)
        checkpoint.check_compatible(ds.num_features, head_size(ds, split))

        kernel = build_kernel(ds.graph)
        field: Optional[GaussianMessageField] = None
        mc_samples: Optional[int] = None
        if isinstance(checkpoint.params, BupParameters):
            field = message_field(
                checkpoint.params, ds.graph, kernel, ds.features, check_schur=self.config.check_schur
            )
            mc_samples = self.config.train.mc_samples_eval
            probs = predict_probability(field, mc_samples, seed=info.seed)
        else:
            probs = softmax_probability(forward_mean(checkpoint.params, kernel, ds.features).output)

        report = build_report(
            probs,
            ds.labels,
            ds.graph,
            split,
            method=info.method,
            field=field,
            node_ids=ds.node_ids,
            num_bins=self.config.num_bins,
            mc_samples=mc_samples,
            mc_seed=info.seed if mc_samples is not None else None,
        )
        return Evaluation(info=info, report=report, field=field, split=split)

    def write_report(self, evaluation: Evaluation, directory: str = "reports") -> Path:
        info = evaluation.info
        payload = {**info.to_metadata(), **evaluation.report.to_summary()}
        path = write_json_atomic(self.out / directory / f"{info.tag}.json", payload, provenance=self.provenance(info))
        write_csv_atomic(
            self.out / directory / f"{info.tag}.nodes.csv",
            evaluation.report.per_node,
            provenance=self.provenance(info),
        )
        return path

    def write_aggregate(self) -> Path:
        summaries = []
        for report_path in sorted((self.out / "reports").glob("*.json")):
            with report_path.open("r", encoding="utf-8") as handle:
                payload = json.load(handle)
            if payload.get("mode") == "normal":
                summaries.append(payload)
        frame = aggregate_table(summaries)
        path = write_csv_atomic(
            self.out / "aggregate.csv",
            frame,
            provenance=self.provenance(aggregate_std=AGGREGATE_STD, runs=len(summaries)),
        )
        for row in frame.to_dict(orient="records"):
            self.log.info("Aggregate %s per_class=%s: %s", row["dataset"], row["per_class"], _describe_row(row))
        return path

    def group_payloads(self, directory: str, suffix: str, group: str) -> List[Dict[str, Any]]:
        """Every ``*<suffix>`` document under ``directory`` whose provenance names a run of ``group``."""
        payloads: List[Dict[str, Any]] = []
        for path in sorted((self.out / directory).glob(f"*{suffix}")):
            with path.open("r", encoding="utf-8") as handle:
                payload = json.load(handle)
            run = (payload.get("provenance") or {}).get("run")
            if not run:
                continue
            try:
                run_group = RunInfo(**run).group
            except TypeError:
                self.log.warning("Ignoring %s: provenance does not describe a run.", path)
                continue
            if run_group == group:
                payloads.append(payload)
        return payloads

    def write_ood_table(self, group: str) -> Path:
        rows = []
        for payload in self.group_payloads("ood", ".summary.json", group):
            rows.append(
                {
                    "method": payload["method"],
                    "seed": int(payload["seed"]),
                    "in_dist_count": payload["in_dist"]["count"],
                    "ood_count": payload["ood"]["count"],
                    "in_dist_mean_p_max": payload["in_dist"]["mean_p_max"],
                    "ood_mean_p_max": payload["ood"]["mean_p_max"],
                    "in_dist_mean_std_dev": payload["in_dist"]["mean_std_dev"],
                    "ood_mean_std_dev": payload["ood"]["mean_std_dev"],
                }
            )
        table = pd.DataFrame(rows).sort_values(["method", "seed"], kind="stable").reset_index(drop=True)
        path = write_csv_atomic(
            self.out / "ood" / f"{group}.summary.csv", table, provenance=self.provenance(runs=len(table))
        )
        for method, block in table.groupby("method", sort=True):
            self.log.info(
                "OOD %s over %s seeds: p_max in-dist %.3f vs ood %.3f; std_dev in-dist %.3f vs ood %.3f.",
                method,
                len(block),
                block["in_dist_mean_p_max"].mean(),
                block["ood_mean_p_max"].mean(),
                block["in_dist_mean_std_dev"].mean(),
                block["ood_mean_std_dev"].mean(),
            )
        return path

    def write_correlation_table(self, group: str) -> Path:
        rows = []
        for payload in self.group_payloads("analysis", ".correlations.json", group):
            correlations = {k: np.nan if v is None else float(v) for k, v in payload["correlations"].items()}
            rows.append(
                {
                    "seed": int(payload["provenance"]["seed"]),
                    **correlations,
                    "num_unreachable": int(payload["num_unreachable"]),
                }
            )
        table = pd.DataFrame(rows).sort_values("seed", kind="stable").reset_index(drop=True)
        path = write_csv_atomic(
            self.out / "analysis" / f"{group}.correlations.csv", table, provenance=self.provenance(runs=len(table))
        )
        negative = int((table["degree_vs_avg_std"] < 0).sum())
        self.log.info("Degree vs avg_std negative in %s of %s runs.", negative, len(table))
        return path


def _describe_row(row: Mapping[str, Any]) -> str:
    parts = []
    for method in METHODS:
        acc = row.get(f"{method}_acc_mean")
        if acc is None or (isinstance(acc, float) and np.isnan(acc)):
            continue
        parts.append(f"{method} acc={acc:.2f} ece={row[f'{method}_ece_mean']:.2f} ace={row[f'{method}_ace_mean']:.2f}")
    return "; ".join(parts)


def aggregate_table(summaries: Sequence[Mapping[str, Any]]) -> pd.DataFrame:
    """One row per (dataset, per_class); ACC in percent, ECE/ACE already percent; population std."""
    columns = ["dataset", "per_class"]
    for method in METHODS:
        for metric in AGGREGATE_METRICS:
            columns += [f"{method}_{metric}_mean", f"{method}_{metric}_std"]
        columns.append(f"{method}_runs")
    if not summaries:
        return pd.DataFrame(columns=columns)

    records = pd.DataFrame(
        [
            {
                "dataset": s["dataset"],
                "per_class": int(s["per_class"]),
                "method": s["method"],
                "acc": 100.0 * float(s["acc"]),
                "ece": float(s["ece"]),
                "ace": float(s["ace"]),
            }
            for s in summaries
        ]
    )
    rows: List[Dict[str, Any]] = []
    for (dataset, per_class), group in records.groupby(["dataset", "per_class"], sort=True):
        row: Dict[str, Any] = {"dataset": dataset, "per_class": int(per_class)}
        for method in METHODS:
            runs = group[group["method"] == method]
            for metric in AGGREGATE_METRICS:
                values = runs[metric].to_numpy(dtype=np.float64)
                row[f"{method}_{metric}_mean"] = float(values.mean()) if values.size else np.nan
                row[f"{method}_{metric}_std"] = float(values.std(ddof=0)) if values.size else np.nan
            row[f"{method}_runs"] = int(len(runs))
        rows.append(row)
    return pd.DataFrame(rows, columns=columns)


def _resolve_checkpoints(runner: ExperimentRunner, given: Optional[Sequence[str]], mode: Optional[str] = None) -> List[Path]:
    if not given:
        return runner.default_checkpoints(mode)
    paths: List[Path] = []
    for item in given:
        candidate = Path(item)
        if candidate.is_dir():
            paths.extend(sorted(candidate.glob("*.json")))
        elif candidate.exists():
            paths.append(candidate)
        else:
            raise InputError(f"checkpoint {candidate} does not exist")
    if not paths:
        raise InputError("no checkpoints found")
    return paths


def cmd_train(config: ExperimentConfig) -> List[Path]:
    return ExperimentRunner(config).train_all()


def cmd_eval(config: ExperimentConfig, checkpoints: Optional[Sequence[str]] = None) -> Path:
    runner = ExperimentRunner(config)
    for path in _resolve_checkpoints(runner, checkpoints):
        evaluation = runner.evaluate(path)
        if evaluation.info.mode != "normal":
            runner.log.warning(
                "Excluding %s from aggregate.csv: trained with withheld class %s.", path, evaluation.info.ood_class
            )
        runner.write_report(evaluation)
    return runner.write_aggregate()


def cmd_ood(config: ExperimentConfig, checkpoints: Optional[Sequence[str]] = None) -> Path:
    runner = ExperimentRunner(config)
    paths = _resolve_checkpoints(runner, checkpoints, "ood") if checkpoints else runner.train_all("ood")
    groups: List[str] = []
    for path in paths:
        evaluation = runner.evaluate(path)
        if evaluation.info.mode != "ood":
            raise CheckpointError(f"{path} was not trained with a withheld class")
        runner.write_report(evaluation, directory="ood")
        write_json_atomic(
            runner.out / "ood" / f"{evaluation.info.tag}.summary.json",
            ood_summary(evaluation.report),
            provenance=runner.provenance(evaluation.info),
        )
        if evaluation.info.group not in groups:
            groups.append(evaluation.info.group)
    tables = [runner.write_ood_table(group) for group in groups]
    return tables[-1]


def cmd_analyze(config: ExperimentConfig, checkpoints: Optional[Sequence[str]] = None) -> Path:
    runner = ExperimentRunner(config)
    groups: List[str] = []
    for path in _resolve_checkpoints(runner, checkpoints):
        evaluation = runner.evaluate(path)
        if evaluation.field is None:
            runner.log.info("Skipping %s: the baseline carries no variance scores.", path)
            continue
        info = evaluation.info
        analysis = topology_analysis(evaluation.report, evaluation.split, bucket_cap=config.degree_bucket_cap)
        write_csv_atomic(
            runner.out / "analysis" / f"{info.tag}.degree_buckets.csv",
            analysis.degree_buckets,
            provenance=runner.provenance(info),
        )
        write_json_atomic(
            runner.out / "analysis" / f"{info.tag}.correlations.json",
            {"correlations": analysis.correlations, "num_unreachable": analysis.num_unreachable},
            provenance=runner.provenance(info),
        )
        if info.group not in groups:
            groups.append(info.group)
    if not groups:
        raise InputError("analysis needs at least one bup checkpoint")
    tables = [runner.write_correlation_table(group) for group in groups]
    return tables[-1]


def parse_seeds(text: str) -> List[int]:
    """``"0,1,2"`` or ``"0-9"`` or a mix such as ``"0-4,7"``."""
    seeds: List[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                start, end = (int(v) for v in part.split("-", 1))
                if end < start:
                    raise ValueError(part)
                seeds.extend(range(start, end + 1))
            else:
                seeds.append(int(part))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}") from exc
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config document (default: $BUP_CONFIG)")
    common.add_argument("--dataset-dir", help="Directory holding <dataset>.content and <dataset>.cites")
    common.add_argument("--dataset", help="Dataset name, e.g. cora or citeseer")
    common.add_argument("--per-class", type=int, help="Labelled training nodes per class")
    common.add_argument("--val-size", type=int)
    common.add_argument("--test-size", type=int)
    common.add_argument("--seeds", type=parse_seeds, help="Comma list or ranges, e.g. 0-9")
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--ood-class", type=int, help="Class index withheld from training in ood mode")
    common.add_argument("--methods", help=f"Comma list drawn from {', '.join(METHODS)}")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--log-level", help="Logging level (default INFO)")
    common.add_argument("--no-progress", action="store_true", help="Disable progress bars")

    parser = argparse.ArgumentParser(description="Bayesian uncertainty propagation experiments.")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("train", parents=[common], help="Train one checkpoint per seed and method")
    for name, help_text in (
        ("eval", "Evaluate checkpoints and write the aggregate table"),
        ("ood", "Train with a withheld class and summarise OOD dispersion"),
        ("analyze", "Degree and distance vs uncertainty analysis"),
    ):
        sub = commands.add_parser(name, parents=[common], help=help_text)
        sub.add_argument("--checkpoints", nargs="+", help="Checkpoint files or directories")
    return parser.parse_args(argv)


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Dict[str, Any]]:
    overrides: Dict[str, Dict[str, Any]] = {}

    def put(section: str, key: str, value: Any) -> None:
        if value is not None:
            overrides.setdefault(section, {})[key] = value

    put("dataset", "dir", args.dataset_dir)
    put("dataset", "name", args.dataset)
    put("split", "per_class", args.per_class)
    put("split", "val_size", args.val_size)
    put("split", "test_size", args.test_size)
    put("experiment", "seeds", args.seeds)
    put("experiment", "mode", "ood" if args.command == "ood" else args.mode)
    put("experiment", "ood_class", args.ood_class)
    if args.methods:
        put("experiment", "methods", [m.strip() for m in args.methods.split(",") if m.strip()])
    put("output", "dir", args.out)
    put("output", "log_level", args.log_level.upper() if args.log_level else None)
    if args.no_progress:
        put("output", "progress", False)
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, (args.log_level or "INFO").upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        config = ExperimentConfigStore(config_path=args.config).load(overrides_from_args(args))
        logging.getLogger().setLevel(getattr(logging, config.log_level, logging.INFO))
        if args.command == "train":
            paths = cmd_train(config)
            logging.info("Trained %s checkpoints under %s.", len(paths), config.output_dir / "checkpoints")
        elif args.command == "eval":
            logging.info("Wrote %s.", cmd_eval(config, args.checkpoints))
        elif args.command == "ood":
            logging.info("Wrote %s.", cmd_ood(config, args.checkpoints))
        else:
            logging.info("Wrote %s.", cmd_analyze(config, args.checkpoints))
    except (BupError, OSError) as exc:
        logging.error("%s: %s", type(exc).__name__, exc)
        logging.debug("Traceback", exc_info=True)
        return exit_code_for(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
