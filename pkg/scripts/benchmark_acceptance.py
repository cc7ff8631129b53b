#!/usr/bin/env python3
"""Benchmark-scale acceptance gates on cora and citeseer (minutes per seed)."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Tuple

from dotenv import load_dotenv

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from bup.artifacts import read_csv  # noqa: E402
from bup.cli import cmd_analyze, cmd_eval, cmd_ood, cmd_train, parse_seeds  # noqa: E402
from bup.errors import BupError, exit_code_for  # noqa: E402
from bup.experiment_config import ExperimentConfig, ExperimentConfigStore  # noqa: E402

CORA_BUP_ACC = 78.64
CORA_GCN_ACC = 79.10
CORA_BUP_ECE = 6.80
ACC_TOLERANCE = 5.0
ECE_SOFT_TOLERANCE = 6.0
OOD_P_MAX_GAP = 0.05
CORA_OOD_CLASS = 6
MIN_NEGATIVE_RUNS = 8

GateResult = Tuple[bool, str]


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Run the benchmark acceptance gates.")
    parser.add_argument("--dataset-dir", default=os.getenv("BUP_DATASET_DIR", "data"))
    parser.add_argument("--out", default=os.getenv("BUP_OUTPUT_DIR", "runs/acceptance"))
    parser.add_argument("--seeds", default="0-9")
    parser.add_argument("--gates", default="5,6,7,8", help="Subset of gates to run, e.g. 5,7")
    parser.add_argument("--log-level", default=os.getenv("BUP_LOG_LEVEL", "INFO"))
    return parser.parse_args()


def _config(args: argparse.Namespace, dataset: str, per_class: int, **experiment: Any) -> ExperimentConfig:
    overrides: Dict[str, Dict[str, Any]] = {
        "dataset": {"name": dataset, "dir": args.dataset_dir},
        "split": {"per_class": per_class},
        "experiment": {"seeds": parse_seeds(args.seeds), **experiment},
        "output": {"dir": str(Path(args.out) / f"{dataset}-pc{per_class}"), "progress": False},
    }
    return ExperimentConfigStore().load(overrides)


def gate_cora_table(args: argparse.Namespace) -> GateResult:
    config = _config(args, "cora", 20)
    cmd_train(config)
    row = read_csv(cmd_eval(config)).iloc[0]
    bup_acc, gcn_acc = row["bup_acc_mean"], row["gcn_acc_mean"]
    bup_ece, gcn_ece = row["bup_ece_mean"], row["gcn_ece_mean"]
    ok = (
        abs(bup_acc - CORA_BUP_ACC) <= ACC_TOLERANCE
        and abs(gcn_acc - CORA_GCN_ACC) <= ACC_TOLERANCE
        and bup_ece < gcn_ece
    )
    soft = "met" if abs(bup_ece - CORA_BUP_ECE) <= ECE_SOFT_TOLERANCE else "missed"
    return ok, (
        f"bup acc={bup_acc:.2f} ece={bup_ece:.2f}; gcn acc={gcn_acc:.2f} ece={gcn_ece:.2f}; "
        f"soft ECE target {soft}"
    )


def gate_citeseer_order(args: argparse.Namespace) -> GateResult:
    config = _config(args, "citeseer", 5)
    cmd_train(config)
    row = read_csv(cmd_eval(config)).iloc[0]
    ok = row["bup_acc_mean"] > row["gcn_acc_mean"]
    return ok, f"bup acc={row['bup_acc_mean']:.2f} vs gcn acc={row['gcn_acc_mean']:.2f}"


def gate_ood_dispersion(args: argparse.Namespace) -> GateResult:
    config = _config(args, "cora", 20, mode="ood", ood_class=CORA_OOD_CLASS, methods=["bup"])
    table = read_csv(cmd_ood(config))
    p_in, p_ood = table["in_dist_mean_p_max"].mean(), table["ood_mean_p_max"].mean()
    s_in, s_ood = table["in_dist_mean_std_dev"].mean(), table["ood_mean_std_dev"].mean()
    ok = p_in - p_ood >= OOD_P_MAX_GAP and s_in > s_ood
    return ok, f"p_max {p_in:.3f} vs {p_ood:.3f}; std_dev {s_in:.3f} vs {s_ood:.3f}"


def gate_topology(args: argparse.Namespace) -> GateResult:
    config = _config(args, "cora", 20, methods=["bup"])
    if not any((config.output_dir / "checkpoints").glob("*-normal-bup-seed*.json")):
        cmd_train(config)
    table = read_csv(cmd_analyze(config))
    neg_std = int((table["degree_vs_avg_std"] < 0).sum())
    neg_entropy = int((table["degree_vs_entropy"] < 0).sum())
    ok = neg_std >= MIN_NEGATIVE_RUNS and neg_entropy >= MIN_NEGATIVE_RUNS
    return ok, f"negative in {neg_std}/{len(table)} (avg_std) and {neg_entropy}/{len(table)} (entropy) runs"


GATES: Dict[str, Tuple[str, Callable[[argparse.Namespace], GateResult]]] = {
    "5": ("cora per_class=20 accuracy/ECE", gate_cora_table),
    "6": ("citeseer per_class=5 ordering", gate_citeseer_order),
    "7": ("cora OOD dispersion", gate_ood_dispersion),
    "8": ("cora degree vs uncertainty", gate_topology),
}


def main() -> int:
    load_dotenv(override=False)
    args = parse_args()
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.INFO), format="%(asctime)s %(levelname)s %(message)s")
    failures: List[str] = []
    for key in [g.strip() for g in args.gates.split(",") if g.strip()]:
        if key not in GATES:
            print(f"Unknown gate {key}; choose from {', '.join(GATES)}.", file=sys.stderr)
            return 1
        title, gate = GATES[key]
        try:
            ok, detail = gate(args)
        except (BupError, OSError) as exc:
            logging.error("Gate %s failed to run: %s", key, exc)
            return exit_code_for(exc)
        print(f"[{'PASS' if ok else 'FAIL'}] gate {key} {title}: {detail}")
        if not ok:
            failures.append(key)
    return 2 if failures else 0


if __name__ == "__main__":
    raise SystemExit(main())
