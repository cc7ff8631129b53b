import argparse
import json
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np

from bup.artifacts import read_csv, read_provenance, render_csv
from bup.bup_model import load_checkpoint
from bup.cli import aggregate_table, main, overrides_from_args, parse_args, parse_seeds, run_tag
from bup.dataset_io import load_split
from bup.errors import EXIT_INPUT, EXIT_IO, EXIT_OK
from tests.fixtures import make_dataset, three_class_dataset, write_config, write_dataset

QUICK_TRAIN = {
  "max_epochs": 20,
  "patience": 20,
  "hidden_width": 8,
  "dropout": 0.0,
  "learning_rate": 0.05,
  "mc_samples_eval": 16,
}


class CliRunTestCase(unittest.TestCase):
  def setUp(self) -> None:
    self._tmp = tempfile.TemporaryDirectory()
    self.root = Path(self._tmp.name)
    self.dataset = three_class_dataset()
    write_dataset(self.root / "data", self.dataset)
    self.config = write_config(self.root / "exp.json", {"train": QUICK_TRAIN})
    self.out = self.root / "runs"

  def tearDown(self) -> None:
    self._tmp.cleanup()

  def _args(self, command: str, *extra: str) -> list:
    return [
      command,
      "--config", str(self.config),
      "--dataset-dir", str(self.root / "data"),
      "--dataset", "toy",
      "--per-class", "3",
      "--val-size", "6",
      "--test-size", "12",
      "--seeds", "0-1",
      "--out", str(self.out),
      "--no-progress",
      *extra,
    ]

  def test_train_writes_checkpoints_and_traces(self) -> None:
    self.assertEqual(main(self._args("train")), EXIT_OK)
    for seed in (0, 1):
      for method in ("bup", "gcn"):
        tag = run_tag("toy", 3, "normal", None, method, seed)
        self.assertTrue((self.out / "checkpoints" / f"{tag}.json").exists())
        trace = read_csv(self.out / "traces" / f"{tag}.csv")
        self.assertGreaterEqual(len(trace), 1)
        self.assertEqual(list(trace.columns), ["epoch", "train_nll", "val_nll", "val_acc"])
    self.assertTrue((self.out / "splits" / "toy-pc3-normal-seed0.json").exists())

  def test_rerun_reproduces_checkpoints_byte_for_byte(self) -> None:
    self.assertEqual(main(self._args("train")), EXIT_OK)
    checkpoints = sorted((self.out / "checkpoints").glob("*.json"))
    first = {path.name: path.read_bytes() for path in checkpoints}
    self.assertEqual(main(self._args("train")), EXIT_OK)
    second = {path.name: path.read_bytes() for path in sorted((self.out / "checkpoints").glob("*.json"))}
    self.assertEqual(first, second)

  def test_eval_writes_reports_and_aggregate(self) -> None:
    self.assertEqual(main(self._args("train")), EXIT_OK)
    self.assertEqual(main(self._args("eval")), EXIT_OK)
    table = read_csv(self.out / "aggregate.csv")
    self.assertEqual(len(table), 1)
    row = table.iloc[0]
    self.assertEqual(row["dataset"], "toy")
    self.assertEqual(int(row["bup_runs"]), 2)
    self.assertEqual(int(row["gcn_runs"]), 2)
    self.assertIn("config_checksum", read_provenance(self.out / "aggregate.csv"))

    tag = run_tag("toy", 3, "normal", None, "bup", 0)
    report = json.loads((self.out / "reports" / f"{tag}.json").read_text(encoding="utf-8"))
    self.assertTrue(0.0 <= report["ece"] <= 100.0)
    self.assertTrue(0.0 <= report["ace"] <= 100.0)
    self.assertEqual(report["num_evaluated"], 12)
    self.assertEqual(report["mc_samples"], 16)
    nodes = read_csv(self.out / "reports" / f"{tag}.nodes.csv")
    self.assertEqual(len(nodes), 12)
    self.assertFalse(nodes["avg_std"].isna().any())

  def test_eval_is_deterministic(self) -> None:
    self.assertEqual(main(self._args("train")), EXIT_OK)
    self.assertEqual(main(self._args("eval")), EXIT_OK)
    first = (self.out / "aggregate.csv").read_bytes()
    self.assertEqual(main(self._args("eval")), EXIT_OK)
    self.assertEqual(first, (self.out / "aggregate.csv").read_bytes())

  def test_ood_withholds_last_class_by_default(self) -> None:
    self.assertEqual(main(self._args("ood", "--methods", "bup")), EXIT_OK)
    summary = read_csv(self.out / "ood" / "toy-pc3-ood2.summary.csv")
    self.assertEqual(summary["seed"].tolist(), [0, 1])
    self.assertTrue((summary["ood_count"] == 12).all())
    for seed in (0, 1):
      split = load_split(self.out / "splits" / f"toy-pc3-ood2-seed{seed}.json")
      self.assertFalse(np.any(self.dataset.labels[split.train_idx] == 2))
      nodes = read_csv(self.out / "ood" / f"{run_tag('toy', 3, 'ood', 2, 'bup', seed)}.nodes.csv")
      ood_rows = nodes[nodes["is_ood"]]
      self.assertEqual(len(ood_rows), 12)
      self.assertTrue((ood_rows["label"] == -1).all())
      train_ids = {self.dataset.node_ids[i] for i in split.train_idx}
      self.assertFalse(train_ids & set(ood_rows["node_id"]))

  def test_analyze_reports_finite_correlations(self) -> None:
    self.assertEqual(main(self._args("train")), EXIT_OK)
    self.assertEqual(main(self._args("analyze")), EXIT_OK)
    table = read_csv(self.out / "analysis" / "toy-pc3-normal.correlations.csv")
    self.assertEqual(table["seed"].tolist(), [0, 1])
    for column in ("degree_vs_avg_std", "degree_vs_entropy", "dist_mean_vs_avg_std", "dist_nearest_vs_entropy"):
      self.assertTrue(all(math.isfinite(v) for v in table[column]))
    buckets = read_csv(self.out / "analysis" / f"{run_tag('toy', 3, 'normal', None, 'bup', 0)}.degree_buckets.csv")
    self.assertEqual(int(buckets["count"].sum()), 12)

  def test_ood_table_collects_seeds_from_separate_runs(self) -> None:
    for seed in ("0", "1", "2"):
      self.assertEqual(main(self._args("ood", "--methods", "bup", "--seeds", seed)), EXIT_OK)
    summary = read_csv(self.out / "ood" / "toy-pc3-ood2.summary.csv")
    self.assertEqual(summary["seed"].tolist(), [0, 1, 2])
    self.assertEqual(read_provenance(self.out / "ood" / "toy-pc3-ood2.summary.csv")["runs"], 3)

  def test_correlation_table_collects_seeds_from_separate_runs(self) -> None:
    self.assertEqual(main(self._args("train", "--methods", "bup")), EXIT_OK)
    for seed in ("1", "0"):
      self.assertEqual(main(self._args("analyze", "--methods", "bup", "--seeds", seed)), EXIT_OK)
    table = read_csv(self.out / "analysis" / "toy-pc3-normal.correlations.csv")
    self.assertEqual(table["seed"].tolist(), [0, 1])

  def test_checkpoints_and_splits_carry_config_and_seed(self) -> None:
    self.assertEqual(main(self._args("train", "--methods", "gcn")), EXIT_OK)
    tag = run_tag("toy", 3, "normal", None, "gcn", 1)
    checkpoint = json.loads((self.out / "checkpoints" / f"{tag}.json").read_text(encoding="utf-8"))
    split = json.loads((self.out / "splits" / "toy-pc3-normal-seed1.json").read_text(encoding="utf-8"))
    for document in (checkpoint, split):
      provenance = document["provenance"]
      self.assertIn("config_checksum", provenance)
      self.assertEqual(provenance["seed"], 1)
      self.assertEqual(provenance["config"]["train"]["learning_rate"], QUICK_TRAIN["learning_rate"])
    self.assertEqual(checkpoint["provenance"]["config_checksum"], split["provenance"]["config_checksum"])
    loaded = load_checkpoint(self.out / "checkpoints" / f"{tag}.json")
    self.assertEqual(loaded.provenance["run"]["seed"], 1)
    self.assertEqual(load_split(self.out / "splits" / "toy-pc3-normal-seed1.json").seed, 1)

  def test_eval_reports_withheld_class_checkpoints_as_excluded(self) -> None:
    self.assertEqual(main(self._args("ood", "--methods", "gcn", "--seeds", "0")), EXIT_OK)
    with self.assertLogs("ExperimentRunner", level="WARNING") as logs:
      self.assertEqual(main(self._args("eval", "--checkpoints", str(self.out / "checkpoints"))), EXIT_OK)
    self.assertIn("Excluding", "\n".join(logs.output))
    self.assertEqual(len(read_csv(self.out / "aggregate.csv")), 0)

  def test_invalid_utf8_dataset_is_input_error(self) -> None:
    with (self.root / "data" / "toy.content").open("ab") as handle:
      handle.write(b"\xff\xfe 1 0 x\n")
    self.assertEqual(main(self._args("train")), EXIT_INPUT)

  def test_eval_without_checkpoints_is_input_error(self) -> None:
    self.assertEqual(main(self._args("eval")), EXIT_INPUT)

  def test_incompatible_checkpoint_is_input_error(self) -> None:
    self.assertEqual(main(self._args("train", "--methods", "gcn")), EXIT_OK)
    narrow = make_dataset(
      np.ones((self.dataset.num_nodes, 5)),
      self.dataset.labels,
      self.dataset.graph.edges,
      name="toy",
      label_names=self.dataset.label_names,
    )
    write_dataset(self.root / "narrow", narrow)
    checkpoint = self.out / "checkpoints" / f"{run_tag('toy', 3, 'normal', None, 'gcn', 0)}.json"
    args = self._args("eval", "--checkpoints", str(checkpoint))
    args[args.index("--dataset-dir") + 1] = str(self.root / "narrow")
    self.assertEqual(main(args), EXIT_INPUT)

  def test_missing_dataset_file_is_io_error(self) -> None:
    self.assertEqual(main(self._args("train", "--dataset", "absent")), EXIT_IO)

  def test_unknown_config_key_is_input_error(self) -> None:
    write_config(self.config, {"train": {"epochs": 3}})
    self.assertEqual(main(self._args("train")), EXIT_INPUT)


class AggregateTableTestCase(unittest.TestCase):
  def test_golden_csv(self) -> None:
    summaries = [
      {"dataset": "toy", "per_class": 5, "method": "bup", "acc": 0.8, "ece": 10.0, "ace": 12.0},
      {"dataset": "toy", "per_class": 5, "method": "bup", "acc": 0.6, "ece": 20.0, "ace": 16.0},
      {"dataset": "toy", "per_class": 5, "method": "gcn", "acc": 0.7, "ece": 30.0, "ace": 30.0},
    ]
    expected = (
      "dataset,per_class,bup_acc_mean,bup_acc_std,bup_ece_mean,bup_ece_std,bup_ace_mean,bup_ace_std,bup_runs,"
      "gcn_acc_mean,gcn_acc_std,gcn_ece_mean,gcn_ece_std,gcn_ace_mean,gcn_ace_std,gcn_runs\n"
      "toy,5,70.000000,10.000000,15.000000,5.000000,14.000000,2.000000,2,"
      "70.000000,0.000000,30.000000,0.000000,30.000000,0.000000,1\n"
    )
    self.assertEqual(render_csv(aggregate_table(summaries)), expected)

  def test_rows_sorted_by_dataset_and_per_class(self) -> None:
    summaries = [
      {"dataset": "cora", "per_class": 20, "method": "bup", "acc": 0.8, "ece": 5.0, "ace": 6.0},
      {"dataset": "cora", "per_class": 5, "method": "bup", "acc": 0.6, "ece": 9.0, "ace": 9.0},
    ]
    table = aggregate_table(summaries)
    self.assertEqual(table["per_class"].tolist(), [5, 20])
    self.assertEqual(table["gcn_runs"].tolist(), [0, 0])

  def test_empty_input_keeps_header(self) -> None:
    self.assertEqual(len(aggregate_table([]).columns), 16)


class ArgumentTestCase(unittest.TestCase):
  def test_seed_ranges(self) -> None:
    self.assertEqual(parse_seeds("0-2,5"), [0, 1, 2, 5])
    with self.assertRaises(argparse.ArgumentTypeError):
      parse_seeds("3-1")

  def test_ood_command_forces_ood_mode(self) -> None:
    overrides = overrides_from_args(parse_args(["ood", "--ood-class", "1", "--no-progress"]))
    self.assertEqual(overrides["experiment"], {"mode": "ood", "ood_class": 1})
    self.assertEqual(overrides["output"], {"progress": False})


if __name__ == "__main__":
  unittest.main()
