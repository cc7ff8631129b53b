"""Small synthetic graphs and datasets shared by the test suites."""
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from bup.bup_model import BupParameters
from bup.dataset_io import Dataset, write_planetoid
from bup.graph_core import Graph, build_graph
from bup.trainer import TrainConfig


def path_graph(num_nodes: int) -> Graph:
  return build_graph([(i, i + 1) for i in range(num_nodes - 1)], num_nodes)


def star_graph(num_leaves: int) -> Graph:
  return build_graph([(0, leaf) for leaf in range(1, num_leaves + 1)], num_leaves + 1)


def random_graph(rng: np.random.Generator, num_nodes: int, edge_prob: float = 0.2) -> Graph:
  pairs = [
    (i, j)
    for i in range(num_nodes)
    for j in range(i + 1, num_nodes)
    if rng.random() < edge_prob
  ]
  return build_graph(pairs, num_nodes)


def make_dataset(
  features: np.ndarray,
  labels: Sequence[int],
  edges: Sequence[Tuple[int, int]],
  *,
  name: str = "toy",
  label_names: Optional[Sequence[str]] = None,
) -> Dataset:
  labels = np.asarray(labels, dtype=np.int64)
  num_classes = int(labels.max()) + 1
  names = tuple(label_names) if label_names is not None else tuple(f"class_{c}" for c in range(num_classes))
  return Dataset(
    features=np.asarray(features, dtype=np.float64),
    labels=labels,
    num_classes=num_classes,
    graph=build_graph(edges, len(labels)),
    node_ids=tuple(f"n{i:03d}" for i in range(len(labels))),
    label_names=names,
    name=name,
  )


def two_class_dataset() -> Dataset:
  """20 nodes, two classes of 10; features separate the classes, edges stay inside a class."""
  rng = np.random.Generator(np.random.PCG64(7))
  labels = [0] * 10 + [1] * 10
  features = np.zeros((20, 4))
  for node, label in enumerate(labels):
    features[node, label] = 1.0
    features[node, 2:] = rng.uniform(0.0, 0.2, size=2)
  edges: List[Tuple[int, int]] = []
  for start in (0, 10):
    edges += [(start + i, start + (i + 1) % 10) for i in range(10)]
    edges += [(start, start + 5)]
  return make_dataset(features, labels, edges, name="two_class")


def three_class_dataset(nodes_per_class: int = 12, seed: int = 3) -> Dataset:
  """Three noisy, homophilous classes with a few cross-class edges."""
  rng = np.random.Generator(np.random.PCG64(seed))
  num_classes = 3
  labels = np.repeat(np.arange(num_classes), nodes_per_class)
  features = rng.integers(0, 2, size=(labels.size, 6)).astype(np.float64)
  features[np.arange(labels.size), labels] += 2.0
  edges: List[Tuple[int, int]] = []
  for c in range(num_classes):
    members = np.flatnonzero(labels == c)
    for pos, node in enumerate(members):
      edges.append((int(node), int(members[(pos + 1) % members.size])))
      edges.append((int(node), int(members[(pos + 3) % members.size])))
  edges += [(0, nodes_per_class), (nodes_per_class + 1, 2 * nodes_per_class), (1, 2 * nodes_per_class + 1)]
  return make_dataset(features, labels, edges, name="toy", label_names=("alpha", "beta", "gamma"))


def write_dataset(directory: Path, ds: Dataset) -> Tuple[Path, Path]:
  content = Path(directory) / f"{ds.name}.content"
  cites = Path(directory) / f"{ds.name}.cites"
  write_planetoid(ds, content, cites)
  return content, cites


def random_bup_parameters(
  rng: np.random.Generator,
  in_features: int,
  hidden: int,
  num_classes: int,
  *,
  var_width: Optional[int] = None,
  lam: float = 1.0,
  scale: float = 0.5,
) -> BupParameters:
  var_width = var_width or hidden
  return BupParameters(
    mean_weights=[rng.normal(0.0, scale, (in_features, hidden)), rng.normal(0.0, scale, (hidden, num_classes))],
    var_input_weight=rng.normal(0.0, scale, (in_features, var_width)),
    var_input_bias=rng.normal(0.0, 0.1, var_width),
    var_weights=[rng.normal(0.0, scale, (var_width, hidden)), rng.normal(0.0, scale, (hidden, num_classes))],
    lam=lam,
  )


def quick_train_config(**overrides: Any) -> TrainConfig:
  settings: Dict[str, Any] = {
    "max_epochs": 60,
    "patience": 20,
    "hidden_width": 8,
    "dropout": 0.0,
    "learning_rate": 0.05,
    "mc_samples_eval": 32,
  }
  settings.update(overrides)
  return TrainConfig(**settings)


def write_config(path: Path, document: Dict[str, Any]) -> Path:
  path = Path(path)
  path.parent.mkdir(parents=True, exist_ok=True)
  path.write_text(json.dumps(document, indent=2), encoding="utf-8")
  return path
