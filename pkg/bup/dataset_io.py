"""
Planetoid citation data -> Dataset, plus the train/val/test split protocol.

``.content`` lines look like ``<id> <f_1> ... <f_F> <label>`` and ``.cites``
lines like ``<cited id> <citing id>``; both whitespace separated, UTF-8.
Citations that reference an ID missing from ``.content`` are skipped and
counted rather than treated as fatal, which is what the public cora and
citeseer dumps need.

Splits are drawn with numpy's PCG64 generator seeded with the split seed:
classes are visited in index order and each class's sorted node list is
permuted, the first ``per_class`` becoming training nodes; the sorted
remainder is then permuted once, the first ``val_size`` becoming validation
and the next ``test_size`` test. Every index array is returned sorted.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from bup.artifacts import write_json_atomic
from bup.errors import DatasetParseError, InputError
from bup.graph_core import Graph, build_graph

_LOG = logging.getLogger("DatasetIO")

DEFAULT_VAL_SIZE = 200
DEFAULT_TEST_SIZE = 2000


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    graph: Graph
    node_ids: Tuple[str, ...]
    label_names: Tuple[str, ...]
    skipped_citations: int = 0
    name: str = "dataset"

    @property
    def num_nodes(self) -> int:
        return int(self.features.shape[0])

    @property
    def num_features(self) -> int:
        return int(self.features.shape[1])


@dataclass(frozen=True, eq=False)
class Split:
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    per_class_train: int
    seed: int
    ood_class: Optional[int] = None
    ood_test_idx: Optional[np.ndarray] = None

    @property
    def is_ood(self) -> bool:
        return self.ood_class is not None

    def to_json(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "seed": int(self.seed),
            "per_class": int(self.per_class_train),
            "train": [int(i) for i in self.train_idx],
            "val": [int(i) for i in self.val_idx],
            "test": [int(i) for i in self.test_idx],
        }
        if self.ood_class is not None:
            payload["ood_class"] = int(self.ood_class)
            payload["ood_test"] = [int(i) for i in (self.ood_test_idx if self.ood_test_idx is not None else [])]
        return payload

    @staticmethod
    def from_json(payload: Mapping[str, Any]) -> "Split":
        try:
            ood_class = payload.get("ood_class")
            return Split(
                train_idx=_sorted_indices(payload["train"]),
                val_idx=_sorted_indices(payload["val"]),
                test_idx=_sorted_indices(payload["test"]),
                per_class_train=int(payload["per_class"]),
                seed=int(payload["seed"]),
                ood_class=int(ood_class) if ood_class is not None else None,
                ood_test_idx=_sorted_indices(payload.get("ood_test") or []) if ood_class is not None else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"split payload is malformed: {exc}") from exc


def _sorted_indices(values: Sequence[int]) -> np.ndarray:
    return np.sort(np.asarray(list(values), dtype=np.int64))


def _parse_float(token: str, path: str, line_number: int) -> float:
    try:
        value = float(token)
    except ValueError as exc:
        raise DatasetParseError(path, line_number, f"feature {token!r} is not a number") from exc
    if not math.isfinite(value):
        raise DatasetParseError(path, line_number, f"feature {token!r} is not finite")
    return value


def _numbered_lines(path: Path) -> Iterator[Tuple[int, str]]:
    with path.open("rb") as handle:
        for line_number, raw in enumerate(handle, start=1):
            try:
                yield line_number, raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise DatasetParseError(str(path), line_number, f"invalid UTF-8 at byte {exc.start}") from exc


def load_planetoid(content_path: Path | str, cites_path: Path | str, *, name: Optional[str] = None) -> Dataset:
    content_path = Path(content_path)
    cites_path = Path(cites_path)

    node_ids: List[str] = []
    index_of: Dict[str, int] = {}
    rows: List[List[float]] = []
    raw_labels: List[str] = []
    num_features: Optional[int] = None

    for line_number, line in _numbered_lines(content_path):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) < 3:
            raise DatasetParseError(str(content_path), line_number, "expected '<id> <features...> <label>'")
        node_id, label = tokens[0], tokens[-1]
        if node_id in index_of:
            raise DatasetParseError(str(content_path), line_number, f"duplicate node id {node_id!r}")
        values = [_parse_float(token, str(content_path), line_number) for token in tokens[1:-1]]
        if num_features is None:
            num_features = len(values)
        elif len(values) != num_features:
            raise DatasetParseError(
                str(content_path),
                line_number,
                f"expected {num_features} features, found {len(values)}",
            )
        index_of[node_id] = len(node_ids)
        node_ids.append(node_id)
        rows.append(values)
        raw_labels.append(label)

    if not node_ids:
        raise InputError(f"{content_path} contains no nodes")

    edges: List[Tuple[int, int]] = []
    skipped = 0
    for line_number, line in _numbered_lines(cites_path):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 2:
            raise DatasetParseError(str(cites_path), line_number, "expected '<id> <id>'")
        src, dst = index_of.get(tokens[0]), index_of.get(tokens[1])
        if src is None or dst is None:
            skipped += 1
            continue
        edges.append((src, dst))
    if skipped:
        _LOG.warning("Skipped %s citations referencing unknown node ids in %s.", skipped, cites_path)

    label_names = tuple(sorted(set(raw_labels)))
    label_index = {label: idx for idx, label in enumerate(label_names)}
    labels = np.array([label_index[label] for label in raw_labels], dtype=np.int64)
    features = np.array(rows, dtype=np.float64)

    dataset = Dataset(
        features=features,
        labels=labels,
        num_classes=len(label_names),
        graph=build_graph(edges, len(node_ids)),
        node_ids=tuple(node_ids),
        label_names=label_names,
        skipped_citations=skipped,
        name=name or content_path.stem,
    )
    _LOG.info(
        "Loaded %s: nodes=%s features=%s classes=%s edges=%s",
        dataset.name,
        dataset.num_nodes,
        dataset.num_features,
        dataset.num_classes,
        dataset.graph.num_edges,
    )
    return dataset


def _format_feature(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def write_planetoid(ds: Dataset, content_path: Path | str, cites_path: Path | str) -> None:
    """Write ``ds`` back out in the format ``load_planetoid`` reads."""
    content_path = Path(content_path)
    cites_path = Path(cites_path)
    content_path.parent.mkdir(parents=True, exist_ok=True)
    cites_path.parent.mkdir(parents=True, exist_ok=True)
    with content_path.open("w", encoding="utf-8", newline="\n") as handle:
        for idx, node_id in enumerate(ds.node_ids):
            feature_text = " ".join(_format_feature(v) for v in ds.features[idx])
            handle.write(f"{node_id} {feature_text} {ds.label_names[ds.labels[idx]]}\n")
    with cites_path.open("w", encoding="utf-8", newline="\n") as handle:
        for i, j in ds.graph.edges:
            handle.write(f"{ds.node_ids[i]} {ds.node_ids[j]}\n")


def normalize_features(features: np.ndarray) -> np.ndarray:
    """Divide each row by its sum; all-zero rows stay zero."""
    values = np.asarray(features, dtype=np.float64)
    sums = values.sum(axis=1, keepdims=True)
    safe = np.where(sums == 0.0, 1.0, sums)
    return np.where(sums == 0.0, 0.0, values / safe)


def prepare_dataset(ds: Dataset, normalize: bool = True) -> Dataset:
    if not normalize:
        return ds
    return Dataset(
        features=normalize_features(ds.features),
        labels=ds.labels,
        num_classes=ds.num_classes,
        graph=ds.graph,
        node_ids=ds.node_ids,
        label_names=ds.label_names,
        skipped_citations=ds.skipped_citations,
        name=ds.name,
    )


def _split_generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _stratified_draw(
    labels: np.ndarray,
    classes: Sequence[int],
    per_class: int,
    rng: np.random.Generator,
    class_names: Sequence[str],
) -> np.ndarray:
    chosen: List[np.ndarray] = []
    for cls in classes:
        members = np.flatnonzero(labels == cls)
        if members.size < per_class:
            raise InputError(
                f"class {cls} ({class_names[cls]}) has {members.size} nodes, fewer than per_class={per_class}"
            )
        chosen.append(rng.permutation(members)[:per_class])
    if not chosen:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(chosen)


def _check_sizes(per_class: int, val_size: int, test_size: int) -> None:
    if per_class < 0 or val_size < 0 or test_size < 0:
        raise InputError(
            f"split sizes must be non-negative (per_class={per_class}, val={val_size}, test={test_size})"
        )


def make_split(ds: Dataset, per_class: int, val_size: int, test_size: int, seed: int) -> Split:
    _check_sizes(per_class, val_size, test_size)
    required = per_class * ds.num_classes + val_size + test_size
    if required > ds.num_nodes:
        raise InputError(
            f"split needs {required} nodes (per_class*C + val + test) but the dataset has {ds.num_nodes}"
        )
    rng = _split_generator(seed)
    train = _stratified_draw(ds.labels, range(ds.num_classes), per_class, rng, ds.label_names)
    remainder = np.setdiff1d(np.arange(ds.num_nodes, dtype=np.int64), train)
    shuffled = rng.permutation(remainder)
    split = Split(
        train_idx=np.sort(train),
        val_idx=np.sort(shuffled[:val_size]),
        test_idx=np.sort(shuffled[val_size : val_size + test_size]),
        per_class_train=per_class,
        seed=seed,
    )
    _LOG.info(
        "Split seed=%s: train=%s val=%s test=%s",
        seed,
        split.train_idx.size,
        split.val_idx.size,
        split.test_idx.size,
    )
    return split


def make_ood_split(
    ds: Dataset,
    per_class: int,
    val_size: int,
    test_size: int,
    seed: int,
    ood_class: int,
) -> Split:
    if not 0 <= ood_class < ds.num_classes:
        raise InputError(f"ood_class {ood_class} outside [0, {ds.num_classes})")
    _check_sizes(per_class, val_size, test_size)
    observed = [cls for cls in range(ds.num_classes) if cls != ood_class]
    in_dist = np.flatnonzero(ds.labels != ood_class)
    required = per_class * len(observed) + val_size + test_size
    if required > in_dist.size:
        raise InputError(
            f"OOD split needs {required} in-distribution nodes but only {in_dist.size} remain "
            f"after withholding class {ood_class}"
        )
    rng = _split_generator(seed)
    train = _stratified_draw(ds.labels, observed, per_class, rng, ds.label_names)
    remainder = np.setdiff1d(in_dist, train)
    shuffled = rng.permutation(remainder)
    ood_nodes = rng.permutation(np.flatnonzero(ds.labels == ood_class))
    split = Split(
        train_idx=np.sort(train),
        val_idx=np.sort(shuffled[:val_size]),
        test_idx=np.sort(shuffled[val_size : val_size + test_size]),
        per_class_train=per_class,
        seed=seed,
        ood_class=ood_class,
        ood_test_idx=np.sort(ood_nodes[:test_size]),
    )
    _LOG.info(
        "OOD split seed=%s class=%s: train=%s val=%s test=%s ood_test=%s",
        seed,
        ood_class,
        split.train_idx.size,
        split.val_idx.size,
        split.test_idx.size,
        split.ood_test_idx.size if split.ood_test_idx is not None else 0,
    )
    return split


def in_distribution_labels(labels: np.ndarray, ood_class: Optional[int]) -> np.ndarray:
    """Relabel the observed classes to 0..C-2 in order; withheld-class nodes become -1."""
    labels = np.asarray(labels, dtype=np.int64)
    if ood_class is None:
        return labels.copy()
    relabeled = np.where(labels > ood_class, labels - 1, labels)
    return np.where(labels == ood_class, -1, relabeled)


def head_size(ds: Dataset, split: Split) -> int:
    """Output width of the classifier trained on ``split``."""
    return ds.num_classes - 1 if split.is_ood else ds.num_classes


def validate_split(ds: Dataset, split: Split) -> None:
    """Raise InputError unless ``split`` satisfies the split invariants for ``ds``."""
    sets = {
        "train": set(split.train_idx.tolist()),
        "val": set(split.val_idx.tolist()),
        "test": set(split.test_idx.tolist()),
    }
    names = list(sets)
    for a_pos, a in enumerate(names):
        for b in names[a_pos + 1 :]:
            overlap = sets[a] & sets[b]
            if overlap:
                raise InputError(f"{a} and {b} overlap on {len(overlap)} nodes")
    all_idx = np.concatenate([split.train_idx, split.val_idx, split.test_idx])
    if all_idx.size and (all_idx.min() < 0 or all_idx.max() >= ds.num_nodes):
        raise InputError("split references nodes outside the dataset")
    if split.ood_class is None:
        return
    for name in ("train", "val", "test"):
        idx = getattr(split, f"{name}_idx")
        if np.any(ds.labels[idx] == split.ood_class):
            raise InputError(f"{name} contains nodes of the withheld class {split.ood_class}")
    ood_idx = split.ood_test_idx if split.ood_test_idx is not None else np.empty(0, dtype=np.int64)
    if np.any(ds.labels[ood_idx] != split.ood_class):
        raise InputError("ood_test contains nodes outside the withheld class")


def save_split(split: Split, path: Path | str, *, provenance: Optional[Mapping[str, Any]] = None) -> None:
    write_json_atomic(Path(path), split.to_json(), provenance=provenance)


def load_split(path: Path | str) -> Split:
    with Path(path).open("r", encoding="utf-8") as handle:
        return Split.from_json(json.load(handle))
