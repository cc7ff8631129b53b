"""
Accuracy, calibration error, OOD dispersion and topology/uncertainty analysis.

Calibration bins are equal-width on (0, 1]: bin b holds confidences in
(b/B, (b+1)/B]. ECE weights each bin's |accuracy - confidence| gap by its
share of nodes; ACE averages the gaps over non-empty bins. Both are percent.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from bup.bup_model import GaussianMessageField, uncertainty_scores
from bup.dataset_io import Split, in_distribution_labels
from bup.errors import InputError
from bup.graph_core import Graph, shortest_path_lengths, subgraph_degrees

_LOG = logging.getLogger("EvalMetrics")

DEFAULT_NUM_BINS = 10
DEFAULT_DEGREE_BUCKET_CAP = 10
HISTOGRAM_BINS = 10

PER_NODE_COLUMNS = (
    "node_id",
    "label",
    "pred",
    "p_max",
    "std_dev",
    "avg_std",
    "entropy",
    "degree",
    "dist_mean",
    "dist_nearest",
    "is_ood",
)


@dataclass(frozen=True, eq=False)
class CalibrationBins:
    """Per-bin sums; means are derived so two sets of bins merge exactly."""

    counts: np.ndarray
    confidence_sum: np.ndarray
    correct_sum: np.ndarray

    @property
    def num_bins(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def mean_confidence(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.confidence_sum / self.counts, np.nan)

    def mean_accuracy(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.correct_sum / self.counts, np.nan)

    def to_frame(self) -> pd.DataFrame:
        edges = np.linspace(0.0, 1.0, self.num_bins + 1)
        return pd.DataFrame(
            {
                "bin": np.arange(self.num_bins),
                "lower": edges[:-1],
                "upper": edges[1:],
                "count": self.counts.astype(np.int64),
                "mean_confidence": self.mean_confidence(),
                "mean_accuracy": self.mean_accuracy(),
            }
        )


@dataclass(frozen=True, eq=False)
class EvalReport:
    """``bins`` cover the in-distribution test nodes; ``per_node`` also lists OOD nodes."""

    method: str
    seed: int
    acc: float
    ece: float
    ace: float
    bins: CalibrationBins
    per_node: pd.DataFrame
    mc_samples: Optional[int] = None
    mc_seed: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.acc <= 1.0:
            raise InputError(f"accuracy {self.acc} outside [0, 1]")
        if self.ece < 0.0 or self.ace < 0.0:
            raise InputError("calibration errors must be non-negative")
        evaluated = int(np.count_nonzero(~self.per_node["is_ood"].to_numpy(dtype=bool)))
        if self.bins.total != evaluated:
            raise InputError(f"bins hold {self.bins.total} nodes but {evaluated} were evaluated")

    def to_summary(self) -> Dict[str, Any]:
        summary: Dict[str, Any] = {
            "method": self.method,
            "seed": int(self.seed),
            "acc": float(self.acc),
            "ece": float(self.ece),
            "ace": float(self.ace),
            "num_evaluated": self.bins.total,
            "num_ood": int(self.per_node["is_ood"].sum()),
            "bins": self.bins.to_frame().to_dict(orient="records"),
        }
        if self.mc_samples is not None:
            summary["mc_samples"] = int(self.mc_samples)
            summary["mc_seed"] = int(self.mc_seed or 0)
        return summary


@dataclass(frozen=True, eq=False)
class TopologyAnalysis:
    degree_buckets: pd.DataFrame
    correlations: Dict[str, float]
    num_unreachable: int


def _check_probs(probs: np.ndarray, idx: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    matrix = np.asarray(probs, dtype=np.float64)
    index = np.asarray(idx, dtype=np.int64)
    if matrix.ndim != 2:
        raise InputError(f"probabilities must be 2-D, got shape {matrix.shape}")
    if index.size == 0:
        raise InputError("cannot evaluate an empty node set")
    if index.min() < 0 or index.max() >= matrix.shape[0]:
        raise InputError("evaluation index outside the probability matrix")
    return matrix, index


def accuracy(probs: np.ndarray, labels: np.ndarray, idx: Sequence[int]) -> float:
    """Argmax match rate; ties resolve to the lowest class index."""
    matrix, index = _check_probs(probs, idx)
    predicted = np.argmax(matrix[index], axis=1)
    return float(np.mean(predicted == np.asarray(labels)[index]))


def calibration_bins(
    probs: np.ndarray, labels: np.ndarray, idx: Sequence[int], num_bins: int = DEFAULT_NUM_BINS
) -> CalibrationBins:
    if num_bins < 1:
        raise InputError(f"num_bins must be >= 1, got {num_bins}")
    matrix, index = _check_probs(probs, idx)
    rows = matrix[index]
    confidence = rows.max(axis=1)
    correct = (np.argmax(rows, axis=1) == np.asarray(labels)[index]).astype(np.float64)
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    which = np.clip(np.digitize(confidence, edges, right=True) - 1, 0, num_bins - 1)
    return CalibrationBins(
        counts=np.bincount(which, minlength=num_bins).astype(np.int64),
        confidence_sum=np.bincount(which, weights=confidence, minlength=num_bins),
        correct_sum=np.bincount(which, weights=correct, minlength=num_bins),
    )


def combine_bins(first: CalibrationBins, second: CalibrationBins) -> CalibrationBins:
    if first.num_bins != second.num_bins:
        raise InputError(f"cannot merge {first.num_bins} bins with {second.num_bins} bins")
    return CalibrationBins(
        counts=first.counts + second.counts,
        confidence_sum=first.confidence_sum + second.confidence_sum,
        correct_sum=first.correct_sum + second.correct_sum,
    )


def _gaps(bins: CalibrationBins) -> Tuple[np.ndarray, np.ndarray]:
    occupied = bins.counts > 0
    gaps = np.abs(bins.correct_sum[occupied] - bins.confidence_sum[occupied]) / bins.counts[occupied]
    return gaps, bins.counts[occupied]


def ece_from_bins(bins: CalibrationBins) -> float:
    gaps, counts = _gaps(bins)
    if counts.size == 0:
        return 0.0
    return float(100.0 * np.sum(counts * gaps) / counts.sum())


def ace_from_bins(bins: CalibrationBins) -> float:
    gaps, _ = _gaps(bins)
    if gaps.size == 0:
        return 0.0
    return float(100.0 * gaps.mean())


def calibration(
    probs: np.ndarray, labels: np.ndarray, idx: Sequence[int], num_bins: int = DEFAULT_NUM_BINS
) -> Tuple[float, float, CalibrationBins]:
    bins = calibration_bins(probs, labels, idx, num_bins)
    return ece_from_bins(bins), ace_from_bins(bins), bins


def prob_dispersion(probs: np.ndarray, idx: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-node p_max and population standard deviation of the probability row."""
    matrix = np.asarray(probs, dtype=np.float64)
    rows = matrix[np.asarray(idx, dtype=np.int64)]
    return rows.max(axis=1), rows.std(axis=1, ddof=0)


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation with average ranks for ties; 0 when either side is constant."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"spearman inputs differ in shape: {a.shape} vs {b.shape}")
    if a.size < 2:
        return 0.0
    ra = stats.rankdata(a, method="average")
    rb = stats.rankdata(b, method="average")
    if np.ptp(ra) == 0.0 or np.ptp(rb) == 0.0:
        return 0.0
    return float(np.corrcoef(ra, rb)[0, 1])


def training_distances(graph: Graph, train_idx: Sequence[int], nodes: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and nearest hop distance from each node to the training nodes it can reach.

    Both are NaN for nodes that reach no training node.
    """
    index = np.asarray(nodes, dtype=np.int64)
    lengths = shortest_path_lengths(graph, train_idx)
    if lengths.shape[0] == 0:
        empty = np.full(index.size, np.nan)
        return empty, empty.copy()
    block = lengths[:, index]
    reachable = np.isfinite(block)
    hits = reachable.sum(axis=0)
    totals = np.where(reachable, block, 0.0).sum(axis=0)
    nearest = np.where(reachable, block, np.inf).min(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(hits > 0, totals / hits, np.nan)
    return mean, np.where(hits > 0, nearest, np.nan)


def build_report(
    probs: np.ndarray,
    dataset_labels: np.ndarray,
    graph: Graph,
    split: Split,
    *,
    method: str,
    field: Optional[GaussianMessageField] = None,
    node_ids: Optional[Sequence[str]] = None,
    num_bins: int = DEFAULT_NUM_BINS,
    mc_samples: Optional[int] = None,
    mc_seed: Optional[int] = None,
) -> EvalReport:
    """Score the test nodes of ``split`` (plus its OOD nodes) from head-space probabilities."""
    labels = in_distribution_labels(dataset_labels, split.ood_class)
    test_idx = np.asarray(split.test_idx, dtype=np.int64)
    ood_idx = (
        np.asarray(split.ood_test_idx, dtype=np.int64)
        if split.ood_test_idx is not None
        else np.empty(0, dtype=np.int64)
    )
    acc = accuracy(probs, labels, test_idx)
    ece, ace, bins = calibration(probs, labels, test_idx, num_bins)

    nodes = np.concatenate([test_idx, ood_idx])
    p_max, std_dev = prob_dispersion(probs, nodes)
    if field is not None:
        scores = uncertainty_scores(field.rows(nodes))
        avg_std, entropy = scores.avg_std, scores.gaussian_entropy
    else:
        avg_std = entropy = np.full(nodes.size, np.nan)
    dist_mean, dist_nearest = training_distances(graph, split.train_idx, nodes)
    ids = list(node_ids) if node_ids is not None else [str(i) for i in range(graph.num_nodes)]

    per_node = pd.DataFrame(
        {
            "node_id": [ids[i] for i in nodes],
            "label": labels[nodes],
            "pred": np.argmax(np.asarray(probs)[nodes], axis=1),
            "p_max": p_max,
            "std_dev": std_dev,
            "avg_std": avg_std,
            "entropy": entropy,
            "degree": subgraph_degrees(graph, nodes).astype(np.int64),
            "dist_mean": dist_mean,
            "dist_nearest": dist_nearest,
            "is_ood": np.concatenate([np.zeros(test_idx.size, dtype=bool), np.ones(ood_idx.size, dtype=bool)]),
        },
        columns=list(PER_NODE_COLUMNS),
    )
    _LOG.info("%s seed %s: acc=%.4f ece=%.3f ace=%.3f on %s nodes.", method, split.seed, acc, ece, ace, test_idx.size)
    return EvalReport(
        method=method,
        seed=int(split.seed),
        acc=acc,
        ece=ece,
        ace=ace,
        bins=bins,
        per_node=per_node,
        mc_samples=mc_samples,
        mc_seed=mc_seed,
    )


def _histogram(values: np.ndarray) -> Dict[str, Any]:
    counts, edges = np.histogram(values, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    return {"edges": edges.tolist(), "counts": counts.astype(int).tolist()}


def ood_summary(report: EvalReport) -> Dict[str, Any]:
    """Mean p_max and std_dev for in-distribution vs OOD nodes, with p_max histograms."""
    frame = report.per_node
    mask = frame["is_ood"].to_numpy(dtype=bool)
    if not mask.any():
        raise InputError("report has no OOD nodes")
    summary: Dict[str, Any] = {"method": report.method, "seed": report.seed}
    for group, rows in (("in_dist", frame[~mask]), ("ood", frame[mask])):
        summary[group] = {
            "count": int(len(rows)),
            "mean_p_max": float(rows["p_max"].mean()),
            "mean_std_dev": float(rows["std_dev"].mean()),
            "p_max_histogram": _histogram(rows["p_max"].to_numpy()),
        }
    return summary


def degree_bucket(degrees: np.ndarray, cap: int = DEFAULT_DEGREE_BUCKET_CAP) -> np.ndarray:
    return np.minimum(np.asarray(degrees, dtype=np.int64), cap)


def topology_analysis(
    report: EvalReport,
    split: Split,
    *,
    bucket_cap: int = DEFAULT_DEGREE_BUCKET_CAP,
) -> TopologyAnalysis:
    """Degree-bucket uncertainty means and rank correlations over in-distribution test nodes.

    Degrees at or above ``bucket_cap`` share the last bucket. Distance
    correlations skip nodes that reach no training node.
    """
    frame = report.per_node[~report.per_node["is_ood"].to_numpy(dtype=bool)]
    if frame["avg_std"].isna().all():
        raise InputError(f"{report.method} report carries no variance scores to analyse")
    if bucket_cap < 1:
        raise InputError(f"degree bucket cap must be >= 1, got {bucket_cap}")
    degrees = frame["degree"].to_numpy(dtype=np.int64)
    buckets = (
        frame.assign(degree_bucket=degree_bucket(degrees, bucket_cap))
        .groupby("degree_bucket", sort=True)
        .agg(count=("node_id", "size"), mean_avg_std=("avg_std", "mean"), mean_entropy=("entropy", "mean"))
        .reset_index()
    )

    reachable = frame["dist_mean"].notna().to_numpy()
    near = frame[reachable]
    correlations = {
        "degree_vs_avg_std": spearman(degrees, frame["avg_std"]),
        "degree_vs_entropy": spearman(degrees, frame["entropy"]),
        "dist_mean_vs_avg_std": spearman(near["dist_mean"], near["avg_std"]),
        "dist_mean_vs_entropy": spearman(near["dist_mean"], near["entropy"]),
        "dist_nearest_vs_avg_std": spearman(near["dist_nearest"], near["avg_std"]),
        "dist_nearest_vs_entropy": spearman(near["dist_nearest"], near["entropy"]),
    }
    num_unreachable = int((~reachable).sum())
    if num_unreachable:
        _LOG.info("%s test nodes reach no training node (seed %s).", num_unreachable, split.seed)
    return TopologyAnalysis(degree_buckets=buckets, correlations=correlations, num_unreachable=num_unreachable)
