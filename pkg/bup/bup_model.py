"""
Two-channel message passing: GCN means plus conditional-Gaussian variances.

Mean channel:      theta^(l+1) = a(K theta^(l) W^(l+1)), ReLU hidden, linear head.
Variance channel:  var^(0)     = softplus(X W_in + b)
                   var^(l+1)   = softplus(cvar^(l) W_var^(l+1))
where cvar is the conditional variance of a node given its neighbours under
the block covariance [[var(i), C], [C^T, B]], B = diag(var(j)),
cov(i, j) = cor(i, j) sqrt(var(i) var(j)), cor(i, j) = 1 / sqrt(lambda d_i d_j).
Because B is diagonal, C B^-1 C^T = var(i) sum_j cor(i, j)^2, which gives the
per-node factor 1 - (1 / (lambda d_i)) sum_{j in N(i)} 1 / d_j.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from scipy import special

from bup.artifacts import write_json_atomic
from bup.errors import CheckpointError, InputError, InvariantViolation
from bup.graph_core import Graph, PropagationKernel, adjacency_matrix, propagate

_LOG = logging.getLogger("BupModel")

CHECKPOINT_VERSION = 1
VARIANCE_FLOOR = 1e-12
SOFTPLUS_INV_ONE = math.log(math.e - 1.0)
SCHUR_RTOL = 1e-10
DEFAULT_MC_SAMPLES = 256


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass(frozen=True, eq=False)
class GaussianMessageField:
    """Per-node message law N(mean_i, diag(variance_i))."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self) -> None:
        if self.mean.shape != self.variance.shape:
            raise InputError(f"mean shape {self.mean.shape} != variance shape {self.variance.shape}")
        if not np.all(np.isfinite(self.mean)):
            raise InvariantViolation("message means must be finite")
        if not np.all(self.variance > 0.0):
            raise InvariantViolation("message variances must be strictly positive")

    @property
    def num_nodes(self) -> int:
        return int(self.mean.shape[0])

    def rows(self, idx: Sequence[int]) -> "GaussianMessageField":
        index = np.asarray(idx, dtype=np.int64)
        return GaussianMessageField(mean=self.mean[index], variance=self.variance[index])


@dataclass(frozen=True, eq=False)
class UncertaintyScore:
    avg_std: np.ndarray
    gaussian_entropy: np.ndarray


def _check_chain(matrices: Sequence[np.ndarray], label: str) -> None:
    for pos, matrix in enumerate(matrices):
        if matrix.ndim != 2:
            raise InputError(f"{label}.{pos} must be 2-D, got shape {matrix.shape}")
    for pos in range(len(matrices) - 1):
        if matrices[pos].shape[1] != matrices[pos + 1].shape[0]:
            raise InputError(
                f"{label}.{pos} shape {matrices[pos].shape} does not chain into "
                f"{label}.{pos + 1} shape {matrices[pos + 1].shape}"
            )


@dataclass(eq=False)
class GcnParameters:
    """Mean channel only; the plain GCN baseline."""

    mean_weights: List[np.ndarray]

    kind = "gcn"

    def __post_init__(self) -> None:
        if not self.mean_weights:
            raise InputError("at least one mean layer is required")
        _check_chain(self.mean_weights, "mean_weights")

    @property
    def in_features(self) -> int:
        return int(self.mean_weights[0].shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.mean_weights[-1].shape[1])

    def named_arrays(self) -> Dict[str, np.ndarray]:
        return {f"mean_weights.{pos}": w for pos, w in enumerate(self.mean_weights)}

    def copy(self) -> "GcnParameters":
        return GcnParameters(mean_weights=[w.copy() for w in self.mean_weights])


@dataclass(eq=False)
class BupParameters:
    mean_weights: List[np.ndarray]
    var_input_weight: np.ndarray
    var_input_bias: np.ndarray
    var_weights: List[np.ndarray]
    lam: float = 1.0

    kind = "bup"

    def __post_init__(self) -> None:
        if not self.mean_weights or not self.var_weights:
            raise InputError("at least one mean layer and one variance layer are required")
        if len(self.mean_weights) != len(self.var_weights):
            raise InputError(
                f"{len(self.mean_weights)} mean layers but {len(self.var_weights)} variance layers"
            )
        _check_chain(self.mean_weights, "mean_weights")
        _check_chain([self.var_input_weight, *self.var_weights], "var_weights")
        if self.var_input_weight.shape[0] != self.mean_weights[0].shape[0]:
            raise InputError(
                f"var_input_weight expects {self.var_input_weight.shape[0]} features, "
                f"mean channel expects {self.mean_weights[0].shape[0]}"
            )
        if self.var_input_bias.shape != (self.var_input_weight.shape[1],):
            raise InputError(
                f"var_input_bias shape {self.var_input_bias.shape} does not match "
                f"var_input_weight width {self.var_input_weight.shape[1]}"
            )
        for pos, (w_mean, w_var) in enumerate(zip(self.mean_weights, self.var_weights)):
            if w_mean.shape[1] != w_var.shape[1]:
                raise InputError(
                    f"layer {pos}: mean width {w_mean.shape[1]} != variance width {w_var.shape[1]}"
                )
        if not self.lam >= 1.0:
            raise InputError(f"lambda must be >= 1 for positive conditional variance, got {self.lam}")

    @property
    def in_features(self) -> int:
        return int(self.mean_weights[0].shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.mean_weights[-1].shape[1])

    def named_arrays(self) -> Dict[str, np.ndarray]:
        arrays: Dict[str, np.ndarray] = {f"mean_weights.{pos}": w for pos, w in enumerate(self.mean_weights)}
        arrays["var_input_weight"] = self.var_input_weight
        arrays["var_input_bias"] = self.var_input_bias
        arrays.update({f"var_weights.{pos}": w for pos, w in enumerate(self.var_weights)})
        return arrays

    def copy(self) -> "BupParameters":
        return BupParameters(
            mean_weights=[w.copy() for w in self.mean_weights],
            var_input_weight=self.var_input_weight.copy(),
            var_input_bias=self.var_input_bias.copy(),
            var_weights=[w.copy() for w in self.var_weights],
            lam=self.lam,
        )


ModelParameters = Union[BupParameters, GcnParameters]


@dataclass(frozen=True, eq=False)
class MeanForward:
    """Cached mean-channel pass. ``inputs[l]`` is what layer l multiplied (after dropout)."""

    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    dropout_masks: List[Optional[np.ndarray]]

    @property
    def output(self) -> np.ndarray:
        return self.pre_activations[-1]

    @property
    def layer_means(self) -> List[np.ndarray]:
        hidden = [relu(z) for z in self.pre_activations[:-1]]
        return [*hidden, self.output]


@dataclass(frozen=True, eq=False)
class VarianceForward:
    features: np.ndarray
    input_pre_activation: np.ndarray
    layer_inputs: List[np.ndarray]
    conditioned: List[np.ndarray]
    pre_activations: List[np.ndarray]
    outputs: List[np.ndarray]
    factor: np.ndarray = field(repr=False)

    @property
    def output(self) -> np.ndarray:
        return self.outputs[-1]


def forward_mean(
    params: ModelParameters,
    kernel: PropagationKernel,
    X: np.ndarray,
    dropout_masks: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> MeanForward:
    """``dropout_masks[l]`` is an already-scaled multiplicative mask for layer l's input."""
    features = np.asarray(X, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != kernel.num_nodes:
        raise InputError(f"features shape {features.shape} does not match {kernel.num_nodes} nodes")
    if features.shape[1] != params.in_features:
        raise InputError(f"features have {features.shape[1]} columns, weights expect {params.in_features}")
    layers = len(params.mean_weights)
    masks: List[Optional[np.ndarray]] = list(dropout_masks) if dropout_masks is not None else [None] * layers
    if len(masks) != layers:
        raise InputError(f"expected {layers} dropout masks, got {len(masks)}")

    inputs: List[np.ndarray] = []
    pre_activations: List[np.ndarray] = []
    hidden = features
    for pos, weight in enumerate(params.mean_weights):
        layer_input = hidden * masks[pos] if masks[pos] is not None else hidden
        inputs.append(layer_input)
        z = propagate(kernel, layer_input @ weight)
        pre_activations.append(z)
        hidden = relu(z)
    return MeanForward(inputs=inputs, pre_activations=pre_activations, dropout_masks=masks)


def conditional_variance_factor(g: Graph, lam: float) -> np.ndarray:
    """1 - (1 / (lambda d_i)) sum_{j in N(i)} 1 / d_j for every node."""
    if not lam >= 1.0:
        raise InputError(f"lambda must be >= 1, got {lam}")
    inv_degree = 1.0 / g.degree_hat
    neighbor_sum = np.asarray(adjacency_matrix(g) @ inv_degree)
    return 1.0 - neighbor_sum * inv_degree / lam


def neighbor_covariance_block(
    var_node: float,
    var_neighbors: Sequence[float],
    degree_node: float,
    degree_neighbors: Sequence[float],
    lam: float,
) -> np.ndarray:
    """Dense covariance of a node and its neighbours; neighbour-neighbour terms are zero."""
    var_neighbors = np.asarray(var_neighbors, dtype=np.float64)
    degree_neighbors = np.asarray(degree_neighbors, dtype=np.float64)
    size = var_neighbors.size + 1
    block = np.zeros((size, size), dtype=np.float64)
    block[0, 0] = var_node
    block[np.arange(1, size), np.arange(1, size)] = var_neighbors
    cor = 1.0 / np.sqrt(lam * degree_node * degree_neighbors)
    cov = cor * np.sqrt(var_node * var_neighbors)
    block[0, 1:] = cov
    block[1:, 0] = cov
    return block


def schur_conditional_variance(block: np.ndarray) -> float:
    """var(i) - C B^-1 C^T read straight off the block matrix."""
    if block.shape[0] == 1:
        return float(block[0, 0])
    c_row = block[0, 1:]
    solved = np.linalg.solve(block[1:, 1:], block[1:, 0])
    return float(block[0, 0] - c_row @ solved)


def _schur_path(var: np.ndarray, g: Graph, lam: float) -> np.ndarray:
    result = np.empty_like(var)
    d = g.degree_hat
    for node in range(g.num_nodes):
        neighbors = list(g.neighbor_lists[node])
        for dim in range(var.shape[1]):
            block = neighbor_covariance_block(var[node, dim], var[neighbors, dim], d[node], d[neighbors], lam)
            result[node, dim] = schur_conditional_variance(block)
    return result


def conditional_variance(
    var: np.ndarray,
    g: Graph,
    lam: float,
    *,
    method: str = "closed_form",
    factor: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Condition each node's variance on its neighbours.

    ``method="schur"`` builds every block matrix densely and takes the Schur
    complement; it is slow and exists to cross-check the closed form.
    """
    values = np.asarray(var, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != g.num_nodes:
        raise InputError(f"variance shape {values.shape} does not match {g.num_nodes} nodes")
    if not np.all(values > 0.0):
        raise InvariantViolation("conditional_variance needs strictly positive input variances")
    if not lam >= 1.0:
        raise InputError(f"lambda must be >= 1, got {lam}")
    if method == "schur":
        return _schur_path(values, g, lam)
    if method != "closed_form":
        raise InputError(f"unknown conditional variance method {method!r}")
    scale = conditional_variance_factor(g, lam) if factor is None else factor
    return values * scale[:, None]


def forward_variance(
    params: BupParameters,
    g: Graph,
    X: np.ndarray,
    *,
    factor: Optional[np.ndarray] = None,
    check_schur: bool = False,
) -> VarianceForward:
    features = np.asarray(X, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != g.num_nodes:
        raise InputError(f"features shape {features.shape} does not match {g.num_nodes} nodes")
    if features.shape[1] != params.var_input_weight.shape[0]:
        raise InputError(
            f"features have {features.shape[1]} columns, var_input_weight expects {params.var_input_weight.shape[0]}"
        )
    scale = conditional_variance_factor(g, params.lam) if factor is None else factor

    input_pre = features @ params.var_input_weight + params.var_input_bias
    current = softplus(input_pre) + VARIANCE_FLOOR
    layer_inputs: List[np.ndarray] = []
    conditioned: List[np.ndarray] = []
    pre_activations: List[np.ndarray] = []
    outputs: List[np.ndarray] = []
    for weight in params.var_weights:
        layer_inputs.append(current)
        cvar = conditional_variance(current, g, params.lam, factor=scale)
        if check_schur:
            dense = conditional_variance(current, g, params.lam, method="schur")
            rel = np.max(np.abs(dense - cvar) / np.abs(dense))
            if rel > SCHUR_RTOL:
                raise InvariantViolation(f"closed-form and Schur conditional variances disagree (rel={rel:.3e})")
        conditioned.append(cvar)
        u = cvar @ weight
        pre_activations.append(u)
        current = softplus(u) + VARIANCE_FLOOR
        outputs.append(current)
    return VarianceForward(
        features=features,
        input_pre_activation=input_pre,
        layer_inputs=layer_inputs,
        conditioned=conditioned,
        pre_activations=pre_activations,
        outputs=outputs,
        factor=scale,
    )


def message_field(
    params: BupParameters,
    g: Graph,
    kernel: PropagationKernel,
    X: np.ndarray,
    *,
    check_schur: bool = False,
) -> GaussianMessageField:
    mean = forward_mean(params, kernel, X).output
    variance = forward_variance(params, g, X, check_schur=check_schur).output
    return GaussianMessageField(mean=mean, variance=variance)


def predict_probability(field: GaussianMessageField, num_samples: int = DEFAULT_MC_SAMPLES, seed: int = 0) -> np.ndarray:
    """Monte Carlo estimate of E[softmax(theta)] under theta ~ N(m, diag(var))."""
    if num_samples < 1:
        raise InputError(f"num_samples must be >= 1, got {num_samples}")
    rng = np.random.Generator(np.random.PCG64(seed))
    std = np.sqrt(field.variance)
    total = np.zeros_like(field.mean)
    for _ in range(num_samples):
        theta = field.mean + std * rng.standard_normal(field.mean.shape)
        total += special.softmax(theta, axis=1)
    probs = total / num_samples
    return probs / probs.sum(axis=1, keepdims=True)


def softmax_probability(logits: np.ndarray) -> np.ndarray:
    return special.softmax(np.asarray(logits, dtype=np.float64), axis=1)


def uncertainty_scores(field: GaussianMessageField) -> UncertaintyScore:
    std = np.sqrt(field.variance)
    entropy = 0.5 * np.sum(np.log(2.0 * math.pi * math.e * field.variance), axis=1)
    return UncertaintyScore(avg_std=std.mean(axis=1), gaussian_entropy=entropy)


@dataclass(frozen=True, eq=False)
class Checkpoint:
    params: ModelParameters
    architecture: Dict[str, Any]
    normalize_features: bool
    metadata: Dict[str, Any]
    provenance: Dict[str, Any] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.params.kind

    def check_compatible(self, num_features: int, num_classes: int) -> None:
        if self.params.in_features != num_features:
            raise CheckpointError(
                f"checkpoint input layer has shape {self.params.mean_weights[0].shape} "
                f"but the dataset has {num_features} features"
            )
        if self.params.num_classes != num_classes:
            raise CheckpointError(
                f"checkpoint output layer has shape {self.params.mean_weights[-1].shape} "
                f"but the split needs {num_classes} classes"
            )


def save_checkpoint(
    path: Path,
    params: ModelParameters,
    *,
    architecture: Mapping[str, Any],
    normalize_features: bool,
    metadata: Optional[Mapping[str, Any]] = None,
    provenance: Optional[Mapping[str, Any]] = None,
) -> Path:
    weights = {
        name: {"shape": list(array.shape), "data": array.ravel().tolist()}
        for name, array in params.named_arrays().items()
    }
    document: Dict[str, Any] = {
        "version": CHECKPOINT_VERSION,
        "kind": params.kind,
        "architecture": dict(architecture),
        "normalize_features": bool(normalize_features),
        "weights": weights,
        "metadata": dict(metadata or {}),
    }
    if isinstance(params, BupParameters):
        document["lambda"] = params.lam if math.isfinite(params.lam) else "inf"
    if provenance is not None:
        document["provenance"] = dict(provenance)
    return write_json_atomic(Path(path), document, indent=None)


def _array_from(entry: Mapping[str, Any], name: str) -> np.ndarray:
    try:
        shape = tuple(int(v) for v in entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"weight {name} is malformed: {exc}") from exc
    if data.size != int(np.prod(shape)):
        raise CheckpointError(f"weight {name} has {data.size} values for shape {shape}")
    return data.reshape(shape)


def _ordered(weights: Mapping[str, np.ndarray], prefix: str) -> List[np.ndarray]:
    keys = sorted((k for k in weights if k.startswith(prefix + ".")), key=lambda k: int(k.rsplit(".", 1)[1]))
    return [weights[k] for k in keys]


def load_checkpoint(path: Path) -> Checkpoint:
    with Path(path).open("r", encoding="utf-8") as handle:
        try:
            document = json.load(handle)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path} is not valid JSON: {exc}") from exc
    version = document.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has checkpoint version {version!r}, expected {CHECKPOINT_VERSION}")
    raw_weights = document.get("weights")
    if not isinstance(raw_weights, Mapping):
        raise CheckpointError(f"{path} has no weights section")
    weights = {name: _array_from(entry, name) for name, entry in raw_weights.items()}
    kind = document.get("kind")
    if kind == "gcn":
        params: ModelParameters = GcnParameters(mean_weights=_ordered(weights, "mean_weights"))
    elif kind == "bup":
        lam_raw = document.get("lambda", 1.0)
        try:
            params = BupParameters(
                mean_weights=_ordered(weights, "mean_weights"),
                var_input_weight=weights["var_input_weight"],
                var_input_bias=weights["var_input_bias"],
                var_weights=_ordered(weights, "var_weights"),
                lam=math.inf if lam_raw == "inf" else float(lam_raw),
            )
        except KeyError as exc:
            raise CheckpointError(f"{path} is missing weight {exc}") from exc
    else:
        raise CheckpointError(f"{path} has unknown model kind {kind!r}")
    return Checkpoint(
        params=params,
        architecture=dict(document.get("architecture") or {}),
        normalize_features=bool(document.get("normalize_features", True)),
        metadata=dict(document.get("metadata") or {}),
        provenance=dict(document.get("provenance") or {}),
    )
