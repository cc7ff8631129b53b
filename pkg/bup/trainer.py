"""
Full-batch training for the two-channel model and the plain GCN baseline.

The backward pass is written out by hand. The conditional-variance step is a
fixed per-node scaling, so its reverse rule is the same scaling applied to the
incoming gradient.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import special
from tqdm import tqdm

from bup.bup_model import (
    SOFTPLUS_INV_ONE,
    BupParameters,
    GcnParameters,
    ModelParameters,
    conditional_variance_factor,
    forward_mean,
    forward_variance,
)
from bup.dataset_io import Dataset, Split, head_size, in_distribution_labels, validate_split
from bup.errors import InputError, TrainingError
from bup.graph_core import Graph, PropagationKernel, build_kernel
from bup.loss_grad import batch_cross_entropy, batch_loss_and_grad

_LOG = logging.getLogger("Trainer")

Gradients = Dict[str, np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 5e-4
    var_weight_decay: float = 0.0
    max_epochs: int = 400
    patience: int = 50
    early_stopping_delta: float = 0.0
    seed: int = 0
    lam: float = 1.0
    hidden_width: int = 16
    num_layers: int = 2
    var_input_width: Optional[int] = None
    dropout: float = 0.5
    mc_samples_eval: int = 256

    def __post_init__(self) -> None:
        for name in ("learning_rate", "adam_eps"):
            if not getattr(self, name) > 0.0:
                raise InputError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InputError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        for name in ("weight_decay", "var_weight_decay", "early_stopping_delta"):
            if not getattr(self, name) >= 0.0:
                raise InputError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.max_epochs < 1:
            raise InputError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 1 <= self.patience <= self.max_epochs:
            raise InputError(f"patience must lie in [1, max_epochs={self.max_epochs}], got {self.patience}")
        if not self.lam >= 1.0:
            raise InputError(f"lambda must be >= 1, got {self.lam}")
        if self.hidden_width < 1 or self.num_layers < 1:
            raise InputError("hidden_width and num_layers must be >= 1")
        if self.var_input_width is not None and self.var_input_width < 1:
            raise InputError(f"var_input_width must be >= 1, got {self.var_input_width}")
        if not 0.0 <= self.dropout < 1.0:
            raise InputError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.mc_samples_eval < 1:
            raise InputError(f"mc_samples_eval must be >= 1, got {self.mc_samples_eval}")

    @property
    def resolved_var_input_width(self) -> int:
        return self.var_input_width if self.var_input_width is not None else self.hidden_width

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class TrainTrace:
    train_nll: Tuple[float, ...]
    val_nll: Tuple[float, ...]
    val_acc: Tuple[float, ...]
    best_epoch: int
    wall_seconds: float = field(default=0.0, compare=False)

    def __post_init__(self) -> None:
        if not len(self.train_nll) == len(self.val_nll) == len(self.val_acc):
            raise InputError("trace columns must have equal length")
        if not 0 <= self.best_epoch <= len(self.train_nll):
            raise InputError(f"best_epoch {self.best_epoch} outside the {len(self.train_nll)} epochs run")

    @property
    def epochs_run(self) -> int:
        return len(self.train_nll)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "epoch": np.arange(1, self.epochs_run + 1, dtype=np.int64),
                "train_nll": np.asarray(self.train_nll, dtype=np.float64),
                "val_nll": np.asarray(self.val_nll, dtype=np.float64),
                "val_acc": np.asarray(self.val_acc, dtype=np.float64),
            }
        )


class Adam:
    """Adam with L2 weight decay added to the gradient of the decayed parameters."""

    def __init__(
        self,
        *,
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        decay: Optional[Dict[str, float]] = None,
    ) -> None:
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay = dict(decay or {})
        self.step_count = 0
        self._first: Dict[str, np.ndarray] = {}
        self._second: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Gradients) -> None:
        """Update ``params`` in place."""
        self.step_count += 1
        t = self.step_count
        for name, value in params.items():
            grad = grads[name]
            rate = self.decay.get(name, 0.0)
            if rate:
                grad = grad + rate * value
            first = self._first.setdefault(name, np.zeros_like(value))
            second = self._second.setdefault(name, np.zeros_like(value))
            first *= self.beta1
            first += (1.0 - self.beta1) * grad
            second *= self.beta2
            second += (1.0 - self.beta2) * grad * grad
            first_hat = first / (1.0 - self.beta1**t)
            second_hat = second / (1.0 - self.beta2**t)
            value -= self.learning_rate * first_hat / (np.sqrt(second_hat) + self.eps)


class EarlyStopping:
    def __init__(self, patience: int, delta: float = 0.0) -> None:
        self.patience = patience
        self.delta = delta
        self.best_value = math.inf
        self.best_epoch = 0
        self.best_params: Optional[ModelParameters] = None
        self.log = logging.getLogger(self.__class__.__name__)

    def update(self, epoch: int, value: float, params: ModelParameters) -> bool:
        """Record ``value`` for ``epoch``; True once patience is exhausted."""
        if value < self.best_value - self.delta:
            self.best_value = value
            self.best_epoch = epoch
            self.best_params = params.copy()
            return False
        if epoch - self.best_epoch >= self.patience:
            self.log.info("Stopping at epoch %s; best epoch %s (nll %.6f).", epoch, self.best_epoch, self.best_value)
            return True
        return False


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _layer_widths(in_features: int, num_classes: int, config: TrainConfig) -> List[int]:
    return [in_features, *([config.hidden_width] * (config.num_layers - 1)), num_classes]


def init_gcn_parameters(in_features: int, num_classes: int, config: TrainConfig, rng: np.random.Generator) -> GcnParameters:
    widths = _layer_widths(in_features, num_classes, config)
    return GcnParameters(mean_weights=[glorot_uniform(rng, a, b) for a, b in zip(widths[:-1], widths[1:])])


def init_bup_parameters(in_features: int, num_classes: int, config: TrainConfig, rng: np.random.Generator) -> BupParameters:
    widths = _layer_widths(in_features, num_classes, config)
    mean_weights = [glorot_uniform(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]
    var_in = config.resolved_var_input_width
    var_input_weight = glorot_uniform(rng, in_features, var_in)
    var_widths = [var_in, *widths[1:]]
    var_weights = [glorot_uniform(rng, a, b) for a, b in zip(var_widths[:-1], var_widths[1:])]
    return BupParameters(
        mean_weights=mean_weights,
        var_input_weight=var_input_weight,
        var_input_bias=np.full(var_in, SOFTPLUS_INV_ONE),
        var_weights=var_weights,
        lam=config.lam,
    )


def architecture_of(params: ModelParameters, config: TrainConfig) -> Dict[str, Any]:
    arch: Dict[str, Any] = {
        "in_features": params.in_features,
        "num_classes": params.num_classes,
        "num_layers": len(params.mean_weights),
        "hidden_width": config.hidden_width,
        "dropout": config.dropout,
    }
    if isinstance(params, BupParameters):
        arch["var_input_width"] = int(params.var_input_weight.shape[1])
    return arch


def _mean_backward(
    params: ModelParameters, kernel: PropagationKernel, cache, grad_out: np.ndarray, grads: Gradients
) -> None:
    grad = grad_out
    for pos in range(len(params.mean_weights) - 1, -1, -1):
        spread = np.asarray(kernel.matrix @ grad)
        grads[f"mean_weights.{pos}"] = cache.inputs[pos].T @ spread
        if pos == 0:
            break
        grad_input = spread @ params.mean_weights[pos].T
        mask = cache.dropout_masks[pos]
        if mask is not None:
            grad_input = grad_input * mask
        grad = grad_input * (cache.pre_activations[pos - 1] > 0.0)


def _variance_backward(params: BupParameters, cache, grad_out: np.ndarray, grads: Gradients) -> None:
    grad = grad_out
    for pos in range(len(params.var_weights) - 1, -1, -1):
        grad_u = grad * special.expit(cache.pre_activations[pos])
        grads[f"var_weights.{pos}"] = cache.conditioned[pos].T @ grad_u
        grad = (grad_u @ params.var_weights[pos].T) * cache.factor[:, None]
    grad_p = grad * special.expit(cache.input_pre_activation)
    grads["var_input_weight"] = cache.features.T @ grad_p
    grads["var_input_bias"] = grad_p.sum(axis=0)


def _check_gradients(grads: Gradients, epoch: Optional[int]) -> None:
    for name, value in grads.items():
        if not np.all(np.isfinite(value)):
            raise TrainingError("non-finite gradient", epoch=epoch, weight=name)


def bup_objective(
    params: BupParameters,
    graph: Graph,
    kernel: PropagationKernel,
    X: np.ndarray,
    labels: np.ndarray,
    train_idx: Sequence[int],
    *,
    dropout_masks: Optional[Sequence[Optional[np.ndarray]]] = None,
    factor: Optional[np.ndarray] = None,
    epoch: Optional[int] = None,
) -> Tuple[float, Gradients]:
    """Mean diagonal-approximation NLL over ``train_idx`` and its exact gradients."""
    idx = np.asarray(train_idx, dtype=np.int64)
    mean_cache = forward_mean(params, kernel, X, dropout_masks)
    var_cache = forward_variance(params, graph, X, factor=factor)
    grad_m = np.zeros_like(mean_cache.output)
    grad_v = np.zeros_like(var_cache.output)
    loss = 0.0
    if idx.size:
        nll, node_grad_m, node_grad_v = batch_loss_and_grad(
            mean_cache.output[idx], var_cache.output[idx], np.asarray(labels)[idx]
        )
        loss = float(nll.mean())
        grad_m[idx] = node_grad_m / idx.size
        grad_v[idx] = node_grad_v / idx.size

    grads: Gradients = {}
    _mean_backward(params, kernel, mean_cache, grad_m, grads)
    _variance_backward(params, var_cache, grad_v, grads)
    ordered = {name: grads[name] for name in params.named_arrays()}
    _check_gradients(ordered, epoch)
    return loss, ordered


def backward(
    params: BupParameters,
    graph: Graph,
    kernel: PropagationKernel,
    X: np.ndarray,
    labels: np.ndarray,
    train_idx: Sequence[int],
    **kwargs: Any,
) -> Gradients:
    return bup_objective(params, graph, kernel, X, labels, train_idx, **kwargs)[1]


def gcn_objective(
    params: GcnParameters,
    kernel: PropagationKernel,
    X: np.ndarray,
    labels: np.ndarray,
    train_idx: Sequence[int],
    *,
    dropout_masks: Optional[Sequence[Optional[np.ndarray]]] = None,
    epoch: Optional[int] = None,
) -> Tuple[float, Gradients]:
    idx = np.asarray(train_idx, dtype=np.int64)
    cache = forward_mean(params, kernel, X, dropout_masks)
    grad_out = np.zeros_like(cache.output)
    loss = 0.0
    if idx.size:
        node_loss, node_grad = batch_cross_entropy(cache.output[idx], np.asarray(labels)[idx])
        loss = float(node_loss.mean())
        grad_out[idx] = node_grad / idx.size
    grads: Gradients = {}
    _mean_backward(params, kernel, cache, grad_out, grads)
    ordered = {name: grads[name] for name in params.named_arrays()}
    _check_gradients(ordered, epoch)
    return loss, ordered


def _decay_rates(params: ModelParameters, config: TrainConfig) -> Dict[str, float]:
    rates: Dict[str, float] = {}
    for name in params.named_arrays():
        if name.startswith("mean_weights."):
            rates[name] = config.weight_decay
        elif name != "var_input_bias":
            rates[name] = config.var_weight_decay
    return rates


class _FitLoop:
    """Shared epoch loop; subclasses supply the objective and the validation score."""

    kind = ""

    def __init__(self, config: TrainConfig, dataset: Dataset, split: Split, *, progress: bool) -> None:
        validate_split(dataset, split)
        self.config = config
        self.dataset = dataset
        self.split = split
        self.progress = progress
        self.kernel = build_kernel(dataset.graph)
        self.labels = in_distribution_labels(dataset.labels, split.ood_class)
        self.num_classes = head_size(dataset, split)
        seeds = np.random.SeedSequence(config.seed).spawn(2)
        self.init_rng = np.random.Generator(np.random.PCG64(seeds[0]))
        self.dropout_rng = np.random.Generator(np.random.PCG64(seeds[1]))
        self.log = logging.getLogger(self.__class__.__name__)

    def init_params(self) -> ModelParameters:
        raise NotImplementedError

    def objective(self, params, masks, epoch: Optional[int]) -> Tuple[float, Gradients]:
        raise NotImplementedError

    def outputs(self, params) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        raise NotImplementedError

    def score(self, params, idx: np.ndarray) -> Tuple[float, float]:
        """(nll, accuracy) on ``idx`` with dropout off; accuracy uses argmax of the means."""
        if idx.size == 0:
            return math.nan, math.nan
        means, variances = self.outputs(params)
        targets = self.labels[idx]
        if variances is None:
            nll, _ = batch_cross_entropy(means[idx], targets)
        else:
            nll, _, _ = batch_loss_and_grad(means[idx], variances[idx], targets)
        acc = float(np.mean(np.argmax(means[idx], axis=1) == targets))
        return float(nll.mean()), acc

    def dropout_masks(self, params: ModelParameters) -> Optional[List[np.ndarray]]:
        rate = self.config.dropout
        if rate == 0.0:
            return None
        keep = 1.0 - rate
        rows = self.dataset.num_nodes
        return [
            (self.dropout_rng.random((rows, weight.shape[0])) < keep) / keep
            for weight in params.mean_weights
        ]

    def run(self) -> Tuple[ModelParameters, TrainTrace]:
        config = self.config
        params = self.init_params()
        named = params.named_arrays()
        optimizer = Adam(
            learning_rate=config.learning_rate,
            beta1=config.adam_beta1,
            beta2=config.adam_beta2,
            eps=config.adam_eps,
            decay=_decay_rates(params, config),
        )
        stopper = EarlyStopping(config.patience, config.early_stopping_delta)
        monitor_val = self.split.val_idx.size > 0
        if not monitor_val:
            self.log.warning("Validation set is empty; early stopping monitors the training NLL.")

        train_nll: List[float] = []
        val_nll: List[float] = []
        val_acc: List[float] = []
        started = time.perf_counter()
        epochs = tqdm(
            range(1, config.max_epochs + 1),
            desc=f"Training {self.kind} seed {config.seed}",
            unit="epoch",
            disable=not self.progress,
        )
        for epoch in epochs:
            loss, grads = self.objective(params, self.dropout_masks(params), epoch)
            if not math.isfinite(loss):
                raise TrainingError("training NLL diverged", epoch=epoch)
            optimizer.step(named, grads)

            score_idx = self.split.val_idx if monitor_val else self.split.train_idx
            nll, acc = self.score(params, score_idx)
            train_nll.append(loss)
            val_nll.append(nll if monitor_val else math.nan)
            val_acc.append(acc if monitor_val else math.nan)
            self.log.debug("epoch=%s train_nll=%.6f val_nll=%.6f val_acc=%.4f", epoch, loss, nll, acc)
            if not math.isfinite(nll):
                raise TrainingError("validation NLL diverged", epoch=epoch)
            if stopper.update(epoch, nll, params):
                break
        epochs.close()

        best = stopper.best_params if stopper.best_params is not None else params
        trace = TrainTrace(
            train_nll=tuple(train_nll),
            val_nll=tuple(val_nll),
            val_acc=tuple(val_acc),
            best_epoch=stopper.best_epoch,
            wall_seconds=time.perf_counter() - started,
        )
        self.log.info(
            "Trained %s on %s (seed %s): %s epochs, best epoch %s.",
            self.kind,
            self.dataset.name,
            config.seed,
            trace.epochs_run,
            trace.best_epoch,
        )
        return best, trace


class _BupFit(_FitLoop):
    kind = "bup"

    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.factor = conditional_variance_factor(self.dataset.graph, self.config.lam)

    def init_params(self) -> BupParameters:
        return init_bup_parameters(self.dataset.num_features, self.num_classes, self.config, self.init_rng)

    def objective(self, params, masks, epoch):
        return bup_objective(
            params,
            self.dataset.graph,
            self.kernel,
            self.dataset.features,
            self.labels,
            self.split.train_idx,
            dropout_masks=masks,
            factor=self.factor,
            epoch=epoch,
        )

    def outputs(self, params):
        means = forward_mean(params, self.kernel, self.dataset.features).output
        variances = forward_variance(params, self.dataset.graph, self.dataset.features, factor=self.factor).output
        return means, variances


class _GcnFit(_FitLoop):
    kind = "gcn"

    def init_params(self) -> GcnParameters:
        return init_gcn_parameters(self.dataset.num_features, self.num_classes, self.config, self.init_rng)

    def objective(self, params, masks, epoch):
        return gcn_objective(
            params, self.kernel, self.dataset.features, self.labels, self.split.train_idx, dropout_masks=masks, epoch=epoch
        )

    def outputs(self, params):
        return forward_mean(params, self.kernel, self.dataset.features).output, None


def train(config: TrainConfig, dataset: Dataset, split: Split, *, progress: bool = False) -> Tuple[BupParameters, TrainTrace]:
    return _BupFit(config, dataset, split, progress=progress).run()


def train_gcn_baseline(
    config: TrainConfig, dataset: Dataset, split: Split, *, progress: bool = False
) -> Tuple[GcnParameters, TrainTrace]:
    return _GcnFit(config, dataset, split, progress=progress).run()
