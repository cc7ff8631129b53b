"""
Experiment configuration: built-in defaults, a JSON document, environment and CLI overrides.

Resolution order (later wins): defaults, config file (``--config`` or
``BUP_CONFIG``), environment (``BUP_DATASET_DIR``, ``BUP_OUTPUT_DIR``,
``BUP_LOG_LEVEL``, ``BUP_PROGRESS``), CLI flags. The resolved document is
hashed so every artifact can name the exact configuration it came from.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

from dotenv import load_dotenv

from bup.errors import ConfigError, InputError
from bup.trainer import TrainConfig

ConfigSection = str

CONFIG_SECTIONS: Tuple[ConfigSection, ...] = ("dataset", "split", "train", "model", "eval", "output", "experiment")
BENCHMARK_PER_CLASS = (5, 10, 15, 20)
MODES = ("normal", "ood")
METHODS = ("bup", "gcn")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")

_NUMBER = (int, float)
_OPTIONAL_INT = (int, type(None))
_OPTIONAL_STR = (str, type(None))

DEFAULT_CONFIG: Dict[ConfigSection, Dict[str, Any]] = {
    "dataset": {"name": "cora", "dir": "data", "content_file": None, "cites_file": None},
    "split": {"per_class": 20, "val_size": 200, "test_size": 2000},
    "train": {
        "learning_rate": 0.01,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "weight_decay": 5e-4,
        "var_weight_decay": 0.0,
        "max_epochs": 400,
        "patience": 50,
        "early_stopping_delta": 0.0,
        "lambda": 1.0,
        "hidden_width": 16,
        "num_layers": 2,
        "var_input_width": None,
        "dropout": 0.5,
        "mc_samples_eval": 256,
    },
    "model": {"normalize_features": True, "check_schur": False},
    "eval": {"num_bins": 10, "degree_bucket_cap": 10},
    "output": {"dir": "runs", "log_level": "INFO", "progress": True},
    "experiment": {"seeds": list(range(10)), "mode": "normal", "ood_class": None, "methods": list(METHODS)},
}

SECTION_TYPES: Dict[ConfigSection, Dict[str, Tuple[type, ...]]] = {
    "dataset": {"name": (str,), "dir": (str,), "content_file": _OPTIONAL_STR, "cites_file": _OPTIONAL_STR},
    "split": {"per_class": (int,), "val_size": (int,), "test_size": (int,)},
    "train": {
        "learning_rate": _NUMBER,
        "adam_beta1": _NUMBER,
        "adam_beta2": _NUMBER,
        "adam_eps": _NUMBER,
        "weight_decay": _NUMBER,
        "var_weight_decay": _NUMBER,
        "max_epochs": (int,),
        "patience": (int,),
        "early_stopping_delta": _NUMBER,
        "lambda": _NUMBER + (str,),
        "hidden_width": (int,),
        "num_layers": (int,),
        "var_input_width": _OPTIONAL_INT,
        "dropout": _NUMBER,
        "mc_samples_eval": (int,),
    },
    "model": {"normalize_features": (bool,), "check_schur": (bool,)},
    "eval": {"num_bins": (int,), "degree_bucket_cap": (int,)},
    "output": {"dir": (str,), "log_level": (str,), "progress": (bool,)},
    "experiment": {"seeds": (list,), "mode": (str,), "ood_class": _OPTIONAL_INT, "methods": (list,)},
}

ENV_OVERRIDES: Tuple[Tuple[str, ConfigSection, str], ...] = (
    ("BUP_DATASET_DIR", "dataset", "dir"),
    ("BUP_OUTPUT_DIR", "output", "dir"),
    ("BUP_LOG_LEVEL", "output", "log_level"),
    ("BUP_PROGRESS", "output", "progress"),
)


def compute_checksum(payload: Any) -> str:
    serialized = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(serialized.encode("utf-8")).hexdigest()


def default_document() -> Dict[ConfigSection, Dict[str, Any]]:
    return copy.deepcopy(DEFAULT_CONFIG)


def _type_ok(value: Any, allowed: Tuple[type, ...]) -> bool:
    # bool is an int subclass; only accept it where bool is declared
    if isinstance(value, bool) and bool not in allowed:
        return False
    return isinstance(value, allowed)


def validate_section(section: ConfigSection, payload: Any) -> None:
    if section not in SECTION_TYPES:
        raise ConfigError(f"unknown config section {section!r}")
    if not isinstance(payload, Mapping):
        raise ConfigError(f"config section {section!r} must be an object")
    expected = SECTION_TYPES[section]
    for key, value in payload.items():
        if key not in expected:
            raise ConfigError(f"unknown config key {section}.{key}")
        if not _type_ok(value, expected[key]):
            names = "/".join(t.__name__ for t in expected[key])
            raise ConfigError(f"{section}.{key} must be {names}, got {type(value).__name__}")


def validate_document(document: Any) -> None:
    if not isinstance(document, Mapping):
        raise ConfigError("config document must be a JSON object")
    for section, payload in document.items():
        validate_section(section, payload)


def merge_documents(base: Mapping[str, Mapping[str, Any]], override: Mapping[str, Mapping[str, Any]]) -> Dict[str, Dict[str, Any]]:
    merged = {section: dict(values) for section, values in base.items()}
    for section, values in override.items():
        merged.setdefault(section, {}).update(values)
    return merged


def load_document(path: Path | str) -> Dict[str, Any]:
    try:
        with Path(path).open("r", encoding="utf-8") as handle:
            document = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    validate_document(document)
    return document


def _parse_bool(name: str, raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off", ""}:
        return False
    raise ConfigError(f"{name} must be a boolean flag, got {raw!r}")


def env_document(environ: Mapping[str, str]) -> Dict[str, Dict[str, Any]]:
    document: Dict[str, Dict[str, Any]] = {}
    for name, section, key in ENV_OVERRIDES:
        raw = environ.get(name)
        if raw is None or raw == "":
            continue
        value: Any = _parse_bool(name, raw) if key == "progress" else raw
        document.setdefault(section, {})[key] = value
    return document


def _parse_lambda(value: Any) -> float:
    if isinstance(value, str):
        if value.strip().lower() in {"inf", "infinity"}:
            return float("inf")
        raise ConfigError(f"train.lambda must be a number or 'inf', got {value!r}")
    return float(value)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_name: str
    content_path: Path
    cites_path: Path
    per_class: int
    val_size: int
    test_size: int
    seeds: Tuple[int, ...]
    mode: str
    ood_class: Optional[int]
    methods: Tuple[str, ...]
    train: TrainConfig
    normalize_features: bool
    check_schur: bool
    num_bins: int
    degree_bucket_cap: int
    output_dir: Path
    log_level: str
    progress: bool
    document: Dict[str, Dict[str, Any]] = field(repr=False, compare=False)
    checksum: str = ""

    @property
    def is_ood(self) -> bool:
        return self.mode == "ood"

    def train_config(self, seed: int) -> TrainConfig:
        return self.train.with_seed(seed)

    def provenance(self, seed: Optional[int] = None, **extra: Any) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"config": self.document, "config_checksum": self.checksum}
        if seed is not None:
            payload["seed"] = int(seed)
        payload.update(extra)
        return payload


def build_config(document: Mapping[str, Mapping[str, Any]]) -> ExperimentConfig:
    """Turn a fully merged, validated document into an ExperimentConfig."""
    validate_document(document)
    dataset = document["dataset"]
    split = document["split"]
    train = document["train"]
    experiment = document["experiment"]
    output = document["output"]

    dataset_dir = Path(dataset["dir"])
    name = dataset["name"]
    content_path = Path(dataset["content_file"]) if dataset.get("content_file") else dataset_dir / f"{name}.content"
    cites_path = Path(dataset["cites_file"]) if dataset.get("cites_file") else dataset_dir / f"{name}.cites"

    seeds = experiment["seeds"]
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        raise ConfigError("experiment.seeds must be a non-empty list of non-negative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("experiment.seeds contains duplicates")
    mode = experiment["mode"]
    if mode not in MODES:
        raise ConfigError(f"experiment.mode must be one of {MODES}, got {mode!r}")
    ood_class = experiment.get("ood_class")
    methods = tuple(experiment["methods"])
    if not methods or any(m not in METHODS for m in methods) or len(set(methods)) != len(methods):
        raise ConfigError(f"experiment.methods must be distinct values from {METHODS}, got {list(methods)}")
    for key in ("per_class", "val_size", "test_size"):
        if split[key] < (1 if key == "per_class" else 0):
            raise ConfigError(f"split.{key} is out of range: {split[key]}")
    log_level = output["log_level"].upper()
    if log_level not in LOG_LEVELS:
        raise ConfigError(f"output.log_level must be one of {LOG_LEVELS}, got {output['log_level']!r}")
    if document["eval"]["num_bins"] < 1 or document["eval"]["degree_bucket_cap"] < 1:
        raise ConfigError("eval.num_bins and eval.degree_bucket_cap must be >= 1")

    try:
        train_config = TrainConfig(
            learning_rate=float(train["learning_rate"]),
            adam_beta1=float(train["adam_beta1"]),
            adam_beta2=float(train["adam_beta2"]),
            adam_eps=float(train["adam_eps"]),
            weight_decay=float(train["weight_decay"]),
            var_weight_decay=float(train["var_weight_decay"]),
            max_epochs=int(train["max_epochs"]),
            patience=int(train["patience"]),
            early_stopping_delta=float(train["early_stopping_delta"]),
            seed=int(seeds[0]),
            lam=_parse_lambda(train["lambda"]),
            hidden_width=int(train["hidden_width"]),
            num_layers=int(train["num_layers"]),
            var_input_width=train.get("var_input_width"),
            dropout=float(train["dropout"]),
            mc_samples_eval=int(train["mc_samples_eval"]),
        )
    except InputError as exc:
        raise ConfigError(f"train: {exc}") from exc

    resolved = {section: dict(document[section]) for section in CONFIG_SECTIONS}
    return ExperimentConfig(
        dataset_name=name,
        content_path=content_path,
        cites_path=cites_path,
        per_class=int(split["per_class"]),
        val_size=int(split["val_size"]),
        test_size=int(split["test_size"]),
        seeds=tuple(int(s) for s in seeds),
        mode=mode,
        ood_class=ood_class,
        methods=methods,
        train=train_config,
        normalize_features=bool(document["model"]["normalize_features"]),
        check_schur=bool(document["model"]["check_schur"]),
        num_bins=int(document["eval"]["num_bins"]),
        degree_bucket_cap=int(document["eval"]["degree_bucket_cap"]),
        output_dir=Path(output["dir"]),
        log_level=log_level,
        progress=bool(output["progress"]),
        document=resolved,
        checksum=compute_checksum(resolved),
    )


class ExperimentConfigStore:
    """Resolve an ExperimentConfig from defaults, a config file, the environment and overrides."""

    def __init__(
        self,
        *,
        config_path: Path | str | None = None,
        environ: Optional[Mapping[str, str]] = None,
        load_env_file: bool = True,
        logger: Optional[logging.Logger] = None,
    ) -> None:
        if load_env_file and environ is None:
            load_dotenv(override=False)
        self.environ: Mapping[str, str] = os.environ if environ is None else environ
        configured = config_path or self.environ.get("BUP_CONFIG")
        self.config_path = Path(configured) if configured else None
        self.log = logger or logging.getLogger(self.__class__.__name__)

    def layers(self, overrides: Optional[Mapping[str, Mapping[str, Any]]] = None) -> Sequence[Tuple[str, Mapping[str, Mapping[str, Any]]]]:
        stack: list[Tuple[str, Mapping[str, Mapping[str, Any]]]] = [("defaults", default_document())]
        if self.config_path is not None:
            if not self.config_path.exists():
                raise ConfigError(f"config file {self.config_path} does not exist")
            stack.append((str(self.config_path), load_document(self.config_path)))
        env_layer = env_document(self.environ)
        if env_layer:
            stack.append(("environment", env_layer))
        if overrides:
            validate_document(overrides)
            stack.append(("flags", overrides))
        return stack

    def load(self, overrides: Optional[Mapping[str, Mapping[str, Any]]] = None) -> ExperimentConfig:
        document: Dict[str, Dict[str, Any]] = {}
        for source, layer in self.layers(overrides):
            document = merge_documents(document, layer)
            self.log.debug("Applied config layer %s.", source)
        config = build_config(document)
        if config.per_class not in BENCHMARK_PER_CLASS:
            self.log.warning(
                "split.per_class=%s is outside the benchmark settings %s.", config.per_class, BENCHMARK_PER_CLASS
            )
        self.log.debug("Resolved config checksum %s.", config.checksum)
        return config
