"""Run configuration: JSON in, validated frozen dataclasses out."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .adaptation import TrainConfig, TransferParams
from .fgw import FgwConfig
from .harness import HARNESS_TRAIN, HARNESS_TRANSFER, PipelineConfig, StreamConfig, parse_mode
from .prior_bank import RetrievalConfig

MANIFEST_FORMAT = "topotransfer-run/1"


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


@dataclass(frozen=True)
class RetrievalWeights:
    """Retrieval settings without the FGW block, which lives at top level."""

    lambda_sigma: float = 0.1
    lambda_u: float = 0.1
    regularized_cost: bool = True


@dataclass(frozen=True)
class RunConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    fgw: FgwConfig = field(default_factory=FgwConfig)
    retrieval: RetrievalWeights = field(default_factory=RetrievalWeights)
    train: TrainConfig = HARNESS_TRAIN
    base_train: TrainConfig = HARNESS_TRAIN
    transfer: TransferParams = HARNESS_TRANSFER
    bank_capacity: int = 16
    eta: float = 0.3
    base_candidates: int = 32
    top_k: int = 8
    cluster_threshold: float = 0.05
    retain_residuals: bool = False
    output_dir: str = "results"
    mode: str = "full"

    def __post_init__(self) -> None:
        try:
            parse_mode(self.mode)
        except ValueError as exc:
            raise ConfigError("mode", str(exc)) from None
        try:
            self.pipeline()
        except ValueError as exc:
            raise ConfigError("<root>", str(exc)) from None

    @property
    def seed(self) -> int:
        return self.stream.seed

    def pipeline(self) -> PipelineConfig:
        r = self.retrieval
        return PipelineConfig(
            retrieval=RetrievalConfig(r.lambda_sigma, r.lambda_u, self.fgw, r.regularized_cost),
            train=self.train,
            base_train=self.base_train,
            transfer=self.transfer,
            eta=self.eta,
            bank_capacity=self.bank_capacity,
            base_candidates=self.base_candidates,
            top_k=self.top_k,
            cluster_threshold=self.cluster_threshold,
            retain_residuals=self.retain_residuals,
            mode=self.mode,
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce(value: Any, tp: Any, key: str) -> Any:
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, key)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    raise ConfigError(key, f"unsupported field type {tp!r}")


def from_dict(cls: type, data: Any, prefix: str = "") -> Any:
    """Build dataclass ``cls`` from a JSON object; missing keys keep their defaults."""
    where = prefix or "<root>"
    if not isinstance(data, dict):
        raise ConfigError(where, "expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    for k in data:
        if k not in names:
            raise ConfigError(f"{prefix}.{k}" if prefix else k, "unknown key")
    kwargs = {}
    for k, v in data.items():
        key = f"{prefix}.{k}" if prefix else k
        kwargs[k] = _coerce(v, hints[k], key)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from None


def load_config(path: str | Path) -> RunConfig:
    """Read a config file, or the config echoed in a run manifest."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"{path} is not valid JSON ({exc})") from None
    if isinstance(data, dict) and data.get("format") == MANIFEST_FORMAT:
        data = data["config"]
    return from_dict(RunConfig, data)


# short sweep names for the usual knobs; any dotted path is accepted too
SWEEP_ALIASES = {
    "rho": "fgw.rho",
    "epsilon": "fgw.epsilon",
    "lambda_kl": "train.lambda_kl",
    "lambda_r": "train.lambda_r",
    "eta": "eta",
    "tau_kappa": "transfer.tau_kappa",
}


def override(config: RunConfig, dotted: str, value: Any) -> RunConfig:
    """Copy of ``config`` with one (possibly nested) field replaced and revalidated."""
    data = config.to_dict()
    node = data
    parts = SWEEP_ALIASES.get(dotted, dotted).split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(dotted, "unknown key")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(dotted, "unknown key")
    node[parts[-1]] = value
    return from_dict(RunConfig, data)


def with_seed(config: RunConfig, seed: int) -> RunConfig:
    return replace(config, stream=replace(config.stream, seed=seed))


__all__ = [
    "ConfigError",
    "MANIFEST_FORMAT",
    "RetrievalWeights",
    "RunConfig",
    "SWEEP_ALIASES",
    "from_dict",
    "load_config",
    "override",
    "with_seed",
]
