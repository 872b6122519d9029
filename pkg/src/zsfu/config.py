"""Experiment configuration: YAML file -> schema validation -> typed sections."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import yaml

from .baselines import BaselineConfig
from .data import DeletionRequest
from .fedsim import FedConfig
from .noise import NoiseConfig
from .repair import RepairPolicy
from .unlearn import UnlearnHyper

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Schema violation; ``path`` names the offending field (e.g. ``unlearn.lr``)."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def load_schema() -> dict:
    return json.loads(resources.files("zsfu").joinpath("config.schema.json").read_text())


@dataclass
class DisentangleConfig:
    alpha: float = 0.9
    epochs: int = 5
    lr: float = 0.01
    retention: bool = True


@dataclass
class RepairConfig:
    enabled: bool = True
    delta: float = 5.0
    epochs: int = 5
    lr: float = 0.05

    def policy(self, seed: int) -> RepairPolicy:
        return RepairPolicy(self.delta, self.epochs, self.lr, seed)


@dataclass
class AblationFlags:
    disentangle: bool = True
    mask: bool = True
    harmonize: bool = True
    hard: bool = True
    confusion: bool = True
    distillation: bool = True
    drift: bool = True
    real_data: bool = False        # use real D_f / D_r instead of noise proxies
    freeze_y_fake: bool = False

    @property
    def is_complete(self) -> bool:
        return self == AblationFlags()


@dataclass
class AuditConfig:
    mia_repeats: int = 10
    ttest_statistic: str = "max_confidence"


@dataclass
class ForgetSpec:
    classes: list[int]
    clients: str | list[int] = "all"

    def requests(self, n_clients: int) -> list[DeletionRequest]:
        ids = range(n_clients) if self.clients == "all" else self.clients
        return [DeletionRequest(int(c), frozenset(self.classes)) for c in ids]


@dataclass
class ExperimentConfig:
    dataset: str
    arch: str
    output_dir: str
    forget: list[ForgetSpec]
    name: str = "experiment"
    seeds: list[int] = field(default_factory=lambda: [0])
    fed: dict = field(default_factory=dict)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    disentangle: DisentangleConfig = field(default_factory=DisentangleConfig)
    unlearn: dict = field(default_factory=dict)
    repair: RepairConfig = field(default_factory=RepairConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    baselines: list[str] = field(default_factory=lambda: ["retrain"])
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    baseline_overrides: dict[str, dict] = field(default_factory=dict)   # method -> BaselineConfig fields
    audit: AuditConfig = field(default_factory=AuditConfig)
    schema_version: int = SCHEMA_VERSION
    source: str | None = None      # path the config was read from

    def fed_config(self, seed: int) -> FedConfig:
        return FedConfig.for_dataset(self.dataset, **{**self.fed, "seed": seed})

    def unlearn_hyper(self) -> UnlearnHyper:
        a = self.ablation
        return UnlearnHyper(**self.unlearn, use_hard=a.hard, use_confusion=a.confusion,
                            use_distillation=a.distillation, use_drift=a.drift, use_mask=a.mask,
                            use_harmonize=a.harmonize, freeze_y_fake=a.freeze_y_fake)

    def baseline_config(self, method: str, seed: int) -> BaselineConfig:
        return BaselineConfig(**{**asdict(self.baseline), **self.baseline_overrides.get(method, {}), "seed": seed})

    def requests(self) -> list[DeletionRequest]:
        n = self.fed_config(0).n_clients
        merged: dict[int, set[int]] = {}
        for spec in self.forget:
            for r in spec.requests(n):
                if r.client_id >= n:
                    raise ConfigError("forget.clients", f"client {r.client_id} does not exist (n_clients={n})")
                merged.setdefault(r.client_id, set()).update(r.forget_classes)
        return [DeletionRequest(c, frozenset(v)) for c, v in sorted(merged.items())]

    def forget_classes(self) -> list[int]:
        return sorted({c for s in self.forget for c in s.classes})

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        d["noise"].pop("seed", None)
        d["baseline"].pop("seed", None)
        overrides = d.pop("baseline_overrides")
        if overrides:
            d["baseline"]["per_method"] = overrides
        return d

    def hash(self) -> str:
        """Stable digest of everything that affects results (output_dir excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("name")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, **sections) -> "ExperimentConfig":
        raw = self.to_dict()
        for k, v in sections.items():
            if isinstance(v, dict) and isinstance(raw.get(k), dict):
                raw[k] = {**raw[k], **v}
            else:
                raw[k] = v
        return from_dict(raw)


def _error_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        # name the missing key itself
        missing = err.message.split("'")[1] if "'" in err.message else ""
        parts.append(missing)
    if err.validator == "additionalProperties":
        extra = err.message.split("'")[1] if "'" in err.message else ""
        parts.append(extra)
    return ".".join(parts) or "<root>"


def validate(raw: Any) -> None:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        raise ConfigError(_error_path(e), e.message)


def from_dict(raw: dict, source: str | None = None) -> ExperimentConfig:
    validate(raw)
    raw = copy.deepcopy(raw)
    n_clients = raw.get("fed", {}).get("n_clients", FedConfig().n_clients)
    for i, spec in enumerate(raw["forget"]):
        for c in spec.get("clients", []) if spec.get("clients") != "all" else []:
            if c >= n_clients:
                raise ConfigError(f"forget.{i}.clients", f"client {c} does not exist (n_clients={n_clients})")
    try:
        cfg = ExperimentConfig(
            dataset=raw["dataset"], arch=raw["arch"], output_dir=raw["output_dir"],
            forget=[ForgetSpec(**f) for f in raw["forget"]],
            name=raw.get("name", "experiment"),
            seeds=list(raw.get("seeds", [0])),
            fed=dict(raw.get("fed", {})),
            noise=NoiseConfig(**raw.get("noise", {})),
            disentangle=DisentangleConfig(**raw.get("disentangle", {})),
            unlearn=dict(raw.get("unlearn", {})),
            repair=RepairConfig(**raw.get("repair", {})),
            ablation=AblationFlags(**raw.get("ablation", {})),
            baselines=list(raw.get("baselines", ["retrain"])),
            baseline=BaselineConfig(**{k: v for k, v in raw.get("baseline", {}).items() if k != "per_method"}),
            baseline_overrides=copy.deepcopy(raw.get("baseline", {}).get("per_method", {})),
            audit=AuditConfig(**raw.get("audit", {})),
            source=source,
        )
        cfg.fed_config(0)
        cfg.unlearn_hyper()
        for method in cfg.baseline_overrides:
            cfg.baseline_config(method, 0)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("<root>", str(exc)) from exc
    if "retrain" not in cfg.baselines:
        # the retrained oracle is needed for every similarity metric
        cfg.baselines.insert(0, "retrain")
    return cfg


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("<root>", f"not valid YAML: {exc}") from exc
    return from_dict(raw, str(path))


def dump_config(cfg: ExperimentConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
