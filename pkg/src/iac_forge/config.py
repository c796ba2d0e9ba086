"""Experiment configuration: JSON sections with defaults, strict key checking."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .pipeline import StageConfig
from .search import SearchConfig
from .search_space import EdgeNorm
from .unet import BACKBONES, UNetConfig


@dataclass(frozen=True)
class DatasetSection:
    task: str = "skip_dependent"
    n_samples: int = 250
    H: int = 64
    W: int = 64
    classes: int = 1
    noise: float = 0.3
    seed: int = 0
    # when set, samples come from this manifest instead of the generator
    manifest: str | None = None
    train_fraction: float = 0.8
    search_fraction: float = 0.5


@dataclass(frozen=True)
class SpaceSection:
    n_nodes: int = 4
    K: int = 4
    edge_norm_mode: str = "tan_rescaled"


@dataclass(frozen=True)
class ReportSection:
    level: float = 0.95
    # snapshot epochs implanted in Stage III; empty means every traced snapshot
    implant_epochs: tuple = ()


SECTIONS = {
    "dataset": DatasetSection,
    "unet": UNetConfig,
    "search_space": SpaceSection,
    "stage1": StageConfig,
    "stage2": SearchConfig,
    "stage3": StageConfig,
    "report": ReportSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    unet: UNetConfig = field(default_factory=UNetConfig)
    search_space: SpaceSection = field(default_factory=SpaceSection)
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: SearchConfig = field(default_factory=SearchConfig)
    stage3: StageConfig = field(default_factory=StageConfig)
    report: ReportSection = field(default_factory=ReportSection)

    def __post_init__(self):
        d, u = self.dataset, self.unet
        step = 2 ** u.depth
        if d.H % step or d.W % step:
            raise ConfigError(f"dataset H, W = {d.H}, {d.W} not divisible by 2^depth = {step}")
        if d.manifest is None and d.classes != u.out_channels:
            raise ConfigError(f"dataset.classes = {d.classes} but unet.out_channels = {u.out_channels}")
        if d.manifest is None and u.in_channels != 1:
            raise ConfigError("synthetic data is single-channel; set unet.in_channels to 1")
        if not set(self.report.implant_epochs) <= set(self.stage2.snapshot_epochs):
            raise ConfigError("report.implant_epochs must be a subset of stage2.snapshot_epochs")

    def space_config(self):
        from .search_space import SearchSpaceConfig
        s = self.search_space
        return SearchSpaceConfig(n_nodes=s.n_nodes, K=s.K, edge_norm_mode=EdgeNorm(s.edge_norm_mode))

    def implant_epochs(self):
        return tuple(self.report.implant_epochs) or tuple(self.stage2.snapshot_epochs)

    def with_seed(self, seed):
        """Same config with every seed field replaced by ``seed``."""
        return dataclasses.replace(
            self,
            dataset=dataclasses.replace(self.dataset, seed=seed),
            stage1=dataclasses.replace(self.stage1, seed=seed),
            stage2=dataclasses.replace(self.stage2, seed=seed),
            stage3=dataclasses.replace(self.stage3, seed=seed),
        )

    def to_dict(self):
        out = {}
        for name in SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def _section(name, cls, values):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def config_from_dict(doc):
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    parts = {name: _section(name, cls, doc.get(name, {})) for name, cls in SECTIONS.items()}
    ds = parts["dataset"]
    if ds.task not in ("shapes_easy", "skip_dependent"):
        raise ConfigError(f"dataset: unknown task {ds.task!r}")
    if parts["unet"].backbone_id not in BACKBONES:
        raise ConfigError(f"unet: unknown backbone {parts['unet'].backbone_id!r}")
    try:
        EdgeNorm(parts["search_space"].edge_norm_mode)
    except ValueError:
        raise ConfigError(f"search_space: unknown edge_norm_mode {parts['search_space'].edge_norm_mode!r}") from None
    try:
        cfg = ExperimentConfig(**parts)
        cfg.space_config()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})") from None
    try:
        return config_from_dict(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
