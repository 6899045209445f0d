"""One YAML file per run: typed sections, unknown keys rejected, resolved snapshot + hash."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .embed import EmbedderConfig
from .ensemble import VoteConfig
from .hgnn import ModelConfig
from .saliency import RetrievalConfig
from .synthetic import ScenarioConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    """Artifact locations; relative paths resolve against the run directory."""

    corpus: str = "corpus.jsonl"
    pool: str = "pool.json"
    labels: str = "labels.jsonl"
    answers: str = "answers"
    checkpoints: str = "checkpoints"
    cache: str = "cache"
    reports: str = "reports"


@dataclass(frozen=True)
class AgentsConfig:
    mode: str = "synthetic"  # synthetic | llm
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str = "KGROUTE_LLM_API_KEY"
    max_attempts: int = 3
    timeout: float = 60.0

    def __post_init__(self):
        if self.mode not in ("synthetic", "llm"):
            raise ValueError("agents.mode must be synthetic|llm")
        if self.mode == "llm" and not (self.endpoint and self.model):
            raise ValueError("agents.mode=llm needs endpoint and model")


@dataclass(frozen=True)
class SweepConfig:
    k: tuple[int, ...] = (1, 5, 10, 15, 20, 24)
    layers: tuple[int, ...] = (1, 2, 3, 4)
    hidden: tuple[int, ...] = (64, 128, 256)


SECTIONS: dict[str, type] = {
    "paths": PathsConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "retrieval": RetrievalConfig,
    "vote": VoteConfig,
    "embedder": EmbedderConfig,
    "agents": AgentsConfig,
    "scenario": ScenarioConfig,
    "sweep": SweepConfig,
}
# seed fields that follow the global seed unless set explicitly
SEEDED = {"model": "init_seed", "train": "seed", "embedder": "seed", "scenario": "seed"}
# fields that do not change any artifact and stay out of the hash
UNHASHED = ("jobs", "run_root")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    jobs: int = 1
    run_root: str = "runs"
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(hidden=128))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=16))
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    vote: VoteConfig = field(default_factory=VoteConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    agents: AgentsConfig = field(default_factory=AgentsConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if self.model.input_dim != self.embedder.dimension:
            raise ValueError(f"model.input_dim ({self.model.input_dim}) must equal "
                             f"embedder.dimension ({self.embedder.dimension})")

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def config_hash(self) -> str:
        d = self.to_dict()
        for k in UNHASHED:
            d.pop(k, None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.run_root) / self.config_hash()

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else self.run_dir() / p

    def snapshot(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def write_snapshot(self, directory: Path | None = None) -> Path:
        directory = Path(directory or self.run_dir())
        directory.mkdir(parents=True, exist_ok=True)
        out = directory / "config.resolved.yaml"
        out.write_text(self.snapshot(), encoding="utf-8")
        return out


def _tuplify(cls: type, data: dict) -> dict:
    """YAML gives lists; frozen dataclasses here want tuples (hashable, stable)."""
    out = dict(data)
    for f in fields(cls):
        v = out.get(f.name)
        if isinstance(v, list):
            out[f.name] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
    return out


def _section(cls: type, data: Any, name: str):
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {unknown}")
    try:
        return cls(**_tuplify(cls, dict(data)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def build_config(data: Mapping | None = None, overrides: Mapping | None = None) -> RunConfig:
    """Resolve a raw mapping (plus dotted-key overrides, which win) into a RunConfig.

    Section seeds left unset follow the global seed. A ``--seed`` override
    resets them all.
    """
    raw = copy.deepcopy(dict(data or {}))
    overrides = dict(overrides or {})
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    global_override = "seed" in overrides
    for key, value in overrides.items():
        parts = key.split(".")
        if parts[0] not in top:
            raise ConfigError(f"unknown override {key!r}")
        node = raw
        for p in parts[:-1]:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} crosses a non-mapping")
        node[parts[-1]] = value
    seed = raw.get("seed", 0)
    defaults = RunConfig()
    sections = {}
    for name, cls in SECTIONS.items():
        given = raw.get(name)
        if given is not None and not isinstance(given, Mapping):
            raise ConfigError(f"section {name!r} must be a mapping")
        section_raw = dict(given or {})
        seed_field = SEEDED.get(name)
        if seed_field and (global_override or seed_field not in section_raw):
            section_raw[seed_field] = seed
        unknown = sorted(set(section_raw) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown keys in section {name!r}: {unknown}")
        # start from the run defaults (the router's differ from the bare dataclasses)
        merged = asdict(getattr(defaults, name))
        merged.update(section_raw)
        sections[name] = _section(cls, merged, name)
    try:
        return RunConfig(seed=int(seed), jobs=int(raw.get("jobs", 1)), run_root=str(raw.get("run_root", "runs")),
                         **sections)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None, overrides: Mapping | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
    return build_config(data, overrides)


def with_section(cfg: RunConfig, name: str, **changes) -> RunConfig:
    return replace(cfg, **{name: replace(getattr(cfg, name), **changes)})
