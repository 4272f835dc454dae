"""Experiment configuration: sections per module, fingerprints, overrides.

Config files are YAML with one section per subsystem (data, nets, losses,
train, ttt) plus top-level seed / out_dir / data_path. The fingerprint is
a stable hash over everything that determines the trained artifact (data,
nets, losses, train, data_path, seed) and is embedded in every artifact;
test-time-only knobs (the ttt section) do not change it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from sketchadapt.dataio import SketchDataset, load_dataset
from sketchadapt.errors import ConfigError
from sketchadapt.losses import LossConfig
from sketchadapt.metatrain import TrainConfig
from sketchadapt.nets import NetConfig
from sketchadapt.seeding import derive_seed
from sketchadapt.synth import SynthConfig, synth_generate
from sketchadapt.ttt import TTTConfig

OUTPUT_ROOT_ENV = "SKETCHADAPT_OUT_ROOT"

_SECTIONS = {
    "data": SynthConfig,
    "nets": NetConfig,
    "losses": LossConfig,
    "train": TrainConfig,
    "ttt": TTTConfig,
}


def _build_section(cls, values: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in fields:
            raise ConfigError(f"{cls.__name__}: unknown field {key!r}")
        if isinstance(val, list):
            val = tuple(val)
        default = fields[key].default
        if isinstance(val, str) and isinstance(default, (int, float)) and not isinstance(default, bool):
            # YAML leaves forms like "1e18" as strings
            try:
                val = type(default)(float(val)) if isinstance(default, int) else float(val)
            except ValueError as exc:
                raise ConfigError(f"{cls.__name__}.{key}: cannot parse {val!r}") from exc
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


@dataclass
class ExperimentConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    nets: NetConfig = field(default_factory=NetConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ttt: TTTConfig = field(default_factory=TTTConfig)
    data_path: str = ""
    out_dir: str = "run"
    seed: int = 0

    def __post_init__(self):
        # one master seed drives every subsystem
        self.train = dataclasses.replace(self.train, seed=self.seed)

    def validate(self) -> None:
        self.data.validate()
        self.nets.validate()
        self.losses.validate()
        self.train.validate()
        self.ttt.validate()
        if self.data_path and not Path(self.data_path).exists():
            raise ConfigError(f"data_path: no such file {self.data_path!r}")
        if self.data.canvas != self.nets.canvas:
            raise ConfigError(
                f"data.canvas ({self.data.canvas}) and nets.canvas ({self.nets.canvas}) disagree"
            )

    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}
        out.update(data_path=self.data_path, out_dir=self.out_dir, seed=self.seed)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw or {})
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            section = raw.pop(name, {}) or {}
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            kwargs[name] = _build_section(section_cls, section)
        for key in ("data_path", "out_dir", "seed"):
            if key in raw:
                kwargs[key] = raw.pop(key)
        if raw:
            raise ConfigError(f"unknown config keys: {sorted(raw)}")
        return cls(**kwargs)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path!r}: {exc}") from exc
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def apply_overrides(self, overrides) -> "ExperimentConfig":
        """Dotted-key overrides like ``train.outer_iters=100``."""
        raw = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, _, value = item.partition("=")
            parsed = yaml.safe_load(f"[{value}]" if "," in value else value)
            if isinstance(parsed, list) and len(parsed) == 1 and "," not in value:
                parsed = parsed[0]
            node = raw
            parts = key.strip().split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"override {key!r}: unknown section {p!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"override {key!r}: unknown field {parts[-1]!r}")
            node[parts[-1]] = parsed
        return ExperimentConfig.from_dict(raw)

    def fingerprint(self) -> str:
        payload = self.to_dict()
        payload.pop("ttt")
        payload.pop("out_dir")
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def dataset_for(cfg: ExperimentConfig) -> SketchDataset:
    """The experiment's dataset: loaded from data_path or synthesized."""
    if cfg.data_path:
        if not Path(cfg.data_path).exists():
            raise ConfigError(f"data_path: no such file {cfg.data_path!r}")
        return load_dataset(cfg.data_path)
    return synth_generate(cfg.data, derive_seed(cfg.seed, "data"))


def resolve_out_dir(cfg: ExperimentConfig) -> Path:
    """out_dir, optionally re-rooted under the env override."""
    root = os.environ.get(OUTPUT_ROOT_ENV)
    path = Path(cfg.out_dir)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path
