"""Run configuration: nested sections with defaults, strict unknown-key
rejection, JSON round-trip, and a provenance hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .data import MechanismSignature, SyntheticConfig
from .errors import ConfigError, DataError
from .evaluation import EvalConfig
from .model import ModelConfig
from .training import AssignmentConfig, TrainConfig


@dataclass
class DataConfig:
    manifest: str = ""
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class DiffusionConfig:
    # mild perturbation by default: alpha_bar(3) ~ 0.96, so the injected
    # noise regularizes without erasing boundary-precision cues
    steps: int = 3
    beta_start: float = 0.02
    beta_end: float = 0.08
    eta: float = 0.0
    noise: bool = True
    denoise: bool = True


@dataclass
class AblateConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    protocols: list[str] = field(default_factory=lambda: ["open-world"])
    sweep_protocol: str = "intra"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(input_dim=32))
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    out_dir: str = "runs/default"


def _check_keys(mapping: dict, cls, path: str) -> None:
    if not isinstance(mapping, dict):
        raise ConfigError(f"config: section {path or '<root>'} must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        where = path or "<root>"
        raise ConfigError(
            f"config: unknown key(s) {unknown} in section {where}; allowed "
            f"keys are {sorted(allowed)}"
        )


def _plain(mapping: dict, cls, path: str, base=None):
    """Build a flat dataclass (no nested sections) from a mapping."""
    _check_keys(mapping, cls, path)
    obj = base if base is not None else cls()
    for f in dataclasses.fields(cls):
        if f.name not in mapping:
            continue
        value = mapping[f.name]
        current = getattr(obj, f.name)
        where = f"{path + '.' if path else ''}{f.name}"
        if isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"config: {where} must be a boolean")
        elif isinstance(current, int) and not isinstance(current, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"config: {where} must be an integer")
        elif isinstance(current, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config: {where} must be a number")
            value = float(value)
        elif isinstance(current, str) and not isinstance(value, str):
            raise ConfigError(f"config: {where} must be a string")
        setattr(obj, f.name, value)
    return obj


def _build_synthetic(mapping: dict, path: str) -> SyntheticConfig:
    _check_keys(mapping, SyntheticConfig, path)
    mapping = dict(mapping)
    mechanisms = mapping.pop("mechanisms", None)
    cfg = _plain(mapping, SyntheticConfig, path)
    if mechanisms is not None:
        built = []
        for i, m in enumerate(mechanisms):
            _check_keys(m, MechanismSignature, f"{path}.mechanisms[{i}]")
            try:
                built.append(MechanismSignature(**m))
            except TypeError as exc:
                raise ConfigError(
                    f"config: incomplete mechanism at {path}.mechanisms[{i}] "
                    f"({exc})"
                ) from exc
        cfg.mechanisms = built
    return cfg


def _build_train(mapping: dict, path: str) -> TrainConfig:
    _check_keys(mapping, TrainConfig, path)
    mapping = dict(mapping)
    assignment = mapping.pop("assignment", None)
    cfg = _plain(mapping, TrainConfig, path)
    if assignment is not None:
        cfg.assignment = _plain(assignment, AssignmentConfig,
                                f"{path}.assignment")
    return cfg


def config_from_dict(raw: dict) -> RunConfig:
    _check_keys(raw, RunConfig, "")
    cfg = RunConfig()
    if "data" in raw:
        _check_keys(raw["data"], DataConfig, "data")
        section = dict(raw["data"])
        synthetic = section.pop("synthetic", None)
        cfg.data = _plain(section, DataConfig, "data")
        if synthetic is not None:
            cfg.data.synthetic = _build_synthetic(synthetic, "data.synthetic")
    if "model" in raw:
        cfg.model = _plain(raw["model"], ModelConfig, "model",
                           base=ModelConfig(input_dim=32))
    if "diffusion" in raw:
        cfg.diffusion = _plain(raw["diffusion"], DiffusionConfig, "diffusion")
    if "train" in raw:
        cfg.train = _build_train(raw["train"], "train")
    if "eval" in raw:
        cfg.eval = _plain(raw["eval"], EvalConfig, "eval")
    if "ablate" in raw:
        cfg.ablate = _plain(raw["ablate"], AblateConfig, "ablate")
    if "out_dir" in raw:
        cfg.out_dir = str(raw["out_dir"])
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise DataError(f"config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def save_resolved_config(path: str, cfg: RunConfig) -> str:
    digest = config_hash(cfg)
    doc = {"config": config_to_dict(cfg), "config_sha256": digest}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return digest
