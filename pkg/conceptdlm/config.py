"""
This module contains the declarative run configuration: one section per
concern, loaded from JSON or TOML, with ``section.key=value`` overrides.
"""

import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .alignment import AlignConfig
from .dataset import ALL_MODES, DEFAULT_SEED, PerturbMode
from .errors import ConfigError, ConceptDLMError
from .helpers import stable_hash
from .model import ModelConfig
from .provider import ProviderConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONFIG_SNAPSHOT_NAME = "config.json"


@dataclass
class DataConfig:
    seed: int = DEFAULT_SEED
    n_train: int = 2000
    n_test: int = 500
    modes: List[str] = field(default_factory=lambda: [m.value for m in ALL_MODES])

    def __post_init__(self) -> None:
        self.modes = [PerturbMode.parse(m).value for m in self.modes]


@dataclass
class TrainConfig:
    """
    Settings of the optimisation loop.

    Attributes:
        epochs: Passes over the training file.
        batch: Sequences per optimizer step.
        lr: AdamW learning rate.
        weight_decay: Decoupled weight decay.
        reweight_by_inv_t: Multiply each sequence's loss by ``1 / t``.
        mode: Perturbation mode of the training file.
        n_samples: Use only the first ``n_samples`` training samples.
        response_pad: Pad responses with EOS up to this many tokens.
        seed: Seed of parameter initialisation, shuffling and masking.
    """

    epochs: int = 10
    batch: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.0
    reweight_by_inv_t: bool = False
    mode: str = PerturbMode.NORMAL.value
    n_samples: Optional[int] = None
    response_pad: int = 0
    seed: int = DEFAULT_SEED

    def __post_init__(self) -> None:
        self.mode = PerturbMode.parse(self.mode).value
        if self.epochs <= 0 or self.batch <= 0:
            raise ConfigError("train.epochs and train.batch must be positive")


@dataclass
class EvalConfig:
    gen_len: int = 512
    block_len: int = 32
    steps_per_block: Optional[int] = None
    n_samples: Optional[int] = None
    n_jobs: int = 1


@dataclass
class CompareConfig:
    """
    Settings of the aligned-versus-unaligned comparison.

    Attributes:
        seeds: One pair of matched runs per seed.
        n_eval: Test samples decoded after every epoch.
        threshold: Accuracy target for epochs-to-threshold; the unaligned
            run's final accuracy of the same seed when not given.
        n_jobs: Runs executed in parallel.
        stop_on_error: Re-raise failures instead of recording them.
        dimensions: Further grid dimensions, each a dotted ``section.key``
            mapped to the values it takes, e.g. ``{"align.alpha": [1.0, 3.0]}``.
    """

    seeds: List[int] = field(default_factory=lambda: [42, 43, 44])
    n_eval: int = 32
    threshold: Optional[float] = None
    n_jobs: int = 1
    stop_on_error: bool = True
    dimensions: Dict[str, List[Any]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigError("compare.seeds needs at least one seed")
        if not isinstance(self.dimensions, dict):
            raise ConfigError("compare.dimensions must map settings to lists of values")
        for key, options in self.dimensions.items():
            if not isinstance(options, list) or not options:
                raise ConfigError(f"compare.dimensions.{key} needs a non-empty list of values")


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "align": AlignConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "provider": ProviderConfig,
    "compare": CompareConfig,
}
RESERVED_DIMENSIONS = ("train.seed", "align.enabled")


def split_setting(dotted: str) -> Tuple[str, str]:
    section, _, key = dotted.partition(".")
    if section not in SECTIONS or key not in {f.name for f in fields(SECTIONS[section])}:
        raise ConfigError(f"unknown setting: {dotted!r}")
    return section, key


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)

    def __post_init__(self) -> None:
        for dotted in self.compare.dimensions:
            split_setting(dotted)
            if dotted in RESERVED_DIMENSIONS:
                raise ConfigError(f"{dotted} is set by the seed and align dimensions")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        """
        Build a config from a nested mapping; omitted keys keep their defaults.

        Raises:
            ConfigError: On unknown sections or keys, or invalid values.
        """
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        sections = {}
        for name, kind in SECTIONS.items():
            values = raw.get(name) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"config section {name} must be a mapping")
            known = {f.name for f in fields(kind)}
            unknown = set(values) - known
            if unknown:
                raise ConfigError(f"unknown keys in section {name}: {sorted(unknown)}")
            try:
                sections[name] = kind(**values)
            except ConfigError:
                raise
            except (ConceptDLMError, TypeError) as e:
                raise ConfigError(f"invalid section {name}: {e}")
        return cls(**sections)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


def read_config_file(path: Path) -> Dict[str, Any]:
    """
    Parse a ``.toml`` or ``.json`` config file into a nested dict.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        ConfigError: If the suffix is unsupported or the file does not parse
            into a table of sections.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        if path.suffix == ".toml":
            with open(path, "rb") as fp:
                raw = tomllib.load(fp)
        elif path.suffix == ".json":
            with open(path, "r") as fp:
                raw = json.load(fp)
        else:
            raise ConfigError("Only .toml and .json files are supported as config.")
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"could not parse config file {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a table of sections")
    return raw


def parse_override(text: str) -> Tuple[str, str, Any]:
    """
    Split ``section.key=value``; the value is read as JSON, else kept as text.

    Raises:
        ConfigError: If the override is not of that form.
    """
    target, sep, value = text.partition("=")
    section, dot, key = target.strip().partition(".")
    if not sep or not dot or not section or not key or "." in key:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return section, key, parsed


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    merged = {name: dict(values or {}) for name, values in raw.items()}
    for text in overrides:
        section, key, value = parse_override(text)
        merged.setdefault(section, {})[key] = value
    return merged


def load_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Read a config file (or start from defaults) and apply overrides."""
    raw = read_config_file(path) if path is not None else {}
    return RunConfig.from_dict(apply_overrides(raw, overrides))


def save_config(config: RunConfig, path: Path) -> None:
    with open(path, "w") as fp:
        json.dump(config.to_dict(), fp, indent=2, sort_keys=True)


def replace_value(config: RunConfig, dotted: str, value: Any) -> RunConfig:
    """
    Copy ``config`` with the setting ``section.key`` replaced by ``value``.

    Raises:
        ConfigError: If the setting is unknown or the value is rejected.
    """
    section, key = split_setting(dotted)
    try:
        updated = replace(getattr(config, section), **{key: value})
    except (ConceptDLMError, TypeError) as e:
        raise ConfigError(f"invalid value {value!r} for {dotted}: {e}") from e
    return replace(config, **{section: updated})
