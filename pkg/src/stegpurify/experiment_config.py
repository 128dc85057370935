"""ExperimentConfig: the versioned TOML file describing one experiment.

Example::

    schema_version = 1
    name = "basic"
    resolution = 64

    [dataset]
    root = "~/datasets/covers"

    [[schemes]]
    name = "UDH"
    meta_arch = "UDH"

    [[attacks]]
    name = "GB"
    kind = "distortion"
    params = { kind = "GB", blur_sigma = 1.0 }

Every section is optional. ``--set section.key=value`` overrides any key; list entries are
addressed by index (``schemes.0.meta_arch=DDH``).
"""

import hashlib
import json
import tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

from stegpurify._util import CONFIG, ConfigurationError
from stegpurify.config import expand_path
from stegpurify.ebra import EbraTrainConfig
from stegpurify.hiding import META_ARCHS, AutoencoderTrainConfig, HidingTrainConfig
from stegpurify.schema import SchemaConfig, is_int, is_non_negative, one_of

SCHEMA_VERSION = 1
ATTACK_KINDS = ("identity", "distortion", "lattice", "nes", "ebra", "ebra_dagger")


def _is_name(val: Any) -> bool:
    return isinstance(val, str) and bool(val) and "|" not in val and "," not in val


@dataclass
class DatasetSpec(SchemaConfig):
    """Where covers come from and which split is evaluated."""

    root: str = ""
    channels: int = 3
    train_split: str = "train"
    eval_split: str = "test"
    eval_images: int = 200

    SCHEMA = {
        "root": lambda v: isinstance(v, str),
        "channels": one_of(1, 3),
        "train_split": one_of("train", "val", "test", "all"),
        "eval_split": one_of("train", "val", "test", "all"),
        "eval_images": lambda v: is_int(v) and v >= 1,
    }

    def resolved_root(self) -> Path:
        """Dataset directory, falling back to the user configuration."""
        return expand_path(self.root) if self.root else CONFIG.dataset_dir


@dataclass
class SchemeSpec(SchemaConfig):
    """One hiding scheme to train and attack."""

    name: str = "UDH"
    meta_arch: str = "UDH"
    secret_channels: int = 3
    width_scale: float = 0.5
    train: HidingTrainConfig = field(default_factory=HidingTrainConfig)

    SCHEMA = {
        "name": _is_name,
        "meta_arch": one_of(*META_ARCHS),
        "secret_channels": one_of(1, 3),
        "width_scale": lambda v: isinstance(v, (int, float)) and v > 0,
        "train": lambda v: isinstance(v, HidingTrainConfig),
    }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "SchemeSpec":
        raw = dict(raw)
        raw["train"] = HidingTrainConfig.from_dict(raw.get("train", {}))
        return super().from_dict(raw)

    def to_dict(self) -> Dict[str, Any]:
        out = super().to_dict()
        out["train"] = self.train.to_dict()
        return out


@dataclass
class AttackEntry(SchemaConfig):
    """A named attack; ``params`` is the spec dict of its kind."""

    name: str = "identity"
    kind: str = "identity"
    params: Dict[str, Any] = field(default_factory=dict)

    SCHEMA = {
        "name": _is_name,
        "kind": one_of(*ATTACK_KINDS),
        "params": lambda v: isinstance(v, dict),
    }


@dataclass
class EbraSection(SchemaConfig):
    """Ensemble training settings plus the tile sizes of the k sweep."""

    train: EbraTrainConfig = field(default_factory=EbraTrainConfig)
    k_values: Tuple[int, ...] = ()

    SCHEMA = {
        "train": lambda v: isinstance(v, EbraTrainConfig),
        "k_values": lambda v: all(is_int(k) and k >= 1 for k in v),
    }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "EbraSection":
        raw = dict(raw)
        raw["train"] = EbraTrainConfig.from_dict(raw.get("train", {}))
        return super().from_dict(raw)

    def to_dict(self) -> Dict[str, Any]:
        out = super().to_dict()
        out["train"] = self.train.to_dict()
        return out


@dataclass
class MetricSpec(SchemaConfig):
    """Report settings; ``quality_budget`` is the PSNR-C floor an attack must keep."""

    per_thresholds: Tuple[int, ...] = (0, 5, 10)
    quality_budget: float = 25.0
    binarize_secrets: bool = False
    figure_images: int = 2

    SCHEMA = {
        "per_thresholds": lambda v: bool(v) and all(is_int(x) and x >= 0 for x in v),
        "quality_budget": is_non_negative,
        "binarize_secrets": lambda v: isinstance(v, bool),
        "figure_images": lambda v: is_int(v) and v >= 0,
    }


@dataclass
class BenchSpec(SchemaConfig):
    """Timing benchmark settings."""

    images: int = 100
    warmup: int = 5
    variance_flag: float = 0.2

    SCHEMA = {
        "images": lambda v: is_int(v) and v >= 1,
        "warmup": lambda v: is_int(v) and v >= 0,
        "variance_flag": is_non_negative,
    }


_SECTIONS = {
    "dataset": DatasetSpec,
    "ebra": EbraSection,
    "autoencoder": AutoencoderTrainConfig,
    "metrics": MetricSpec,
    "bench": BenchSpec,
}


@dataclass
class ExperimentConfig:  # pylint: disable=too-many-instance-attributes
    """Complete description of one experiment."""

    name: str = "experiment"
    resolution: int = CONFIG.resolution
    seed: int = CONFIG.seed
    workers: int = CONFIG.workers
    output_dir: str = ""
    schema_version: int = SCHEMA_VERSION
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schemes: List[SchemeSpec] = field(default_factory=list)
    attacks: List[AttackEntry] = field(default_factory=list)
    ebra: EbraSection = field(default_factory=EbraSection)
    autoencoder: AutoencoderTrainConfig = field(default_factory=AutoencoderTrainConfig)
    metrics: MetricSpec = field(default_factory=MetricSpec)
    bench: BenchSpec = field(default_factory=BenchSpec)

    def __post_init__(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(
                f"Unsupported schema_version {self.schema_version}, expected {SCHEMA_VERSION}"
            )
        if not _is_name(self.name):
            raise ConfigurationError(f"Invalid experiment name: {self.name!r}")
        if not is_int(self.resolution) or self.resolution < 8 or self.resolution % 8:
            raise ConfigurationError(f"Resolution must be a multiple of 8, got {self.resolution}")
        if not is_int(self.workers) or self.workers < 1:
            raise ConfigurationError("workers must be a positive integer")
        for label, entries in (("scheme", self.schemes), ("attack", self.attacks)):
            names = [entry.name for entry in entries]
            if len(names) != len(set(names)):
                raise ConfigurationError(f"Duplicate {label} names: {names}")

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "ExperimentConfig":
        """Build from a parsed TOML mapping, validating every section."""
        raw = dict(raw)
        known = set(cls.__dataclass_fields__)  # pylint: disable=no-member
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"Unknown experiment keys: {', '.join(sorted(unknown))}")
        for key, section in _SECTIONS.items():
            if key in raw:
                raw[key] = section.from_dict(raw[key])
        raw["schemes"] = [SchemeSpec.from_dict(s) for s in raw.get("schemes", [])]
        raw["attacks"] = [AttackEntry.from_dict(a) for a in raw.get("attacks", [])]
        return cls(**raw)

    def to_dict(self) -> Dict[str, Any]:
        """Plain mapping that from_dict turns back into an equal config."""
        out: Dict[str, Any] = {
            "schema_version": self.schema_version,
            "name": self.name,
            "resolution": self.resolution,
            "seed": self.seed,
            "workers": self.workers,
            "output_dir": self.output_dir,
        }
        for key in _SECTIONS:
            out[key] = getattr(self, key).to_dict()
        out["schemes"] = [s.to_dict() for s in self.schemes]
        out["attacks"] = [a.to_dict() for a in self.attacks]
        return out

    def config_hash(self) -> str:
        """md5 of the canonical JSON form."""
        return stable_hash(self.to_dict())

    def output_root(self) -> Path:
        """Directory receiving every artifact of this experiment."""
        return expand_path(self.output_dir) if self.output_dir else CONFIG.output_dir / self.name

    def scheme(self, name: str) -> SchemeSpec:
        """Scheme by name."""
        for scheme in self.schemes:
            if scheme.name == name:
                return scheme
        raise ConfigurationError(f"No scheme named {name}")

    def attack(self, name: str) -> AttackEntry:
        """Attack by name."""
        for attack in self.attacks:
            if attack.name == name:
                return attack
        raise ConfigurationError(f"No attack named {name}")


def stable_hash(value: Any) -> str:
    """md5 of a JSON-serialisable value with sorted keys."""
    return hashlib.md5(json.dumps(value, sort_keys=True, default=str).encode()).hexdigest()


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"value = {text}")["value"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply ``dotted.key=value`` overrides; values are TOML literals or plain strings."""
    for override in overrides:
        key, sep, text = override.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"Override must look like key=value: {override!r}")
        parts = key.strip().split(".")
        node: Any = raw
        for part in parts[:-1]:
            if isinstance(node, list):
                try:
                    node = node[int(part)]
                except (ValueError, IndexError) as exc:
                    raise ConfigurationError(f"Bad list index {part!r} in {key}") from exc
            else:
                node = node.setdefault(part, {})
        last = parts[-1]
        if isinstance(node, list):
            try:
                node[int(last)] = _parse_value(text.strip())
            except (ValueError, IndexError) as exc:
                raise ConfigurationError(f"Bad list index {last!r} in {key}") from exc
        elif isinstance(node, dict):
            node[last] = _parse_value(text.strip())
        else:
            raise ConfigurationError(f"Cannot override inside a scalar: {key}")
    return raw


def load_experiment(path: Path | None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Read an experiment TOML (or start from defaults) and apply overrides."""
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Experiment file {path} does not exist")
        try:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"Invalid TOML in {path}: {exc}") from exc
    return ExperimentConfig.from_dict(apply_overrides(raw, overrides))


def write_snapshot(cfg: ExperimentConfig, path: Path) -> Path:
    """Write the resolved configuration as JSON next to the artifacts."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return path
