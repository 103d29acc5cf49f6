"""Utilities to handle run configuration files.

A run is described by a YAML document with the sections `dataset`, `window`, `model` and `train`, plus `seed` and
`output_dir`. Round-trip parsing is supported by using the ruamel.yaml parser, so comments and key order survive a
read/modify/write cycle.

The document is validated into a `RunConfig`. Unknown keys and invalid values raise `ConfigError` naming the line
of the offending key.
"""

import dataclasses
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union, get_args, get_origin, get_type_hints

from ruamel.yaml import YAML, CommentedMap

from spikets.data import DATASET_FAMILIES, SYNTH_PRESETS, WindowSpec
from spikets.errors import ConfigError
from spikets.nets import ModelConfig
from spikets.train import TrainConfig
from spikets.utils import convert_from_string, text_sha256

OUTPUT_ROOT_ENV = "SPIKETS_OUTPUT_ROOT"
SOURCES = ("synth", "csv")


@dataclass(frozen=True)
class DatasetConfig:
    """Where the series comes from and how it is split.

    Args:
        source (str): "synth" or "csv".
        preset (str): Synthetic preset, "low" or "high".
        length (int): Synthetic series length.
        seed (int): Synthetic generator seed.
        path (str): CSV file (source "csv").
        has_header (bool): Whether the CSV's first row holds channel names.
        family (str): Optional benchmark family of the CSV; supplies default split ratios.
        split (tuple): Train/valid/test ratios.
        normalize (bool): Z-score channels with train statistics.
    """

    source: str = "synth"
    preset: str = "low"
    length: int = 5000
    seed: int = 0
    path: Optional[str] = None
    has_header: bool = True
    family: Optional[str] = None
    split: Optional[tuple] = None
    normalize: bool = True

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError(f"Unknown dataset source '{self.source}', expected one of {SOURCES}")
        if self.source == "synth" and self.preset not in SYNTH_PRESETS:
            raise ConfigError(f"Unknown synthetic preset '{self.preset}', expected one of {tuple(SYNTH_PRESETS)}")
        if self.source == "csv" and not self.path:
            raise ConfigError("dataset.path is required when dataset.source is 'csv'")
        if self.family is not None and self.family not in DATASET_FAMILIES:
            raise ConfigError(f"Unknown dataset family '{self.family}', expected one of {tuple(DATASET_FAMILIES)}")
        if self.split is not None and len(self.split) != 3:
            raise ConfigError(f"dataset.split needs three ratios, got {self.split}")
        if self.split is not None and not all(
            isinstance(r, (int, float)) and not isinstance(r, bool) for r in self.split
        ):
            raise ConfigError(f"dataset.split ratios must be numbers, got {self.split}")

    @property
    def ratios(self) -> tuple:
        """tuple: Split ratios, from the family table when not given, else (0.6, 0.2, 0.2)."""
        if self.split is not None:
            return tuple(self.split)
        if self.family is not None:
            return DATASET_FAMILIES[self.family].ratios
        return (0.6, 0.2, 0.2)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    window: WindowSpec = field(default_factory=lambda: WindowSpec(lookback=20, horizon=24))
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def output_path(self) -> Path:
        """Path: Output directory, below $SPIKETS_OUTPUT_ROOT when it is set and the directory is relative."""
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            return Path(root) / out
        return out


def read_run_config_yaml(file_name: str) -> CommentedMap:
    """Read a run configuration file.

    This function uses ruamel to parse the YAML file, so that we can do round-trip parsing.

    Args:
        file_name: Name of file to read.

    Returns:
        dict: Run configuration mapping.
    """
    fname = Path(file_name)
    if not fname.is_file():
        raise FileNotFoundError(f"File not found: {fname.as_posix()}")

    config = YAML().load(fname)
    if config is None:
        config = CommentedMap()
    if not isinstance(config, dict):
        raise ConfigError(f"{fname.as_posix()}: top level must be a mapping")

    return config


def write_run_config_yaml(config: [dict | CommentedMap], file: Path):
    """Write a run configuration to a file.

    Args:
        config (dict| CommentedMap): Run configuration.
        file(Path): File to write to.
    """
    YAML().dump(config, file)


def dump_yaml_string(config: dict) -> str:
    stream = io.StringIO()
    YAML().dump(config, stream)
    return stream.getvalue()


def _where(mapping, key, path: str) -> str:
    name = f"{path}.{key}" if path else str(key)
    lc = getattr(mapping, "lc", None)
    if lc is not None:
        try:
            line, _ = lc.key(key)
            return f"'{name}' (line {line + 1})"
        except (KeyError, TypeError):
            pass
    return f"'{name}'"


def _coerce(value):
    if isinstance(value, list):
        return tuple(_coerce(v) for v in value)
    return value


def _unwrap_optional(hint) -> tuple:
    """(accepts None, inner type) of a field annotation."""
    if get_origin(hint) is Union:
        args = get_args(hint)
        inner = [a for a in args if a is not type(None)]
        return type(None) in args, inner[0] if len(inner) == 1 else hint
    return False, hint


def _check_leaf(value, hint, where: str):
    """Check a scalar config value against its field annotation; ints are accepted (and widened) for floats."""
    optional, inner = _unwrap_optional(hint)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{where} must not be null")
    if inner is bool:
        ok = isinstance(value, bool)
    elif inner is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif inner is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif inner is str:
        ok = isinstance(value, str)
    elif inner is tuple:
        ok = isinstance(value, tuple)
    else:
        ok = True
    if not ok:
        expected = getattr(inner, "__name__", str(inner))
        raise ConfigError(f"{where} must be {expected}, got {type(value).__name__} {value!r}")
    return value


def _build(cls, mapping, path: str = "", default=None):
    """Validate a mapping into dataclass `cls`, recursing into dataclass-valued fields.

    Keys missing from the mapping keep the values of `default` (or the field defaults when it is None).
    """
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"Section '{path or 'top level'}' must be a mapping, got {type(mapping).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = [key for key in mapping if key not in fields]
    if unknown:
        raise ConfigError(
            f"Unknown key {_where(mapping, unknown[0], path)}; expected one of {sorted(fields)}"
        )

    hints = get_type_hints(cls)
    kwargs = {}
    for key, value in mapping.items():
        f = fields[key]
        base = getattr(default, key) if default is not None else None
        if base is None:
            base = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(base):
            kwargs[key] = _build(type(base), value, f"{path}.{key}" if path else key, base)
        else:
            kwargs[key] = _check_leaf(_coerce(value), hints[key], _where(mapping, key, path))
    try:
        return dataclasses.replace(default, **kwargs) if default is not None else cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"Invalid section '{path or 'top level'}'{_line(mapping)}: {err}") from None


def _line(mapping) -> str:
    lc = getattr(mapping, "lc", None)
    return f" (line {lc.line + 1})" if lc is not None and lc.line is not None else ""


def apply_overrides(config: dict, overrides: Sequence[str]) -> dict:
    """Apply `section.key=value` overrides to a configuration mapping in place.

    Values are converted with `convert_from_string` according to the type of the addressed field: string fields
    keep the text as given, and only sequence fields (e.g. `dataset.split`) split it on commas.
    """
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override '{item}' is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = [k.strip() for k in dotted.split(".") if k.strip()]
        if not keys:
            raise ConfigError(f"Override '{item}' has an empty key")
        node = config
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                node[key] = CommentedMap()
            node = node[key]
        node[keys[-1]] = _convert_override(keys, raw)
    return config


def _field_hint(keys: Sequence[str]):
    """Annotation of the RunConfig field at a dotted key path, or None when the path names no field."""
    hint = RunConfig
    for key in keys:
        if not dataclasses.is_dataclass(hint):
            return None
        hint = get_type_hints(hint).get(key)
        if hint is None:
            return None
    return hint


def _convert_override(keys: Sequence[str], raw: str):
    hint = _field_hint(keys)
    if hint is None:
        return convert_from_string(raw)
    optional, inner = _unwrap_optional(hint)
    text = raw.strip()
    if optional and text.lower() in ("null", "none", "~"):
        return None
    if inner is str:
        return text
    if inner is tuple:
        value = convert_from_string(text, split_lists=True)
        return value if isinstance(value, list) else [value]
    return convert_from_string(text, split_lists=False)


def parse_run_config(config: dict) -> RunConfig:
    """Validate a configuration mapping."""
    return _build(RunConfig, config)


def load_run_config(file_name: Optional[str] = None, overrides: Sequence[str] = ()) -> tuple:
    """Read (optionally), override and validate a run configuration.

    Returns:
        tuple: The validated RunConfig and the (overridden) mapping it came from.
    """
    mapping = read_run_config_yaml(file_name) if file_name else CommentedMap()
    apply_overrides(mapping, overrides)
    return parse_run_config(mapping), mapping


def to_mapping(config) -> dict:
    """Plain nested dict of a (dataclass) configuration, with tuples as lists."""

    def plain(value):
        if isinstance(value, dict):
            return {k: plain(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [plain(v) for v in value]
        return value

    return plain(dataclasses.asdict(config))


def config_hash(config: RunConfig) -> str:
    """str: SHA-256 of the canonical YAML form of a configuration."""
    return text_sha256(dump_yaml_string(to_mapping(config)))
