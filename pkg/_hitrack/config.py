"""Immutable configuration map and the typed tracker configuration.

The on-disk format is one ``key = value`` per line; ``#`` starts a comment,
blank lines are ignored and list values are comma separated::

    # three branches, shallow to deep
    layer_names = shallow, middle, deep
    layer_cell_sizes = 4, 8, 16
    update_interval = 6
    use_motion = true
"""

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Iterator, Optional

from _hitrack.cf_branch import CgFormula
from _hitrack.errors import ConfigError, HitrackError
from _hitrack.features import LayerSpec
from _hitrack.motion import KalmanConfig, MotionKind
from _hitrack.scale import ScaleConfig

type ConfigValue = bool | int | float | str | tuple

ENERGY_SOURCES = ("latest", "memory")
TRUE_WORDS = ("true", "yes", "on", "1")
FALSE_WORDS = ("false", "no", "off", "0")


@dataclass(frozen=True)
class TrackerConfig:
    """Every tunable of the tracker, with validated defaults.

    Per-layer settings are parallel tuples indexed like ``layer_names``.
    """

    layer_names: tuple[str, ...] = ("shallow", "middle", "deep")
    layer_cell_sizes: tuple[int, ...] = (4, 8, 16)
    layer_channels: tuple[int, ...] = (8, 8, 8)
    label_sigma_factors: tuple[float, ...] = (1 / 12, 1 / 12, 1 / 3)
    lambdas: tuple[float, ...] = (1e-2, 1e-2, 1e-2)
    motion_layers: tuple[bool, ...] = (True, True, True)
    memory_capacity: int = 50
    learning_rate: float = 0.012
    update_interval: int = 6
    init_cg_iters: int = 150
    update_cg_iters: int = 5
    cg_formula: str = CgFormula.FLETCHER_REEVES.value
    cg_tol: float = 1e-6
    search_area_scale: float = 4.0
    patch_min: int = 224
    patch_max: int = 250
    reg_min: float = 1e-3
    reg_edge: float = 1.0
    reg_max: float = 1e5
    scale_alpha: float = 1.03
    scale_steps: int = 5
    scale_damping: float = 0.6
    scale_layer: str = "middle"
    kalman_q: float = 1e-2
    kalman_r: float = 4.0
    use_motion: bool = True
    motion_kind: str = MotionKind.GAUSSIAN.value
    motion_spread: float = 1.0
    fusion_reg: float = 1.0
    weight_smoothing: float = 1.0
    energy_source: str = "latest"
    energy_every_frame: bool = True
    confidence_gate: float = 0.4
    orientation_bins: int = 9

    def __post_init__(self):
        layers = len(self.layer_names)
        if layers < 1:
            raise ConfigError("at least one layer is required")
        if len(set(self.layer_names)) != layers:
            raise ConfigError(f"duplicate layer names in {self.layer_names}")
        for name in (
            "layer_cell_sizes",
            "layer_channels",
            "label_sigma_factors",
            "lambdas",
            "motion_layers",
        ):
            if len(getattr(self, name)) != layers:
                raise ConfigError(f"{name} needs {layers} values")
        positive = (
            "memory_capacity",
            "init_cg_iters",
            "update_cg_iters",
            "cg_tol",
            "search_area_scale",
            "patch_min",
            "kalman_r",
            "motion_spread",
            "fusion_reg",
            "orientation_bins",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if any(lam <= 0 for lam in self.lambdas):
            raise ConfigError("lambdas must be positive")
        if self.update_interval < 1:
            raise ConfigError("update_interval must be >= 1")
        if not 0 < self.learning_rate < 1:
            raise ConfigError("learning_rate must be in (0, 1)")
        if self.patch_max < self.patch_min:
            raise ConfigError("patch_max must be >= patch_min")
        if self.kalman_q < 0:
            raise ConfigError("kalman_q must be >= 0")
        if not 0 < self.weight_smoothing <= 1:
            raise ConfigError("weight_smoothing must be in (0, 1]")
        if not 0 <= self.confidence_gate < 1:
            raise ConfigError("confidence_gate must be in [0, 1)")
        if self.scale_layer not in self.layer_names:
            raise ConfigError(f"scale_layer {self.scale_layer!r} is not a layer")
        if self.energy_source not in ENERGY_SOURCES:
            raise ConfigError(f"energy_source must be one of {ENERGY_SOURCES}")
        if math.lcm(*self.layer_cell_sizes) > self.patch_max:
            raise ConfigError("cell sizes do not fit in the patch")
        try:
            CgFormula(self.cg_formula)
            MotionKind(self.motion_kind)
            _ = (self.layer_specs, self.scale, self.kalman)
        except (ValueError, HitrackError) as e:
            raise ConfigError(str(e)) from e

    @property
    def layer_specs(self) -> tuple[LayerSpec, ...]:
        """One LayerSpec per configured layer."""
        return tuple(
            LayerSpec(name, cell, channels, sigma)
            for name, cell, channels, sigma in zip(
                self.layer_names,
                self.layer_cell_sizes,
                self.layer_channels,
                self.label_sigma_factors,
            )
        )

    @property
    def scale(self) -> ScaleConfig:
        """The scale pyramid settings."""
        return ScaleConfig(
            self.scale_alpha,
            (-self.scale_steps, self.scale_steps),
            self.scale_layer,
            self.scale_damping,
        )

    @property
    def kalman(self) -> KalmanConfig:
        """The constant-velocity motion model."""
        return KalmanConfig.constant_velocity(self.kalman_q, self.kalman_r)

    @classmethod
    def from_map(cls, values: "ConfigMap") -> "TrackerConfig":
        """Builds a config from defaults overridden by ``values``.

        Raises:
            ConfigError: If a value is out of range.
        """
        return cls(**ConfigMap.defaults().combine(values).raw)

    def to_map(self) -> "ConfigMap":
        """Every field as a ConfigMap."""
        return ConfigMap(asdict(self))


def _defaults() -> dict[str, ConfigValue]:
    return {f.name: f.default for f in fields(TrackerConfig)}


def _coerce_scalar(key: str, kind: type, value: Any) -> ConfigValue:
    if isinstance(value, str):
        value = value.strip()
    try:
        match kind.__name__, value:
            case "bool", str():
                word = value.lower()
                if word not in TRUE_WORDS + FALSE_WORDS:
                    raise ValueError(value)
                return word in TRUE_WORDS
            case "bool", _:
                return bool(value)
            case "int", str():
                number = float(value)
                if not number.is_integer():
                    raise ValueError(value)
                return int(number)
            case "int", float() if not value.is_integer():
                raise ValueError(value)
            case "int", _:
                return int(value)
            case "float", _:
                return float(value)
            case _:
                return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from e


def _coerce(key: str, value: Any) -> ConfigValue:
    defaults = _defaults()
    if key not in defaults:
        raise ConfigError(f"unknown configuration key {key!r}")
    default = defaults[key]
    if isinstance(default, tuple):
        items = value.split(",") if isinstance(value, str) else list(value)
        kind = type(default[0])
        return tuple(_coerce_scalar(key, kind, item) for item in items)
    return _coerce_scalar(key, type(default), value)


def _render(value: ConfigValue) -> str:
    match value:
        case bool():
            return "true" if value else "false"
        case tuple():
            return ", ".join(_render(v) for v in value)
        case float():
            return repr(value)
        case _:
            return str(value)


class ConfigMap:
    """An immutable map from known configuration keys to typed values.

    Values are coerced to the type of the key's default when the map is
    built; ``put`` and ``combine`` return new maps.
    """

    def __init__(self, *args, **kwargs):
        """Initializes a map, validating and coercing every entry.

        Args:
            *args: Positional arguments passed to the dictionary constructor.
            **kwargs: Keyword arguments passed to the dictionary constructor.

        Raises:
            ConfigError: On an unknown key or an unreadable value.
        """
        self._dict = {k: _coerce(k, v) for k, v in dict(*args, **kwargs).items()}
        self._hash: Optional[int] = None

    def __getitem__(self, key: str) -> ConfigValue:
        """Retrieves the value of ``key``.

        Raises:
            KeyError: If the key is not set in this map.
        """
        return self._dict[key]

    def get(self, key: str) -> Optional[ConfigValue]:
        """Retrieves the value of ``key``, or None if it is not set."""
        return self._dict.get(key)

    def __eq__(self, other) -> bool:
        """Compares with another ConfigMap or a plain dict."""
        match other:
            case ConfigMap():
                return self._dict == other._dict
            case dict():
                return self._dict == other
            case _:
                return False

    def __contains__(self, key) -> bool:
        """Checks whether ``key`` is set in this map."""
        return key in self._dict

    def __len__(self) -> int:
        """Returns the number of set keys."""
        return len(self._dict)

    def __iter__(self) -> Iterator[str]:
        """Iterates over the set keys in insertion order."""
        return iter(self._dict)

    def keys(self):
        """Returns a view of the keys."""
        return self._dict.keys()

    def values(self):
        """Returns a view of the values."""
        return self._dict.values()

    def items(self):
        """Returns a view of the key/value pairs."""
        return self._dict.items()

    def __repr__(self) -> str:
        """Returns ``ConfigMap({...})``."""
        return f"ConfigMap({self._dict})"

    def __hash__(self) -> int:
        """Hash of the key/value pairs, computed once."""
        if self._hash is None:
            h = 0
            for key, value in self._dict.items():
                h ^= hash((key, value))
            self._hash = h
        return self._hash

    def put(self, key: str, value: Any) -> "ConfigMap":
        """Returns a new map with ``key`` set to ``value``."""
        return ConfigMap({**self._dict, key: value})

    def combine(self, other: "ConfigMap") -> "ConfigMap":
        """Returns a new map where ``other``'s entries win over this map's."""
        return ConfigMap({**self.raw, **other.raw})

    @property
    def raw(self) -> dict[str, ConfigValue]:
        """A shallow copy of the underlying dictionary."""
        return dict(self._dict)

    @staticmethod
    def new() -> "ConfigMap":
        """An empty map."""
        return ConfigMap()

    @staticmethod
    def defaults() -> "ConfigMap":
        """Every tracker setting at its default."""
        return ConfigMap(_defaults())

    @staticmethod
    def parse(text: str) -> "ConfigMap":
        """Reads the ``key = value`` format.

        Raises:
            ConfigError: On a malformed line, naming its 1-based number.
        """
        entries: dict[str, str] = {}
        for number, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or not key:
                raise ConfigError(f"line {number}: expected 'key = value'")
            if key in entries:
                raise ConfigError(f"line {number}: duplicate key {key!r}")
            try:
                _coerce(key, value)
            except ConfigError as e:
                raise ConfigError(f"line {number}: {e}") from e
            entries[key] = value.strip()
        return ConfigMap(entries)

    @staticmethod
    def load(path: Path | str) -> "ConfigMap":
        """Reads a config file.

        Raises:
            ConfigError: If the file is unreadable or malformed.
        """
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return ConfigMap.parse(text)

    def dumps(self) -> str:
        """Renders the map in the file format, one key per line."""
        return "".join(f"{key} = {_render(value)}\n" for key, value in self.items())


__all__ = [
    "ConfigValue",
    "TrackerConfig",
    "ConfigMap",
]
