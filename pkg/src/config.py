"""Configuration utilities for the streaming alignment engine.

This module loads runtime settings from the environment and pipeline settings from a
flat ``key = value`` file, validates them into typed section objects and applies
command-line overrides. Configuration loading is performed on demand to make the
module easier to test.

Supports template variable substitution in values using ${VAR_NAME} syntax, so paths
and seeds can be injected from the environment (or a .env file).

Follows Single Responsibility Principle (SRP) - handles only configuration.
"""

import os
import re
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Dict, Iterable, Optional, Tuple

from dotenv import load_dotenv

from src.models import (
    CameraPath,
    DepthAlign,
    InputMode,
    PlyFormat,
    RigidSource,
    ScaleEstimator,
)

# Load environment variables from .env
load_dotenv()

_TEMPLATE_PATTERN = r"\$\{([^}]+)\}"
_KEY_PATTERN = re.compile(r"^[a-z][a-z0-9_]*$")
_TRUE_VALUES = {"true", "1", "yes", "on"}
_FALSE_VALUES = {"false", "0", "no", "off"}


class ConfigurationError(Exception):
    """Custom exception for configuration errors."""


class SceneConfigError(ConfigurationError):
    """Raised for degenerate synthetic scene settings (0 frames, 0 layers, ...)."""


class RuntimeConfig:
    """Process-wide runtime settings read from the environment.

    Values are read on access so tests can monkeypatch the environment.
    Follows Singleton Pattern to ensure single source of truth.
    """

    _instance = None
    _initialized = False

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __init__(self):
        if self._initialized:
            return
        self.default_threads = 1
        self.default_log_level = "WARNING"
        self._initialized = True

    @property
    def threads(self) -> int:
        """Worker thread cap (LASER_THREADS, default 1)."""
        raw = os.getenv("LASER_THREADS")
        if raw is None or not raw.strip():
            return self.default_threads
        try:
            value = int(raw)
        except ValueError as exc:
            raise ConfigurationError(f"LASER_THREADS must be an integer, got {raw!r}") from exc
        if value < 1:
            raise ConfigurationError(f"LASER_THREADS must be >= 1, got {value}")
        return value

    @property
    def log_level(self) -> str:
        """Logging level name (LASER_LOG_LEVEL, default WARNING)."""
        return (os.getenv("LASER_LOG_LEVEL") or self.default_log_level).upper()


class TemplateResolver:
    """Resolves template variables in strings using ${VAR_NAME} syntax.

    Follows Strategy Pattern for variable resolution.
    """

    @staticmethod
    def resolve(text: str, key: str = "value") -> str:
        """
        Resolve template variables in text using ${VAR_NAME} syntax.

        Args:
            text: Raw configuration value (e.g., '${DATA_ROOT}/windows')
            key: Configuration key the value belongs to, used in error messages

        Returns:
            String with all template variables replaced with their values

        Raises:
            ConfigurationError: If referenced variable is not defined
        """
        if not isinstance(text, str):
            return text

        result = text
        for var_name in re.findall(_TEMPLATE_PATTERN, text):
            var_value = os.getenv(var_name)
            if var_value is None:
                raise ConfigurationError(
                    f"Template variable ${{{var_name}}} referenced by '{key}' but "
                    f"{var_name} is not defined in environment. Please add it to .env file."
                )
            result = result.replace(f"${{{var_name}}}", var_value)
        return result


class ConfigFileLoader:
    """Parses flat ``key = value`` configuration text.

    Follows Single Responsibility Principle - handles only file parsing.
    """

    @staticmethod
    def parse_text(text: str, source: str = "<config>") -> Dict[str, str]:
        """
        Parse configuration text into a flat mapping.

        Blank lines and lines starting with '#' are ignored. Trailing '#' comments
        are stripped. Duplicate keys are rejected.

        Args:
            text: Configuration file contents
            source: Name used in error messages

        Returns:
            Mapping of key to resolved string value

        Raises:
            ConfigurationError: On malformed lines, duplicate keys or undefined ${VAR}
        """
        values: Dict[str, str] = {}
        for lineno, raw_line in enumerate(text.splitlines(), start=1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not _KEY_PATTERN.match(key):
                raise ConfigurationError(f"{source}:{lineno}: invalid key {key!r}")
            if key in values:
                raise ConfigurationError(f"{source}:{lineno}: duplicate key '{key}'")
            values[key] = TemplateResolver.resolve(value, key)
        return values

    @staticmethod
    def load(path: str) -> Dict[str, str]:
        """Read and parse a configuration file."""
        try:
            with open(path, "r", encoding="utf-8") as handle:
                text = handle.read()
        except OSError as exc:
            raise ConfigurationError(f"Cannot read config file {path}: {exc}") from exc
        return ConfigFileLoader.parse_text(text, source=path)

    @staticmethod
    def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
        """Parse repeated ``key=value`` command-line overrides (last one wins)."""
        overrides: Dict[str, str] = {}
        for pair in pairs:
            if "=" not in pair:
                raise ConfigurationError(f"Override must be key=value, got {pair!r}")
            key, value = (part.strip() for part in pair.split("=", 1))
            if not _KEY_PATTERN.match(key):
                raise ConfigurationError(f"Invalid override key {key!r}")
            overrides[key] = TemplateResolver.resolve(value, key)
        return overrides


def _coerce(key: str, raw: str, default):
    """Parse a raw string into the type of the section default."""
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in _TRUE_VALUES:
                return True
            if lowered in _FALSE_VALUES:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, Enum):
            return type(default)(text.lower())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p for p in re.split(r"[,\s]+", text.strip("[]()")) if p]
            if len(parts) != 2:
                raise ValueError(f"expected 'low,high', got {text!r}")
            low, high = float(parts[0]), float(parts[1])
            if low > high:
                raise ValueError(f"range low {low} exceeds high {high}")
            return (low, high)
        return text
    except ValueError as exc:
        raise ConfigurationError(f"Invalid value for '{key}': {exc}") from exc


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


class _Section:
    """Shared parsing for flat-key configuration sections."""

    @classmethod
    def keys(cls) -> Tuple[str, ...]:
        """Configuration keys owned by the section."""
        return tuple(f.name for f in fields(cls))  # type: ignore[arg-type]

    @classmethod
    def from_mapping(cls, mapping: Dict[str, str]):
        """Build the section from the keys it owns; missing keys keep defaults."""
        defaults = cls()
        kwargs = {
            name: _coerce(name, mapping[name], getattr(defaults, name))
            for name in cls.keys()
            if name in mapping
        }
        return cls(**kwargs)

    def to_mapping(self) -> Dict[str, str]:
        """Flat string mapping that parses back to an equal section."""
        return {name: _format(getattr(self, name)) for name in self.keys()}


def _require(condition: bool, message: str):
    if not condition:
        raise ConfigurationError(message)


@dataclass(frozen=True)
class WindowConfig(_Section):
    """Temporal window schedule."""

    window_len: int = 20
    overlap: int = 5

    def __post_init__(self):
        _require(self.window_len >= 2, f"window_len must be >= 2, got {self.window_len}")
        _require(
            1 <= self.overlap < self.window_len,
            f"overlap must satisfy 1 <= overlap < window_len, got {self.overlap}",
        )


@dataclass(frozen=True)
class RegistrationConfig(_Section):
    """Submap registration settings.

    With ``huber_rescale`` the Huber threshold is huber_delta_factor × the ‖p‖²-weighted
    median residual, re-estimated every IRLS iteration; otherwise it is huber_delta_factor × median
    target norm, fixed per solve.
    """

    huber_delta_factor: float = 0.1
    huber_rescale: bool = True
    irls_max_iters: int = 50
    irls_rel_tol: float = 1e-6
    conf_percentile: float = 50.0
    scale_estimator: ScaleEstimator = ScaleEstimator.IRLS
    rigid_source: RigidSource = RigidSource.ANCHORS

    def __post_init__(self):
        _require(self.huber_delta_factor > 0, "huber_delta_factor must be > 0")
        _require(self.irls_max_iters >= 1, "irls_max_iters must be >= 1")
        _require(self.irls_rel_tol > 0, "irls_rel_tol must be > 0")
        _require(0.0 <= self.conf_percentile < 100.0, "conf_percentile must be in [0, 100)")


@dataclass(frozen=True)
class LsaConfig(_Section):
    """Layer-wise scale alignment settings.

    ``seg_sigma`` defaults to 0 (no pre-smoothing of the depth map before segmentation).
    Smoothing with sigma 0.8 blurs depth steps into thin bridging regions whose pixels
    mix layers; on the noiseless 200-frame, 3-layer synthetic scene that left post-LSA
    Abs Rel at 0.017, above the 1e-3 target, while sigma 0 reaches it.
    """

    lsa_enabled: bool = True
    iou_tau: float = 0.3
    seg_sigma: float = 0.0
    seg_k: float = 0.02
    seg_min_size_frac: float = 0.005
    lsa_intra: bool = True

    def __post_init__(self):
        _require(0.0 <= self.iou_tau < 1.0, "iou_tau must be in [0, 1)")
        _require(self.seg_sigma >= 0.0, "seg_sigma must be >= 0")
        _require(self.seg_k >= 0.0, "seg_k must be >= 0")
        _require(0.0 <= self.seg_min_size_frac < 1.0, "seg_min_size_frac must be in [0, 1)")


@dataclass(frozen=True)
class MetricsConfig(_Section):
    """Evaluation settings."""

    depth_align: DepthAlign = DepthAlign.MEDIAN
    rpe_delta: int = 1
    icp_max_iters: int = 50
    icp_tol: float = 1e-6
    icp_trim: float = 0.95
    eval_max_points: int = 20000

    def __post_init__(self):
        _require(self.rpe_delta >= 1, "rpe_delta must be >= 1")
        _require(self.icp_max_iters >= 1, "icp_max_iters must be >= 1")
        _require(self.icp_tol > 0, "icp_tol must be > 0")
        _require(0.0 < self.icp_trim <= 1.0, "icp_trim must be in (0, 1]")
        _require(self.eval_max_points >= 3, "eval_max_points must be >= 3")


@dataclass(frozen=True)
class OutputConfig(_Section):
    """Input source, output locations and export toggles."""

    input_mode: InputMode = InputMode.FILES
    input_dir: str = "predictions"
    output_dir: str = "output"
    export_points: bool = True
    export_trajectory: bool = True
    export_diagnostics: bool = True
    export_depths: bool = True
    ply_format: PlyFormat = PlyFormat.BINARY
    export_voxel: float = 0.0
    queue_capacity: int = 2

    def __post_init__(self):
        _require(self.export_voxel >= 0.0, "export_voxel must be >= 0")
        _require(self.queue_capacity >= 1, "queue_capacity must be >= 1")


@dataclass(frozen=True)
class SceneConfig(_Section):
    """Synthetic scene settings.

    Distortion translations are fractions of the scene diameter; ``noise_sigma`` is
    in scene units. ``layers`` counts the background plane plus foreground cards.
    """

    frames: int = 200
    height: int = 24
    width: int = 32
    layers: int = 3
    camera_path: CameraPath = CameraPath.LINE
    noise_sigma: float = 0.0
    window_scale_range: Tuple[float, float] = (0.5, 2.0)
    window_rot_deg_range: Tuple[float, float] = (0.0, 15.0)
    window_trans_range: Tuple[float, float] = (0.0, 0.2)
    layer_scale_range: Tuple[float, float] = (0.7, 1.4)
    seed: int = 0
    slanted_planes: int = 0
    invalid_fraction: float = 0.0

    def __post_init__(self):
        if self.frames < 1:
            raise SceneConfigError(f"frames must be >= 1, got {self.frames}")
        if self.layers < 1:
            raise SceneConfigError(f"layers must be >= 1, got {self.layers}")
        if self.height < 4 or self.width < 4:
            raise SceneConfigError(f"image must be at least 4x4, got {self.height}x{self.width}")
        if self.noise_sigma < 0:
            raise SceneConfigError("noise_sigma must be >= 0")
        if self.window_scale_range[0] <= 0:
            raise SceneConfigError("window_scale_range must be positive")
        if self.layer_scale_range[0] <= 0:
            raise SceneConfigError("layer_scale_range must be positive")
        if not 0 <= self.slanted_planes <= max(0, self.layers - 1):
            raise SceneConfigError("slanted_planes must not exceed the foreground layer count")
        if not 0.0 <= self.invalid_fraction < 0.5:
            raise SceneConfigError("invalid_fraction must be in [0, 0.5)")


_SECTIONS = (
    ("window", WindowConfig),
    ("registration", RegistrationConfig),
    ("lsa", LsaConfig),
    ("metrics", MetricsConfig),
    ("output", OutputConfig),
    ("scene", SceneConfig),
)


@dataclass(frozen=True)
class PipelineConfig:
    """Complete, validated pipeline configuration.

    Follows Composite Pattern - one section object per concern.
    """

    window: WindowConfig = field(default_factory=WindowConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    lsa: LsaConfig = field(default_factory=LsaConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)

    @staticmethod
    def known_keys() -> Tuple[str, ...]:
        """Every accepted configuration key."""
        return tuple(key for _, section in _SECTIONS for key in section.keys())

    @classmethod
    def from_mapping(cls, mapping: Dict[str, str]) -> "PipelineConfig":
        """
        Build a configuration from a flat key/value mapping.

        Raises:
            ConfigurationError: On unknown keys or invalid values
        """
        known = set(cls.known_keys())
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ConfigurationError(f"Unknown configuration key(s): {', '.join(unknown)}")
        return cls(**{name: section.from_mapping(mapping) for name, section in _SECTIONS})

    @classmethod
    def load(
        cls, path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None
    ) -> "PipelineConfig":
        """Load an optional config file, then apply overrides."""
        mapping = ConfigFileLoader.load(path) if path else {}
        mapping.update(overrides or {})
        return cls.from_mapping(mapping)

    def to_mapping(self) -> Dict[str, str]:
        """Flat mapping of every key."""
        mapping: Dict[str, str] = {}
        for name, _ in _SECTIONS:
            mapping.update(getattr(self, name).to_mapping())
        return mapping

    def with_values(self, **values) -> "PipelineConfig":
        """Copy with some keys replaced (values given as strings or native types)."""
        mapping = self.to_mapping()
        mapping.update({key: _format(value) for key, value in values.items()})
        return PipelineConfig.from_mapping(mapping)

