"""Pipeline configuration: defaults, ``key = value`` files and overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


FEATURE_MODES = ("classical", "network")
REDUCERS = ("classical", "mlp")
EXTRACT_MODES = ("argmax", "soft")


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the render/depth/fuse/eval pipeline.

    ``trunc`` of ``None`` means three voxels. Network features need
    ``network_path``; the MLP reducer needs ``mlp_path``.
    """

    d_min: float = 0.25
    d_max: float = 8.0
    n_planes: int = 64
    feature_mode: str = "classical"
    network_path: str | None = None
    descriptor_radius: int = 2
    feature_scale: int = 2
    reducer: str = "classical"
    mlp_path: str | None = None
    extract: str = "argmax"
    median: bool = True
    voxel_size: float = 0.04
    trunc: float | None = None
    max_weight: float = 128.0
    fscore_cm: float = 5.0
    n_samples: int = 200_000
    alpha_grad: float = 1.0
    alpha_normals: float = 1.0
    alpha_mv: float = 0.2
    threads: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        checks = [
            (0 < self.d_min < self.d_max, "need 0 < d_min < d_max"),
            (self.n_planes >= 2, "n_planes must be at least 2"),
            (self.feature_mode in FEATURE_MODES, f"feature_mode must be one of {FEATURE_MODES}"),
            (self.feature_mode != "network" or self.network_path, "network features need network_path"),
            (self.descriptor_radius >= 1, "descriptor_radius must be at least 1"),
            (self.feature_scale >= 1 and not self.feature_scale & (self.feature_scale - 1),
             "feature_scale must be a power of two"),
            (self.reducer in REDUCERS, f"reducer must be one of {REDUCERS}"),
            (self.reducer != "mlp" or self.mlp_path, "the mlp reducer needs mlp_path"),
            (self.extract in EXTRACT_MODES, f"extract must be one of {EXTRACT_MODES}"),
            (self.voxel_size > 0, "voxel_size must be positive"),
            (self.trunc is None or self.trunc > 0, "trunc must be positive"),
            (self.max_weight >= 1, "max_weight must be at least 1"),
            (self.fscore_cm > 0, "fscore_cm must be positive"),
            (self.n_samples >= 1, "n_samples must be positive"),
            (min(self.alpha_grad, self.alpha_normals, self.alpha_mv) >= 0, "loss weights must be >= 0"),
            (self.threads >= 1, "threads must be at least 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    @property
    def truncation(self) -> float:
        return 3.0 * self.voxel_size if self.trunc is None else self.trunc

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, pairs: dict[str, str]) -> "PipelineConfig":
        """Apply string-valued overrides, converting each to its field type."""
        return self.replace(**{k: _convert(k, v) for k, v in pairs.items()})

    def to_text(self) -> str:
        """Fully resolved ``key = value`` echo (truncation filled in)."""
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "trunc":
                value = self.truncation
            lines.append(f"{f.name} = {_format(value)}\n")
        return "".join(lines)


_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(key: str, text: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELDS[key].type
    text = text.strip()
    if "None" in kind and text.lower() in ("", "none"):
        return None
    try:
        if kind.startswith("bool"):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def parse_pairs(lines, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines to a dict; ``#`` starts a comment."""
    pairs = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> PipelineConfig:
    """Defaults, then the file (if any), then overrides; later sources win."""
    pairs = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        pairs.update(parse_pairs(text.splitlines(), str(path)))
    pairs.update(overrides or {})
    try:
        return PipelineConfig().with_overrides(pairs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
