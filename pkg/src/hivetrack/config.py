"""Pipeline configuration: one INI file with a section per stage.

Every field of the stage dataclasses is a key of its section. Keys absent
from the file keep their defaults; unknown keys are an error. Command-line
flags of the form ``--section.key`` override the file.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .appearance import ClassifierConfig
from .fragments import MatcherConfig
from .joiner import JoinerConfig
from .metrics import EvalConfig
from .synth import HiveScenario, NoiseConfig, make_scenario


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioParams:
    """Inputs of ``make_scenario`` (the seed comes from the run section)."""

    num_agents: int = 20
    width: int = 512
    height: int = 512
    num_frames: int = 1000
    fps: float = 10.0
    stationary_fraction: float = 0.3
    occlusion_fraction: float = 0.1
    occlusion_min: int = 5
    occlusion_max: int = 40
    abdomen_fraction: float = 0.0
    abdomen_min: int = 20
    abdomen_max: int = 80
    walker_speed: float = 2.0
    heading_persistence: float = 0.95
    jitter_sigma: float = 0.5
    texture_similarity: float = 0.0
    margin: float = 40.0
    min_separation: float = 50.0

    def build(self, seed: int) -> HiveScenario:
        return make_scenario(**asdict(self), seed=seed)


@dataclass(frozen=True)
class RunParams:
    seed: int = 0
    write_frames: bool = True


# Keys that may not come from a file: they either are structured or must not
# influence any output byte.
_NOT_CONFIGURABLE = {"eval": {"windows"}, "joiner": {"workers"}}


@dataclass(frozen=True)
class PipelineConfig:
    run: RunParams = field(default_factory=RunParams)
    scenario: ScenarioParams = field(default_factory=ScenarioParams)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    joiner: JoinerConfig = field(default_factory=JoinerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def seed(self) -> int:
        return self.run.seed


SECTIONS = tuple(f.name for f in fields(PipelineConfig))


def configurable_fields(section: str, cfg: PipelineConfig | None = None):
    """(name, default) pairs of one section, in declaration order."""
    obj = getattr(cfg or PipelineConfig(), section)
    skip = _NOT_CONFIGURABLE.get(section, set())
    return [(f.name, getattr(obj, f.name)) for f in fields(obj) if f.name not in skip]


def _coerce(text: str, like, where: str):
    try:
        if isinstance(like, bool):
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(like).__name__}") from None


def with_overrides(cfg: PipelineConfig, values: dict[str, dict[str, str]],
                   source: str = "config") -> PipelineConfig:
    """Apply string values keyed by section then key."""
    updates = {}
    for section, kv in values.items():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        allowed = dict(configurable_fields(section, cfg))
        changes = {}
        for key, text in kv.items():
            if key not in allowed:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            changes[key] = _coerce(text, allowed[key], f"{source}: {section}.{key}")
        if changes:
            try:
                updates[section] = replace(getattr(cfg, section), **changes)
            except ValueError as exc:
                raise ConfigError(f"{source}: [{section}] {exc}") from None
    return replace(cfg, **updates)


def load_config(path) -> PipelineConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"missing config file: {p}")
    cp = configparser.ConfigParser()
    try:
        cp.read_string(p.read_text(), source=str(p))
    except configparser.Error as exc:
        raise ConfigError(f"{p}: {exc.message if hasattr(exc, 'message') else exc}") from None
    values = {s: dict(cp[s]) for s in cp.sections()}
    return with_overrides(PipelineConfig(), values, str(p))


def to_ini(cfg: PipelineConfig) -> str:
    """Every configurable value, suitable for ``load_config``."""
    cp = configparser.ConfigParser()
    for section in SECTIONS:
        cp[section] = {k: str(v) for k, v in configurable_fields(section, cfg)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def manifest_entries(cfg: PipelineConfig) -> dict[str, str]:
    return {f"{s}.{k}": str(v) for s in SECTIONS for k, v in configurable_fields(s, cfg)}
