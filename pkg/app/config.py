import configparser
import os
from dataclasses import dataclass, field, fields, is_dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union, get_args, get_origin

from dotenv import load_dotenv

from app.services.atc import AtcConfig
from app.services.contrastive import ContrastiveConfig
from app.services.model import ModelConfig, OptimizerConfig
from app.services.synth import SPLITS, AugmentConfig, CorpusSpec

load_dotenv()

# Environment variables
LOG_LEVEL = os.getenv("APL_LOG_LEVEL", "INFO")
WORKERS = max(1, int(os.getenv("APL_WORKERS", "1")))
SHOW_PROGRESS = os.getenv("APL_PROGRESS", "1").lower() not in ("0", "false", "no")

MODES = ("supervised", "pl", "mpl", "apl")
SEED_LOSSES = ("ctc", "contrastive")
SCHEDULES = ("one_step", "two_step")
STATS_MODELS = ("student", "teacher")


class ConfigError(ValueError):
    """Raised for malformed or inconsistent run configuration."""


@dataclass(frozen=True)
class DataConfig:
    """Where the corpus comes from: a saved directory or a spec to generate."""

    corpus_dir: Optional[str] = None
    spec: CorpusSpec = field(default_factory=CorpusSpec)


@dataclass(frozen=True)
class RunConfig:
    """
    Everything a training run needs. ``threshold`` None means automatic
    thresholding; a number is a fixed threshold.
    """

    mode: str = "apl"
    seed_loss: str = "contrastive"
    schedule: str = "two_step"
    switch_fraction: float = 0.5
    threshold: Optional[float] = None
    relative_correction: bool = True
    seed_updates: int = 600
    pl_updates: int = 600
    labeled_batch: int = 8
    unlabeled_batch: int = 8
    eval_every: int = 100
    relabel_every: int = 1
    utt_filter: Optional[float] = None
    labeled_stats_from: str = "student"
    confidence_mode: str = "average"
    augment_strength: float = 1.0
    ema_decay: float = 0.999
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    atc: AtcConfig = field(default_factory=AtcConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        checks = [
            (self.mode in MODES, f"mode must be one of {MODES}"),
            (self.seed_loss in SEED_LOSSES, f"seed_loss must be one of {SEED_LOSSES}"),
            (self.schedule in SCHEDULES, f"schedule must be one of {SCHEDULES}"),
            (0.0 < self.switch_fraction < 1.0, "switch_fraction must be in (0, 1)"),
            (self.threshold is None or self.threshold >= 0.0, "threshold must be >= 0"),
            (self.seed_updates >= 0 and self.pl_updates >= 0, "budgets must be >= 0"),
            (self.labeled_batch >= 1 and self.unlabeled_batch >= 1, "batch sizes must be >= 1"),
            (self.eval_every >= 1 and self.relabel_every >= 1, "cadences must be >= 1"),
            (self.utt_filter is None or 0.0 <= self.utt_filter <= 1.0, "utt_filter in [0, 1]"),
            (self.labeled_stats_from in STATS_MODELS, f"labeled_stats_from in {STATS_MODELS}"),
            (self.confidence_mode in ("average", "max"), "confidence_mode is average or max"),
            (0.0 <= self.augment_strength <= 1.0, "augment_strength must be in [0, 1]"),
            (0.0 <= self.ema_decay <= 1.0, "ema_decay must be in [0, 1]"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    @property
    def switch_update(self) -> int:
        """First pseudo-labeling update trained with CTC instead of ATC."""
        if self.schedule == "one_step":
            return self.pl_updates
        return int(round(self.switch_fraction * self.pl_updates))


# INI section -> attribute of RunConfig (None: top-level scalars).
SECTIONS: Dict[str, Optional[Tuple[str, ...]]] = {
    "run": None,
    "data": ("data",),
    "corpus": ("data", "spec"),
    "model": ("model",),
    "optim": ("optimizer",),
    "atc": ("atc",),
    "contrastive": ("contrastive",),
    "augment": ("augment",),
}

_NONE_WORDS = ("", "none", "auto")


def _convert(raw: str, tp: Any) -> Any:
    origin = get_origin(tp)
    if origin is Union:
        if raw.strip().lower() in _NONE_WORDS:
            return None
        tp = next(arg for arg in get_args(tp) if arg is not type(None))
        origin = get_origin(tp)
    raw = raw.strip()
    if tp is bool:
        states = configparser.ConfigParser.BOOLEAN_STATES
        if raw.lower() not in states:
            raise ValueError(f"not a boolean: {raw!r}")
        return states[raw.lower()]
    if tp in (int, float, str):
        return tp(raw)
    if origin is tuple:
        return tuple(int(part) for part in raw.split(","))
    if isinstance(tp, type) and issubclass(tp, Enum):
        return tp(raw)
    raise TypeError(f"Unsupported config type {tp}")


def _format(value: Any, name: str = "") -> str:
    if value is None:
        return "auto" if name == "threshold" else "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _scalar_fields(obj: Any) -> Dict[str, Any]:
    """Fields holding plain values, i.e. neither nested configs nor the split sizes."""
    return {
        f.name: f
        for f in fields(obj)
        if not is_dataclass(getattr(obj, f.name)) and not isinstance(getattr(obj, f.name), dict)
    }


def _apply_section(obj: Any, section: str, items: Mapping[str, str]) -> Any:
    known = _scalar_fields(obj)
    changes: Dict[str, Any] = {}
    sizes = dict(getattr(obj, "sizes", {}))
    for key, raw in items.items():
        if key.startswith("sizes.") and hasattr(obj, "sizes"):
            split = key.split(".", 1)[1]
            if split not in SPLITS:
                raise ConfigError(f"[{section}] unknown split {split!r}")
            sizes[split] = int(raw)
            changes["sizes"] = sizes
            continue
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        try:
            changes[key] = _convert(raw, known[key].type)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {e}") from e
    try:
        return replace(obj, **changes)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {e}") from e


def _get(cfg: RunConfig, path: Tuple[str, ...]) -> Any:
    obj: Any = cfg
    for name in path:
        obj = getattr(obj, name)
    return obj


def _set(cfg: Any, path: Tuple[str, ...], value: Any) -> Any:
    if len(path) == 1:
        return replace(cfg, **{path[0]: value})
    return replace(cfg, **{path[0]: _set(getattr(cfg, path[0]), path[1:], value)})


def parse_run_config(text: str = "", overrides: Optional[Mapping[str, str]] = None) -> RunConfig:
    """
    Builds a RunConfig from INI text, then applies ``section.key`` overrides.

    Raises:
        ConfigError: Unknown section or key, or an invalid value.
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"Malformed config: {e}") from e

    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, str(value))

    cfg = RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"Unknown config section [{section}]")
        path = SECTIONS[section]
        items = dict(parser.items(section))
        if path is None:
            cfg = _apply_section(cfg, section, items)
        else:
            cfg = _set(cfg, path, _apply_section(_get(cfg, path), section, items))
    return cfg


def load_run_config(
    path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, str]] = None
) -> RunConfig:
    """Reads ``path`` (if given) and applies overrides; see :func:`parse_run_config`."""
    text = Path(path).read_text() if path else ""
    return parse_run_config(text, overrides)


def dump_run_config(cfg: RunConfig) -> str:
    """Renders ``cfg`` as INI text that :func:`parse_run_config` reads back unchanged."""
    parser = configparser.ConfigParser(interpolation=None)
    for section, path in SECTIONS.items():
        obj = cfg if path is None else _get(cfg, path)
        parser.add_section(section)
        for name in _scalar_fields(obj):
            parser.set(section, name, _format(getattr(obj, name), name))
        for split, size in sorted(getattr(obj, "sizes", {}).items()):
            parser.set(section, f"sizes.{split}", str(size))

    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in parser.items(section))
        lines.append("")
    return "\n".join(lines)
