"""Experiment configuration: one INI file drives every stage.

Three sections map onto three dataclasses: [run] holds cross-stage
settings (seed, directories, split sizes, decision threshold), [synth]
the generator knobs, [train] the model and optimizer. Keys are validated
strictly: an unknown section or key is a config error, not a warning,
so typos cannot silently fall back to defaults.

The effective config (after CLI overrides) is rendered to a canonical
text form and hashed; the 16-hex-digit prefix is stamped into every
artifact so stages can tell whether what sits on disk belongs to the
run being asked for. Per-stage RNG seeds are derived by hashing the
global seed with the stage name, which keeps stages decoupled: adding
an event does not reshuffle training.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import TrainConfig
from .synth import SynthConfig


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "out"
    threshold: float = 0.5
    oversample_k: int = 1
    train_events: int = 5
    test_events: int = 2
    val_fraction: float = 0.1
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.oversample_k not in (1, 2):
            raise ConfigError(f"oversample_k must be 1 or 2, got {self.oversample_k}")
        if self.train_events < 1 or self.test_events < 1:
            raise ConfigError(
                f"need at least 1 train and 1 test event, got "
                f"{self.train_events}/{self.test_events}"
            )
        if not 0.0 <= self.val_fraction <= 0.5:
            raise ConfigError(f"val_fraction must be in [0, 0.5], got {self.val_fraction}")
        if self.synth.events != self.train_events + self.test_events:
            raise ConfigError(
                f"synth events ({self.synth.events}) must equal train_events + "
                f"test_events ({self.train_events + self.test_events})"
            )
        self.synth.validate()
        self.train.validate()


_RUN_FIELDS = (
    "seed", "data_dir", "out_dir", "threshold", "oversample_k",
    "train_events", "test_events", "val_fraction",
)
# The training seed is derived from [run] seed, never set directly.
_TRAIN_SKIP = ("seed",)
# Directories say where a run lives, not what it computes: two runs of the
# same experiment in different places must produce byte-identical artifacts,
# so the hash (and the canonical text it is taken from) excludes them.
_HASH_SKIP = ("data_dir", "out_dir")


def _section_specs() -> dict[str, dict[str, object]]:
    """section -> {key: default value} built from the dataclasses."""
    exp_defaults = ExperimentConfig()
    run = {f.name: getattr(exp_defaults, f.name) for f in fields(ExperimentConfig)
           if f.name in _RUN_FIELDS}
    synth = {f.name: getattr(SynthConfig(), f.name) for f in fields(SynthConfig)}
    train = {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)
             if f.name not in _TRAIN_SKIP}
    return {"run": run, "synth": synth, "train": train}


def _parse_scalar(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            raise ConfigError(f"{key}: boolean keys are not supported")
        if isinstance(default, int):
            return int(text, 10)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, str):
            return text
        if isinstance(default, tuple):
            elem = default[0]
            parts = [p.strip() for p in text.split(",")]
            if isinstance(elem, int):
                return tuple(int(p, 10) for p in parts)
            return tuple(float(p) for p in parts)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {text!r} ({e})") from None
    raise ConfigError(f"{key}: unsupported type {type(default).__name__}")


def load_config(path) -> ExperimentConfig:
    """Parse and validate an INI config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(path.read_text(), source=str(path))
    except (configparser.Error, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None

    specs = _section_specs()
    for section in parser.sections():
        if section not in specs:
            raise ConfigError(
                f"{path}: unknown section [{section}], expected {sorted(specs)}"
            )
        for key in parser[section]:
            if key not in specs[section]:
                raise ConfigError(
                    f"{path}: unknown key {key!r} in [{section}]"
                )

    values: dict[str, dict] = {}
    for section, spec in specs.items():
        got = {}
        for key, default in spec.items():
            if parser.has_option(section, key):
                got[key] = _parse_scalar(parser.get(section, key), default, f"[{section}] {key}")
        values[section] = got

    cfg = ExperimentConfig(
        synth=SynthConfig(**values["synth"]),
        train=TrainConfig(**values["train"]),
        **values["run"],
    )
    cfg.validate()
    return cfg


def apply_overrides(
    cfg: ExperimentConfig,
    seed: int | None = None,
    out_dir: str | None = None,
    oversample_k: int | None = None,
    threshold: float | None = None,
) -> ExperimentConfig:
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if out_dir is not None:
        cfg = replace(cfg, out_dir=out_dir)
    if oversample_k is not None:
        cfg = replace(cfg, oversample_k=oversample_k)
    if threshold is not None:
        cfg = replace(cfg, threshold=threshold)
    cfg.validate()
    return cfg


def _fmt_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_fmt_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _render(cfg: ExperimentConfig, with_dirs: bool) -> str:
    data = {
        "run": {k: getattr(cfg, k) for k in _RUN_FIELDS
                if with_dirs or k not in _HASH_SKIP},
        "synth": asdict(cfg.synth),
        "train": {k: v for k, v in asdict(cfg.train).items()
                  if k not in _TRAIN_SKIP},
    }
    lines = []
    for section in ("run", "synth", "train"):
        lines.append(f"[{section}]")
        for key in sorted(data[section]):
            lines.append(f"{key} = {_fmt_value(data[section][key])}")
        lines.append("")
    return "\n".join(lines)


def canonical_text(cfg: ExperimentConfig) -> str:
    """Deterministic rendering used for hashing; directory keys excluded."""
    return _render(cfg, with_dirs=False)


def config_hash(cfg: ExperimentConfig) -> str:
    """16 hex digits identifying the effective config, seed included."""
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()[:16]


def derive_seed(seed: int, stage: str) -> int:
    """Stage-local RNG seed, stable under changes to other stages."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).hexdigest()
    return int(digest[:16], 16) % (2 ** 63)


def to_ini_text(cfg: ExperimentConfig) -> str:
    """Render a config as a loadable INI file, directory keys included."""
    return _render(cfg, with_dirs=True)
