"""Run configuration: strict INI-style files with typed, validated sections.

Unknown sections or keys are fatal so a typo cannot silently fall back to
a default in the middle of an ablation run.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

from .model import BranchSpec
from .pooling import MilStrategy


class ConfigError(ValueError):
    """Configuration file rejected: unknown key, bad value, or bad type."""


@dataclass
class DataSection:
    train_dir: str = ""
    test_dir: str = ""
    sample_rate: int = 22050
    cache_features: bool = True


@dataclass
class ModelSection:
    preset: str = "small"
    branches: tuple[str, ...] = ("E-ATP", "I-GAP", "I-GMP")


@dataclass
class TrainingSection:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 60
    seed: int = 0
    repeats: int = 1


@dataclass
class PostprocessSection:
    threshold: float = 0.5
    tag_threshold: float = 0.5  # clip-level gate; 0 disables
    window: str = "adaptive"  # "adaptive" or an odd frame count


@dataclass
class EvalSection:
    protocol: str = "segment"
    onset_collar: float = 0.2
    offset_tolerance: float = 0.2
    segment_length: float = 1.0


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    postprocess: PostprocessSection = field(default_factory=PostprocessSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def branch_specs(self) -> tuple[BranchSpec, ...]:
        return parse_branches(self.model.branches)

    def validate(self) -> "RunConfig":
        if self.model.preset not in ("small", "large"):
            raise ConfigError(f"model preset must be small or large, got {self.model.preset!r}")
        self.branch_specs()
        if self.training.batch_size < 1 or self.training.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.training.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.training.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if not 0.0 < self.postprocess.threshold < 1.0:
            raise ConfigError("postprocess threshold must lie in (0, 1)")
        if not 0.0 <= self.postprocess.tag_threshold < 1.0:
            raise ConfigError("postprocess tag_threshold must lie in [0, 1)")
        if self.postprocess.window != "adaptive":
            try:
                w = int(self.postprocess.window)
            except ValueError:
                raise ConfigError(
                    f"postprocess window must be 'adaptive' or an odd integer, "
                    f"got {self.postprocess.window!r}"
                ) from None
            if w < 1 or w % 2 == 0:
                raise ConfigError(f"postprocess window must be odd and positive, got {w}")
        if self.eval.protocol not in ("event", "segment", "both"):
            raise ConfigError(
                f"eval protocol must be event, segment, or both, got {self.eval.protocol!r}"
            )
        if self.eval.segment_length <= 0:
            raise ConfigError("segment_length must be positive")
        return self


def parse_branches(names) -> tuple[BranchSpec, ...]:
    """Branch strings like "E-ATP" into specs; exactly one main branch."""
    specs = tuple(
        BranchSpec.parse(name, 1.0 if name.strip().upper().startswith("E") else 0.5)
        for name in names
    )
    if not specs:
        raise ConfigError("branch list is empty")
    mains = [s for s in specs if s.strategy is MilStrategy.EMBEDDING]
    if len(mains) != 1:
        raise ConfigError(
            f"branch list must contain exactly one embedding-level (E-*) entry, "
            f"got {len(mains)} in {list(names)}"
        )
    return specs


_BOOL_VALUES = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _convert(section: str, key: str, raw: str, kind):
    try:
        if kind is bool:
            return _BOOL_VALUES[raw.strip().lower()]
        return kind(raw)
    except (ValueError, KeyError):
        raise ConfigError(
            f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}"
        ) from None


_SCHEMA = {
    "data": (DataSection, {"train_dir": str, "test_dir": str, "sample_rate": int, "cache_features": bool}),
    "model": (ModelSection, {"preset": str, "branches": "branch_list"}),
    "training": (TrainingSection, {"learning_rate": float, "batch_size": int, "epochs": int, "seed": int, "repeats": int}),
    "postprocess": (PostprocessSection, {"threshold": float, "tag_threshold": float, "window": str}),
    "eval": (EvalSection, {"protocol": str, "onset_collar": float, "offset_tolerance": float, "segment_length": float}),
}


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    config = RunConfig()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(
                f"{source}: unknown section [{section}]; expected one of {sorted(_SCHEMA)}"
            )
        _, keys = _SCHEMA[section]
        target = getattr(config, section)
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigError(
                    f"{source}: unknown key {key!r} in [{section}]; "
                    f"expected one of {sorted(keys)}"
                )
            kind = keys[key]
            if kind == "branch_list":
                value = tuple(part.strip() for part in raw.split(",") if part.strip())
            else:
                value = _convert(section, key, raw, kind)
            setattr(target, key, value)
    return config.validate()


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_run_config(text, source=str(path))


def resolved_text(config: RunConfig) -> str:
    """Render every key explicitly so the file alone reproduces the run."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["data"] = {
        "train_dir": config.data.train_dir,
        "test_dir": config.data.test_dir,
        "sample_rate": str(config.data.sample_rate),
        "cache_features": str(config.data.cache_features).lower(),
    }
    parser["model"] = {
        "preset": config.model.preset,
        "branches": ", ".join(config.model.branches),
    }
    parser["training"] = {
        "learning_rate": repr(config.training.learning_rate),
        "batch_size": str(config.training.batch_size),
        "epochs": str(config.training.epochs),
        "seed": str(config.training.seed),
        "repeats": str(config.training.repeats),
    }
    parser["postprocess"] = {
        "threshold": repr(config.postprocess.threshold),
        "tag_threshold": repr(config.postprocess.tag_threshold),
        "window": config.postprocess.window,
    }
    parser["eval"] = {
        "protocol": config.eval.protocol,
        "onset_collar": repr(config.eval.onset_collar),
        "offset_tolerance": repr(config.eval.offset_tolerance),
        "segment_length": repr(config.eval.segment_length),
    }
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()
