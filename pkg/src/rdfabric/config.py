"""Run configuration: sectioned INI files with typed defaults and strict keys."""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Tuple

from .data import SplitConfig
from .model import ModelConfig
from .objective import LossWeights
from .teacher import BackboneSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending ``section.key`` when known."""

    def __init__(self, message: str, key: str = ""):
        super().__init__(message)
        self.key = key


@dataclass
class DataSection:
    root: str = "data"
    classes: Tuple[str, ...] = ()
    mask_suffix: str = "_mask"
    train_fraction: float = 0.70
    split_seed: int = 0


@dataclass
class ModelSection:
    mode: str = "standard"
    link_taps: Tuple[int, ...] = (0, 1)
    injection: str = "add"
    attention_reduction: int = 8
    sspcab_reduction: int = 8
    alpha: Tuple[float, ...] = (0.4, 0.3, 0.2, 0.1)
    lambda_sspcab: float = 0.1
    sigma: float = 4.0


@dataclass
class TeacherSection:
    weights: str = "auto"
    weights_sha256: str = ""
    input_size: int = 256
    seed: int = 0


@dataclass
class TrainSection:
    learning_rate: float = 0.005
    epochs: int = 100
    batch_size: int = 4
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    early_stop_patience: int = 20
    seed: int = 0
    device: str = "cpu"
    adam_betas: Tuple[float, float] = TrainConfig.adam_betas


@dataclass
class OutputSection:
    dir: str = "runs"
    overwrite: bool = False


@dataclass
class EvalSection:
    pixel: bool = False
    coverage: bool = False
    scores_csv: bool = False
    patch_size: int = 256
    batch_size: int = 32
    bench_batches: Tuple[int, ...] = (16, 32)
    bench_patches: int = 96
    warmup_batches: int = 1


SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "teacher": TeacherSection,
    "train": TrainSection,
    "output": OutputSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    train: TrainSection = field(default_factory=TrainSection)
    output: OutputSection = field(default_factory=OutputSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- typed views consumed by the library --------------------------------

    def model_config(self) -> ModelConfig:
        m = self.model
        taps = () if m.mode == "domain_generalized" else m.link_taps
        return ModelConfig(mode=m.mode, link_taps=taps, injection=m.injection,
                           attention_reduction=m.attention_reduction,
                           sspcab_reduction=m.sspcab_reduction,
                           input_size=self.teacher.input_size)

    def backbone(self) -> BackboneSpec:
        t = self.teacher
        return BackboneSpec(input_size=t.input_size, weights=t.weights,
                            weights_sha256=t.weights_sha256 or None, seed=t.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self.train, f.name) for f in fields(TrainSection)})

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=list(self.model.alpha), lambda_sspcab=self.model.lambda_sspcab)

    def split_config(self) -> SplitConfig:
        return SplitConfig(self.data.train_fraction, self.data.split_seed)

    def validate(self) -> "RunConfig":
        """Build every typed view once so bad values surface as ConfigError."""
        checks = [("model", self.model_config), ("teacher", self.backbone),
                  ("train", self.train_config), ("model", self.loss_weights),
                  ("data", self.split_config)]
        for section, build in checks:
            try:
                build()
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"[{section}] {exc}", section) from exc
        if self.model.sigma <= 0:
            raise ConfigError("[model] sigma must be positive", "model.sigma")
        return self


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [v.strip() for v in raw.split(",") if v.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(v) for v in items)
        return raw
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}", key) from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def apply_overrides(cfg: RunConfig, overrides: Dict[str, str]) -> RunConfig:
    """Set ``section.key`` entries from strings, with the same strictness as the file."""
    for dotted, raw in overrides.items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key", dotted)
        section, key = dotted.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", dotted)
        obj = getattr(cfg, section)
        names = {f.name for f in fields(obj)}
        if key not in names:
            raise ConfigError(f"unknown key {dotted}", dotted)
        setattr(obj, key, _parse_value(str(raw), getattr(type(obj)(), key), dotted))
    return cfg


def load_config(path=None, overrides: Dict[str, str] = None) -> RunConfig:
    """Read an INI file (missing keys take defaults) and apply overrides."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        values = {}
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}] in {path}", section)
            for key, raw in parser.items(section):
                values[f"{section}.{key}"] = raw
        apply_overrides(cfg, values)
    apply_overrides(cfg, overrides or {})
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in SECTIONS:
        obj = getattr(cfg, name)
        parser[name] = {f.name: _format_value(getattr(obj, f.name)) for f in fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_resolved(cfg: RunConfig, directory) -> Path:
    path = Path(directory) / "resolved_config.ini"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))
    return path
