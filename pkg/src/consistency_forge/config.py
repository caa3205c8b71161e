"""Run configuration: a flat key=value text format with sections, strict
validation (unknown sections or keys are rejected with the offending
name), deterministic canonical serialization, and a stable hash that ties
every artifact back to the configuration that produced it."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .losses import ConsistencyConfig, LossWeights
from .model import ModelConfig
from .synth import CorpusConfig

SEED_ENV_VAR = "CONSISTENCY_FORGE_SEED"


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    logit_lo: float = -6.0
    logit_hi: float = 6.0

    def __post_init__(self):
        if self.steps < 2:
            raise ConfigError("schedule steps must be >= 2")
        if not (0 < self.beta_start < self.beta_end < 1):
            raise ConfigError("need 0 < beta_start < beta_end < 1")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 1
    stage1_steps: int = 3000
    stage2_steps: int = 2000
    batch_size: int = 32
    lr_peak: float = 2e-4
    warmup_steps: int = 300
    use_force_loss: bool = False
    grad_clip: float = 1.0
    checkpoint_every: int = 1000
    mask_check_every: int = 200
    finetune_steps: int = 500
    finetune_lr: float = 1e-4
    finetune_warmup: int = 50

    def __post_init__(self):
        if min(self.stage1_steps, self.stage2_steps, self.batch_size) < 0:
            raise ConfigError("step and batch counts must be non-negative")
        if self.lr_peak <= 0:
            raise ConfigError("lr_peak must be > 0")
        total = self.stage1_steps + self.stage2_steps
        if total > 0 and not (0 <= self.warmup_steps < total):
            raise ConfigError("warmup_steps must be < total steps")


@dataclass(frozen=True)
class SamplingConfig:
    tau_gen: int = 700
    ddim_steps: int = 50

    def __post_init__(self):
        if self.tau_gen < 1 or self.ddim_steps < 1:
            raise ConfigError("sampling steps must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    seed: int = 1
    n_samples: int = 32
    sampler: str = "denoising"
    coverage_delta: float | None = None  # None: median degradation RMSD from the data manifest
    heavy_atoms_only: bool = False

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.sampler not in ("denoising", "ddim"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        if self.coverage_delta is not None and self.coverage_delta <= 0:
            raise ConfigError("coverage_delta must be > 0 or auto")


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def canonical_text(self) -> str:
        lines = []
        for section in sorted(_SECTIONS):
            lines.append(f"[{section}]")
            obj = self._section_obj(section)
            pairs = []
            for cls in _SECTIONS[section]:
                src = obj[cls] if isinstance(obj, dict) else obj
                for f in dataclasses.fields(src):
                    pairs.append((f.name, _format_value(getattr(src, f.name))))
            for name, value in sorted(pairs):
                lines.append(f"{name} = {value}")
            lines.append("")
        return "\n".join(lines)

    def _section_obj(self, section: str):
        if section == "train":
            return {TrainConfig: self.train, LossWeights: self.weights}
        return getattr(self, _SECTION_ATTR[section])

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def write(self, path: Path) -> None:
        Path(path).write_text(self.canonical_text(), encoding="utf-8")

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)


# section name -> dataclasses whose fields live in that section
_SECTIONS: dict[str, tuple] = {
    "corpus": (CorpusConfig,),
    "schedule": (ScheduleConfig,),
    "model": (ModelConfig,),
    "train": (TrainConfig, LossWeights),
    "consistency": (ConsistencyConfig,),
    "sampling": (SamplingConfig,),
    "eval": (EvalConfig,),
}
_SECTION_ATTR = {
    "corpus": "corpus",
    "schedule": "schedule",
    "model": "model",
    "consistency": "consistency",
    "sampling": "sampling",
    "eval": "eval",
}


def _format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(section: str, key: str, raw: str, ftype) -> object:
    raw = raw.strip()
    try:
        if ftype is int:
            return int(raw)
        if ftype is float:
            return float(raw)
        if ftype is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if ftype == float | None:
            if raw.lower() in ("auto", "none", ""):
                return None
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: {e}") from None


def _field_types(classes) -> dict[str, tuple[type, object]]:
    out = {}
    for cls in classes:
        for f in dataclasses.fields(cls):
            out[f.name] = (cls, f.type)
    return out


_TYPE_BY_NAME = {
    "int": int,
    "float": float,
    "bool": bool,
    "str": str,
    "float | None": float | None,
}


def load_config(path: Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Parse the key=value config file plus ``section.key=value`` flag
    overrides. Missing keys fall back to defaults; unknown sections or
    keys raise ConfigError naming the offender."""
    raw: dict[str, dict[str, str]] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"malformed config {path}: {e}") from None
        for section in parser.sections():
            raw[section] = dict(parser.items(section))
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        raw.setdefault(section.strip(), {})[key.strip()] = value.strip()
    return build_config(raw)


def build_config(raw: dict[str, dict[str, str]]) -> RunConfig:
    unknown_sections = set(raw) - set(_SECTIONS)
    if unknown_sections:
        raise ConfigError(f"unknown config section {sorted(unknown_sections)[0]!r}")
    kwargs_by_cls: dict[type, dict] = {}
    for section, classes in _SECTIONS.items():
        types = _field_types(classes)
        for key, value in raw.get(section, {}).items():
            if key not in types:
                raise ConfigError(f"unknown config key [{section}] {key!r}")
            cls, ftype = types[key]
            if isinstance(ftype, str):
                ftype = _TYPE_BY_NAME.get(ftype, str)
            kwargs_by_cls.setdefault(cls, {})[key] = _coerce(section, key, value, ftype)

    def make(cls):
        return cls(**kwargs_by_cls.get(cls, {}))

    return RunConfig(
        corpus=make(CorpusConfig),
        schedule=make(ScheduleConfig),
        model=make(ModelConfig),
        train=make(TrainConfig),
        weights=make(LossWeights),
        consistency=make(ConsistencyConfig),
        sampling=make(SamplingConfig),
        eval=make(EvalConfig),
    )


def make_schedule(cfg: ScheduleConfig):
    from .diffusion import make_sigmoid_schedule

    return make_sigmoid_schedule(
        cfg.steps, cfg.beta_start, cfg.beta_end, cfg.logit_lo, cfg.logit_hi
    )


def schedule_meta(cfg: ScheduleConfig) -> dict:
    return dataclasses.asdict(cfg)
