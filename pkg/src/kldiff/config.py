"""Experiment configuration and its flat ``section.key = value`` text format."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .schedules import ConfigError, GuidanceRamp, KLWeightConfig, make_schedule


@dataclass(frozen=True)
class ScheduleSection:
    kind: str = "linear"
    T: int = 100
    beta_min: typing.Optional[float] = None
    beta_max: typing.Optional[float] = None


@dataclass(frozen=True)
class WeightsSection:
    kind: str = "exp-decay"
    gamma: float = 1.0
    normalize: bool = True
    reverse: bool = False


@dataclass(frozen=True)
class GuidanceSection:
    text: bool = True          # False = no text conditioning at all
    g_min: float = 0.0
    g_max: float = 1.0
    ramp_epochs: int = 5
    p_drop: float = 0.1
    scale: float = 1.0


@dataclass(frozen=True)
class ModelSection:
    patch: int = 4
    d_img: int = 32
    d_txt: int = 16
    d_k: int = 16
    n_blocks: int = 2
    hidden: int = 64
    tokens: int = 8


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 30
    batch_size: int = 64
    objective: str = "weighted"   # or "elbo"
    optimizer: str = "adam"
    lr: float = 2e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_step_epochs: int = 0       # 0 = constant learning rate
    lr_step_factor: float = 0.5
    ema_decay: float = 0.99
    max_loss: float = 1e6
    seed: int = 0


@dataclass(frozen=True)
class FinetuneSection:
    enabled: bool = True
    period: int = 5
    per_caption: int = 1
    tau: float = 0.9
    q: float = 0.5
    capacity: int = 256
    mix: float = 0.25


@dataclass(frozen=True)
class DataSection:
    n: int = 2000
    seed: int = 0
    height: int = 16
    width: int = 16


@dataclass(frozen=True)
class MetricsSection:
    extractor_seed: int = 1234
    d_f: int = 64
    n_gen: int = 384
    use_ema: bool = True


@dataclass(frozen=True)
class TrainConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    weights: WeightsSection = field(default_factory=WeightsSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    data: DataSection = field(default_factory=DataSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def noise_schedule(self):
        s = self.schedule
        return make_schedule(s.kind, s.T, s.beta_min, s.beta_max)

    def weight_config(self) -> KLWeightConfig:
        w = self.weights
        return KLWeightConfig(w.kind, w.gamma, w.normalize, w.reverse)

    def ramp(self) -> GuidanceRamp:
        g = self.guidance
        return GuidanceRamp(g.g_min, g.g_max, g.ramp_epochs)

    def validate(self) -> "TrainConfig":
        self.noise_schedule()
        self.weight_config()
        self.ramp()
        t = self.train
        if t.objective not in ("weighted", "elbo"):
            raise ConfigError(f"train.objective must be weighted or elbo, not {t.objective!r}")
        if t.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"train.optimizer must be adam or sgd, not {t.optimizer!r}")
        if t.batch_size < 1 or t.epochs < 0 or t.lr <= 0:
            raise ConfigError("train.batch_size >= 1, train.epochs >= 0, train.lr > 0 required")
        if not 0.0 <= t.ema_decay < 1.0:
            raise ConfigError("train.ema_decay must lie in [0, 1)")
        f = self.finetune
        if f.period < 1 or not 0.0 <= f.mix < 1.0 or not 0.0 < f.q <= 1.0:
            raise ConfigError("finetune.period >= 1, 0 <= mix < 1, 0 < q <= 1 required")
        if not 0.0 <= self.guidance.p_drop <= 1.0:
            raise ConfigError("guidance.p_drop must lie in [0, 1]")
        if self.data.n < 1:
            raise ConfigError("data.n must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            sub = f.default_factory()
            kwargs[f.name] = replace(sub, **d.get(f.name, {}))
        return cls(**kwargs).validate()

    def to_text(self) -> str:
        lines = []
        for sec, values in self.to_dict().items():
            for key, val in values.items():
                if val is None:
                    continue
                if isinstance(val, bool):
                    val = "true" if val else "false"
                lines.append(f"{sec}.{key} = {val}")
        return "\n".join(lines) + "\n"

    def with_updates(self, **sections) -> "TrainConfig":
        """``cfg.with_updates(train={"epochs": 3})`` returns an updated copy."""
        new = {name: replace(getattr(self, name), **vals) for name, vals in sections.items()}
        return replace(self, **new).validate()


def _coerce(raw: str, typ, where: str):
    hints = typing.get_args(typ)
    if hints:   # Optional[X]
        if raw.lower() in ("none", ""):
            return None
        typ = next(h for h in hints if h is not type(None))
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {typ.__name__}") from None


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    """Parse ``section.key = value`` lines; unknown sections or keys are errors."""
    sections = {f.name: f.default_factory() for f in fields(TrainConfig)}
    updates: dict[str, dict] = {name: {} for name in sections}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'section.key = value'")
        lhs, rhs = (s.strip() for s in line.split("=", 1))
        if "." not in lhs:
            raise ConfigError(f"{where}: key {lhs!r} has no section")
        sec, key = lhs.split(".", 1)
        if sec not in sections:
            raise ConfigError(f"{where}: unknown section {sec!r}")
        hints = typing.get_type_hints(type(sections[sec]))
        if key not in hints:
            raise ConfigError(f"{where}: unknown key {lhs!r}")
        updates[sec][key] = _coerce(rhs, hints[key], where)
    return TrainConfig(**{name: replace(sections[name], **updates[name])
                          for name in sections}).validate()


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))
