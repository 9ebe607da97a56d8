"""Experiment configuration: flat ``section.key = value`` text files.

Lines are ``key = value`` with ``#`` comments.  Keys without a dot are
top-level; dotted keys address a section.  Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .estimator import NetArch
from .schedule import SCHEDULE_KINDS
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 64
    n_angles: int = 96
    n_bins: int = 96
    n_train: int = 512
    n_test: int = 64
    drfs: tuple[float, ...] = (4.0, 20.0, 100.0)
    train_drf: float = 20.0
    count_scale: float = 1e6
    n_organs: int = 4
    n_lesions: int = 2


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "linear"
    t_max: int = 500
    t_s: int = 30
    beta: float = 1.0
    correction_sign: float = 1.0


@dataclass(frozen=True)
class StageConfig:
    """Step counts for the networks other than the residual estimator (``-1`` = same)."""

    dcn_steps: int = -1
    baseline_steps: int = -1
    epochs: int = 1


@dataclass(frozen=True)
class BaselineConfig:
    osem: bool = True
    fbp: bool = True
    ddim: bool = False
    oneshot: bool = False
    osem_iters: int = 10
    osem_subsets: int = 4
    fbp_filter: str = "ramp-hann"
    ddim_t_start: int = 100
    ddim_steps: int = 20


@dataclass(frozen=True)
class AblationConfig:
    no_dc: bool = False
    no_sl: bool = False
    seeds: tuple[int, ...] = (0, 1, 2)
    drf: float = 20.0


@dataclass(frozen=True)
class MixedConfig:
    mode: str = "none"
    sigma: float = 0.05


@dataclass(frozen=True)
class EvalConfig:
    methods: tuple[str, ...] = ("osem", "fbp", "red")
    drfs: tuple[float, ...] = ()
    previews: bool = True
    mask: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/red"
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    net: NetArch = field(default_factory=NetArch)
    train: TrainConfig = field(default_factory=TrainConfig)
    stages: StageConfig = field(default_factory=StageConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    mixed: MixedConfig = field(default_factory=MixedConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        if any(d < 1 for d in self.data.drfs + (self.data.train_drf, self.ablation.drf)):
            raise ConfigError("DRF values must be >= 1")
        if self.schedule.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"schedule.kind must be one of {SCHEDULE_KINDS}")
        if not 1 <= self.schedule.t_s <= self.schedule.t_max:
            raise ConfigError("schedule.t_s must lie in [1, schedule.t_max]")
        if not 0.0 <= self.schedule.beta <= 1.0:
            raise ConfigError("schedule.beta must lie in [0, 1]")
        if self.schedule.correction_sign not in (1.0, -1.0):
            raise ConfigError("schedule.correction_sign must be +1 or -1")
        if self.mixed.mode not in ("none", "supervised", "unsupervised"):
            raise ConfigError("mixed.mode must be none, supervised or unsupervised")
        if self.data.n_train < 0 or self.data.n_test < 0:
            raise ConfigError("dataset sizes must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self

    @property
    def eval_drfs(self) -> tuple[float, ...]:
        return self.eval.drfs or self.data.drfs


_SECTIONS = ("ablation", "baseline", "data", "eval", "mixed", "net", "schedule", "stages", "train")
# set from the top-level seed and the mixed section
_MANAGED = {"train.seed", "train.noise_mode", "train.noise_sigma"}


def _convert(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if not default:
                kind = float if key.endswith("drfs") else str
            else:
                kind = type(default[0])
            return tuple(kind(s) for s in items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {key}") from exc


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    top: dict = {}
    sections: dict[str, dict] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section {sec!r}")
            target = getattr(cfg, sec)
            if key in _MANAGED:
                raise ConfigError(f"line {lineno}: {key!r} is derived from other keys")
            if name not in {f.name for f in fields(target)}:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            sections.setdefault(sec, {})[name] = _convert(value, getattr(target, name), key)
        else:
            if key not in ("seed", "out", "workers"):
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            top[key] = _convert(value, getattr(cfg, key), key)
    try:
        updates = {sec: replace(getattr(cfg, sec), **vals) for sec, vals in sections.items()}
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return replace(cfg, **top, **updates).validate()


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render every key, suitable for :func:`parse_config`."""
    lines = [f"seed = {cfg.seed}", f"out = {cfg.out}", f"workers = {cfg.workers}"]
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            if f"{sec}.{f.name}" in _MANAGED:
                continue
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{sec}.{f.name} = {v}")
    return "\n".join(lines) + "\n"
