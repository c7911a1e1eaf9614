"""Run configuration: strict JSON schema, profiles, presets, run directories."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .attacks import AttackConfig
from .data import DatasetStore, SamplerConfig, generate_synthetic, load_fsb
from .errors import ConfigError, RunDirError
from .evaluation import EvalConfig
from .models import EmbeddingNetConfig
from .training import PRESETS, OptimizerState, ScheduleConfig

SEED_ENV = "LCAT_SEED"


@dataclass(frozen=True)
class DataConfig:
    """Where episodes come from: an FSB1 file, or a synthetic set rebuilt on demand."""

    path: str | None = None
    num_classes: int = 20
    images_per_class: int = 40
    height: int = 16
    width: int = 16
    channels: int = 1
    noise_std: float = 0.35
    test_fraction: float = 0.25
    val_fraction: float = 0.0
    seed: int = 0

    def synthetic_kwargs(self) -> dict:
        d = asdict(self)
        del d["path"]
        return d

    def load(self) -> DatasetStore:
        if self.path is not None:
            return load_fsb(self.path)
        return generate_synthetic(**self.synthetic_kwargs())


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.build()

    def build(self) -> OptimizerState:
        return OptimizerState(self.kind, self.lr, self.beta1, self.beta2, self.eps)


# perturbation budget of the desk profile, picked on the synthetic set so that
# a naturally trained model loses well over 20 accuracy points under attack
DESK_EPSILON = 0.03


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = DataConfig()
    model: EmbeddingNetConfig = EmbeddingNetConfig()
    sampler: SamplerConfig = SamplerConfig(way=5, shot=1, query=5, split="train")
    schedule: ScheduleConfig = ScheduleConfig(meta_batches_per_epoch=10,
                                              update_granularity="per_term")
    train_attack: AttackConfig = AttackConfig(DESK_EPSILON, DESK_EPSILON / 4, 7)
    optimizer: OptimizerConfig = OptimizerConfig()
    eval: EvalConfig = EvalConfig(query=5, attack=AttackConfig(DESK_EPSILON, DESK_EPSILON / 4, 20))

    def __post_init__(self):
        self.validate_geometry()

    def validate_geometry(self) -> None:
        d, m = self.data, self.model
        if d.path is None:
            if (d.channels, d.height, d.width) != (m.in_channels, m.image_size, m.image_size):
                raise ConfigError(f"model expects {m.in_channels}x{m.image_size}x{m.image_size} "
                                  f"images, data are {d.channels}x{d.height}x{d.width}")
            n_test = int(round(d.num_classes * d.test_fraction))
            n_val = int(round(d.num_classes * d.val_fraction))
            n_train = d.num_classes - n_test - n_val
            for name, avail, s in (("test", n_test, self.eval), ("train", n_train, self.sampler)):
                if avail < s.way:
                    raise ConfigError(f"{name} split has {avail} classes, fewer than way={s.way}")
            for name, s in (("train", self.sampler), ("test", self.eval)):
                if s.shot + s.query > d.images_per_class:
                    raise ConfigError(f"{name} episodes need {s.shot + s.query} images per class, "
                                      f"data have {d.images_per_class}")

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict, base: RunConfig | None = None) -> RunConfig:
        """Overlay ``d`` on ``base`` (default: the desk profile); unknown keys are errors."""
        return _overlay(base or RunConfig(), d, "config")

    @property
    def eval_sampler(self) -> SamplerConfig:
        return self.eval.sampler


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _overlay(obj, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(obj)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    optional = {f.name for f in fields(obj) if "None" in str(f.type)}
    changes = {}
    for key, value in d.items():
        current = getattr(obj, key)
        if value is None and key in optional:
            changes[key] = None
        elif dataclasses.is_dataclass(current):
            changes[key] = _overlay(current, value, f"{where}.{key}")
        else:
            changes[key] = _coerce(current, value, f"{where}.{key}")
    try:
        return replace(obj, **changes)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _coerce(current, value, where: str):
    """Reject type mismatches early instead of failing deep inside training."""
    if isinstance(current, bool):
        ok = isinstance(value, bool)
    elif isinstance(current, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(current, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(current, str):
        ok = isinstance(value, str)
    elif isinstance(current, tuple):
        ok = isinstance(value, list) and all(isinstance(v, int) for v in value)
        value = tuple(value) if ok else value
    else:  # an optional path that is currently unset
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"{where}: bad value {value!r}")
    return value


def paper_profile() -> RunConfig:
    """Hyperparameters of the full-scale experiments (8/255 budget, lr 0.1, 15 queries)."""
    train = AttackConfig(8 / 255, 2 / 255, 7)
    return RunConfig(
        sampler=SamplerConfig(5, 1, 15, "train"),
        schedule=ScheduleConfig(meta_batches_per_epoch=100, update_granularity="per_block"),
        train_attack=train,
        optimizer=OptimizerConfig(lr=0.1),
        eval=EvalConfig(query=15, attack=AttackConfig(8 / 255, 2 / 255, 20)),
    )


PROFILES = {"desk": RunConfig, "paper": paper_profile}


def profile(name: str) -> RunConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; valid: {', '.join(PROFILES)}")
    return PROFILES[name]()


def with_preset(cfg: RunConfig, name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; valid: {', '.join(PRESETS)}")
    return replace(cfg, schedule=replace(cfg.schedule, **PRESETS[name]))


def load_config_file(path, base: RunConfig) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return RunConfig.from_dict(d, base)


def resolve_seed(flag: int | None, fallback: int) -> int:
    """Flag first, then ``LCAT_SEED``, then the configured value."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
        if seed < 0:
            raise ConfigError(f"{SEED_ENV} must be >= 0")
        return seed
    return fallback


@dataclass
class RunDirectory:
    """Layout of one training run; holds a lock file while a command uses it."""

    root: Path
    _lock_fd: int | None = field(default=None, repr=False)

    def __post_init__(self):
        self.root = Path(self.root)

    config = property(lambda self: self.root / "config.json")
    metrics = property(lambda self: self.root / "metrics.jsonl")
    checkpoint = property(lambda self: self.root / "checkpoint.ckpt")
    checkpoints = property(lambda self: self.root / "checkpoints")
    reports = property(lambda self: self.root / "reports")
    sweeps = property(lambda self: self.root / "sweeps")
    lock_path = property(lambda self: self.root / ".lock")

    def prepare(self, force: bool) -> None:
        """Create (or with ``force`` clear) the directory for a new run."""
        if self.config.exists() and not force:
            raise RunDirError(f"{self.root} already holds a run; pass --force to overwrite")
        self.root.mkdir(parents=True, exist_ok=True)
        self.clear_outputs()

    def clear_outputs(self) -> None:
        for p in (self.config, self.metrics, self.checkpoint):
            p.unlink(missing_ok=True)
        for d in (self.checkpoints, self.reports, self.sweeps):
            if d.is_dir():
                for f in d.iterdir():
                    f.unlink()

    def read_config(self) -> RunConfig:
        if not self.config.exists():
            raise RunDirError(f"{self.root} has no config.json")
        return load_config_file(self.config, RunConfig())

    def __enter__(self) -> RunDirectory:
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            self._lock_fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunDirError(f"{self.root} is locked by another command ({self.lock_path})",
                              code="E_LOCKED") from None
        os.write(self._lock_fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc) -> None:
        if self._lock_fd is not None:
            os.close(self._lock_fd)
            self.lock_path.unlink(missing_ok=True)
            self._lock_fd = None
