"""Clean and robust accuracy over test episodes, intervals, and step sweeps.

Episode ``i`` of an evaluation draws from its own generator seeded by
``(seed, i)``, so two models evaluated with the same seed see exactly the
same episodes and their accuracies can be compared pairwise.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import EVAL_ATTACK, AttackConfig, pgd_iterates
from .data import DatasetStore, SamplerConfig, make_rng, sample_episode
from .errors import ConfigError
from .models import ModelParams, fine_tune, head_logits

_EVAL_STREAM = 7


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 2000
    way: int = 5
    shot: int = 1
    query: int = 15
    split: str = "test"
    attack: AttackConfig = EVAL_ATTACK
    seed: int = 0
    z: float = 1.96

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError(f"need at least one evaluation episode, got {self.episodes}")
        if self.z < 0:
            raise ConfigError("z must be >= 0")

    @property
    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.way, self.shot, self.query, self.split)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = self.attack.to_dict()
        return d


@dataclass
class MetricReport:
    acc_nat: float
    acc_adv: float
    ci_nat: float
    ci_adv: float
    episodes: int
    adv_eval_steps: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "config": self.config, "acc_nat": self.acc_nat, "ci_nat": self.ci_nat,
            "acc_adv": self.acc_adv, "ci_adv": self.ci_adv, "episodes": self.episodes,
            "adv_eval_steps": self.adv_eval_steps,
        }, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> MetricReport:
        d = json.loads(text)
        return cls(acc_nat=d["acc_nat"], acc_adv=d["acc_adv"], ci_nat=d["ci_nat"],
                   ci_adv=d["ci_adv"], episodes=d["episodes"],
                   adv_eval_steps=d["adv_eval_steps"], config=d["config"])

    def table_line(self) -> str:
        return (f"Acc_nat {format_metric(self.acc_nat, self.ci_nat)}  "
                f"Acc_adv {format_metric(self.acc_adv, self.ci_adv)}")


def confidence_interval(per_episode_acc, z: float = 1.96,
                        allow_single: bool = False) -> tuple[float, float]:
    """Mean and normal-approximation half-width ``z * std(ddof=1) / sqrt(n)``."""
    acc = np.asarray(per_episode_acc, dtype=np.float64)
    if acc.size == 0:
        raise ValueError("confidence_interval of an empty list")
    if acc.size == 1:
        if not allow_single:
            raise ValueError("confidence_interval needs at least two values (sample std undefined)")
        return float(acc[0]), 0.0
    return float(acc.mean()), float(z * acc.std(ddof=1) / math.sqrt(acc.size))


def format_metric(mean: float, half_width: float) -> str:
    """Table-cell style: ``(0.3255, 0.0049) -> '32.55 % (0.49 %)'``."""
    return f"{mean * 100:.2f} % ({half_width * 100:.2f} %)"


def episode_accuracies(params: ModelParams, store: DatasetStore, cfg: EvalConfig,
                       budgets) -> tuple[np.ndarray, np.ndarray]:
    """Per-episode clean accuracy and robust accuracy at each PGD step budget.

    All budgets are read off one PGD trajectory per episode; a ``k``-step
    attack is a prefix of a longer one with the same start.
    """
    budgets = [int(b) for b in budgets]
    if any(b < 0 for b in budgets):
        raise ConfigError("step budgets must be >= 0")
    longest = max(budgets, default=0)
    attack = AttackConfig(**{**cfg.attack.to_dict(), "steps": longest})
    frozen = params.detached()
    sampler = cfg.sampler
    nat = np.empty(cfg.episodes)
    adv = np.empty((cfg.episodes, len(budgets)))
    for i in range(cfg.episodes):
        rng = make_rng(cfg.seed, _EVAL_STREAM, i)
        episode = sample_episode(store, sampler, rng)
        adapted = fine_tune(frozen, episode)
        labels = episode.query_labels

        def accuracy(images):
            return float(np.mean(head_logits(adapted, images).data.argmax(axis=1) == labels))

        nat[i] = accuracy(episode.query_images)
        for step, x in enumerate(pgd_iterates(adapted, episode.query_images, labels, attack, rng)):
            hits = [j for j, b in enumerate(budgets) if b == step]
            if hits:
                adv[i, hits] = accuracy(x)
    return nat, adv


def evaluate(params: ModelParams, store: DatasetStore, cfg: EvalConfig) -> MetricReport:
    """Adapt on clean support, score clean queries, attack the queries, score again."""
    nat, adv = episode_accuracies(params, store, cfg, [cfg.attack.steps])
    acc_nat, ci_nat = confidence_interval(nat, cfg.z, allow_single=True)
    acc_adv, ci_adv = confidence_interval(adv[:, 0], cfg.z, allow_single=True)
    return MetricReport(acc_nat, acc_adv, ci_nat, ci_adv, cfg.episodes, cfg.attack.steps,
                        cfg.to_dict())


@dataclass
class SweepResult:
    steps: list
    acc_adv: list
    ci_adv: list
    acc_nat: float
    per_episode: np.ndarray  # [episodes, len(steps)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["steps", "acc_adv", "ci_adv"])
        for s, a, c in zip(self.steps, self.acc_adv, self.ci_adv):
            writer.writerow([s, repr(a), repr(c)])
        return buf.getvalue()


def pgd_step_sweep(params: ModelParams, store: DatasetStore, steps_list,
                   cfg: EvalConfig) -> SweepResult:
    """Robust accuracy at several step budgets over one shared episode set."""
    steps_list = [int(s) for s in steps_list]
    if not steps_list:
        raise ConfigError("steps list is empty")
    nat, adv = episode_accuracies(params, store, cfg, steps_list)
    rows = [confidence_interval(adv[:, j], cfg.z, allow_single=True) for j in range(len(steps_list))]
    return SweepResult(steps_list, [r[0] for r in rows], [r[1] for r in rows],
                       float(nat.mean()), adv)
