"""L-infinity PGD against a task-adapted few-shot model."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .data import Episode
from .errors import ConfigError, NumericalError
from .models import TaskAdaptedModel
from .tensor import Tensor

OBJECTIVES = ("cross_entropy", "kl_to_clean")
SCOPES = ("query_only", "support_and_query")
# TRADES-style start offset; the KL objective has zero gradient at the clean point
KL_START_STD = 1e-3


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 7
    random_start: bool = False
    clip_lo: float = 0.0
    clip_hi: float = 1.0
    objective: str = "cross_entropy"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.steps > 0 and self.step_size <= 0:
            raise ConfigError("step_size must be > 0 when steps > 0")
        if not self.clip_lo < self.clip_hi:
            raise ConfigError(f"empty pixel box [{self.clip_lo}, {self.clip_hi}]")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}; valid: {', '.join(OBJECTIVES)}")

    def to_dict(self) -> dict:
        return asdict(self)


TRAIN_ATTACK = AttackConfig(epsilon=8 / 255, step_size=2 / 255, steps=7)
EVAL_ATTACK = AttackConfig(epsilon=8 / 255, step_size=2 / 255, steps=20)


@dataclass
class AttackStats:
    invocations: int = 0
    images: int = 0
    support_images: int = 0
    query_images: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _objective(model, x: Tensor, labels, clean_logits, objective: str) -> Tensor:
    logits = model(x)
    if objective == "kl_to_clean":
        return T.kl_divergence(Tensor(clean_logits), logits)
    return T.softmax_cross_entropy(logits, labels)


def pgd_iterates(adapted: TaskAdaptedModel, images: np.ndarray, labels, cfg: AttackConfig,
                 rng: np.random.Generator | None = None) -> Iterator[np.ndarray]:
    """Yield the start point and then the image batch after every PGD step.

    ``adapted`` is any model mapping an image batch to logits that offers
    ``detached()``; normally a ``TaskAdaptedModel``. A ``k``-step attack's output is the ``k``-th yielded array after the
    start, so budgets can be swept on a single trajectory.
    """
    x0 = np.asarray(images)
    dtype = x0.dtype
    eps = cfg.epsilon
    if eps == 0:
        for _ in range(cfg.steps + 1):
            yield x0.copy()
        return
    model = adapted.detached()
    lo = np.maximum(x0 - dtype.type(eps), dtype.type(cfg.clip_lo))
    hi = np.minimum(x0 + dtype.type(eps), dtype.type(cfg.clip_hi))
    clean_logits = None
    if cfg.objective == "kl_to_clean":
        clean_logits = model(x0).data
    x = x0.copy()
    if cfg.random_start:
        x = x + rng.uniform(-eps, eps, size=x.shape).astype(dtype)
    elif cfg.objective == "kl_to_clean" and cfg.steps > 0:
        x = x + (KL_START_STD * rng.standard_normal(x.shape)).astype(dtype)
    x = np.clip(x, lo, hi)
    yield x
    step = dtype.type(cfg.step_size)
    for _ in range(cfg.steps):
        xt = Tensor(x, requires_grad=True)
        (g,) = T.grad(_objective(model, xt, labels, clean_logits, cfg.objective), [xt])
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite input gradient during PGD")
        x = np.clip(x + step * np.sign(g), cfg.clip_lo, cfg.clip_hi)
        # box first, then the eps-ball around x0; the ball meets the box at x0
        x = np.clip(x, lo, hi).astype(dtype, copy=False)
        yield x


def pgd_attack(adapted: TaskAdaptedModel, images: np.ndarray, labels, cfg: AttackConfig,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Untargeted L-inf PGD maximizing ``cfg.objective`` inside the eps-ball and pixel box.

    The attack builds its own graph on detached parameters, so it never
    touches parameter gradients. ``rng`` is needed only for random starts
    and the KL objective.
    """
    needs_rng = cfg.epsilon > 0 and cfg.steps > 0 and (
        cfg.random_start or cfg.objective == "kl_to_clean")
    if needs_rng and rng is None:
        raise ConfigError("this attack configuration needs an rng")
    x = None
    for x in pgd_iterates(adapted, images, labels, cfg, rng):
        pass
    return x


def adversarial_episode(adapted: TaskAdaptedModel, episode: Episode, cfg: AttackConfig,
                        scope: str = "query_only", rng: np.random.Generator | None = None,
                        stats: AttackStats | None = None) -> Episode:
    """Return a copy of ``episode`` whose scoped images are replaced by PGD outputs."""
    if scope not in SCOPES:
        raise ConfigError(f"unknown attack scope {scope!r}; valid: {', '.join(SCOPES)}")
    support = None
    if scope == "support_and_query":
        support = pgd_attack(adapted, episode.support_images, episode.support_labels, cfg, rng)
    query = pgd_attack(adapted, episode.query_images, episode.query_labels, cfg, rng)
    if stats is not None:
        n_support = 0 if support is None else len(support)
        stats.invocations += 1
        stats.support_images += n_support
        stats.query_images += len(query)
        stats.images += n_support + len(query)
    return episode.replace(support_images=support, query_images=query)
