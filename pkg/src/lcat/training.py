"""Cross adversarial meta-training: phase schedule, meta-updates, optimizers.

Epochs alternate between clean and adversarial phases in cycles of
``clean_epochs + adv_epochs``. Within a phase every meta-batch contributes
query-loss gradients of its ``batch_size`` tasks. With ``per_term``
granularity the optimizer steps after every meta-batch; with ``per_block``
the gradients of a whole phase block are summed and applied once when the
block ends, so SGD performs ``theta -= lr / n * sum_j sum_i g_ji``.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, AttackStats, adversarial_episode, TRAIN_ATTACK
from .data import DatasetStore, Episode, SamplerConfig, make_rng, sample_batch
from .errors import ConfigError, NumericalError
from .models import (EmbeddingNetConfig, ModelParams, episode_loss, fine_tune, head_logits,
                     init_params, save_checkpoint)
from .tensor import Tensor

CLEAN, ADV = "CLEAN", "ADV"
MODES = ("NAT", "AT", "AQ", "LCAT")
TRADES_MODES = ("off", "adv_phase_only", "all_epochs")
GRANULARITIES = ("per_block", "per_term")


@dataclass(frozen=True)
class ScheduleConfig:
    mode: str = "LCAT"
    clean_epochs: int = 5
    adv_epochs: int = 5
    epochs: int = 50
    meta_batches_per_epoch: int = 100
    batch_size: int = 8
    trades: str = "off"
    trades_beta: float = 6.0
    update_granularity: str = "per_block"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; valid: {', '.join(MODES)}")
        c, t = self.clean_epochs, self.adv_epochs
        if c < 0 or t < 0 or c + t < 1:
            raise ConfigError(f"need clean_epochs, adv_epochs >= 0 with a positive sum; got {c}, {t}")
        if self.mode in ("AT", "AQ") and c != 0:
            raise ConfigError(f"mode {self.mode} trains adversarially every epoch; clean_epochs must be 0")
        if self.mode == "NAT" and t != 0:
            raise ConfigError("mode NAT has no adversarial epochs; adv_epochs must be 0")
        if self.epochs < 0 or self.meta_batches_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs >= 0, meta_batches_per_epoch >= 1 and batch_size >= 1 required")
        if self.trades not in TRADES_MODES:
            raise ConfigError(f"unknown trades mode {self.trades!r}; valid: {', '.join(TRADES_MODES)}")
        if self.trades_beta < 0:
            raise ConfigError(f"trades_beta must be >= 0, got {self.trades_beta}")
        if self.update_granularity not in GRANULARITIES:
            raise ConfigError(f"unknown update_granularity {self.update_granularity!r}")

    @property
    def cycle(self) -> int:
        return self.clean_epochs + self.adv_epochs

    @property
    def attack_scope(self) -> str:
        return "support_and_query" if self.mode == "AT" else "query_only"

    def to_dict(self) -> dict:
        return asdict(self)


# schedule fields of each named method; SCAT is LCAT with a 9+1 cycle
PRESETS: dict[str, dict] = {
    "nat": dict(mode="NAT", clean_epochs=1, adv_epochs=0, trades="off"),
    "at": dict(mode="AT", clean_epochs=0, adv_epochs=1, trades="off"),
    "aq": dict(mode="AQ", clean_epochs=0, adv_epochs=1, trades="off"),
    "scat": dict(mode="LCAT", clean_epochs=9, adv_epochs=1, trades="off"),
    "lcat": dict(mode="LCAT", clean_epochs=5, adv_epochs=5, trades="off"),
    "lcat_trades": dict(mode="LCAT", clean_epochs=5, adv_epochs=5, trades="adv_phase_only"),
    "aq_trades": dict(mode="AQ", clean_epochs=0, adv_epochs=1, trades="adv_phase_only"),
}


def phase_of_epoch(epoch: int, cfg: ScheduleConfig) -> str:
    if cfg.mode == "NAT":
        return CLEAN
    if cfg.mode in ("AT", "AQ"):
        return ADV
    return ADV if epoch % cfg.cycle >= cfg.clean_epochs else CLEAN


def block_ends_after(epoch: int, cfg: ScheduleConfig) -> bool:
    """True when ``epoch`` closes a phase block (phase change, cycle end or last epoch)."""
    nxt = epoch + 1
    return (nxt >= cfg.epochs or nxt % cfg.cycle == 0
            or phase_of_epoch(nxt, cfg) != phase_of_epoch(epoch, cfg))


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.kind!r}; valid: adam, sgd")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")


def optimizer_step(opt: OptimizerState, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
    """Apply one update in place. Adam uses bias-corrected moment estimates."""
    if opt.kind == "sgd":
        for name, p in params.items():
            p.data = p.data - p.dtype.type(opt.lr) * grads[name].astype(p.dtype, copy=False)
        return
    opt.step += 1
    c1 = 1.0 - opt.beta1 ** opt.step
    c2 = 1.0 - opt.beta2 ** opt.step
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = opt.m.get(name)
        v = opt.v.get(name)
        m = (1 - opt.beta1) * g if m is None else opt.beta1 * m + (1 - opt.beta1) * g
        v = (1 - opt.beta2) * g * g if v is None else opt.beta2 * v + (1 - opt.beta2) * g * g
        opt.m[name], opt.v[name] = m, v
        update = opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)


# ---------------------------------------------------------------- losses


def trades_loss(clean_logits: Tensor, adv_logits: Tensor, labels, beta: float) -> Tensor:
    """``CE(clean, labels) + beta * KL(softmax(clean) || softmax(adv))``."""
    if beta < 0:
        raise ConfigError(f"TRADES beta must be >= 0, got {beta}")
    ce = T.softmax_cross_entropy(clean_logits, labels)
    if beta == 0:
        return ce
    return T.add(ce, T.scale(T.kl_divergence(clean_logits, adv_logits), beta))


@dataclass
class AdversarialContext:
    attack: AttackConfig
    scope: str
    trades_beta: float | None
    rng: np.random.Generator
    stats: AttackStats


clean_task_loss = episode_loss


def adversarial_task_loss(params: ModelParams, episode: Episode, ctx: AdversarialContext) -> Tensor:
    """Query loss on an attacked episode, attacked against the clean-support adaptation."""
    clean_adapted = fine_tune(params, episode)
    cfg = ctx.attack
    if ctx.trades_beta is not None:
        cfg = AttackConfig(**{**cfg.to_dict(), "objective": "kl_to_clean"})
    adv = adversarial_episode(clean_adapted, episode, cfg, ctx.scope, ctx.rng, ctx.stats)
    adapted = clean_adapted
    if ctx.scope == "support_and_query":
        adapted = fine_tune(params, episode, support_images=adv.support_images)
    adv_logits = head_logits(adapted, adv.query_images)
    if ctx.trades_beta is None:
        return T.softmax_cross_entropy(adv_logits, episode.query_labels)
    clean_logits = head_logits(clean_adapted, episode.query_images)
    return trades_loss(clean_logits, adv_logits, episode.query_labels, ctx.trades_beta)


# ---------------------------------------------------------------- training loop


@dataclass
class TrainState:
    params: ModelParams
    schedule: ScheduleConfig
    optimizer: OptimizerState
    attack: AttackConfig
    sampler_rng: np.random.Generator
    attack_rng: np.random.Generator
    stats: AttackStats = field(default_factory=AttackStats)
    epoch: int = 0
    phase: str = CLEAN
    pending_terms: int = 0
    adv_batches: int = 0
    log: list = field(default_factory=list)
    clean_loss: Callable = clean_task_loss
    adversarial_loss: Callable = adversarial_task_loss

    def trades_beta(self) -> float | None:
        s = self.schedule
        return None if s.trades == "off" else s.trades_beta


def _checked(loss: Tensor, epoch: int, task: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss at epoch {epoch}, task {task}")
    return value


def clean_meta_step(state: TrainState, batch: list[Episode]) -> list[float]:
    """Accumulate clean query-loss gradients of each task into the parameter grads."""
    values = []
    for i, episode in enumerate(batch):
        loss = state.clean_loss(state.params, episode)
        values.append(_checked(loss, state.epoch, i))
        T.backward(loss)
    state.pending_terms += 1
    return values


def adversarial_meta_step(state: TrainState, batch: list[Episode]) -> list[float]:
    """Accumulate gradients of each task's loss on its attacked counterpart."""
    ctx = AdversarialContext(state.attack, state.schedule.attack_scope, state.trades_beta(),
                             state.attack_rng, state.stats)
    values = []
    for i, episode in enumerate(batch):
        loss = state.adversarial_loss(state.params, episode, ctx)
        values.append(_checked(loss, state.epoch, i))
        T.backward(loss)
    state.pending_terms += 1
    state.adv_batches += 1
    return values


def apply_update(state: TrainState) -> None:
    """Turn the accumulated grad sums into one optimizer step and clear them.

    SGD divides the sum by the batch size ``n``; Adam divides by the number
    of summed task losses (a mean of task means).
    """
    if state.pending_terms == 0:
        return
    n = state.schedule.batch_size
    divisor = n if state.optimizer.kind == "sgd" else n * state.pending_terms
    grads = {}
    for name, p in state.params.items():
        g = p.grad if p.grad is not None else np.zeros(p.shape, dtype=p.dtype)
        grads[name] = g / p.dtype.type(divisor)
    optimizer_step(state.optimizer, state.params, grads)
    state.params.zero_grads()
    state.pending_terms = 0


@dataclass
class TrainResult:
    params: ModelParams
    log: list
    stats: AttackStats
    adv_batches: int
    optimizer: OptimizerState


def run_training(store: DatasetStore, schedule: ScheduleConfig, model: EmbeddingNetConfig | ModelParams,
                 attack: AttackConfig = TRAIN_ATTACK, seed: int = 0,
                 sampler: SamplerConfig | None = None, optimizer: OptimizerState | None = None,
                 metrics_path: str | Path | None = None, checkpoint_path: str | Path | None = None,
                 cycle_checkpoint_dir: str | Path | None = None, record_wall_time: bool = False,
                 clean_loss: Callable = clean_task_loss,
                 adversarial_loss: Callable = adversarial_task_loss,
                 checkpoint_extra: dict | None = None) -> TrainResult:
    """Run the phase schedule for ``schedule.epochs`` epochs.

    ``model`` is either a config (parameters initialised from ``seed``) or
    ready-made parameters, which are trained in place. Each epoch appends one
    record to the log and, when ``metrics_path`` is given, one JSON line to
    that file, flushed immediately. ``wall_ms`` is 0 unless
    ``record_wall_time`` is set, which keeps logs byte-reproducible.
    """
    sampler = sampler or SamplerConfig(split="train")
    optimizer = optimizer or OptimizerState()
    if isinstance(model, EmbeddingNetConfig):
        params = init_params(model, make_rng(seed, 3))
    else:
        params = model
    params.zero_grads()
    state = TrainState(params=params, schedule=schedule, optimizer=optimizer, attack=attack,
                       sampler_rng=make_rng(seed, 1), attack_rng=make_rng(seed, 2),
                       clean_loss=clean_loss, adversarial_loss=adversarial_loss)
    if cycle_checkpoint_dir is not None:
        Path(cycle_checkpoint_dir).mkdir(parents=True, exist_ok=True)
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path is not None else None
    try:
        for epoch in range(schedule.epochs):
            state.epoch = epoch
            state.phase = phase_of_epoch(epoch, schedule)
            started = time.perf_counter()
            values: list[float] = []
            for _ in range(schedule.meta_batches_per_epoch):
                batch = sample_batch(store, sampler, schedule.batch_size, state.sampler_rng)
                if state.phase == CLEAN:
                    values += clean_meta_step(state, batch)
                else:
                    values += adversarial_meta_step(state, batch)
                if schedule.update_granularity == "per_term":
                    apply_update(state)
            if schedule.update_granularity == "per_block" and block_ends_after(epoch, schedule):
                apply_update(state)
            record = {
                "epoch": epoch,
                "phase": state.phase,
                "mean_loss": float(np.mean(values)) if values else 0.0,
                "adv_batches_cum": state.adv_batches,
                "adv_images_cum": state.stats.images,
                "wall_ms": round((time.perf_counter() - started) * 1e3, 3) if record_wall_time else 0,
            }
            state.log.append(record)
            if sink is not None:
                sink.write(json.dumps(record) + "\n")
                sink.flush()
            if cycle_checkpoint_dir is not None and (epoch + 1) % schedule.cycle == 0:
                save_checkpoint(Path(cycle_checkpoint_dir) / f"epoch_{epoch + 1:04d}.ckpt", params,
                                epoch + 1, state.sampler_rng.bit_generator.state, checkpoint_extra)
    finally:
        if sink is not None:
            sink.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, schedule.epochs,
                        state.sampler_rng.bit_generator.state, checkpoint_extra)
    return TrainResult(params, state.log, state.stats, state.adv_batches, optimizer)
