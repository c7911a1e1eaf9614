import json
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from lcat import tensor as T
from lcat.attacks import AttackConfig
from lcat.data import SamplerConfig, make_rng, sample_batch
from lcat.errors import ConfigError, NumericalError
from lcat.models import EmbeddingNetConfig, ModelParams, load_checkpoint
from lcat.tensor import Tensor
from lcat.training import (ADV, CLEAN, PRESETS, OptimizerState, ScheduleConfig, block_ends_after,
                           optimizer_step, phase_of_epoch, run_training, trades_loss)

TINY = EmbeddingNetConfig(image_size=8, channels=(2, 3))
TINY_SAMPLER = SamplerConfig(way=3, shot=1, query=2)


def schedule(preset, **kw):
    return ScheduleConfig(**{**PRESETS[preset], **kw})


# ---------------------------------------------------------------- schedule


def test_lcat_and_scat_phase_patterns():
    lcat = schedule("lcat", epochs=50)
    assert [phase_of_epoch(e, lcat) for e in range(50)] == ([CLEAN] * 5 + [ADV] * 5) * 5
    scat = schedule("scat", epochs=50)
    assert [phase_of_epoch(e, scat) for e in range(50)] == ([CLEAN] * 9 + [ADV]) * 5


@given(st.integers(0, 12), st.integers(0, 12), st.integers(0, 200))
def test_phase_law(c, t, epoch):
    if c + t == 0:
        return
    cfg = ScheduleConfig(mode="LCAT", clean_epochs=c, adv_epochs=t)
    assert phase_of_epoch(epoch, cfg) == (ADV if epoch % (c + t) >= c else CLEAN)


def test_fixed_phase_modes():
    assert {phase_of_epoch(e, schedule("nat")) for e in range(20)} == {CLEAN}
    for preset in ("at", "aq", "aq_trades"):
        assert {phase_of_epoch(e, schedule(preset)) for e in range(20)} == {ADV}


def test_block_ends():
    cfg = ScheduleConfig(mode="LCAT", clean_epochs=2, adv_epochs=3, epochs=7)
    assert [e for e in range(7) if block_ends_after(e, cfg)] == [1, 4, 6]
    assert all(block_ends_after(e, schedule("aq", epochs=4)) for e in range(4))


def test_schedule_validation():
    for bad in (dict(mode="MAML"), dict(clean_epochs=0, adv_epochs=0), dict(mode="AQ"),
                dict(mode="NAT"), dict(trades="sometimes"), dict(trades_beta=-1.0),
                dict(update_granularity="per_epoch"), dict(batch_size=0)):
        with pytest.raises(ConfigError):
            ScheduleConfig(**bad)


# ---------------------------------------------------------------- optimizer


def _single(value):
    return ModelParams(TINY, OrderedDict(w=Tensor(np.array([value]), requires_grad=True)))


def test_adam_worked_example():
    params, opt = _single(1.0), OptimizerState("adam", lr=0.1)
    expected = [0.9000000019999999, 0.9366103542405653, 0.950279420338976]
    for g, want in zip([0.5, -1.0, 0.25], expected):
        optimizer_step(opt, params, {"w": np.array([g])})
        assert params["w"].data[0] == pytest.approx(want, rel=1e-12)
    assert opt.step == 3


def test_sgd_step():
    params = _single(2.0)
    optimizer_step(OptimizerState("sgd", lr=0.5), params, {"w": np.array([3.0])})
    assert params["w"].data[0] == 0.5


def test_optimizer_validation():
    with pytest.raises(ConfigError):
        OptimizerState("rmsprop")
    with pytest.raises(ConfigError):
        OptimizerState(lr=0.0)


def test_trades_loss_composition():
    rng = np.random.default_rng(0)
    clean, adv = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))
    y = [0, 1, 2, 0]
    ce = T.softmax_cross_entropy(clean, y).item()
    kl = T.kl_divergence(clean, adv).item()
    assert trades_loss(clean, adv, y, 6.0).item() == pytest.approx(ce + 6.0 * kl, rel=1e-6)
    assert trades_loss(clean, adv, y, 0.0).item() == pytest.approx(ce)


# ---------------------------------------------------------------- meta-updates


def _linear_features(episode):
    """Two fixed scalar features and a target per episode for a 2-parameter model."""
    return np.array([episode.query_images.mean(), episode.support_images.std()]), float(episode.classes.sum() % 3)


def _clean_loss(params, episode):
    a, y = _linear_features(episode)
    r = T.sub(T.sum(T.mul(params["w"], Tensor(a))), y)
    return T.mul(r, r)


def _adv_loss(params, episode, ctx):
    a, y = _linear_features(episode)
    r = T.sub(T.sum(T.mul(params["w"], Tensor(1.5 * a))), y + 0.25)
    return T.mul(r, r)


def _oracle_grad(theta, episode, adversarial):
    a, y = _linear_features(episode)
    if adversarial:
        a, y = 1.5 * a, y + 0.25
    return 2.0 * (theta @ a - y) * a


def test_per_block_sgd_matches_independent_accumulation(small_store):
    sched = ScheduleConfig(mode="LCAT", clean_epochs=2, adv_epochs=3, epochs=7,
                           meta_batches_per_epoch=3, batch_size=4, update_granularity="per_block")
    lr, theta0 = 0.05, np.array([0.3, -0.2])
    with T.precision():
        params = ModelParams(TINY, OrderedDict(w=Tensor(theta0.copy(), requires_grad=True)))
        run_training(small_store, sched, params, seed=11, sampler=TINY_SAMPLER,
                     optimizer=OptimizerState("sgd", lr=lr),
                     clean_loss=_clean_loss, adversarial_loss=_adv_loss)

    rng = make_rng(11, 1)
    theta, acc = theta0.copy(), np.zeros(2)
    for epoch in range(sched.epochs):
        adversarial = epoch % 5 >= 2
        for _ in range(sched.meta_batches_per_epoch):
            for ep in sample_batch(small_store, TINY_SAMPLER, sched.batch_size, rng):
                acc += _oracle_grad(theta, ep, adversarial)
        if epoch in (1, 4, 6):
            theta = theta - lr / sched.batch_size * acc
            acc = np.zeros(2)
    assert_allclose(params["w"].data, theta, rtol=0, atol=1e-12)


def test_per_term_steps_after_every_meta_batch(small_store):
    sched = ScheduleConfig(mode="NAT", clean_epochs=1, adv_epochs=0, epochs=2,
                           meta_batches_per_epoch=2, batch_size=3, update_granularity="per_term")
    with T.precision():
        params = ModelParams(TINY, OrderedDict(w=Tensor(np.zeros(2), requires_grad=True)))
        run_training(small_store, sched, params, seed=1, sampler=TINY_SAMPLER,
                     optimizer=OptimizerState("sgd", lr=0.1), clean_loss=_clean_loss)
    rng = make_rng(1, 1)
    theta = np.zeros(2)
    for _ in range(4):
        batch = sample_batch(small_store, TINY_SAMPLER, 3, rng)
        theta = theta - 0.1 / 3 * sum(_oracle_grad(theta, ep, False) for ep in batch)
    assert_allclose(params["w"].data, theta, rtol=0, atol=1e-12)


def test_non_finite_loss_is_reported(small_store):
    def bad_loss(params, episode):
        return T.scale(_clean_loss(params, episode), np.inf)

    params = ModelParams(TINY, OrderedDict(w=Tensor(np.ones(2), requires_grad=True)))
    with pytest.raises(NumericalError, match="epoch 0"):
        run_training(small_store, schedule("nat", epochs=1, meta_batches_per_epoch=1), params,
                     sampler=TINY_SAMPLER, clean_loss=bad_loss)


# ---------------------------------------------------------------- full runs


def _short(preset, **kw):
    return schedule(preset, **{**dict(epochs=4, meta_batches_per_epoch=1, batch_size=2,
                                      update_granularity="per_term"), **kw})


def test_at_with_zero_budget_equals_natural_training(small_store):
    zero = AttackConfig(epsilon=0.0, steps=3)
    nat = run_training(small_store, _short("nat"), TINY, zero, seed=3, sampler=TINY_SAMPLER)
    at = run_training(small_store, _short("at"), TINY, zero, seed=3, sampler=TINY_SAMPLER)
    for name in nat.params:
        assert_array_equal(at.params[name].data, nat.params[name].data)
    assert at.adv_batches == 4 and nat.adv_batches == 0


def test_lcat_uses_half_the_adversarial_batches_of_aq(small_store):
    attack = AttackConfig(epsilon=0.05, step_size=0.02, steps=1)
    kw = dict(epochs=10, clean_epochs=1, adv_epochs=1)
    runs = {}
    for preset in ("lcat", "aq", "at"):
        extra = dict(epochs=10) if preset != "lcat" else kw
        runs[preset] = run_training(small_store, _short(preset, **extra), TINY, attack,
                                    sampler=TINY_SAMPLER)
    assert runs["lcat"].adv_batches * 2 == runs["aq"].adv_batches == 10
    assert runs["aq"].stats.query_images == 10 * 2 * 6
    assert runs["aq"].stats.support_images == 0
    assert runs["at"].stats.support_images == 10 * 2 * 3


def test_metrics_log_and_checkpoints(tmp_path, small_store):
    res = run_training(small_store, _short("lcat", clean_epochs=1, adv_epochs=1),
                       TINY, AttackConfig(0.05, 0.02, 1), seed=2, sampler=TINY_SAMPLER,
                       metrics_path=tmp_path / "m.jsonl", checkpoint_path=tmp_path / "c.ckpt",
                       cycle_checkpoint_dir=tmp_path / "cycles")
    records = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert records == res.log
    assert [r["phase"] for r in records] == [CLEAN, ADV, CLEAN, ADV]
    assert [r["adv_batches_cum"] for r in records] == [0, 1, 1, 2]
    assert [r["adv_images_cum"] for r in records] == [0, 12, 12, 24]
    assert all(r["wall_ms"] == 0 for r in records)
    assert sorted(p.name for p in (tmp_path / "cycles").iterdir()) == ["epoch_0002.ckpt", "epoch_0004.ckpt"]
    loaded, header = load_checkpoint(tmp_path / "c.ckpt")
    assert header["epoch"] == 4
    for name in res.params:
        assert_array_equal(loaded[name].data, res.params[name].data)


def test_zero_epochs_keeps_initial_parameters(tmp_path, small_store):
    res = run_training(small_store, _short("lcat", epochs=0), TINY, seed=4, sampler=TINY_SAMPLER,
                       metrics_path=tmp_path / "m.jsonl")
    assert res.log == [] and (tmp_path / "m.jsonl").read_text() == ""
    again = run_training(small_store, _short("lcat", epochs=0), TINY, seed=4, sampler=TINY_SAMPLER)
    for name in res.params:
        assert_array_equal(res.params[name].data, again.params[name].data)


@pytest.mark.parametrize("preset", ["lcat_trades", "aq_trades"])
def test_trades_runs_are_deterministic(small_store, preset):
    runs = [run_training(small_store, _short(preset), TINY, AttackConfig(0.05, 0.02, 2), seed=8,
                         sampler=TINY_SAMPLER) for _ in range(2)]
    assert runs[0].log == runs[1].log
    for name in runs[0].params:
        assert_array_equal(runs[0].params[name].data, runs[1].params[name].data)


def test_trades_all_epochs_matches_adv_phase_only(small_store):
    # clean epochs have no adversarial term to regularise, so the two modes coincide
    attack = AttackConfig(0.05, 0.02, 2)
    runs = [run_training(small_store, _short("lcat_trades", clean_epochs=1, adv_epochs=1, trades=mode),
                         TINY, attack, seed=8, sampler=TINY_SAMPLER)
            for mode in ("adv_phase_only", "all_epochs")]
    assert runs[0].log == runs[1].log
    for name in runs[0].params:
        assert_array_equal(runs[0].params[name].data, runs[1].params[name].data)
