import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from lcat import tensor as T
from lcat.data import SamplerConfig, make_rng, sample_episode
from lcat.errors import ConfigError, DataFormatError, ShapeError
from lcat.models import (EmbeddingNetConfig, denoise_forward, embed_forward,
                         fine_tune, head_logits, init_params, load_checkpoint, prototypes,
                         ridge_weights, save_checkpoint)
from lcat.tensor import Tensor

from conftest import SEEDS, episode_loss_gradient_errors

TINY = dict(image_size=8, channels=(2, 3), in_channels=1)


def _onehot(labels, way):
    return np.eye(way)[labels]


@pytest.mark.parametrize("seed", range(50))
def test_ridge_dual_matches_primal(seed):
    rng = np.random.default_rng(seed)
    m, d, way = rng.integers(5, 26), rng.integers(8, 65), 5
    lam = float(rng.uniform(0.1, 5.0))
    x = rng.normal(size=(m, d)).astype(np.float32)
    y = _onehot(rng.integers(0, way, size=m), way)
    dual = ridge_weights(Tensor(x), y, lam).data
    x64 = x.astype(np.float64)
    primal = np.linalg.solve(x64.T @ x64 + lam * np.eye(d), x64.T @ y)
    assert_allclose(dual, primal, rtol=1e-4, atol=1e-4)


def test_proto_logits_match_direct_distances(small_store):
    cfg = EmbeddingNetConfig(**TINY)
    params = init_params(cfg, make_rng(0))
    ep = sample_episode(small_store, SamplerConfig(way=4, shot=3, query=2), make_rng(1))
    logits = head_logits(fine_tune(params, ep), ep.query_images).data
    s = embed_forward(params, ep.support_images).data.astype(np.float64)
    q = embed_forward(params, ep.query_images).data.astype(np.float64)
    expect = np.empty((len(q), 4))
    for i, qi in enumerate(q):
        for c in range(4):
            proto = s[ep.support_labels == c].mean(axis=0)
            expect[i, c] = -np.sum((qi - proto) ** 2)
    assert_allclose(logits, expect, rtol=1e-5, atol=1e-5)


def test_prototypes_require_every_class():
    with pytest.raises(ShapeError):
        prototypes(Tensor(np.ones((2, 3))), np.array([[1.0, 0.0], [1.0, 0.0]]))


def test_denoise_with_zero_projection_is_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 5, 5)).astype(np.float32))
    out = denoise_forward(x, Tensor(np.zeros((3, 3, 1, 1), dtype=np.float32)))
    assert_array_equal(out.data, x.data)


def test_denoise_identity_projection_adds_local_mean():
    x = np.full((1, 1, 5, 5), 0.9, dtype=np.float64)
    with T.precision():
        out = denoise_forward(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data
    # interior pixels see a full 3x3 window of the constant; corners only 4 of 9
    assert_allclose(out[0, 0, 2, 2], 1.8)
    assert_allclose(out[0, 0, 0, 0], 0.9 + 0.9 * 4 / 9)


def test_denoise_rejects_mismatched_projection():
    with pytest.raises(ShapeError):
        denoise_forward(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((3, 3, 1, 1))))


def test_fine_tune_reads_but_never_writes_parameters(small_store):
    params = init_params(EmbeddingNetConfig(**TINY, head="ridge", learn_scale=True), make_rng(0))
    before = params.snapshot()
    ep = sample_episode(small_store, SamplerConfig(way=3, shot=2, query=2), make_rng(3))
    adapted = fine_tune(params, ep)
    head_logits(adapted, ep.query_images)
    for name, value in before.items():
        assert_array_equal(params[name].data, value)
        assert params[name].grad is None


def test_parameter_layout():
    params = init_params(EmbeddingNetConfig(), make_rng(0))
    assert params.names() == ["block0.conv.weight", "block0.conv.bias", "block1.conv.weight",
                              "block1.conv.bias", "block2.conv.weight", "block2.conv.bias",
                              "block2.denoise.proj"]
    assert embed_forward(params, np.zeros((3, 1, 16, 16))).shape == (3, 64)
    plain = init_params(EmbeddingNetConfig(denoise=False), make_rng(0))
    assert "block2.denoise.proj" not in plain


def test_config_validation():
    with pytest.raises(ConfigError):
        EmbeddingNetConfig(head="svm")
    with pytest.raises(ConfigError):
        EmbeddingNetConfig(image_size=4, channels=(4, 4, 4))
    with pytest.raises(ConfigError):
        EmbeddingNetConfig(ridge_lambda=0.0)
    with pytest.raises(ShapeError):
        embed_forward(init_params(EmbeddingNetConfig(), make_rng(0)), np.zeros((1, 1, 8, 8)))


@pytest.mark.parametrize("head", ["proto", "ridge"])
@pytest.mark.parametrize("seed", SEEDS)
def test_episode_loss_gradient_matches_finite_differences(small_store, head, seed):
    for name, err in episode_loss_gradient_errors(small_store, head, seed).items():
        assert err < 1e-3, f"{name}: relative error {err:.2e}"


def test_checkpoint_round_trip_and_corruption(tmp_path):
    params = init_params(EmbeddingNetConfig(**TINY, head="ridge", learn_scale=True), make_rng(0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, epoch=7, extra={"note": "x"})
    loaded, header = load_checkpoint(path)
    assert header["epoch"] == 7 and header["extra"] == {"note": "x"}
    assert loaded.config == params.config and loaded.names() == params.names()
    for name in params:
        assert_array_equal(loaded[name].data, params[name].data)
    raw = path.read_bytes()
    for code, blob in {"E_CKPT": b"garbage\n", "E_TRUNCATED": raw[:-4], "E_TRAILING": raw + b"\0"}.items():
        path.write_bytes(blob)
        with pytest.raises(DataFormatError) as info:
            load_checkpoint(path)
        assert info.value.code == code
