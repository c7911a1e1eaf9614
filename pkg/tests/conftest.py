import numpy as np
import pytest

from lcat import tensor as T
from lcat.data import generate_synthetic

SEEDS = range(20)


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x`` (float64)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        up = f(x)
        x[i] = orig - h
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def gradient_errors(build, arrays) -> list[float]:
    """Relative error of autodiff vs central differences of ``sum(w * build(*xs))``, per input.

    A fixed random weighting ``w`` makes the check sensitive to every output
    element, not just their sum.
    """
    with T.precision(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        out_shape = build(*[T.Tensor(a) for a in arrays]).shape
        w = np.random.default_rng(12345).normal(size=out_shape)

        def scalar(*xs):
            return T.sum(T.mul(build(*xs), T.Tensor(w)))

        leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
        analytic = T.grad(scalar(*leaves), leaves)
        errors = []
        for k, a in enumerate(arrays):
            def f(x, k=k):
                xs = [T.Tensor(x if j == k else arrays[j]) for j in range(len(arrays))]
                return scalar(*xs).item()

            errors.append(rel_error(analytic[k], numeric_grad(f, a.copy())))
    return errors


def check_gradients(build, arrays, tol=1e-3):
    for k, err in enumerate(gradient_errors(build, arrays)):
        assert err < tol, f"input {k}: relative error {err:.2e}"


def episode_loss_gradient_errors(store, head: str, seed: int) -> dict[str, float]:
    """Per-parameter relative error of the end-to-end episodic loss gradient (float64)."""
    from lcat.data import SamplerConfig, make_rng, sample_episode
    from lcat.models import EmbeddingNetConfig, episode_loss, init_params

    cfg = EmbeddingNetConfig(image_size=8, channels=(2, 3), head=head, learn_scale=(head == "ridge"))
    ep = sample_episode(store, SamplerConfig(way=3, shot=2, query=2), make_rng(seed, 1))
    errors = {}
    with T.precision():
        params = init_params(cfg, make_rng(seed))
        # a nonzero denoise projection so its gradient path is exercised
        params["block1.denoise.proj"].data = make_rng(seed, 2).normal(0, 0.3, size=(3, 3, 1, 1))
        ep = ep.replace(support_images=ep.support_images.astype(np.float64),
                        query_images=ep.query_images.astype(np.float64))
        grads = T.grad(episode_loss(params, ep), params.tensors())
        for (name, p), g in zip(params.items(), grads):
            def f(x, p=p):
                saved, p.data = p.data, x
                try:
                    return episode_loss(params, ep).item()
                finally:
                    p.data = saved
            errors[name] = rel_error(g, numeric_grad(f, p.data.copy()))
    return errors


@pytest.fixture(scope="session")
def small_store():
    return generate_synthetic(num_classes=12, images_per_class=12, height=8, width=8,
                              noise_std=0.2, seed=3)


_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def record_criterion():
    """Store one ``PASS``/``FAIL`` line per acceptance criterion for the terminal summary."""

    def record(number: str, passed: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        print(_ACCEPTANCE[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: (int(k.rstrip("abcd")), k)):
        terminalreporter.write_line(_ACCEPTANCE[key])
