import numpy as np
import pytest

from fednews.config import ModelConfig, RunConfig, TrainConfig
from fednews.synthetic import SyntheticSpec, generate_synthetic_dataset


def central_differences(f, params: dict, step: float = 1e-5) -> dict:
    """Independent gradient oracle: perturb every entry of every array in ``params``."""
    out = {}
    for key, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f()
            flat[i] = orig - step
            down = f()
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * step)
        out[key] = g
    return out


def assert_grads_close(analytic: dict, numeric: dict, rtol: float = 1e-4, atol: float = 1e-8):
    for key in numeric:
        a, n = analytic[key], numeric[key]
        err = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        bad = (err > atol) & (err > rtol * scale)
        assert not bad.any(), f"{key}: max rel err {np.max(err / np.maximum(scale, 1e-300)):.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(d=8, heads=2, word_dim=6, query_dim=5, d_img=4, vocab_size=12, short_window=3,
                n_long=6)
    base.update(kw)
    return ModelConfig(**base)


def small_run_config(**train) -> RunConfig:
    t = dict(lr=3e-3, negatives=3, group_size=4, max_rounds=3, eval_interval=1, clip_delta=None)
    t.update(train)
    return RunConfig(
        synthetic={},
        model=ModelConfig(d=8, heads=2, word_dim=6, query_dim=5, d_img=4, short_window=4, n_long=10),
        train=TrainConfig(**t),
    )


@pytest.fixture(scope="session")
def tiny_dataset():
    spec = SyntheticSpec(n_users=8, n_news=30, n_topics=3, d_img=4, clicks_min=3, clicks_max=8,
                         impressions_per_user=4, K=3, liked_topics=1, title_min=2, title_max=5,
                         topic_words=4, background_words=10, seed=7)
    return generate_synthetic_dataset(spec)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
