import numpy as np
import pytest

from mmfuse.attention import ContextAttentionParams
from mmfuse.fusion import GifParams
from mmfuse.tensor import Tensor, parameter

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_param(rng, *shape, scale=0.5):
    return parameter(rng.uniform(-scale, scale, size=shape))


def rand_input(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def context_params(rng, d, d_c, heads=1, scale=0.5):
    return ContextAttentionParams(
        rand_param(rng, d, d, scale=scale), rand_param(rng, d, d, scale=scale), rand_param(rng, d, d, scale=scale),
        rand_param(rng, d_c, d, scale=scale), rand_param(rng, d_c, d, scale=scale),
        rand_param(rng, d, 1, scale=scale), rand_param(rng, d, 1, scale=scale),
        rand_param(rng, d, 1, scale=scale), rand_param(rng, d, 1, scale=scale),
        head_count=heads)


def gif_params(rng, d, scale=0.3):
    return GifParams(rand_param(rng, 2 * d, d, scale=scale), rand_param(rng, d, scale=scale))


def zero_gif(d, bias=0.0):
    return GifParams(parameter(np.zeros((2 * d, d))), parameter(np.full(d, bias)))
