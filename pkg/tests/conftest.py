import numpy as np
import pytest
import torch

from surrogate_iva import mixsim

ACCEPTANCE_LINES = []


def report(criterion, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def crandn(rng, *shape):
    return torch.from_numpy(rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def make_mixture(seed, n_sources=2, mixing="instantaneous", duration=1.5, noise=None, **kw):
    """(x, refs) for one synthetic item."""
    noise_range = None if noise is None else (noise, noise)
    spec = mixsim.MixtureSpec(
        n_sources=n_sources, mixing=mixing, duration_s=duration, noise_snr_db=noise_range, seed=seed, **kw
    )
    rng = np.random.default_rng([seed, 12345])
    src = mixsim.synth_sources(spec, rng)
    return mixsim.mix(src, spec, rng)


def finite_difference(fn, tensor, index, h=1e-5):
    """Central difference of the scalar ``fn()`` w.r.t. ``tensor[index]``."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        plus = float(fn())
        tensor[index] = orig - h
        minus = float(fn())
        tensor[index] = orig
    return (plus - minus) / (2 * h)


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)
