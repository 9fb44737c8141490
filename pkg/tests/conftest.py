import numpy as np
import pytest

from lencap import tensor as tc
from lencap.data import generate_corpus
from lencap.levels import plan_4_level
from lencap.model import ModelConfig, init_params


def central_diff(f, x: np.ndarray, i, h: float = 1e-3) -> float:
    """Five-point central difference of the scalar ``f()`` along ``x[i]``.

    Truncation error is O(h^4), so a wide step keeps round-off small
    without giving up accuracy.
    """
    old = x[i]
    vals = []
    for k in (2, 1, -1, -2):
        x[i] = old + k * h
        vals.append(f())
    x[i] = old
    return (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)


def numeric_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Numeric gradient of ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        g[i] = central_diff(f, x, i, h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-wise relative error. The denominator floor keeps gradients
    that are exactly zero (unused rows, the key bias) from dividing
    round-off by round-off."""
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(num / den)


def tiny_config(num_levels: int = 4, **kw) -> ModelConfig:
    base = dict(vocab_size=48, num_levels=num_levels, d_model=16, n_layers=2, n_heads=2, d_ff=32)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def f64():
    with tc.default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(11, 40, plan_4_level())


@pytest.fixture
def tiny_params():
    return init_params(tiny_config(), seed=3)


# --------------------------------------------------------------------------
# acceptance reporting: one line per criterion in the terminal summary

CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str) -> None:
        CRITERIA[number] = (bool(ok), detail)
        print(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {number} failed: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
