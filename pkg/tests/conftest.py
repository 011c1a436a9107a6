import numpy as np
import pytest

from stormseg.model import ModelConfig
from stormseg.tensor import Tensor

# smallest config that still has a down block, a regular block and both joins
MICRO_CONFIG = ModelConfig(stage_channels=(4, 8), blocks=(2,), dilations=(2,), reductions=(4,),
                           final_upsample_factor=4, seed=3)

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar f(list_of_arrays) w.r.t. every entry."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f(arrays)
            a[i] = old - h
            fm = f(arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_grad(build, arrays, h=1e-5):
    """Compare reverse-mode gradients of ``build(tensors) -> scalar Tensor`` with
    central differences; returns the worst relative error over inputs."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(tensors)
    from stormseg.tensor import gradients

    analytic = gradients(out, tensors)
    work = [a.copy() for a in arrays]
    numeric = numeric_grad(lambda arrs: build([Tensor(x) for x in arrs]).item(), work, h)
    return max(rel_error(g, n) for g, n in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
