import numpy as np
import pytest

from abftlab.data import VocabLayout, make_split_plan, make_synthetic_task
from abftlab.model import ModelConfig, init_model

# criterion number -> (passed, detail); filled by test_acceptance and printed in the summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

TINY = ModelConfig(n_layers=2, n_heads=2, d_model=32, vocab_size=96, max_seq_len=128, seed=3)


@pytest.fixture
def layout():
    return VocabLayout()


@pytest.fixture
def task(layout):
    return make_synthetic_task(layout, n_classes=4, span_len=4)


@pytest.fixture
def plan(task):
    return make_split_plan(task, np.random.default_rng(11), 128, 512, 64)


@pytest.fixture
def tiny_model():
    return init_model(TINY)


def fd_grad(f, x: np.ndarray, idx, h=1e-4):
    """Central difference of scalar ``f()`` with respect to ``x[idx]`` (modified in place)."""
    old = x[idx]
    x[idx] = old + h
    up = f()
    x[idx] = old - h
    down = f()
    x[idx] = old
    return (up - down) / (2 * h)


def plant_label_head(model, task, strength=2.0):
    """Make layer 0, head 0 attend from the marker to label tokens, so the filter has a head to pass."""
    rng = np.random.default_rng(99)
    d = model.config.d_model
    u, v = np.linalg.qr(rng.normal(size=(d, 2)))[0].T
    emb = model["tok_emb"].data
    emb[list(task.label_tokens)] += 5 * u
    emb[task.template.marker] += 5 * v
    model["layers.0.W_Q"].data[:, 0] += strength * v
    model["layers.0.W_K"].data[:, 0] += strength * u
    return model


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
