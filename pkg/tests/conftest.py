import numpy as np
import pytest

from flowbridge.backbone import BackboneModel, ModelConfig, Priors
from flowbridge.toydata import ToyDatasetConfig, generate_dataset

TINY = dict(hidden=4, pair_hidden=3, n_rbf=3, angle_hidden=4, n_layers=1)


def tiny_model(seed=0, **overrides):
    cfg = ModelConfig(**{**TINY, **overrides})
    model = BackboneModel(cfg, rng=np.random.default_rng(seed))
    # larger head weights than the default init so every term has a visible gradient
    model.params = model.params + 0.3 * np.random.default_rng(seed + 1).standard_normal(model.n_params)
    return model


def central_difference(f, params, h=1e-5):
    out = np.zeros_like(params)
    for i in range(len(params)):
        p = params.copy()
        p[i] += h
        up = f(p)
        p[i] -= 2 * h
        out[i] = (up - f(p)) / (2 * h)
    return out


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-30)


@pytest.fixture(scope="session")
def toy_set():
    cfg = ToyDatasetConfig(n_complexes=200, seed=3)
    return cfg, generate_dataset(cfg)


@pytest.fixture
def uniform_priors():
    return Priors.uniform(4, 3)


ACCEPTANCE = {}


def record_criterion(number, title, ok, detail):
    ACCEPTANCE[number] = (title, bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
