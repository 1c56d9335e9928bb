import numpy as np
import pytest
from hypothesis import settings

from noisymm import synthdata as S
from noisymm.model import ModelConfig, MultimodalModel

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")

_CRITERIA: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_model():
    """K=3, B=8, d=8 model used by the gradient checks."""
    cfg = ModelConfig(d_v=5, d_a=4, n_classes=3, d=8, encoder_hidden=(6,),
                      classifier_hidden=7, batch_size=8, ae_hidden=4, seed=3)
    return MultimodalModel(cfg)


@pytest.fixture(scope="session")
def small_splits():
    return S.generate(S.GeneratorConfig(n_classes=6, per_class=30, per_class_test=10,
                                        d_v=12, d_a=10, seed=5))


@pytest.fixture
def criterion():
    """Record an acceptance criterion outcome for the end-of-run summary."""
    def record(name: str, passed: bool, detail: str = ""):
        _CRITERIA[name] = (bool(passed), detail)
        assert passed, f"{name}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda s: int(s.split()[0].rstrip("."))):
        ok, detail = _CRITERIA[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
