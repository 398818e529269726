import numpy as np
import pytest

from dualgate.model import ModelConfig

ACCEPTANCE_LINES: list[str] = []


def tiny_config(**overrides) -> ModelConfig:
    base = dict(lookback=8, horizon=4, channels=1, patch_len=4, patch_stride=4, d_model=8,
                n_heads=2, n_layers=1, n_text_experts=2, n_series_experts=2, k_text=1,
                k_series=1, text_dim=8)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance_report():
    def report(criterion: str, passed: bool, detail: str = ""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
