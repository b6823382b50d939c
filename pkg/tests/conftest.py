import pytest
import torch
from hypothesis import HealthCheck, settings

from clusterpdp.decoder import init_params, model_config

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def toy_cfg():
    return model_config("full", d_h=16, layers=1, heads=2, ffn_hidden=32, gate_hidden=16)


@pytest.fixture(scope="session")
def toy_params(toy_cfg):
    return init_params(toy_cfg, seed=3)


@pytest.fixture(scope="session")
def toy_params64(toy_cfg):
    return init_params(toy_cfg, seed=3, dtype=torch.float64)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(criterion: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
