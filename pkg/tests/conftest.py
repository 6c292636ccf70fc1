import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def oracle_run(tmp_path_factory):
    """Synthetic dataset plus a full pipeline run with the oracle classifier."""
    from ffpverify.pipeline import PipelineConfig, run_all
    from ffpverify.synth import SyntheticSceneSpec, write_dataset

    root = tmp_path_factory.mktemp("scene")
    write_dataset(root, SyntheticSceneSpec())
    cfg = PipelineConfig.load(root / "config.json", classifier="oracle")
    report = run_all(cfg)
    return root, cfg, report
