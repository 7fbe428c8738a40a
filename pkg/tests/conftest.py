import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def config_dir():
    from pathlib import Path
    return Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="session")
def data_dir():
    from pathlib import Path
    return Path(__file__).resolve().parent / "data"
