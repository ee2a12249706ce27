import os

import pytest
from hypothesis import HealthCheck, settings

from qkdco import presets

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def reference():
    return presets.reference_scenarios()


@pytest.fixture
def upconv_15km():
    return presets.scenario("upconversion", 3.0)


@pytest.fixture
def ingaas_25km():
    return presets.scenario("ingaas", 5.0)
