import pytest

from agediff.core import IdentityProfile, Reference
from agediff.fixtures import make_fixture


@pytest.fixture(scope="session")
def fixture_set():
    return make_fixture(seed=0)


@pytest.fixture(scope="session")
def backend(fixture_set):
    return fixture_set.backend


@pytest.fixture(scope="session")
def tokenizer(fixture_set):
    return fixture_set.tokenizer


@pytest.fixture
def profile():
    return IdentityProfile(
        token="sks",
        gender="male",
        references=(Reference("ref0.png", 25), Reference("ref1.png", 40), Reference("ref2.png", 55)),
    )
