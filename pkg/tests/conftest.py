import pytest

from spns import crypto
from spns.harness import Deployment


@pytest.fixture(scope="session")
def deployment():
    """Shared long-term key material; RSA keygen is the slow part."""
    return Deployment.create(ran_count=3, seed=b"test-deploy")


@pytest.fixture(scope="session")
def keyset():
    return crypto.NodeKeySet.generate(b"unit-keyset")


@pytest.fixture(scope="session")
def second_keyset():
    return crypto.NodeKeySet.generate(b"unit-keyset-2")


@pytest.fixture(scope="session")
def toy_group():
    return crypto.DhGroup.toy()
