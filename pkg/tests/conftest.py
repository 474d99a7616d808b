import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from knnmt.evalbench.corpus import SyntheticDomainSpec, generate_domains, make_stub_model
from knnmt.evalbench.pipeline import with_eos
from knnmt.vectorstore import Datastore, build_datastore

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("stress", max_examples=2000, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_datastore(rng, n, dim, n_values=50):
    keys = rng.standard_normal((n, dim)).astype(np.float32)
    values = rng.integers(4, 4 + n_values, size=n).astype(np.uint32)
    return Datastore(keys, values)


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticDomainSpec(seed=3, n_train=1500, n_valid=40, n_test=40, n_domains=2)


@pytest.fixture(scope="session")
def small_domains(small_spec):
    return generate_domains(small_spec)


@pytest.fixture(scope="session")
def small_model(small_spec):
    return make_stub_model(small_spec)


@pytest.fixture(scope="session")
def small_ds(small_domains, small_model):
    return build_datastore(with_eos(small_domains["domain0"].train), small_model)
