import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from beckerdoring.model import build_coefficients, critical_z, equilibrium_from_z

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def penrose(N, alpha=0.5, mu=0.5, q=1.0, z_s=1.0):
    return build_coefficients("penrose", N, alpha=alpha, mu=mu, q=q, z_s=z_s)


def custom(N, a, b):
    return build_coefficients("custom", N, a=np.full(N, float(a)), b=np.full(N, float(b)))


@pytest.fixture(scope="session")
def eq200():
    m = penrose(200)
    return equilibrium_from_z(m, 0.5 * critical_z(m))


@pytest.fixture(scope="session")
def bundle200(eq200):
    from beckerdoring.linops import assemble_L

    return assemble_L(None, eq200)
