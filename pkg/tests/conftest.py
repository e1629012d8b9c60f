import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def orthonormal(rng, rows, cols):
    q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q


def low_rank_tensor(rng, i0, extents, ranks):
    """Random ``T x_1 U_1 ... x_M U_M`` with orthonormal ``U_m``."""
    from multifactor.tensor import mode_multiply

    factors = [orthonormal(rng, e, r) for e, r in zip(extents, ranks)]
    out = rng.standard_normal((i0,) + tuple(ranks))
    for m, u in enumerate(factors, start=1):
        out = mode_multiply(out, u, m)
    return out, factors
