import numpy as np
import pytest

from ocpec.bench.affine_dvi import build_affine_dvi
from ocpec.core.data_models import BenchmarkSpec, GapParams, VIInstance, VISet
from ocpec.model.ocpec_model import discretize


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def unit_box():
    return VISet.box([-1.0], [1.0])


@pytest.fixture
def benchmark_spec():
    return BenchmarkSpec()


@pytest.fixture
def benchmark_problem(benchmark_spec):
    return build_affine_dvi(benchmark_spec)


@pytest.fixture
def benchmark_nlp(benchmark_problem):
    return discretize(benchmark_problem, 100, 1e-6, 100.0, GapParams.identity(1))


@pytest.fixture
def planted_box_vi():
    """Factory for box VIs with a known unique solution lying on the oracle grid.

    F(lam) = M (lam - lam_star) + q with M positive definite, q_i = 0 on free
    coordinates and q pointing into K on active ones.
    """

    def make(rng: np.random.Generator, n: int, resolution: float):
        lower = rng.choice([-1.0, -0.5], size=n)
        upper = rng.choice([0.5, 1.0], size=n)
        axes = [np.linspace(lower[i], upper[i], int(round((upper[i] - lower[i]) / resolution)) + 1) for i in range(n)]
        lam_star, q = np.empty(n), np.zeros(n)
        for i, axis in enumerate(axes):
            kind = rng.integers(3)
            if kind == 0:
                lam_star[i], q[i] = axis[0], rng.uniform(0.5, 2.0)
            elif kind == 1:
                lam_star[i], q[i] = axis[-1], -rng.uniform(0.5, 2.0)
            else:
                lam_star[i] = axis[rng.integers(1, axis.size - 1)]
        B = rng.standard_normal((n, n))
        M = B @ B.T + np.eye(n)

        def F(lam):
            return M @ (np.asarray(lam) - lam_star) + q

        return VIInstance(vi_set=VISet.box(lower, upper), F=F, jacobian=lambda lam: M), lam_star

    return make
