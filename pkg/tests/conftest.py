import numpy as np
import pytest

from coneboost.cones import ConeSpec, NonNeg, Zero
from coneboost.qcp import QcpProblem, SolverSettings

TIGHT = SolverSettings(tol_abs=1e-12, tol_rel=1e-12, max_iter=400000)


def random_eq_qp(rng, d_z=None, d_y=None):
    """Strictly convex QP with equality constraints only."""
    d_z = d_z or int(rng.integers(2, 11))
    d_y = d_y or int(rng.integers(1, min(d_z, 5) + 1))
    L = rng.standard_normal((d_z, d_z))
    P = L @ L.T / d_z + 0.1 * np.eye(d_z)
    A = rng.standard_normal((d_y, d_z))
    b = rng.standard_normal(d_y)
    c = rng.standard_normal(d_z)
    return QcpProblem(P=P, c=c, A=A, b=b, cone=ConeSpec([Zero(d_y)]))


def kkt_direct(problem):
    """Direct solve of [[P, A'], [A, 0]] (z, y) = (-c, b)."""
    n, m = problem.n_z, problem.n_y
    K = np.block([[problem.P, problem.A.T], [problem.A, np.zeros((m, m))]])
    sol = np.linalg.solve(K, np.concatenate([-problem.c, problem.b]))
    return sol[:n], sol[n:]


def simplex_problem(n, P=None):
    A = np.vstack([np.ones((1, n)), -np.eye(n)])
    b = np.concatenate([[1.0], np.zeros(n)])
    P = np.zeros((n, n)) if P is None else P
    return QcpProblem(P=P, c=np.zeros(n), A=A, b=b, cone=ConeSpec([Zero(1), NonNeg(n)]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
