import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coneboost.cones import ConeSpec, Free, NonNeg, Soc, Zero
from coneboost.qcp import (
    MaxIterationsExceeded, QcpProblem, QcpSolution, SolverSettings, assemble, fixed_point_step, kkt_residuals,
    solve, solve_batch,
)

from conftest import kkt_direct, random_eq_qp, simplex_problem


def one_dim_problem():
    # min 1/2 z^2 - z  s.t.  z >= 0   written as  -z + s = 0, s >= 0
    return QcpProblem(P=[[1.0]], c=[-1.0], A=[[-1.0]], b=[0.0], cone=ConeSpec([NonNeg(1)]))


# -- problem validation -------------------------------------------------------

def test_problem_rejects_nonsymmetric_P():
    with pytest.raises(ValueError, match="symmetric"):
        QcpProblem(P=[[1.0, 1.0], [0.0, 1.0]], c=[0, 0], A=[[1.0, 1.0]], b=[1.0], cone=ConeSpec([Zero(1)]))


def test_problem_rejects_indefinite_P():
    with pytest.raises(ValueError, match="semidefinite"):
        QcpProblem(P=np.diag([1.0, -1e-6]), c=[0, 0], A=[[1.0, 1.0]], b=[1.0], cone=ConeSpec([Zero(1)]))


def test_problem_accepts_psd_within_tolerance():
    QcpProblem(P=np.diag([1.0, -1e-9]), c=[0, 0], A=[[1.0, 1.0]], b=[1.0], cone=ConeSpec([Zero(1)]))


@pytest.mark.parametrize("kwargs", [
    dict(P=np.eye(3), c=np.zeros(2), A=np.ones((1, 2)), b=[1.0], cone=ConeSpec([Zero(1)])),
    dict(P=np.eye(2), c=np.zeros(2), A=np.ones((1, 3)), b=[1.0], cone=ConeSpec([Zero(1)])),
    dict(P=np.eye(2), c=np.zeros(2), A=np.ones((2, 2)), b=[1.0], cone=ConeSpec([Zero(1)])),
    dict(P=np.eye(2), c=np.zeros(2), A=np.ones((1, 2)), b=[1.0], cone=ConeSpec([Zero(2)])),
    dict(P=np.eye(2), c=np.zeros(2), A=np.ones((1, 2)), b=[1.0], cone=ConeSpec([Free(1)])),
])
def test_problem_rejects_bad_dimensions(kwargs):
    with pytest.raises(ValueError):
        QcpProblem(**kwargs)


def test_problem_is_read_only():
    prob = one_dim_problem()
    with pytest.raises(ValueError):
        prob.c[0] = 3.0


def test_problem_dict_roundtrip():
    prob = simplex_problem(3, P=np.eye(3))
    back = QcpProblem.from_dict(prob.to_dict())
    for name in "PcAb":
        np.testing.assert_array_equal(getattr(back, name), getattr(prob, name))
    assert back.cone == prob.cone
    with pytest.raises(ValueError):
        QcpProblem.from_dict({**prob.to_dict(), "version": 99})


@pytest.mark.parametrize("kwargs", [dict(max_iter=0), dict(tol_abs=0.0), dict(tol_rel=-1.0), dict(check_every=0)])
def test_settings_validation(kwargs):
    with pytest.raises(ValueError):
        SolverSettings(**kwargs)


# -- assemble -----------------------------------------------------------------

def test_assemble_scalar_example():
    prob = QcpProblem(P=[[0.0]], c=[-1.0], A=[[-1.0]], b=[0.0], cone=ConeSpec([NonNeg(1)]))
    sys = assemble(prob)
    np.testing.assert_array_equal(sys.M, [[0.0, -1.0], [1.0, 0.0]])
    np.testing.assert_array_equal(sys.q, [-1.0, 0.0])


def test_assemble_equality_example():
    prob = QcpProblem(P=np.eye(2), c=np.zeros(2), A=[[1.0, 1.0]], b=[1.0], cone=ConeSpec([Zero(1)]))
    np.testing.assert_array_equal(assemble(prob).M, [[1, 0, 1], [0, 1, 1], [-1, -1, 0]])


def test_factorization_identity(rng):
    sys = assemble(random_eq_qp(rng))
    x = rng.standard_normal(sys.M.shape[0])
    IM = np.eye(len(x)) + sys.M
    np.testing.assert_allclose(IM @ sys.solve_linear(x), x, atol=1e-10)
    np.testing.assert_allclose(IM @ (sys.inv @ x), x, atol=1e-10)


# -- fixed-point map ----------------------------------------------------------

def test_fixed_point_at_hand_optimum():
    # z* = 1, y* = 0, s* = 1:  u = (z, y) = (1, 0), v = (0, s) = (0, 1), w = u - v
    prob = one_dim_problem()
    w_star = np.array([1.0, -1.0])
    np.testing.assert_allclose(fixed_point_step(w_star, assemble(prob)), w_star, atol=1e-9)


def test_origin_fixed_when_data_zero():
    prob = QcpProblem(P=np.eye(2), c=np.zeros(2), A=np.ones((1, 2)), b=[0.0], cone=ConeSpec([Zero(1)]))
    np.testing.assert_array_equal(fixed_point_step(np.zeros(3), assemble(prob)), 0.0)


def test_fixed_point_step_dimension_check():
    with pytest.raises(ValueError):
        fixed_point_step(np.zeros(5), assemble(one_dim_problem()))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fixed_point_residual_nonincreasing(seed):
    rng = np.random.default_rng(seed)
    d_z = 5
    A = rng.standard_normal((4, d_z))
    b = A @ rng.standard_normal(d_z) + np.concatenate([[0.0], rng.uniform(0.1, 1, 3)])
    prob = QcpProblem(P=np.eye(d_z) * 0.5, c=rng.standard_normal(d_z), A=A, b=b,
                      cone=ConeSpec([Zero(1), NonNeg(3)]))
    sys = assemble(prob)
    w = 5 * rng.standard_normal(d_z + 4)
    res = []
    for _ in range(4):
        w_next = fixed_point_step(w, sys)
        res.append(np.linalg.norm(w_next - w))
        w = w_next
    assert all(b <= a + 1e-12 for a, b in zip(res, res[1:]))
    assert res[3] < res[0]


# -- solve --------------------------------------------------------------------

def test_solve_simplex_projection():
    prob = QcpProblem(P=np.eye(3), c=np.zeros(3), A=np.ones((1, 3)), b=[1.0], cone=ConeSpec([Zero(1)]))
    np.testing.assert_allclose(solve(prob).z, [1 / 3] * 3, atol=1e-7)


def test_solve_simplex_lp_vertex():
    prob = simplex_problem(3)
    sol = solve(QcpProblem(P=prob.P, c=[1.0, 2.0, 3.0], A=prob.A, b=prob.b, cone=prob.cone))
    np.testing.assert_allclose(sol.z, [1.0, 0.0, 0.0], atol=1e-6)


def test_solve_one_dim():
    sol = solve(one_dim_problem())
    assert sol.z[0] == pytest.approx(1.0, abs=1e-7)
    assert sol.y[0] == pytest.approx(0.0, abs=1e-7)
    assert sol.s[0] == pytest.approx(1.0, abs=1e-7)


def test_solution_cone_membership():
    prob = simplex_problem(4, P=np.eye(4))
    prob = QcpProblem(P=prob.P, c=[0.3, -1.0, 0.2, 0.5], A=prob.A, b=prob.b, cone=prob.cone)
    sol = solve(prob)
    assert np.all(sol.s[1:] >= -1e-9) and np.all(sol.y[1:] >= -1e-9)
    assert abs(sol.s[0]) <= 1e-9


def test_solve_soc_problem():
    # maximize x1 + x2 on the unit disc: min -x1 - x2 s.t. ||x|| <= 1
    A = np.vstack([np.zeros((1, 2)), -np.eye(2)])
    prob = QcpProblem(P=np.zeros((2, 2)), c=[-1.0, -1.0], A=A, b=[1.0, 0.0, 0.0], cone=ConeSpec([Soc(3)]))
    np.testing.assert_allclose(solve(prob).z, [np.sqrt(0.5)] * 2, atol=1e-6)


def test_kkt_residuals_of_hand_solution():
    sol = QcpSolution(z=np.array([1.0]), y=np.array([0.0]), s=np.array([1.0]), w_star=np.array([1.0, -1.0]),
                      iterations=0, primal_residual=0.0, dual_residual=0.0)
    assert kkt_residuals(one_dim_problem(), sol) == pytest.approx((0.0, 0.0, 0.0), abs=1e-12)


def test_kkt_primal_residual_arithmetic():
    prob = QcpProblem(P=np.eye(3), c=np.zeros(3), A=np.ones((1, 3)), b=[1.0], cone=ConeSpec([Zero(1)]))
    z = np.full(3, 1 / 3 + 0.1)
    sol = QcpSolution(z=z, y=np.zeros(1), s=np.zeros(1), w_star=np.zeros(4), iterations=0,
                      primal_residual=0.0, dual_residual=0.0)
    assert kkt_residuals(prob, sol)[0] == pytest.approx(0.3, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_solver_residuals_within_contract(seed):
    prob = random_eq_qp(np.random.default_rng(seed))
    sol = solve(prob)
    assert max(kkt_residuals(prob, sol)) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_solver_matches_direct_kkt(seed):
    prob = random_eq_qp(np.random.default_rng(seed))
    z_ref, _ = kkt_direct(prob)
    z = solve(prob).z
    assert np.linalg.norm(z - z_ref) <= 1e-5 * max(1.0, np.linalg.norm(z_ref))


def test_fixed_point_certificate(rng):
    prob = random_eq_qp(rng)
    sys = assemble(prob)
    settings_ = SolverSettings()
    sol = solve(prob, settings_, system=sys)
    assert np.linalg.norm(fixed_point_step(sol.w_star, sys) - sol.w_star) <= 10 * settings_.tol_abs


def test_warm_start_converges_immediately(rng):
    prob = random_eq_qp(rng)
    sol = solve(prob)
    again = solve(prob, warm_start=sol.w_star)
    assert again.iterations <= 5
    np.testing.assert_allclose(again.z, sol.z, atol=1e-8)


def test_warm_start_dimension_check():
    with pytest.raises(ValueError):
        solve(one_dim_problem(), warm_start=np.zeros(3))


def test_positive_scaling_of_linear_cost_keeps_argmin():
    base = simplex_problem(4)
    c = np.array([0.4, -0.2, 0.9, 0.1])
    z1 = solve(QcpProblem(P=base.P, c=c, A=base.A, b=base.b, cone=base.cone)).z
    z2 = solve(QcpProblem(P=base.P, c=7.5 * c, A=base.A, b=base.b, cone=base.cone)).z
    np.testing.assert_allclose(z1, z2, atol=1e-6)


def test_batch_matches_single_solves(rng):
    prob = simplex_problem(3, P=np.eye(3))
    costs = rng.standard_normal((6, 3))
    batch = solve_batch(prob, costs)
    assert batch.converged.all() and len(batch) == 6
    for i, c in enumerate(costs):
        single = solve(QcpProblem(P=prob.P, c=c, A=prob.A, b=prob.b, cone=prob.cone))
        np.testing.assert_allclose(batch.Z[i], single.z, atol=1e-12)
        assert batch.row(i).iterations == single.iterations


def test_batch_cost_shape_check():
    with pytest.raises(ValueError):
        solve_batch(simplex_problem(3), np.zeros((2, 4)))


def test_max_iterations_carries_residuals():
    # infeasible: z = 1 and z = 2
    prob = QcpProblem(P=[[1.0]], c=[0.0], A=[[1.0], [1.0]], b=[1.0, 2.0], cone=ConeSpec([Zero(2)]))
    with pytest.raises(MaxIterationsExceeded) as exc:
        solve(prob, SolverSettings(max_iter=200))
    assert exc.value.solution.primal_residual > 1e-3
    assert not exc.value.solution.converged


def test_batch_does_not_raise_on_failure():
    prob = QcpProblem(P=[[1.0]], c=[0.0], A=[[1.0], [1.0]], b=[1.0, 2.0], cone=ConeSpec([Zero(2)]))
    batch = solve_batch(prob, np.zeros((2, 1)), SolverSettings(max_iter=50))
    assert not batch.converged.any()
    assert np.all(batch.iterations == 50)


def test_assembled_system_is_shareable(rng):
    prob = simplex_problem(3, P=np.eye(3))
    sys = assemble(prob)
    assert not sys.M.flags.writeable and not sys.inv.flags.writeable
    a = solve_batch(prob, rng.standard_normal((4, 3)), system=sys)
    b = solve_batch(prob, rng.standard_normal((4, 3)), system=sys)
    assert a.converged.all() and b.converged.all()
