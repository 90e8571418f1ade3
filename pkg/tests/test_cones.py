import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from coneboost.cones import (
    SOC_TIEBREAK, ConeSpec, Free, NonNeg, Soc, Zero, dprojection, dprojection_C, dual, project, project_C,
)

# -- strategies ---------------------------------------------------------------

blocks = st.one_of(
    st.integers(1, 4).map(Zero),
    st.integers(1, 4).map(NonNeg),
    st.integers(2, 5).map(Soc),
)
cones = st.lists(blocks, min_size=1, max_size=4).map(ConeSpec)


@st.composite
def cone_and_vectors(draw, n_vec=1):
    cone = draw(cones)
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    vecs = [3 * rng.standard_normal(cone.dim) for _ in range(n_vec)]
    return (cone, *vecs)


def fd_jacobian(f, v, h=1e-6):
    return np.column_stack([(f(v + h * e) - f(v - h * e)) / (2 * h) for e in np.eye(v.size)])


def near_kink(cone, v, margin=1e-3):
    for blk, sl in cone.slices():
        x = v[sl]
        if isinstance(blk, NonNeg) and np.min(np.abs(x)) < margin:
            return True
        if isinstance(blk, Soc):
            r = np.linalg.norm(x[1:])
            if abs(abs(x[0]) - r) < margin or r < margin:
                return True
    return False


# -- ConeSpec -----------------------------------------------------------------

def test_conespec_dim_and_slices():
    cone = ConeSpec([Zero(2), NonNeg(3), Soc(4)])
    assert cone.dim == 9
    assert [(type(b).__name__, s.start, s.stop) for b, s in cone.slices()] == [
        ("Zero", 0, 2), ("NonNeg", 2, 5), ("Soc", 5, 9)]


@pytest.mark.parametrize("bad", [[Soc(1)], [NonNeg(0)], [Zero(-1)]])
def test_conespec_rejects_bad_blocks(bad):
    with pytest.raises(ValueError):
        ConeSpec(bad)


def test_conespec_rejects_non_block():
    with pytest.raises(TypeError):
        ConeSpec([3])


def test_conespec_roundtrip():
    cone = ConeSpec([Zero(1), NonNeg(2), Soc(3)])
    assert ConeSpec.from_list(cone.to_list()) == cone
    with pytest.raises(ValueError):
        ConeSpec.from_list([{"type": "psd", "dim": 3}])


# -- dual ---------------------------------------------------------------------

def test_dual_examples():
    assert dual(ConeSpec([Zero(3)])) == ConeSpec([Free(3)])
    assert dual(ConeSpec([NonNeg(2)])) == ConeSpec([NonNeg(2)])
    assert dual(ConeSpec([Soc(3), Zero(1)])) == ConeSpec([Soc(3), Free(1)])


# -- project ------------------------------------------------------------------

def test_project_examples():
    np.testing.assert_array_equal(project(ConeSpec([NonNeg(2)]), np.array([-1.0, 2.0])), [0.0, 2.0])
    np.testing.assert_array_equal(project(ConeSpec([Soc(3)]), np.array([5.0, 3.0, 4.0])), [5.0, 3.0, 4.0])
    np.testing.assert_allclose(project(ConeSpec([Soc(3)]), np.array([0.0, 3.0, 4.0])), [2.5, 1.5, 2.0],
                               atol=1e-15)


def test_soc_projection_matches_numerical_nearest_point():
    v = np.array([0.0, 3.0, 4.0])
    res = minimize(lambda u: np.sum((u - v) ** 2), x0=np.array([6.0, 0.0, 0.0]), method="SLSQP",
                   constraints=[{"type": "ineq", "fun": lambda u: u[0] - np.linalg.norm(u[1:])}],
                   options={"ftol": 1e-14, "maxiter": 500})
    np.testing.assert_allclose(project(ConeSpec([Soc(3)]), v), res.x, atol=1e-5)


def test_soc_polar_region_maps_to_zero():
    np.testing.assert_array_equal(project(ConeSpec([Soc(3)]), np.array([-5.0, 3.0, 0.0])), 0.0)


def test_project_dimension_mismatch():
    with pytest.raises(ValueError):
        project(ConeSpec([NonNeg(2)]), np.zeros(3))


def test_project_batch_matches_rows():
    cone = ConeSpec([Zero(1), NonNeg(2), Soc(3)])
    V = np.random.default_rng(0).standard_normal((7, cone.dim))
    np.testing.assert_array_equal(project(cone, V), np.array([project(cone, v) for v in V]))
    np.testing.assert_array_equal(dprojection(cone, V), np.array([dprojection(cone, v) for v in V]))


@settings(max_examples=200, deadline=None)
@given(cone_and_vectors())
def test_projection_is_idempotent(data):
    cone, v = data
    p = project(cone, v)
    np.testing.assert_allclose(project(cone, p), p, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(cone_and_vectors())
def test_projection_lies_in_cone(data):
    cone, v = data
    p = project(cone, v)
    for blk, sl in cone.slices():
        x = p[sl]
        if isinstance(blk, Zero):
            assert np.all(x == 0)
        elif isinstance(blk, NonNeg):
            assert np.all(x >= 0)
        else:
            assert x[0] >= np.linalg.norm(x[1:]) - 1e-12


@settings(max_examples=200, deadline=None)
@given(cone_and_vectors())
def test_moreau_decomposition(data):
    cone, v = data
    p = project(dual(cone), v)
    assert abs(p @ (p - v)) <= 1e-10
    # v = P_K(v) - P_K*(-v)
    np.testing.assert_allclose(project(cone, v) - project(dual(cone), -v), v, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(cone_and_vectors(n_vec=2))
def test_projection_is_nonexpansive(data):
    cone, u, v = data
    assert np.linalg.norm(project(cone, u) - project(cone, v)) <= np.linalg.norm(u - v) + 1e-12


# -- dprojection --------------------------------------------------------------

def test_dprojection_examples():
    np.testing.assert_array_equal(dprojection(ConeSpec([NonNeg(2)]), np.array([-1.0, 2.0])), np.diag([0.0, 1.0]))
    np.testing.assert_array_equal(dprojection(ConeSpec([Soc(3)]), np.array([5.0, 3.0, 4.0])), np.eye(3))
    v = np.array([0.0, 3.0, 4.0])
    cone = ConeSpec([Soc(3)])
    np.testing.assert_allclose(dprojection(cone, v), fd_jacobian(lambda u: project(cone, u), v), atol=1e-6)


def test_dprojection_soc_boundary_closed_form():
    # on the boundary ((t + r) / 2r) branch evaluated at t = 0, r = 5
    J = dprojection(ConeSpec([Soc(3)]), np.array([0.0, 3.0, 4.0]))
    xb = np.array([0.6, 0.8])
    expected = 0.5 * np.block([[np.ones((1, 1)), xb[None]], [xb[:, None], np.eye(2)]])
    np.testing.assert_allclose(J, expected, atol=1e-15)


def test_nonneg_tiebreak_zero_coordinate():
    np.testing.assert_array_equal(dprojection(ConeSpec([NonNeg(2)]), np.array([0.0, 1.0])), np.diag([0.0, 1.0]))


def test_soc_tiebreak_on_cone_surface():
    # ||x|| = t: classified by t + tiebreak, i.e. as interior -> identity
    cone = ConeSpec([Soc(3)])
    assert SOC_TIEBREAK == 1e-12
    np.testing.assert_array_equal(dprojection(cone, np.array([5.0, 3.0, 4.0])), np.eye(3))
    # ||x|| = -t: t + tiebreak > -||x||, so the boundary branch applies
    J = dprojection(cone, np.array([-5.0, 3.0, 4.0]))
    assert 0 < np.abs(J).max() < 1


@settings(max_examples=150, deadline=None)
@given(cone_and_vectors())
def test_dprojection_matches_finite_differences(data):
    cone, v = data
    if near_kink(cone, v):
        return
    np.testing.assert_allclose(dprojection(cone, v), fd_jacobian(lambda u: project(cone, u), v), atol=1e-6)


@settings(max_examples=150, deadline=None)
@given(cone_and_vectors())
def test_dprojection_symmetric_with_unit_spectrum(data):
    cone, v = data
    J = dprojection(cone, v)
    np.testing.assert_allclose(J, J.T, atol=1e-12)
    eig = np.linalg.eigvalsh(J)
    assert eig.min() >= -1e-12 and eig.max() <= 1 + 1e-12


# -- product cone R^n x K* ----------------------------------------------------

def test_project_C_examples():
    np.testing.assert_array_equal(project_C(np.array([-3.0, -2.0]), 1, ConeSpec([NonNeg(1)])), [-3.0, 0.0])
    np.testing.assert_array_equal(project_C(np.array([1.0, 2.0, 7.0]), 2, ConeSpec([Zero(1)])), [1.0, 2.0, 7.0])
    np.testing.assert_allclose(project_C(np.array([0.0, 3.0, 4.0]), 0, ConeSpec([Soc(3)])), [2.5, 1.5, 2.0])


def test_dprojection_C_examples():
    np.testing.assert_array_equal(dprojection_C(np.array([-3.0, -2.0]), 1, ConeSpec([NonNeg(1)])), np.diag([1.0, 0.0]))
    w = np.random.default_rng(1).standard_normal(3)
    np.testing.assert_array_equal(dprojection_C(w, 1, ConeSpec([Zero(2)])), np.eye(3))
    w = np.array([0.0, 3.0, 4.0])
    cone = ConeSpec([Soc(3)])
    np.testing.assert_allclose(dprojection_C(w, 0, cone), fd_jacobian(lambda u: project_C(u, 0, cone), w), atol=1e-6)


def test_project_C_dimension_mismatch():
    with pytest.raises(ValueError):
        project_C(np.zeros(4), 2, ConeSpec([NonNeg(1)]))
