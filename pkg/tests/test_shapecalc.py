import math

import numpy as np
import pytest

from ccbm import mesh as M
from ccbm import pde, shapecalc, synth
from ccbm.mesh import GAMMA, SIGMA, ObstacleCurve
from ccbm.verify import random_fields

VARC = pde.Coefficients.parse("1.1 + sin(pi*x)*sin(pi*y)", "1.1 - sin(t)", "1.1 + cos(t)")
CONST_B = pde.Coefficients.parse("1", "1.1", "1.1")


@pytest.fixture(scope="module")
def setup():
    ds = synth.make_dataset(ObstacleCurve("ellipse"), "2 + cos(t)", VARC, 100, 10)
    m = M.annulus_for_curve(ObstacleCurve("circle", radius=0.6), 100, 10)
    data = synth.boundary_data_for(m, ds)
    u = pde.solve_state(m, VARC, data)
    rng = np.random.default_rng(0)
    v = 1 + 0.2 * rng.standard_normal(m.n_vertices)
    lam = 0.01 * rng.standard_normal(m.n_vertices)
    beta = 0.005
    adj = {
        "p": pde.solve_adjoint_p(m, VARC, u.imag),
        "q": pde.solve_adjoint_q(m, VARC, u, v, lam, beta),
        "Lambda": pde.solve_adjoint_Lambda(m, VARC, u.real, v, lam, beta),
    }
    return m, data, u, v, lam, beta, adj


def test_kernel_arithmetic():
    assert shapecalc.kernel_from_normals(1.0, [1 + 2j], [3 + 4j]) == pytest.approx([-2.0])


@pytest.mark.parametrize("normals", shapecalc.NORMAL_MODES)
def test_zero_adjoint_gives_zero_kernel(setup, normals):
    m, _, u, *_ = setup
    k = shapecalc.kernel_G(m, u, np.zeros(m.n_vertices, complex), VARC, normals=normals)
    assert k.shape == (len(m.edges(GAMMA)),)
    # the flux of a zero adjoint still carries the mass-weighted source term
    if normals == "gradient":
        assert not np.any(k)
    with pytest.raises(ValueError):
        shapecalc.kernel_G(m, u, u, VARC, normals="bogus")


def test_zero_adjoint_and_zero_source_in_flux_mode(setup):
    m, _, u, *_ = setup
    real_u = u.real + 0j
    k = shapecalc.kernel_G(m, real_u, np.zeros(m.n_vertices, complex), VARC)
    assert not np.any(k)


def test_method3_reduces_to_G(setup):
    m, _, u, _, _, beta, adj = setup
    zero = np.zeros(m.n_vertices)
    g = shapecalc.kernel_G(m, u, adj["p"], VARC)
    g3 = shapecalc.kernel_admm(m, 3, u, VARC, zero, zero, beta, p=adj["p"])
    np.testing.assert_array_equal(g3, g)


def test_method1_affine_only():
    m = M.annulus_for_curve(ObstacleCurve("circle", radius=0.5), 32, 4)
    u = np.ones(m.n_vertices, complex)
    one, zero = np.ones(m.n_vertices), np.zeros(m.n_vertices)
    k = shapecalc.kernel_admm(m, 1, u, VARC, one, zero, 2.0, q=np.zeros(m.n_vertices, complex), normals="gradient")
    np.testing.assert_allclose(k, 1.0, rtol=0, atol=1e-15)


def test_missing_adjoint_names_requirement(setup):
    m, _, u, v, lam, beta, adj = setup
    with pytest.raises(shapecalc.MissingAdjointError, match="method 2 requires adjoint.*missing Lambda"):
        shapecalc.kernel_admm(m, 2, u, VARC, v, lam, beta, p=adj["p"])
    with pytest.raises(shapecalc.MissingAdjointError, match="method 1"):
        shapecalc.kernel_admm(m, 1, u, VARC, v, lam, beta, p=adj["p"])
    with pytest.raises(ValueError):
        shapecalc.kernel_admm(m, 5, u, VARC, v, lam, beta)


@pytest.mark.parametrize("normals", shapecalc.NORMAL_MODES)
def test_kernel_identities(setup, normals):
    m, _, u, v, lam, beta, adj = setup
    g = shapecalc.kernel_G(m, u, adj["p"], VARC, normals=normals)
    ks = {k: shapecalc.kernel_admm(m, k, u, VARC, v, lam, beta, normals=normals, **adj) for k in (1, 2, 3, 4)}
    scale = max(np.abs(x).max() for x in ks.values())
    aff = shapecalc.affine_term(m, v, lam, beta)
    assert np.abs(ks[3] - g - aff).max() <= 1e-12 * scale
    assert np.abs(ks[2] - (ks[3] + ks[4] - aff)).max() <= 1e-12 * scale
    # q = i Lambda - p makes methods 1 and 2 the same kernel
    assert np.abs(ks[1] - ks[2]).max() <= 1e-9 * scale


def test_affine_term_uses_edge_averages():
    m = M.annulus_for_curve(ObstacleCurve("circle", radius=0.5), 8, 1)
    v = np.arange(m.n_vertices, dtype=float)
    e = m.edges(GAMMA)
    ve = 0.5 * (v[e[:, 0]] + v[e[:, 1]])
    np.testing.assert_allclose(shapecalc.affine_term(m, v, 2 * v, 0.5), 0.25 * ve**2 - 2 * ve**2)


def test_sobolev_zero_and_validation(setup):
    m, *_ = setup
    nk = len(m.edges(GAMMA))
    assert not np.any(shapecalc.sobolev_gradient(m, np.zeros(nk)))
    with pytest.raises(ValueError):
        shapecalc.sobolev_gradient(m, np.ones(nk), c_b=0.0)
    with pytest.raises(ValueError):
        shapecalc.sobolev_gradient(m, np.ones(nk + 1))


@pytest.mark.parametrize("c_b", [1.0, 0.7, 0.2])
def test_descent_identity(setup, c_b):
    m, _, u, _, _, _, adj = setup
    k = shapecalc.kernel_G(m, u, adj["p"], VARC)
    th = shapecalc.sobolev_gradient(m, k, c_b)
    assert not np.any(th[m.boundary_vertices(SIGMA)])
    assert shapecalc.shape_derivative_value(m, k, th) < 0
    assert shapecalc.descent_identity_residual(m, k, th, c_b) <= 1e-10


def test_constant_positive_kernel_shrinks_outward_normal():
    m = M.annulus_for_curve(ObstacleCurve("circle", radius=0.5), 64, 8)
    th = shapecalc.sobolev_gradient(m, np.ones(len(m.edges(GAMMA))))
    e = m.edges(GAMMA)
    _, length, normal = M.boundary_geometry(m, GAMMA)
    tn = np.einsum("ed,ed->e", 0.5 * (th[e[:, 0]] + th[e[:, 1]]), normal)
    assert np.sum(tn * length) / length.sum() < 0


def test_perimeter_integral():
    r = 0.45
    m = M.annulus_for_curve(ObstacleCurve("circle", radius=r), 200, 4)
    gv = m.boundary_vertices(GAMMA)
    th = np.zeros_like(m.vertices)
    # the domain normal on Gamma is -e_r
    th[gv] = -m.vertices[gv] / r
    val = shapecalc.shape_derivative_value(m, np.ones(len(m.edges(GAMMA))), th)
    assert val == pytest.approx(2 * math.pi * r, rel=1e-3)
    assert shapecalc.shape_derivative_value(m, np.ones(len(m.edges(GAMMA))), 0 * th) == 0


def test_fd_zero_field(setup):
    m, *_ = setup
    assert shapecalc.fd_shape_derivative(lambda _: 1 / 0, m, np.zeros_like(m.vertices)) == 0.0


@pytest.fixture(scope="module")
def const_setup():
    ds = synth.make_dataset(ObstacleCurve("ellipse"), "2 + cos(t)", CONST_B, 150, 12)
    m = M.annulus_for_curve(ObstacleCurve("circle", radius=0.6), 150, 12)
    data = synth.boundary_data_for(m, ds)
    u = pde.solve_state(m, CONST_B, data)
    return m, data, u


def test_fd_richardson(const_setup):
    m, data, u = const_setup

    def J(mesh):
        return pde.cost_J(mesh, pde.solve_state(mesh, CONST_B, data))

    th = random_fields(m, 1, seed=21)[0]
    exact = shapecalc.volume_shape_derivative(m, CONST_B, u, th)
    gaps = [abs(shapecalc.fd_shape_derivative(J, m, th, t) - exact) for t in (4e-2, 2e-2)]
    assert gaps[0] / gaps[1] == pytest.approx(4.0, rel=0.15)


def test_volume_route_matches_kernel(const_setup):
    m, _, u = const_setup
    p = pde.solve_adjoint_p(m, CONST_B, u.imag)
    k = shapecalc.kernel_G(m, u, p, CONST_B)
    for th in random_fields(m, 5, seed=22):
        vol = shapecalc.volume_shape_derivative(m, CONST_B, u, th)
        assert shapecalc.shape_derivative_value(m, k, th) == pytest.approx(vol, rel=0.02)


def test_volume_route_matches_fd(const_setup):
    m, data, u = const_setup

    def J(mesh):
        return pde.cost_J(mesh, pde.solve_state(mesh, CONST_B, data))

    th = random_fields(m, 1, seed=23)[0]
    vol = shapecalc.volume_shape_derivative(m, CONST_B, u, th)
    assert shapecalc.fd_shape_derivative(J, m, th, 1e-4) == pytest.approx(vol, rel=1e-5)


def test_hessian_bilinear_and_zero(setup):
    m, _, u, *_ = setup
    a, b = random_fields(m, 2, seed=24)
    h = shapecalc.hessian_action(m, VARC, u, a, b)
    assert shapecalc.hessian_action(m, VARC, u, 2 * a, b) == pytest.approx(2 * h, rel=1e-12)
    assert shapecalc.hessian_action(m, VARC, u, a, 0 * b) == 0


def test_kernel_csv(tmp_path, setup):
    m, *_ = setup
    k = np.linspace(-1, 1, len(m.edges(GAMMA)))
    shapecalc.write_kernel_csv(tmp_path / "k.csv", m, k)
    lines = (tmp_path / "k.csv").read_text().splitlines()
    assert lines[0] == "edge_index,mid_x,mid_y,value"
    assert len(lines) == len(k) + 1
    assert float(lines[-1].split(",")[3]) == 1.0
