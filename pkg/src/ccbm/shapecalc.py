"""Shape-gradient kernels on Gamma, the Sobolev gradient and derivative oracles."""

from __future__ import annotations

from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import pde
from .mesh import GAMMA, SIGMA, Mesh, boundary_geometry, deform

KERNEL_KINDS = ("G", "G_q", "G_sharp", "G_p", "G_Lambda")
DEFAULT_CB = 0.7


class MissingAdjointError(ValueError):
    pass


NORMAL_MODES = ("flux", "gradient")


def _sigma_mid(mesh: Mesh, coeffs: pde.Coefficients) -> np.ndarray:
    mid = boundary_geometry(mesh, GAMMA)[0]
    return coeffs.sigma_at(mid)


def _dn(mesh, coeffs, field, mode, sig, source=None):
    """Normal derivative per Gamma edge; ``source`` marks an adjoint-type field."""
    if mode == "gradient":
        return pde.normal_derivative_on_gamma(mesh, field)
    if mode == "flux":
        return pde.conormal_flux_on_gamma(mesh, coeffs, field, source) / sig
    raise ValueError(f"normal mode must be one of {NORMAL_MODES}, got {mode!r}")


def kernel_from_normals(sig, dn_u, dn_p) -> np.ndarray:
    """``sigma (Re dn_u Im dn_p - Im dn_u Re dn_p)``."""
    dn_u, dn_p = np.asarray(dn_u), np.asarray(dn_p)
    return sig * (dn_u.real * dn_p.imag - dn_u.imag * dn_p.real)


def kernel_G(mesh: Mesh, u: np.ndarray, p: np.ndarray, coeffs: pde.Coefficients, normals: str = "flux") -> np.ndarray:
    """Shape gradient kernel of ``J`` per Gamma edge, ``sigma (dn u1 dn p2 - dn u2 dn p1)``.

    ``normals="flux"`` reads the normal derivatives from the Gamma-row
    residual, ``"gradient"`` from the adjacent triangle.
    """
    sig = _sigma_mid(mesh, coeffs)
    du = _dn(mesh, coeffs, u, normals, sig)
    dp = _dn(mesh, coeffs, p, normals, sig, np.asarray(u).imag)
    return kernel_from_normals(sig, du, dp)


def edge_average(mesh: Mesh, nodal) -> np.ndarray:
    e = mesh.edges(GAMMA)
    nodal = np.asarray(nodal, dtype=float)
    return 0.5 * (nodal[e[:, 0]] + nodal[e[:, 1]])


def affine_term(mesh: Mesh, v, lam, beta: float) -> np.ndarray:
    """``beta/2 v^2 - lambda v`` with ``v``, ``lambda`` averaged over each edge."""
    ve, le = edge_average(mesh, v), edge_average(mesh, lam)
    return 0.5 * beta * ve**2 - le * ve


def kernel_admm(
    mesh: Mesh,
    method: int,
    u: np.ndarray,
    coeffs: pde.Coefficients,
    v,
    lam,
    beta: float,
    p: np.ndarray | None = None,
    q: np.ndarray | None = None,
    Lambda: np.ndarray | None = None,
    normals: str = "flux",
) -> np.ndarray:
    """Kernel of the augmented functional for ADMM method 1..4.

    Method 1 needs ``q``, method 2 ``p`` and ``Lambda``, method 3 ``p``,
    method 4 ``Lambda``.
    """
    needs = {1: ("q",), 2: ("p", "Lambda"), 3: ("p",), 4: ("Lambda",)}
    if method not in needs:
        raise ValueError(f"method must be 1, 2, 3 or 4, got {method!r}")
    given = {"p": p, "q": q, "Lambda": Lambda}
    missing = [n for n in needs[method] if given[n] is None]
    if missing:
        raise MissingAdjointError(
            f"method {method} requires adjoint(s) {', '.join(needs[method])}; missing {', '.join(missing)}"
        )
    u = np.asarray(u)
    sig = _sigma_mid(mesh, coeffs)
    aff = affine_term(mesh, v, lam, beta)
    du = _dn(mesh, coeffs, u, normals, sig)
    resid = pde.admm_residual_source(u.real, v, lam, beta)
    out = aff.copy()
    if method == 1:
        dq = _dn(mesh, coeffs, q, normals, sig, 1j * resid - u.imag)
        return out + sig * (dq.real * du.imag - dq.imag * du.real)
    if method in (2, 3):
        dp = _dn(mesh, coeffs, p, normals, sig, u.imag)
        out = out + kernel_from_normals(sig, du, dp)
    if method in (2, 4):
        dl = _dn(mesh, coeffs, Lambda, normals, sig, resid)
        out = out - sig * (dl.real * du.real + dl.imag * du.imag)
    return out


def _sobolev_operator(mesh: Mesh, c_b: float) -> sp.csr_matrix:
    key = ("sobolev", c_b)
    if key not in mesh._cache:
        area, grad, _ = pde.element_data(mesh)
        local = area[:, None, None] * np.einsum("eid,ejd->eij", grad, grad)
        lap = pde._local_to_global(mesh, local)
        e = mesh.edges(GAMMA)
        length = boundary_geometry(mesh, GAMMA)[1]
        k1 = (1.0 / length)[:, None, None] * np.array([[1.0, -1.0], [-1.0, 1.0]])[None]
        rows = np.repeat(e, 2, axis=1).ravel()
        cols = np.tile(e, (1, 2)).ravel()
        n = mesh.n_vertices
        surf = sp.csr_matrix((k1.ravel(), (rows, cols)), shape=(n, n))
        mesh._cache[key] = (c_b * lap + (1.0 - c_b) * surf).tocsr()
    return mesh._cache[key]


def _sobolev_free(mesh: Mesh) -> np.ndarray:
    mask = np.ones(mesh.n_vertices, dtype=bool)
    mask[mesh.boundary_vertices(SIGMA)] = False
    return np.flatnonzero(mask)


def sobolev_load(mesh: Mesh, kernel: np.ndarray) -> np.ndarray:
    """Right-hand side ``-int_Gamma k n . phi`` with midpoint quadrature, shape (N, 2)."""
    kernel = np.asarray(kernel, dtype=float)
    e = mesh.edges(GAMMA)
    _, length, normal = boundary_geometry(mesh, GAMMA)
    per_end = -(kernel * length * 0.5)[:, None] * normal
    rhs = np.zeros((mesh.n_vertices, 2))
    np.add.at(rhs, e[:, 0], per_end)
    np.add.at(rhs, e[:, 1], per_end)
    return rhs


def sobolev_gradient(mesh: Mesh, kernel: np.ndarray, c_b: float = DEFAULT_CB) -> np.ndarray:
    """Deformation field ``theta`` (N, 2), zero on Sigma, representing ``-kernel n`` in H1."""
    if not 0.0 < c_b <= 1.0:
        raise ValueError("c_b must lie in (0, 1]")
    kernel = np.asarray(kernel, dtype=float)
    if kernel.shape != (len(mesh.edges(GAMMA)),):
        raise ValueError("kernel must hold one value per Gamma edge")
    theta = np.zeros((mesh.n_vertices, 2))
    if not np.any(kernel):
        return theta
    rhs = sobolev_load(mesh, kernel)
    free = _sobolev_free(mesh)
    key = ("sobolev_lu", c_b)
    if key not in mesh._cache:
        a = _sobolev_operator(mesh, c_b)[free][:, free].tocsc()
        mesh._cache[key] = (a, spla.splu(a))
    a, lu = mesh._cache[key]
    sol = lu.solve(rhs[free])
    res = pde.backward_error(a, sol, rhs[free])
    if not np.isfinite(res) or res > pde.RESIDUAL_TOL:
        raise pde.SolverError(f"Sobolev solve residual {res:.3e}")
    theta[free] = sol
    return theta


def sobolev_energy(mesh: Mesh, theta: np.ndarray, c_b: float = DEFAULT_CB) -> float:
    """``c_b |grad theta|^2 + (1 - c_b) |grad_Gamma theta|^2``."""
    a = _sobolev_operator(mesh, c_b)
    theta = np.asarray(theta, dtype=float)
    return float(sum(c @ (a @ c) for c in theta.T))


def shape_derivative_value(mesh: Mesh, kernel: np.ndarray, theta: np.ndarray) -> float:
    """``sum_e k_e (theta_mid . n_e) |e|``."""
    e = mesh.edges(GAMMA)
    _, length, normal = boundary_geometry(mesh, GAMMA)
    theta = np.asarray(theta, dtype=float)
    mid = 0.5 * (theta[e[:, 0]] + theta[e[:, 1]])
    return float(np.sum(np.asarray(kernel) * np.einsum("ed,ed->e", mid, normal) * length))


def descent_identity_residual(mesh: Mesh, kernel, theta, c_b: float = DEFAULT_CB) -> float:
    """Relative gap between ``dJ[theta]`` and ``-energy(theta)``."""
    d = shape_derivative_value(mesh, kernel, theta)
    en = sobolev_energy(mesh, theta, c_b)
    scale = max(abs(d), en, np.finfo(float).tiny)
    return abs(d + en) / scale


def volume_shape_derivative(mesh: Mesh, coeffs: pde.Coefficients, u: np.ndarray, theta: np.ndarray) -> float:
    """Derivative of the discrete ``J`` through the material derivative.

    ``int u2 udot2 + 1/2 int div(theta) u2^2``, which is exact for the
    assembled problem.
    """
    udot = pde.solve_material_derivative(mesh, coeffs, u, theta)
    u2 = np.asarray(u).imag
    div = pde.deformation_jacobians(mesh, theta)[0]
    area = pde.element_data(mesh)[0]
    local = (div * area / 12.0)[:, None, None] * (np.ones((3, 3)) + np.eye(3))[None]
    dm = pde._local_to_global(mesh, local)
    return float(u2 @ (pde.mass_matrix(mesh) @ udot.imag) + 0.5 * u2 @ (dm @ u2))


def fd_shape_derivative(functional: Callable[[Mesh], float], mesh: Mesh, theta: np.ndarray, t: float = 1e-3) -> float:
    """Central difference ``(F(x + t theta) - F(x - t theta)) / 2t`` with full re-solves."""
    if not np.any(theta):
        return 0.0
    plus = functional(deform(mesh, theta, t))
    minus = functional(deform(mesh, theta, -t))
    return (plus - minus) / (2.0 * t)


def hessian_action(mesh: Mesh, coeffs: pde.Coefficients, u: np.ndarray, theta, theta_tilde, normals: str = "flux") -> float:
    """``int_Gamma sigma dn w2[theta_tilde] dn u1 (theta . n)``; meaningful near critical shapes only."""
    udot = pde.solve_material_derivative(mesh, coeffs, u, theta_tilde)
    w = pde.solve_hessian_adjoint_w(mesh, coeffs, udot.imag)
    sig = _sigma_mid(mesh, coeffs)
    dw = _dn(mesh, coeffs, w, normals, sig, udot.imag)
    k = sig * dw.imag * _dn(mesh, coeffs, u, normals, sig).real
    return shape_derivative_value(mesh, k, theta)


def write_kernel_csv(path, mesh: Mesh, kernel: np.ndarray) -> None:
    mid = boundary_geometry(mesh, GAMMA)[0]
    rows = ["edge_index,mid_x,mid_y,value"]
    for i, ((x, y), k) in enumerate(zip(mid.tolist(), np.asarray(kernel, dtype=float).tolist())):
        rows.append(f"{i},{x!r},{y!r},{k!r}")
    Path(path).write_text("\n".join(rows) + "\n")
