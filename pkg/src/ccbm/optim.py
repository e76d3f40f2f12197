"""Reconstruction loops: plain Sobolev-gradient descent on J and the ADMM splitting."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import pde, shapecalc
from .mesh import GAMMA, Mesh, MeshInversionError, ObstacleCurve, annulus_for_curve, deform, write_polyline_csv
from .synth import Dataset, boundary_data_for

log = logging.getLogger(__name__)

METHODS = ("conventional", "admm-1", "admm-2", "admm-3", "admm-4")
DEFAULT_BETA = {1: 0.010, 2: 0.010, 3: 0.005, 4: 0.001}
MIN_STEP = 1e-8


@dataclass(frozen=True)
class AdmmState:
    v: np.ndarray
    lam: np.ndarray
    beta: float
    a: float
    b: float

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.a > self.b:
            raise ValueError("need a <= b")


@dataclass(frozen=True)
class RunConfig:
    method: str = "conventional"
    mu: float = 0.1
    c_b: float = shapecalc.DEFAULT_CB
    max_iter: int = 600
    epsilon: float = 1e-6
    beta: float | None = None
    a: float | None = None
    b: float | None = None
    lambda0: float = 0.001
    v0: float = 1.0
    init_center: tuple[float, float] = (0.0, 0.0)
    init_radius: float = 0.6
    n_angular: int = 150
    n_radial: int = 12
    outer_radius: float = 1.0
    sigma: str = "1.1 + sin(pi*x)*sin(pi*y)"
    bx: str = "1.1 - sin(t)"
    by: str = "1.1 + cos(t)"
    inner_max: int = 1
    snapshot_stride: int = 0
    normals: str = "flux"
    stop_on_epsilon: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.mu <= 0 or self.max_iter < 0 or self.epsilon <= 0 or self.inner_max < 1:
            raise ValueError("mu, epsilon must be positive; max_iter >= 0; inner_max >= 1")
        if self.beta is not None and self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.a is not None and self.b is not None and self.a > self.b:
            raise ValueError("need a <= b")

    @property
    def admm_method(self) -> int | None:
        return int(self.method[-1]) if self.method.startswith("admm") else None

    def coefficients(self) -> pde.Coefficients:
        return pde.Coefficients.parse(self.sigma, self.bx, self.by)

    def initial_mesh(self) -> Mesh:
        curve = ObstacleCurve("circle", center=tuple(self.init_center), radius=self.init_radius)
        return annulus_for_curve(curve, self.n_angular, self.n_radial, self.outer_radius)


@dataclass
class History:
    k: list = field(default_factory=list)
    J: list = field(default_factory=list)
    Y: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    step: list = field(default_factory=list)
    halvings: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    mesh: Mesh | None = None
    final_J: float = math.nan
    stop_reason: str = ""
    admm: AdmmState | None = None

    def append(self, k, J, Y, grad_norm, step, halvings):
        for name, val in zip(("k", "J", "Y", "grad_norm", "step", "halvings"), (k, J, Y, grad_norm, step, halvings)):
            getattr(self, name).append(val)

    def __len__(self):
        return len(self.k)

    @property
    def gamma(self) -> np.ndarray:
        return self.mesh.polyline(GAMMA)

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "history.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "J", "Y", "grad_norm", "step", "halvings"])
            for row in zip(self.k, self.J, self.Y, self.grad_norm, self.step, self.halvings):
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), repr(row[4]), row[5]])
        for k, poly in sorted(self.snapshots.items()):
            write_polyline_csv(d / f"gamma_{k}.csv", poly)


def step_size(mu: float, J: float, h1_sq: float) -> float:
    """``mu J / |theta|_H1^2``; zero when there is nothing to do."""
    if J == 0 or h1_sq == 0:
        return 0.0
    return mu * J / h1_sq


def project_K(values, a: float, b: float) -> np.ndarray:
    if a > b:
        raise ValueError("need a <= b")
    return np.maximum(a, np.minimum(b, np.asarray(values, dtype=float)))


def update_lambda(state: AdmmState, u1) -> AdmmState:
    return replace(state, lam=state.lam + state.beta * (np.asarray(u1, dtype=float) - state.v))


def transport_admm_fields(state: AdmmState, old: Mesh, new: Mesh) -> AdmmState:
    """Nodal values follow their vertex; only the connectivity has to agree."""
    if old.n_vertices != new.n_vertices or not np.array_equal(old.triangles, new.triangles):
        raise ValueError("meshes do not share connectivity")
    return state


def _move(mesh: Mesh, theta: np.ndarray, t: float):
    """Deform with halving on inversion; returns (new mesh or None, accepted t, halvings)."""
    halvings = 0
    while t >= MIN_STEP:
        try:
            return deform(mesh, theta, t), t, halvings
        except MeshInversionError:
            t *= 0.5
            halvings += 1
    return None, t, halvings


def _snapshot(config, hist, k, mesh):
    if config.snapshot_stride and k % config.snapshot_stride == 0:
        hist.snapshots[k] = mesh.polyline(GAMMA).copy()


def run_conventional(config: RunConfig, dataset: Dataset, mesh: Mesh | None = None, callback=None) -> History:
    """Descent on ``J`` with the Sobolev gradient of the kernel ``G``.

    ``callback(k, mesh, kernel, theta)`` sees every descent field before the move.
    """
    coeffs = config.coefficients()
    mesh = mesh if mesh is not None else config.initial_mesh()
    data = boundary_data_for(mesh, dataset)
    hist = History(mesh=mesh)
    hist.stop_reason = "max_iter"
    for k in range(config.max_iter):
        _snapshot(config, hist, k, mesh)
        u = pde.solve_state(mesh, coeffs, data)
        J = pde.cost_J(mesh, u)
        p = pde.solve_adjoint_p(mesh, coeffs, u.imag)
        kern = shapecalc.kernel_G(mesh, u, p, coeffs, config.normals)
        theta = shapecalc.sobolev_gradient(mesh, kern, config.c_b)
        if callback is not None:
            callback(k, mesh, kern, theta)
        h1 = pde.h1_norm_sq(mesh, theta)
        t = step_size(config.mu, J, h1)
        new, t, halvings = _move(mesh, theta, t) if t > 0 else (None, 0.0, 0)
        hist.append(k, J, math.nan, math.sqrt(h1), t, halvings)
        if new is None:
            hist.stop_reason = "step"
            break
        mesh = new
        hist.mesh = mesh
    hist.final_J = pde.cost_J(mesh, pde.solve_state(mesh, coeffs, data))
    _snapshot(config, hist, len(hist), mesh)
    return hist


def default_bounds(dataset: Dataset) -> tuple[float, float]:
    """Half the minimum and 1.5 times the maximum of the true state.

    The state has no zeroth-order term, so its extremes over the domain lie
    on the boundary: the measured ``f`` on Sigma and the value 0 on Gamma.
    """
    lo = min(0.0, float(np.min(dataset.f)))
    hi = max(0.0, float(np.max(dataset.f)))
    return 0.5 * lo, 1.5 * hi


def initial_admm_state(config: RunConfig, dataset: Dataset, mesh: Mesh) -> AdmmState:
    method = config.admm_method
    beta = config.beta if config.beta is not None else DEFAULT_BETA[method]
    a, b = default_bounds(dataset)
    a = config.a if config.a is not None else a
    b = config.b if config.b is not None else b
    n = mesh.n_vertices
    return AdmmState(np.full(n, float(config.v0)), np.full(n, float(config.lambda0)), beta, a, b)


def _admm_kernel(mesh, coeffs, method, u, st: AdmmState, normals):
    p = q = lam_adj = None
    if method in (2, 3):
        p = pde.solve_adjoint_p(mesh, coeffs, u.imag)
    if method == 1:
        q = pde.solve_adjoint_q(mesh, coeffs, u, st.v, st.lam, st.beta)
    if method in (2, 4):
        lam_adj = pde.solve_adjoint_Lambda(mesh, coeffs, u.real, st.v, st.lam, st.beta)
    return shapecalc.kernel_admm(mesh, method, u, coeffs, st.v, st.lam, st.beta, p=p, q=q, Lambda=lam_adj, normals=normals)


def run_admm(config: RunConfig, dataset: Dataset, mesh: Mesh | None = None, callback=None) -> History:
    """Outer ADMM iterations: a few gradient steps on the domain, then the ``v`` and ``lambda`` updates."""
    method = config.admm_method
    if method is None:
        raise ValueError("run_admm needs an admm-* method")
    coeffs = config.coefficients()
    mesh = mesh if mesh is not None else config.initial_mesh()
    data = boundary_data_for(mesh, dataset)
    st = initial_admm_state(config, dataset, mesh)
    hist = History(mesh=mesh)
    hist.stop_reason = "max_iter"
    u = pde.solve_state(mesh, coeffs, data)
    for k in range(config.max_iter):
        _snapshot(config, hist, k, mesh)
        J = pde.cost_J(mesh, u)
        Y = pde.cost_Y(mesh, u, st.v, st.lam, st.beta)
        stop = None
        h1 = t = 0.0
        halvings = 0
        for inner in range(config.inner_max):
            if inner > 0:
                u = pde.solve_state(mesh, coeffs, data)
            kern = _admm_kernel(mesh, coeffs, method, u, st, config.normals)
            theta = shapecalc.sobolev_gradient(mesh, kern, config.c_b)
            if callback is not None:
                callback(k, mesh, kern, theta)
            dY = shapecalc.shape_derivative_value(mesh, kern, theta)
            if abs(dY) < config.epsilon:
                if inner == 0 and config.stop_on_epsilon:
                    stop = "epsilon"
                break
            h1 = pde.h1_norm_sq(mesh, theta)
            t = step_size(config.mu, pde.cost_J(mesh, u), h1)
            new, t, h = _move(mesh, theta, t) if t > 0 else (None, 0.0, 0)
            halvings += h
            if new is None:
                stop = "step"
                break
            st = transport_admm_fields(st, mesh, new)
            mesh = new
        hist.append(k, J, Y, math.sqrt(h1), t, halvings)
        hist.mesh = mesh
        u = pde.solve_state(mesh, coeffs, data)
        v = project_K(u.real + st.lam / st.beta, st.a, st.b)
        st = update_lambda(replace(st, v=v), u.real)
        if stop is not None:
            hist.stop_reason = stop
            break
    hist.admm = st
    hist.final_J = pde.cost_J(mesh, u)
    _snapshot(config, hist, len(hist), mesh)
    return hist


def run(config: RunConfig, dataset: Dataset, mesh: Mesh | None = None, callback=None) -> History:
    if config.method == "conventional":
        return run_conventional(config, dataset, mesh, callback)
    return run_admm(config, dataset, mesh, callback)
