"""Synthetic Cauchy data from a known obstacle."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import coeff, pde
from .mesh import SIGMA, Mesh, ObstacleCurve, annulus_for_curve


class InverseCrimeError(ValueError):
    """Data would be generated on the inversion discretization itself."""


@dataclass(frozen=True)
class Dataset:
    """``f`` and ``g`` at polar angles of the coarse Sigma vertices."""

    angles: np.ndarray
    f: np.ndarray
    g: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.angles)
        if len(self.f) != n or len(self.g) != n:
            raise ValueError("angles, f and g must have equal length")

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "dataset.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["theta_angle", "f", "g"])
            for row in zip(self.angles.tolist(), self.f.tolist(), self.g.tolist()):
                w.writerow([repr(x) for x in row])
        lines = [f"{k} = {v}" for k, v in self.provenance.items()]
        (d / "provenance.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "Dataset":
        path = Path(path)
        if path.is_dir():
            path = path / "dataset.csv"
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        prov = {}
        side = path.with_name("provenance.txt")
        if side.exists():
            for line in side.read_text().splitlines():
                if "=" in line:
                    k, v = line.split("=", 1)
                    prov[k.strip()] = v.strip()
        return cls(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(), prov)


def sigma_angles(mesh: Mesh) -> np.ndarray:
    pts = mesh.vertices[mesh.boundary_vertices(SIGMA)]
    return np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2 * np.pi)


def _periodic_interp(angles_out, angles_in, values):
    order = np.argsort(angles_in)
    a, v = angles_in[order], values[order]
    return np.interp(np.mod(angles_out, 2 * np.pi), a, v, period=2 * np.pi)


def boundary_data_for(mesh: Mesh, data: Dataset) -> pde.BoundaryData:
    """Dataset values on the Sigma vertices of ``mesh``; linear in angle (arc length) when they differ."""
    ang = sigma_angles(mesh)
    given = np.mod(data.angles, 2 * np.pi)
    gap = np.abs((ang[:, None] - given[None, :] + np.pi) % (2 * np.pi) - np.pi)
    idx = np.argmin(gap, axis=1)
    if np.all(gap[np.arange(len(ang)), idx] <= 1e-10):
        # same nodes: copy exactly instead of interpolating
        return pde.BoundaryData(data.f[idx].copy(), data.g[idx].copy())
    return pde.BoundaryData(_periodic_interp(ang, given, data.f), _periodic_interp(ang, given, data.g))


def add_noise(values, delta: float, seed: int | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Multiplicative noise ``(1 + delta n_i) u_i`` with ``n_i ~ N(0, s^2)``, ``s = max |u_i|``."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    values = np.asarray(values, dtype=float)
    if delta == 0:
        return values
    rng = rng if rng is not None else np.random.default_rng(seed)
    s = float(np.max(np.abs(values)))
    return (1.0 + delta * rng.normal(0.0, s, size=values.shape)) * values


def make_dataset(
    truth: ObstacleCurve,
    g_expr: str,
    coeffs: pde.Coefficients,
    n_angular: int,
    n_radial: int,
    fine_factor: int = 2,
    delta: float = 0.0,
    seed: int = 42,
    outer_radius: float = 1.0,
) -> Dataset:
    """Solve the Neumann problem on a refined truth annulus and sample ``f`` on the coarse Sigma."""
    if int(fine_factor) != fine_factor or fine_factor < 2:
        raise InverseCrimeError(
            f"fine_factor={fine_factor}: data must come from a mesh at least twice as fine as the inversion mesh"
        )
    fine_factor = int(fine_factor)
    g_node = coeff.parse_expr(g_expr)
    fine = annulus_for_curve(truth, fine_factor * n_angular, fine_factor * n_radial, outer_radius)
    sv = fine.boundary_vertices(SIGMA)
    pts = fine.vertices[sv]
    u_star = pde.solve_neumann_forward(fine, coeffs, coeff.evaluate(g_node, pts[:, 0], pts[:, 1]))
    angles = 2 * np.pi * np.arange(n_angular) / n_angular
    f = _periodic_interp(angles, sigma_angles(fine), u_star[sv])
    cx, cy = outer_radius * np.cos(angles), outer_radius * np.sin(angles)
    g = coeff.evaluate(g_node, cx, cy)
    f = add_noise(f, delta, seed)
    prov = {
        "truth": truth.kind if truth.kind not in ("circle", "polar") else f"{truth.kind}{tuple(truth.center)}",
        "fine_factor": fine_factor,
        "delta": repr(float(delta)),
        "seed": int(seed),
        "n_angular": n_angular,
        "n_radial": n_radial,
        "g": g_expr,
        "sigma": coeff.to_string(coeffs.sigma),
        "bx": coeff.to_string(coeffs.bx),
        "by": coeff.to_string(coeffs.by),
    }
    if truth.kind == "circle":
        prov["truth_radius"] = repr(float(truth.radius))
    if truth.kind == "polar":
        prov["truth_radius_expr"] = truth.radius_expr
    return Dataset(angles, f, g, prov)
