"""Anisotropic Matérn SPDE precision on a triangular mesh.

The field solves ``(1 - div(H grad))^{3/2} w = W / tau`` with all range
information carried by ``H``; the smoothness is fixed at ``nu = 2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from .mesh import Mesh, MeshError

NU = 2.0
ALPHA = 3.0
DIM = 2


@dataclass(frozen=True)
class SpdeParams:
    """Matérn parameters: principal scales (km), coupling, marginal sd."""

    h_x: float
    h_y: float
    h_xy: float
    sigma: float

    def __post_init__(self):
        if not (self.h_x > 0 and self.h_y > 0 and self.sigma > 0):
            raise ValueError(f"scales and sigma must be positive: {self}")
        if not -1.0 < self.h_xy < 1.0:
            raise ValueError(f"h_xy must lie in (-1, 1): {self.h_xy}")

    @property
    def nu(self) -> float:
        return NU

    @property
    def alpha(self) -> float:
        return ALPHA

    @property
    def H(self) -> np.ndarray:
        c = self.h_x * self.h_y * self.h_xy
        return np.array([[self.h_x**2, c], [c, self.h_y**2]])

    @property
    def det_H(self) -> float:
        return self.h_x**2 * self.h_y**2 * (1.0 - self.h_xy**2)

    @property
    def tau(self) -> float:
        """Precision scale reproducing the marginal variance ``sigma**2``."""
        return float(np.sqrt(marginal_variance_factor(self.det_H) / self.sigma**2))

    def practical_ranges(self) -> tuple[float, float]:
        """Distances at which correlation drops to about 0.14 along x and y."""
        r = np.sqrt(8 * NU)
        return r * self.h_x, r * self.h_y


def marginal_variance_factor(det_H: float, nu: float = NU) -> float:
    """``sigma^2 tau^2`` for kappa = 1, including the ``sqrt(det H)`` anisotropy factor."""
    alpha = nu + DIM / 2
    return gamma_fn(nu) / (gamma_fn(alpha) * (4 * np.pi) ** (DIM / 2) * np.sqrt(det_H))


def theta_to_params(theta) -> SpdeParams:
    """``(log h_x, log h_y, atanh h_xy, log sigma)`` to :class:`SpdeParams`."""
    t = np.asarray(theta, dtype=float)
    if t.shape != (4,) or not np.all(np.isfinite(t)):
        raise ValueError(f"theta must be 4 finite numbers, got {theta!r}")
    h_xy = float(np.tanh(t[2]))
    # tanh saturates at 1.0 in double precision beyond |t| ~ 19
    h_xy = float(np.clip(h_xy, -1 + 1e-15, 1 - 1e-15))
    return SpdeParams(float(np.exp(t[0])), float(np.exp(t[1])), h_xy, float(np.exp(t[3])))


def params_to_theta(p: SpdeParams) -> np.ndarray:
    return np.array([np.log(p.h_x), np.log(p.h_y), np.arctanh(p.h_xy), np.log(p.sigma)])


def _gradients(mesh: Mesh):
    p = mesh.vertices[mesh.triangles]
    area = mesh.triangle_areas()
    if np.any(area < 1e-12):
        bad = np.flatnonzero(area < 1e-12)
        raise MeshError(f"degenerate triangle(s): {bad[:10].tolist()}")
    # grad phi_k = rot90(opposite edge) / (2 area)
    grads = np.empty((mesh.m, 3, 2))
    for k in range(3):
        e = p[:, (k + 2) % 3] - p[:, (k + 1) % 3]
        grads[:, k, 0] = -e[:, 1]
        grads[:, k, 1] = e[:, 0]
    grads /= (2.0 * area)[:, None, None]
    return area, grads


def fem_matrices(mesh: Mesh, H=None):
    """Lumped mass diagonal and anisotropic stiffness matrix.

    Returns
    -------
    c : ndarray
        ``c[i] = sum of area(T) / 3`` over triangles containing vertex ``i``.
    G : csc_matrix
        ``G[i, j] = sum_T area(T) grad(phi_i)^T H grad(phi_j)``.
    """
    H = np.eye(2) if H is None else np.asarray(H, dtype=float)
    area, grads = _gradients(mesh)
    c = np.bincount(mesh.triangles.ravel(), weights=np.repeat(area / 3.0, 3), minlength=mesh.n)
    local = np.einsum("tia,ab,tjb->tij", grads, H, grads) * area[:, None, None]
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    G = sp.csc_matrix((local.ravel(), (rows, cols)), shape=(mesh.n, mesh.n))
    G.sum_duplicates()
    G = 0.5 * (G + G.T)
    return c, G.tocsc()


class PrecisionAssembler:
    """Caches per-mesh geometry so precisions for many parameter values are cheap."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        area, grads = _gradients(mesh)
        self.c = np.bincount(mesh.triangles.ravel(), weights=np.repeat(area / 3.0, 3), minlength=mesh.n)
        rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
        cols = np.tile(mesh.triangles, (1, 3)).ravel()
        # G is linear in the three distinct entries of H
        self._parts = []
        for a, b in ((0, 0), (1, 1), (0, 1)):
            loc = grads[:, :, a][:, :, None] * grads[:, :, b][:, None, :]
            if a != b:
                loc = loc + np.swapaxes(loc, 1, 2)
            loc = loc * area[:, None, None]
            M = sp.csc_matrix((loc.ravel(), (rows, cols)), shape=(mesh.n, mesh.n))
            M.sum_duplicates()
            self._parts.append(M)
        self.G_identity = (self._parts[0] + self._parts[1]).tocsc()

    def stiffness(self, H) -> sp.csc_matrix:
        H = np.asarray(H, dtype=float)
        G = H[0, 0] * self._parts[0] + H[1, 1] * self._parts[1] + H[0, 1] * self._parts[2]
        return G.tocsc()

    def precision(self, params: SpdeParams) -> sp.csc_matrix:
        K = (sp.diags(self.c) + self.stiffness(params.H)).tocsc()
        Ci = sp.diags(1.0 / self.c)
        KCi = (K @ Ci).tocsc()
        Q = params.tau**2 * (KCi @ KCi @ K)
        Q = 0.5 * (Q + Q.T)
        return Q.tocsc()


def assemble_precision(mesh: Mesh, params: SpdeParams) -> sp.csc_matrix:
    """``Q = tau^2 K C^{-1} K C^{-1} K`` with ``K = C + G_H``."""
    return PrecisionAssembler(mesh).precision(params)


def scaled_distance(lag, params: SpdeParams) -> np.ndarray:
    """``sqrt(lag^T H^{-1} lag)`` for an ``(..., 2)`` array of lags."""
    lag = np.asarray(lag, dtype=float)
    Hi = np.linalg.inv(params.H)
    return np.sqrt(np.maximum(np.einsum("...a,ab,...b->...", lag, Hi, lag), 0.0))


def matern_correlation(u, nu: float = NU) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    out = np.ones_like(u)
    pos = u > 0
    up = u[pos]
    out[pos] = 2 ** (1 - nu) / gamma_fn(nu) * up**nu * kv(nu, up)
    return out


def matern_cov(d, params: SpdeParams) -> np.ndarray:
    """Matérn covariance (smoothness 2) at distance ``d`` scaled by ``h_x``."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    return params.sigma**2 * matern_correlation(d / params.h_x)


def matern_cov_lag(lag, params: SpdeParams) -> np.ndarray:
    """Anisotropic Matérn covariance for ``(..., 2)`` lag vectors."""
    return params.sigma**2 * matern_correlation(scaled_distance(lag, params))
