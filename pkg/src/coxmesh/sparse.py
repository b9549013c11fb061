"""Sparse symmetric positive-definite kernels.

Factorization is delegated to CHOLMOD (through ``scikit-sparse``) with an
approximate-minimum-degree ordering. When CHOLMOD is unavailable a SuperLU
factorization without pivoting is used instead; for an SPD matrix in
symmetric mode it yields ``U = D L^T`` from which the Cholesky factor is
recovered. Triangular solves and the Takahashi selected inverse run on the
explicit lower factor in numba.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

try:  # pragma: no cover - depends on the environment
    from sksparse import cholmod as _cholmod
except ImportError:  # pragma: no cover
    _cholmod = None

logger = logging.getLogger(__name__)

__all__ = [
    "NotPositiveDefiniteError",
    "CholFactor",
    "sym_from_lower",
    "factorize",
    "solve",
    "sample_gmrf",
    "selected_inverse_diag",
    "quad_form",
]


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a pivot of the Cholesky factorization is not positive."""

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = int(pivot)
        super().__init__(message or f"matrix is not positive definite (pivot {pivot})")


def sym_from_lower(n, rows, cols, values) -> sp.csc_matrix:
    """Build a symmetric CSC matrix from lower-triangle triplets.

    Duplicate entries are summed. Entries with ``row < col`` are rejected.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    values = np.asarray(values, dtype=float)
    if np.any(rows < cols):
        raise ValueError("sym_from_lower expects lower-triangle entries (row >= col)")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite matrix entry")
    low = sp.coo_matrix((values, (rows, cols)), shape=(n, n)).tocsc()
    strict = sp.tril(low, k=-1)
    return (low + strict.T).tocsc()


# ---------------------------------------------------------------------------
# numba kernels on a CSC lower factor with the diagonal first in each column
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _forward(indptr, indices, data, b):
    x = b.copy()
    n = x.shape[0]
    m = x.shape[1]
    for j in range(n):
        d = data[indptr[j]]
        for c in range(m):
            x[j, c] /= d
        for p in range(indptr[j] + 1, indptr[j + 1]):
            i = indices[p]
            v = data[p]
            for c in range(m):
                x[i, c] -= v * x[j, c]
    return x


@numba.njit(cache=True)
def _backward(indptr, indices, data, b):
    x = b.copy()
    n = x.shape[0]
    m = x.shape[1]
    for j in range(n - 1, -1, -1):
        for p in range(indptr[j] + 1, indptr[j + 1]):
            i = indices[p]
            v = data[p]
            for c in range(m):
                x[j, c] -= v * x[i, c]
        d = data[indptr[j]]
        for c in range(m):
            x[j, c] /= d
    return x


@numba.njit(cache=True)
def _find(indices, lo, hi, target):
    while lo < hi:
        mid = (lo + hi) // 2
        v = indices[mid]
        if v == target:
            return mid
        if v < target:
            lo = mid + 1
        else:
            hi = mid
    return -1


@numba.njit(cache=True)
def _takahashi(indptr, indices, data):
    """Entries of the inverse on the pattern of L (Takahashi recursion).

    Returns the values aligned with ``data`` and a flag that is False when
    the stored pattern is not closed under elimination.
    """
    n = indptr.shape[0] - 1
    sig = np.zeros(data.shape[0])
    ok = True
    for j in range(n - 1, -1, -1):
        start = indptr[j]
        end = indptr[j + 1]
        ljj = data[start]
        # off-diagonal entries of column j, bottom-up
        for a in range(end - 1, start, -1):
            i = indices[a]
            acc = 0.0
            for b in range(start + 1, end):
                k = indices[b]
                if k >= i:
                    q = _find(indices, indptr[i], indptr[i + 1], k)
                else:
                    q = _find(indices, indptr[k], indptr[k + 1], i)
                if q < 0:
                    ok = False
                    continue
                acc += data[b] * sig[q]
            sig[a] = -acc / ljj
        acc = 0.0
        for b in range(start + 1, end):
            acc += data[b] * sig[b]
        sig[start] = 1.0 / (ljj * ljj) - acc / ljj
    return sig, ok


def _prepare_lower(L: sp.spmatrix) -> sp.csc_matrix:
    L = sp.csc_matrix(L, dtype=float)
    L.sort_indices()
    L.sum_duplicates()
    n = L.shape[0]
    first = L.indices[L.indptr[:-1]]
    if np.any(np.diff(L.indptr) == 0) or np.any(first != np.arange(n)):
        raise ValueError("lower factor must store its diagonal first in each column")
    return L


@dataclass(frozen=True, eq=False)
class CholFactor:
    """Cholesky factor ``Q[perm][:, perm] = L @ L.T``.

    Attributes
    ----------
    perm : ndarray
        Fill-reducing ordering.
    L : csc_matrix
        Lower factor in the permuted ordering, diagonal first in each column.
    logdet : float
        ``log det Q``.
    """

    perm: np.ndarray
    L: sp.csc_matrix
    logdet: float
    backend: str = "cholmod"
    _selinv: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.L.shape[0]

    def _lower_solve(self, b):
        return _forward(self.L.indptr, self.L.indices, self.L.data, b)

    def _upper_solve(self, b):
        return _backward(self.L.indptr, self.L.indices, self.L.data, b)

    def solve(self, b):
        return solve(self, b)

    def solve_Lt(self, z):
        """Return ``x`` with ``L^T x[perm] = z`` (covariance ``Q^{-1}`` for white ``z``)."""
        z = np.asarray(z, dtype=float)
        vec = z.ndim == 1
        z2 = z.reshape(self.n, -1)
        y = self._upper_solve(np.ascontiguousarray(z2))
        x = np.empty_like(y)
        x[self.perm] = y
        return x[:, 0] if vec else x

    def selected_inverse(self) -> sp.csc_matrix:
        """Inverse entries on the (symmetrised) pattern of the factor, original ordering."""
        if "full" not in self._selinv:
            L = self.L
            sig, ok = _takahashi(L.indptr, L.indices, L.data)
            if not ok:
                raise RuntimeError("factor pattern is not closed; selected inverse unavailable")
            low = sp.csc_matrix((sig, L.indices, L.indptr), shape=L.shape)
            full = (low + sp.tril(low, k=-1).T).tocsc()
            inv = np.empty_like(self.perm)
            inv[self.perm] = np.arange(self.n)
            self._selinv["full"] = full[inv][:, inv].tocsc()
        return self._selinv["full"]


def factorize(Q, backend: str | None = None) -> CholFactor:
    """Factorize a symmetric positive-definite sparse matrix.

    Parameters
    ----------
    Q : sparse matrix
        Symmetric positive-definite matrix (full storage).
    backend : {"cholmod", "superlu"}, optional
        Defaults to CHOLMOD when importable.
    """
    Q = sp.csc_matrix(Q, dtype=float)
    if Q.shape[0] != Q.shape[1]:
        raise ValueError(f"matrix must be square, got {Q.shape}")
    if not np.all(np.isfinite(Q.data)):
        raise ValueError("matrix has non-finite entries")
    if backend is None:
        backend = "cholmod" if _cholmod is not None else "superlu"
    if backend == "cholmod":
        if _cholmod is None:
            raise RuntimeError("scikit-sparse is not installed")
        try:
            f = _cholmod.cholesky(Q, ordering_method="amd", mode="simplicial")
            # the LDL to LL conversion is where an indefinite pivot surfaces
            Lraw = f.L()
        except _cholmod.CholmodNotPositiveDefiniteError as exc:
            pivot = getattr(exc, "column", None)
            if pivot is None:
                digits = "".join(c if c.isdigit() else " " for c in str(exc)).split()
                pivot = int(digits[-1]) if digits else -1
            raise NotPositiveDefiniteError(pivot) from None
        perm = np.asarray(f.P(), dtype=np.int64)
        L = _prepare_lower(Lraw)
        logdet = 2.0 * float(np.sum(np.log(L.data[L.indptr[:-1]])))
        return CholFactor(perm, L, logdet, "cholmod")
    if backend == "superlu":
        return _factorize_superlu(Q)
    raise ValueError(f"unknown backend {backend!r}")


def _factorize_superlu(Q) -> CholFactor:
    try:
        lu = spla.splu(
            Q,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options=dict(SymmetricMode=True),
        )
    except RuntimeError as exc:
        raise NotPositiveDefiniteError(-1, f"matrix is not positive definite ({exc})") from None
    if not np.array_equal(lu.perm_r, lu.perm_c):
        raise RuntimeError("SuperLU pivoted off the diagonal; matrix is not SPD")
    d = lu.U.diagonal()
    bad = np.flatnonzero(~(d > 0))
    if bad.size:
        raise NotPositiveDefiniteError(int(bad[0]))
    # Pr A Pc = L U with perm_r[i] = new row of old row i
    perm = np.empty_like(lu.perm_c)
    perm[lu.perm_c] = np.arange(Q.shape[0])
    L = lu.L @ sp.diags(np.sqrt(d))
    L = _prepare_lower(L)
    logdet = float(np.sum(np.log(d)))
    return CholFactor(perm.astype(np.int64), L, logdet, "superlu")


def solve(F: CholFactor, b):
    """Solve ``Q x = b`` for a vector or a matrix of right-hand sides."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != F.n:
        raise ValueError(f"dimension mismatch: factor is {F.n}, rhs has {b.shape[0]} rows")
    vec = b.ndim == 1
    b2 = np.ascontiguousarray(b.reshape(F.n, -1)[F.perm])
    y = F._upper_solve(F._lower_solve(b2))
    x = np.empty_like(y)
    x[F.perm] = y
    return x[:, 0] if vec else x


def sample_gmrf(F: CholFactor, seed=None, size: int | None = None, mean=None):
    """Draw from ``N(mean, Q^{-1})`` by back-substitution of standard normals.

    ``seed`` may be an integer or a ``numpy.random.Generator``. With ``size``
    the result has shape ``(size, n)``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = 1 if size is None else int(size)
    z = rng.standard_normal((k, F.n)).T
    x = F.solve_Lt(np.ascontiguousarray(z)).T
    if mean is not None:
        x = x + np.asarray(mean, dtype=float)
    return x[0] if size is None else x


def selected_inverse_diag(F: CholFactor) -> np.ndarray:
    """Diagonal of ``Q^{-1}``.

    Uses the selected inverse; falls back to column solves when the factor
    pattern is not closed under elimination.
    """
    try:
        return np.asarray(F.selected_inverse().diagonal())
    except RuntimeError:
        logger.warning("selected inverse unavailable, using column solves")
        out = np.empty(F.n)
        block = 256
        for s in range(0, F.n, block):
            idx = np.arange(s, min(s + block, F.n))
            e = np.zeros((F.n, idx.size))
            e[idx, np.arange(idx.size)] = 1.0
            out[idx] = solve(F, e)[idx, np.arange(idx.size)]
        return out


def quad_form(Q, x) -> float:
    """``x^T Q x`` for sparse ``Q``."""
    x = np.asarray(x, dtype=float)
    return float(x @ (Q @ x))
