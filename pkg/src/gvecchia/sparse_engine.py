"""Sparse reverse-Cholesky factors U and V, triangular solves and selected inversion.

``U`` is the upper-triangular factor of the precision of x, ``Q = U U'``.
``V`` is the upper-triangular factor of the posterior precision of the
latents, ``W = V V'``. Factors are stored column-compressed with sorted
row indices and the diagonal last in every column.

A ``V`` may carry a symmetric permutation ``perm`` (latent indices) with
``W[perm][:, perm] = V V'``. Functions in this module work in the
permuted coordinates; :mod:`gvecchia.prediction` maps back.
"""

from __future__ import annotations

import heapq
import logging
import os
from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp

from . import _kernels
from .conditioning import ConditioningPlan
from .covariance import RESPONSE, MaternParams, NoiseModel, matern
from .geometry import GeometryModel

__all__ = [
    "NumericalError",
    "NearDuplicateError",
    "SparseTriangularFactor",
    "SelectedInverse",
    "build_U",
    "extract_V_rf",
    "assemble_V_lf",
    "banded_rchol",
    "derive_V",
    "rchol_dense_reference",
    "posterior_precision",
    "sparse_rchol",
    "minimum_degree_order",
    "solve_upper",
    "solve_upper_transpose",
    "selected_inverse",
    "symbolic_closure",
    "exact_variances",
    "dump_factors",
]

log = logging.getLogger(__name__)

DUPLICATE_RTOL = 1e-12


class NumericalError(ArithmeticError):
    """Factorization or solve failed for numerical reasons."""


class NearDuplicateError(NumericalError):
    """A conditional variance vanished, usually from (near-)duplicate locations."""


@dataclass(frozen=True)
class SparseTriangularFactor:
    """Upper-triangular sparse factor.

    Attributes
    ----------
    mat : scipy.sparse.csc_matrix
        Upper triangle including the diagonal; sorted rows, diagonal last.
    role : {"U", "V"}
    plan : ConditioningPlan
        Plan the factor was built from.
    perm : ndarray or None
        For ``V``: latent-index permutation (None means identity).
    method : str
        How ``V`` was obtained ("extract", "block", "banded").
    """

    mat: sp.csc_matrix
    role: str
    plan: ConditioningPlan
    perm: np.ndarray | None = None
    method: str = ""

    @property
    def n(self) -> int:
        return self.mat.shape[0]

    @property
    def diagonal(self) -> np.ndarray:
        return self.mat.data[self.mat.indptr[1:] - 1]

    def offdiag_counts(self) -> np.ndarray:
        """Off-diagonal nonzeros per column."""
        return np.diff(self.mat.indptr) - 1

    def bandwidth(self) -> int:
        m = self.mat
        cols = np.repeat(np.arange(m.shape[1]), np.diff(m.indptr))
        return int((cols - m.indices).max()) if m.nnz else 0

    def toarray(self) -> np.ndarray:
        return self.mat.toarray()


def _canonical_upper(mat) -> sp.csc_matrix:
    """CSC with sorted rows; structural entries kept, lower triangle rejected."""
    mat = sp.csc_matrix(mat)
    mat.sort_indices()
    n = mat.shape[0]
    cols = np.repeat(np.arange(n), np.diff(mat.indptr))
    if np.any(mat.indices > cols):
        raise ValueError("factor has entries below the diagonal")
    last = mat.indptr[1:] - 1
    if np.any(np.diff(mat.indptr) == 0) or np.any(mat.indices[last] != np.arange(n)):
        raise NumericalError("factor is missing a diagonal entry")
    return mat


def _check_diag(factor: SparseTriangularFactor):
    d = factor.diagonal
    if not np.all(np.isfinite(d)) or np.any(d == 0):
        raise NumericalError("triangular factor has a zero or non-finite diagonal entry")


# ---------------------------------------------------------------------------
# U
# ---------------------------------------------------------------------------


def _site_nuggets(geometry: GeometryModel, noise: NoiseModel) -> np.ndarray:
    nug = np.zeros(geometry.n)
    if noise.is_scalar:
        nug[:] = noise.nugget
    elif noise.nugget.size == geometry.n:
        nug[:] = noise.nugget
    else:
        nug[geometry.o] = noise.at(geometry.o, geometry.n, geometry.o)
    return nug


def _pair_dist(a, b):
    return np.sqrt(np.sum((a - b) ** 2, axis=-1))


def build_U(plan: ConditioningPlan, geometry: GeometryModel, params: MaternParams,
            noise: NoiseModel, columns=None, chunk: int = 20000) -> SparseTriangularFactor:
    """Sparse factor U of the Vecchia precision of x.

    Column i holds ``d_i^{-1/2}`` on the diagonal and ``-b_i d_i^{-1/2}``
    at the rows g(i), where ``b_i`` are the kriging weights of x_i on
    x_{g(i)} and ``d_i`` the conditional variance. Columns with the same
    conditioning-set size are solved together in batches.

    Parameters
    ----------
    columns : array of positions, optional
        Build only these columns; the others are left empty.

    Raises
    ------
    NearDuplicateError
        If some ``d_i <= 1e-12 * C(x_i, x_i)``.
    """
    N = plan.size
    cols = np.arange(N) if columns is None else np.asarray(columns, dtype=np.int64)
    sizes = plan.g_sizes()[cols]
    pts = geometry.locations
    nug = _site_nuggets(geometry, noise)
    resp = plan.kind == RESPONSE

    out_sizes = np.zeros(N, dtype=np.int64)
    out_sizes[cols] = sizes + 1
    indptr = np.zeros(N + 1, dtype=np.int64)
    np.cumsum(out_sizes, out=indptr[1:])
    indices = np.empty(indptr[-1], dtype=np.int64)
    data = np.empty(indptr[-1])

    for k in np.unique(sizes):
        group = cols[sizes == k]
        for s in range(0, group.size, chunk):
            idx = group[s : s + chunk]
            li = plan.loc[idx]
            self_var = params.variance + nug[li] * resp[idx]
            base = indptr[idx]
            if k == 0:
                d = self_var
                coef = np.empty((idx.size, 0))
                G = np.empty((idx.size, 0), dtype=np.int64)
            else:
                G = plan.g_idx[plan.g_ptr[idx][:, None] + np.arange(k)]
                pg = pts[plan.loc[G]]
                cgg = matern(_pair_dist(pg[:, :, None, :], pg[:, None, :, :]), params)
                diag = np.arange(k)
                cgg[:, diag, diag] += nug[plan.loc[G]] * resp[G]
                c = matern(_pair_dist(pts[li][:, None, :], pg), params)
                try:
                    b = np.linalg.solve(cgg, c[..., None])[..., 0]
                except np.linalg.LinAlgError as exc:
                    raise NearDuplicateError(
                        f"singular conditioning covariance in columns {idx[0]}..{idx[-1]}"
                    ) from exc
                d = self_var - np.einsum("ij,ij->i", c, b)
                coef = b
            bad = ~(d > DUPLICATE_RTOL * self_var)
            if np.any(bad):
                i = int(idx[np.flatnonzero(bad)[0]])
                raise NearDuplicateError(
                    f"conditional variance of x[{i}] (location {int(plan.loc[i])}) is "
                    f"nonpositive or below {DUPLICATE_RTOL:g} relative; near-duplicate location?"
                )
            rs = 1.0 / np.sqrt(d)
            slots = base[:, None] + np.arange(k)
            indices[slots] = G
            data[slots] = -coef * rs[:, None]
            indices[base + k] = idx
            data[base + k] = rs

    mat = sp.csc_matrix((data, indices, indptr), shape=(N, N))
    mat.has_sorted_indices = True
    return SparseTriangularFactor(mat, "U", plan)


# ---------------------------------------------------------------------------
# V
# ---------------------------------------------------------------------------


def _latent_blocks(U: SparseTriangularFactor):
    plan = U.plan
    ell, r = plan.ell, plan.r
    rows_l = U.mat[ell, :]
    return ell, r, rows_l


def extract_V_rf(U: SparseTriangularFactor) -> SparseTriangularFactor:
    """V = U[l, l] for plans in which no response conditions on a latent.

    This is a pure copy: no arithmetic is performed, so no spurious
    nonzeros can appear.
    """
    ell, r, rows_l = _latent_blocks(U)
    if rows_l[:, r].nnz:
        raise ValueError("extract_V_rf needs a response-first plan (some response conditions on a latent)")
    V = rows_l[:, ell].tocsc()
    return SparseTriangularFactor(_canonical_upper(V), "V", U.plan, None, "extract")


def minimum_degree_order(A) -> np.ndarray:
    """Elimination order from a basic minimum-degree heuristic.

    Works on the explicit elimination graph; ties go to the lowest index.
    """
    A = sp.csr_matrix(A)
    n = A.shape[0]
    adj = [set(A.indices[A.indptr[i] : A.indptr[i + 1]].tolist()) - {i} for i in range(n)]
    heap = [(len(a), i) for i, a in enumerate(adj)]
    heapq.heapify(heap)
    done = np.zeros(n, dtype=bool)
    order = []
    while heap:
        deg, v = heapq.heappop(heap)
        if done[v] or deg != len(adj[v]):
            continue
        done[v] = True
        order.append(v)
        nbrs = adj[v]
        for u in nbrs:
            au = adj[u]
            au.discard(v)
            au |= nbrs
            au.discard(u)
            heapq.heappush(heap, (len(au), u))
        adj[v] = set()
    return np.asarray(order, dtype=np.int64)


def _symbolic_lower(A_lower: sp.csc_matrix):
    """Pattern of the lower Cholesky factor (diagonal first in each column)."""
    n = A_lower.shape[0]
    children = [[] for _ in range(n)]
    structs = [None] * n
    for j in range(n):
        rows = A_lower.indices[A_lower.indptr[j] : A_lower.indptr[j + 1]]
        s = set(rows[rows > j].tolist())
        for c in children[j]:
            s |= structs[c]
        s.discard(j)
        structs[j] = s
        if s:
            children[min(s)].append(j)
    lp = np.zeros(n + 1, dtype=np.int64)
    lp[1:] = np.cumsum([len(s) + 1 for s in structs])
    li = np.empty(lp[-1], dtype=np.int64)
    for j, s in enumerate(structs):
        li[lp[j]] = j
        li[lp[j] + 1 : lp[j + 1]] = sorted(s)
    return lp, li


def _sparse_cholesky_lower(A) -> sp.csc_matrix:
    A = sp.csc_matrix(A)
    n = A.shape[0]
    Al = sp.tril(A, format="csc")
    Al.sort_indices()
    lp, li = _symbolic_lower(Al)
    # strict-lower row lists
    cols = np.repeat(np.arange(n), np.diff(lp))
    off = li != cols
    rowlist = sp.csr_matrix((np.ones(off.sum()), (li[off], cols[off])), shape=(n, n))
    rowlist.sort_indices()
    lx, bad = _kernels.cholesky_lower(
        n, Al.indptr.astype(np.int64), Al.indices.astype(np.int64), Al.data.astype(float),
        lp, li, rowlist.indptr.astype(np.int64), rowlist.indices.astype(np.int64),
    )
    if bad >= 0:
        raise NumericalError(f"matrix is not numerically positive definite (pivot {bad})")
    L = sp.csc_matrix((lx, li, lp), shape=(n, n))
    return L


def sparse_rchol(M, fill_order: str = "mindegree"):
    """Upper-lower factor of a sparse SPD matrix with a fill-reducing permutation.

    Returns ``(V, perm)`` with ``M[perm][:, perm] = V V'``, V upper
    triangular (csc). ``fill_order="reverse"`` factors in the natural
    order (``perm`` is the identity).
    """
    M = sp.csc_matrix(M)
    n = M.shape[0]
    if fill_order == "mindegree":
        elim = minimum_degree_order(M)
    elif fill_order == "reverse":
        elim = np.arange(n)[::-1]
    else:
        raise ValueError(f"unknown fill order {fill_order!r}")
    L = _sparse_cholesky_lower(M[elim][:, elim])
    rev = np.arange(n)[::-1]
    V = L[rev][:, rev].tocsc()
    V.sort_indices()
    return V, elim[::-1].copy()


def assemble_V_lf(U: SparseTriangularFactor, fill_order: str = "mindegree") -> SparseTriangularFactor:
    """Block assembly of V for latent-first plans.

    Latents referenced by responses form the leading block ``a``; the rest
    (``b``) are copied from U::

        V = [[rchol(U_aa U_aa' + U_ar U_ar'), U_ab],
             [0,                              U_bb]]

    Only the leading block is factored, after a fill-reducing permutation.
    """
    ell, r, rows_l = _latent_blocks(U)
    n_lat = ell.size
    Ulr = rows_l[:, r].tocsr()
    referenced = np.flatnonzero(np.diff(Ulr.indptr))
    n_a = int(referenced.max()) + 1 if referenced.size else 0
    Ull = rows_l[:, ell].tocsc()
    if n_a == 0:
        return SparseTriangularFactor(_canonical_upper(Ull), "V", U.plan, None, "block")
    a = np.arange(n_a)
    b = np.arange(n_a, n_lat)
    Ua = Ull[a, :]
    Uaa = Ua[:, a]
    Uar = Ulr[a, :]
    M = (Uaa @ Uaa.T + Uar @ Uar.T).tocsc()
    Vaa, perm_a = sparse_rchol(M, fill_order)
    Uab = Ua[:, b][perm_a, :]
    Ubb = Ull[b][:, b]
    V = sp.bmat([[Vaa, Uab], [None, Ubb]], format="csc")
    perm = np.concatenate([perm_a, b])
    if np.array_equal(perm, np.arange(n_lat)):
        perm = None
    return SparseTriangularFactor(_canonical_upper(V), "V", U.plan, perm, "block")


def banded_rchol(W, bandwidth: int | None = None) -> sp.csc_matrix:
    """Upper-lower factor of a banded SPD matrix, in O(n m^2).

    Reverses the matrix, calls LAPACK's banded Cholesky and reverses back.
    """
    W = sp.csc_matrix(W)
    n = W.shape[0]
    if bandwidth is None:
        coo = W.tocoo()
        bandwidth = int(np.abs(coo.row - coo.col).max()) if coo.nnz else 0
    # lower band of the reversed matrix: ab[k, j] = A[j + k, j], A[i, j] = W[n-1-i, n-1-j]
    coo = W.tocoo()
    r, c = n - 1 - coo.row, n - 1 - coo.col
    keep = (r >= c) & (r - c <= bandwidth)
    ab = np.zeros((bandwidth + 1, n))
    np.add.at(ab, (r[keep] - c[keep], c[keep]), coo.data[keep])
    try:
        Lb = scipy.linalg.cholesky_banded(ab, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("banded matrix is not positive definite") from exc
    rows, cols, vals = [], [], []
    j = np.arange(n)
    for k in range(bandwidth + 1):
        jj = j[: n - k]
        # L[jj + k, jj] -> V[n-1-jj-k, n-1-jj]
        rows.append(n - 1 - jj - k)
        cols.append(n - 1 - jj)
        vals.append(Lb[k, : n - k])
    V = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    V.sort_indices()
    return V


def derive_V(U: SparseTriangularFactor, fill_order: str = "mindegree") -> SparseTriangularFactor:
    """V from U: extraction, banded factorization or block assembly."""
    ell, r, rows_l = _latent_blocks(U)
    if U.plan.scheme.name == "lf-auto":
        Wl = (rows_l @ rows_l.T).tocsc()
        V = banded_rchol(Wl)
        return SparseTriangularFactor(_canonical_upper(V), "V", U.plan, None, "banded")
    if rows_l[:, r].nnz == 0:
        return extract_V_rf(U)
    return assemble_V_lf(U, fill_order)


def rchol_dense_reference(W) -> np.ndarray:
    """Dense upper-lower Cholesky: ``rev(chol(rev(W)))`` (test oracle)."""
    W = np.asarray(W, dtype=float)
    try:
        L = np.linalg.cholesky(W[::-1, ::-1])
    except np.linalg.LinAlgError as exc:
        raise NumericalError("matrix is not positive definite") from exc
    return L[::-1, ::-1].copy()


def posterior_precision(U: SparseTriangularFactor) -> sp.csc_matrix:
    """W = U[l, :] U[l, :]' (sparse)."""
    rows_l = U.mat[U.plan.ell, :]
    return (rows_l @ rows_l.T).tocsc()


# ---------------------------------------------------------------------------
# solves and selected inversion
# ---------------------------------------------------------------------------


def _mat(V):
    return V.mat if isinstance(V, SparseTriangularFactor) else _canonical_upper(V)


def _solve(kernel, V, b):
    m = _mat(V)
    d = m.data[m.indptr[1:] - 1]
    if np.any(d == 0) or not np.all(np.isfinite(d)):
        raise NumericalError("triangular factor is singular (zero diagonal)")
    b = np.asarray(b, dtype=float)
    one_d = b.ndim == 1
    B = np.ascontiguousarray(b[:, None] if one_d else b)
    if B.shape[0] != m.shape[0]:
        raise ValueError(f"right-hand side has {B.shape[0]} rows, factor has {m.shape[0]}")
    x = kernel(m.indptr.astype(np.int64), m.indices.astype(np.int64), m.data, B)
    return x[:, 0] if one_d else x


def solve_upper(V, b):
    """Solve V x = b."""
    return _solve(_kernels.solve_upper, V, b)


def solve_upper_transpose(V, b):
    """Solve V' x = b."""
    return _solve(_kernels.solve_upper_transpose, V, b)


@dataclass(frozen=True)
class SelectedInverse:
    """Entries of W^{-1} on a symbolic pattern (upper triangle, permuted coordinates)."""

    mat: sp.csc_matrix
    perm: np.ndarray | None = None
    exact: bool = False

    def diag(self) -> np.ndarray:
        """Marginal variances in latent order."""
        d = self.mat.data[self.mat.indptr[1:] - 1]
        if self.perm is None:
            return d.copy()
        out = np.empty_like(d)
        out[self.perm] = d
        return out

    def entries(self):
        """(rows, cols, values) in latent order, upper triangle of the pattern."""
        coo = self.mat.tocoo()
        r, c = coo.row, coo.col
        if self.perm is not None:
            r, c = self.perm[r], self.perm[c]
        return r, c, coo.data


def symbolic_closure(V) -> sp.csc_matrix:
    """Pad V's pattern with explicit zeros so that it is closed under fill.

    Column ``j`` of the upper-lower factor passes its pattern (minus its
    largest row ``p``) on to column ``p``.
    """
    m = _mat(V)
    n = m.shape[0]
    structs = [set(m.indices[m.indptr[j] : m.indptr[j + 1] - 1].tolist()) for j in range(n)]
    for j in range(n - 1, -1, -1):
        s = structs[j]
        if s:
            p = max(s)
            structs[p] |= s - {p}
    lookup = {}
    for j in range(n):
        for a in range(m.indptr[j], m.indptr[j + 1]):
            lookup[(int(m.indices[a]), j)] = m.data[a]
    rows, cols, vals = [], [], []
    for j in range(n):
        for i in sorted(structs[j]) + [j]:
            rows.append(i)
            cols.append(j)
            vals.append(lookup.get((i, j), 0.0))
    # explicit zeros are kept: they mark padded positions
    out = sp.csc_matrix((np.asarray(vals), (np.asarray(rows), np.asarray(cols))), shape=(n, n))
    out.sort_indices()
    return out


def selected_inverse(V, exact: bool = False) -> SelectedInverse:
    """Takahashi recursions for W^{-1} = (V V')^{-1} on V's pattern.

    With ``exact=False`` the pattern is V's own, and entries outside it
    that the recursion needs are treated as zero; with ``exact=True`` the
    pattern is first padded to its fill closure and the result is exact.
    """
    m = _mat(V)
    d = m.data[m.indptr[1:] - 1]
    if np.any(d == 0) or not np.all(np.isfinite(d)):
        raise NumericalError("triangular factor is singular (zero diagonal)")
    if exact:
        m = symbolic_closure(m)
    sig = _kernels.takahashi(m.indptr.astype(np.int64), m.indices.astype(np.int64), m.data.astype(float))
    S = sp.csc_matrix((sig, m.indices.copy(), m.indptr.copy()), shape=m.shape)
    perm = V.perm if isinstance(V, SparseTriangularFactor) else None
    return SelectedInverse(S, perm, exact)


def exact_variances(V, which=None, block: int | None = None) -> np.ndarray:
    """Diagonal of (V V')^{-1} from column solves: ``||V^{-1} e_k||^2``.

    ``which`` selects permuted-coordinate indices (default all).
    """
    m = _mat(V)
    n = m.shape[0]
    which = np.arange(n) if which is None else np.asarray(which, dtype=np.int64)
    if block is None:
        block = max(1, min(256, 20_000_000 // max(n, 1)))
    out = np.empty(which.size)
    for s in range(0, which.size, block):
        w = which[s : s + block]
        E = np.zeros((n, w.size))
        E[w, np.arange(w.size)] = 1.0
        X = solve_upper(m, E)
        out[s : s + block] = np.einsum("ij,ij->j", X, X)
    return out


def dump_factors(directory, U: SparseTriangularFactor, V: SparseTriangularFactor | None = None):
    """Write U (and V) in Matrix Market coordinate format."""
    os.makedirs(directory, exist_ok=True)
    scipy.io.mmwrite(os.path.join(directory, "U.mtx"), U.mat, comment="Vecchia factor U (Q = U U')")
    if V is not None:
        scipy.io.mmwrite(os.path.join(directory, "V.mtx"), V.mat, comment="posterior factor V (W = V V')")
        if V.perm is not None:
            np.savetxt(os.path.join(directory, "V_perm.txt"), V.perm, fmt="%d")
