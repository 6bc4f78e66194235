"""Small dense linear algebra used by projection training.

Everything here works on D x D or d x D matrices with D in the low hundreds,
so the routines favour accuracy and determinism over raw speed. The symmetric
eigensolver is a cyclic Jacobi method (compiled with numba); the thin SVD and the spectral-norm linear
maximization oracle are derived from it.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ValidationError

GRAM_CHUNK_ROWS = 4096
_SYM_RTOL = 1e-9
_RANK_RTOL = 1e-10


@dataclass(frozen=True)
class GramPair:
    """Unnormalized second-order statistics of a query set and a database.

    ``k_q = Q Q^T`` and ``k_x = X X^T`` with vectors stacked as columns; ``m``
    and ``n`` are the number of query and database vectors that went in.
    """

    k_q: np.ndarray
    k_x: np.ndarray
    m: int
    n: int

    @property
    def dim(self) -> int:
        return self.k_x.shape[0]

    def normalized(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(k_q / m, k_x / n)``."""
        if self.m <= 0 or self.n <= 0:
            raise ValidationError(f"sample counts must be positive (m={self.m}, n={self.n})")
        return self.k_q / self.m, self.k_x / self.n


@dataclass(frozen=True)
class EigenResult:
    values: np.ndarray  # descending
    vectors: np.ndarray  # column j pairs with values[j]


def _as_finite_matrix(a, name="input") -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValidationError(f"{name} must be a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite values")
    return a


def _chunk_gram(block: np.ndarray) -> np.ndarray:
    b = block.astype(np.float64, copy=False)
    return b.T @ b


def accumulate_gram(vectors, workers: int = 1, chunk_rows: int = GRAM_CHUNK_ROWS) -> np.ndarray:
    """Sum of outer products ``sum_i x_i x_i^T`` over the rows of ``vectors``.

    Rows are split into fixed chunks by index and the partial sums are merged
    with a pairwise tree, so the result is bit-identical across runs for a
    given ``chunk_rows`` (the worker count only changes who computes each
    chunk, not the reduction order).
    """
    x = _as_finite_matrix(vectors, "vectors")
    if x.shape[0] < 1:
        raise ValidationError("accumulate_gram needs at least one vector")
    starts = range(0, x.shape[0], chunk_rows)
    blocks = [x[s:s + chunk_rows] for s in starts]
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(_chunk_gram, blocks))
    else:
        partials = [_chunk_gram(b) for b in blocks]
    while len(partials) > 1:
        merged = [partials[i] + partials[i + 1] for i in range(0, len(partials) - 1, 2)]
        if len(partials) % 2:
            merged.append(partials[-1])
        partials = merged
    g = partials[0]
    # the product is symmetric up to rounding in BLAS kernels; make it exact
    return 0.5 * (g + g.T)


def _check_symmetric(k: np.ndarray) -> None:
    scale = np.max(np.abs(k)) if k.size else 0.0
    asym = np.max(np.abs(k - k.T)) if k.size else 0.0
    if asym > _SYM_RTOL * max(scale, np.finfo(float).tiny):
        raise ValidationError(f"matrix is not symmetric (max |K - K^T| = {asym:.3e}, max |K| = {scale:.3e})")


@njit(cache=True)
def _jacobi(a, v, max_sweeps, tol):
    """Row-cyclic Jacobi sweeps on ``a`` in place, accumulating rotations in ``v``."""
    n = a.shape[0]
    norm = np.sqrt(np.sum(a * a))
    for sweep in range(max_sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                off += 2.0 * a[i, j] * a[i, j]
        if off == 0.0 or np.sqrt(off) <= tol * norm:
            return sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                sgn = 1.0 if tau >= 0.0 else -1.0
                t = sgn / (abs(tau) + np.hypot(1.0, tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    return max_sweeps


def sym_eig(k, max_sweeps: int = 60, tol: float = 1e-15) -> EigenResult:
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Eigenvalues come back in descending order; ties keep the solver's
    diagonal order.
    """
    k = _as_finite_matrix(k, "k").astype(np.float64)
    n = k.shape[0]
    if k.shape != (n, n) or n < 1:
        raise ValidationError(f"sym_eig expects a non-empty square matrix, got shape {k.shape}")
    _check_symmetric(k)
    a = np.ascontiguousarray(0.5 * (k + k.T))
    v = np.eye(n)
    _jacobi(a, v, max_sweeps, tol)
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return EigenResult(values=values[order], vectors=v[:, order])


def _complete_orthonormal(v: np.ndarray, count: int) -> np.ndarray:
    """Append ``count`` unit columns orthogonal to the columns of ``v``."""
    dim = v.shape[0]
    cols = [v[:, j] for j in range(v.shape[1])]
    for e in range(dim):
        if count == 0:
            break
        w = np.zeros(dim)
        w[e] = 1.0
        for _ in range(2):
            for c in cols:
                w -= (c @ w) * c
        nrm = np.linalg.norm(w)
        if nrm > 1e-6:
            cols.append(w / nrm)
            count -= 1
    return np.column_stack(cols) if cols else np.zeros((dim, 0))


def _mgs(v: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt, applied twice; columns keep their order."""
    v = v.copy()
    for _ in range(2):
        for j in range(v.shape[1]):
            for i in range(j):
                v[:, j] -= (v[:, i] @ v[:, j]) * v[:, i]
            v[:, j] /= np.linalg.norm(v[:, j])
    return v


def thin_svd(c) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``c = u @ diag(s) @ v.T`` of a d x D matrix with d <= D.

    Computed from the eigendecomposition of the small Gram ``c c^T``; right
    singular vectors for (numerically) zero singular values are completed to
    an orthonormal set.
    """
    c = _as_finite_matrix(c, "c").astype(np.float64)
    d, big_d = c.shape
    if d > big_d:
        raise ValidationError(f"thin_svd expects d <= D, got {d} x {big_d}")
    eig = sym_eig(c @ c.T)
    u = eig.vectors
    s = np.sqrt(np.clip(eig.values, 0.0, None))
    smax = s[0] if d else 0.0
    good = s > _RANK_RTOL * smax if smax > 0 else np.zeros(d, dtype=bool)
    rank = int(good.sum())  # s is descending so the good ones lead
    v = (c.T @ u[:, :rank]) / s[:rank]
    if rank:
        v = _mgs(v)
    v = _complete_orthonormal(v, d - rank)
    s[rank:] = 0.0
    return u, s, v


def spectral_lmo(c, return_degenerate: bool = False):
    """argmax of <S, c> over the unit spectral-norm ball: ``S = U V^T``.

    For ``c == 0`` every S is optimal; a truncated identity is returned and
    the degenerate flag is set.
    """
    c = _as_finite_matrix(c, "c").astype(np.float64)
    scale = np.max(np.abs(c)) if c.size else 0.0
    if scale == 0.0:
        s = np.eye(*c.shape)
        return (s, True) if return_degenerate else s
    u, _, v = thin_svd(c / scale)
    s = u @ v.T
    return (s, False) if return_degenerate else s


def stiefel_retract(a) -> np.ndarray:
    """Nearest row-orthonormal matrix to ``a`` (polar factor ``U V^T``)."""
    a = _as_finite_matrix(a, "a").astype(np.float64)
    d = a.shape[0]
    u, s, v = thin_svd(a)
    rank = int(np.sum(s > _RANK_RTOL * s[0])) if s.size and s[0] > 0 else 0
    if rank < d:
        raise ValidationError(f"cannot retract a rank-deficient matrix: row rank {rank} < {d}")
    return u @ v.T
