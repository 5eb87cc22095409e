"""Dense linear algebra kernels shared by the whole package.

Everything operates on plain 2-D float64 numpy arrays ("Mat" throughout the
docs). The module owns the single piece of global mutable state in the
package: a multiply-FLOP counter fed by :func:`matmul`. The counter is a
plain accumulator and is only meaningful for single-threaded counted runs.

``matmul`` deliberately uses ``np.einsum`` instead of BLAS: einsum reduces
the inner dimension sequentially, so results are bit-identical to a naive
triple loop, which keeps instrumented runs and oracle tests exactly
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DimensionError",
    "ParameterError",
    "FlopCounter",
    "FLOPS",
    "as_mat",
    "matmul",
    "SvdResult",
    "thin_svd",
    "Basis",
    "empty_basis",
    "select_basis",
    "project_out",
    "project_into",
    "softmax_rows",
    "softmax_jacobian",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A parameter is outside its documented domain."""


class FlopCounter:
    """Global multiply-FLOP accumulator (2*m*n*p per counted matmul).

    Disabled by default; enable around the region to be measured. Not
    thread-safe: counted runs must be single-threaded.
    """

    def __init__(self):
        self.enabled = False
        self.total = 0

    def reset(self):
        self.total = 0

    def __enter__(self):
        self.enabled = True
        self.total = 0
        return self

    def __exit__(self, *exc):
        self.enabled = False
        return False


FLOPS = FlopCounter()


def as_mat(x) -> np.ndarray:
    """Coerce to a 2-D float64 array and reject non-finite entries."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise ParameterError("matrix contains NaN or Inf")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact dense product with sequential inner-dimension accumulation.

    When the global counter is enabled, adds 2*m*n*p multiply FLOPs.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if FLOPS.enabled:
        FLOPS.total += 2 * a.shape[0] * a.shape[1] * b.shape[1]
    return np.einsum("ij,jk->ik", a, b)


# ---------------------------------------------------------------------------
# Thin SVD (one-sided Jacobi)
# ---------------------------------------------------------------------------


@dataclass
class SvdResult:
    """Thin SVD M = u @ diag(sigma) @ vt with k = min(m, d) components."""

    u: np.ndarray       # (m, k)
    sigma: np.ndarray   # (k,) non-increasing, >= 0
    vt: np.ndarray      # (k, d) orthonormal rows

    def rank(self, rel_tol: float = 1e-12) -> int:
        """Numerical rank: singular values below rel_tol*sigma[0] count as zero."""
        if self.sigma.size == 0 or self.sigma[0] == 0.0:
            return 0
        return int(np.count_nonzero(self.sigma > rel_tol * self.sigma[0]))


def _jacobi_onesided(a: np.ndarray, max_sweeps: int = 60, tol: float = 1e-14):
    """Orthogonalize the columns of ``a`` in place by Jacobi rotations.

    Returns (a, v) with a = a_original @ v and the columns of a mutually
    orthogonal. Column norms of the result are the singular values.
    """
    a = a.copy()
    n = a.shape[1]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                cp = a[:, p]
                cq = a[:, q]
                alpha = cp @ cp
                beta = cq @ cq
                gamma = cp @ cq
                norm_prod = np.sqrt(alpha) * np.sqrt(beta)
                if norm_prod == 0.0 or abs(gamma) <= tol * norm_prod:
                    continue
                off = max(off, abs(gamma) / norm_prod)
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta == 0.0:
                    t = 1.0
                elif abs(zeta) > 1e150:   # zeta**2 would overflow; use the limit
                    t = 1.0 / (2.0 * zeta)
                else:
                    t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                rot_p = c * cp - s * cq
                rot_q = s * cp + c * cq
                a[:, p] = rot_p
                a[:, q] = rot_q
                vp = c * v[:, p] - s * v[:, q]
                vq = s * v[:, p] + c * v[:, q]
                v[:, p] = vp
                v[:, q] = vq
        if off == 0.0:
            break
    return a, v


def _complete_orthonormal(left: np.ndarray, zero_cols: np.ndarray) -> None:
    """Fill zero columns of ``left`` with an orthonormal completion, in place."""
    rows = left.shape[0]
    for j in np.flatnonzero(zero_cols):
        for cand in range(rows):
            vec = np.zeros(rows)
            vec[cand] = 1.0
            vec -= left @ (left.T @ vec)
            norm = np.linalg.norm(vec)
            if norm > 0.5:
                left[:, j] = vec / norm
                break


def thin_svd(m: np.ndarray) -> SvdResult:
    """Thin SVD via one-sided Jacobi, applied to the smaller dimension.

    A zero matrix yields all-zero sigma; vt rows are orthonormal in every
    case (zero singular directions are completed arbitrarily).
    """
    m = as_mat(m)
    rows, cols = m.shape
    transposed = rows < cols
    work = m.T if transposed else m          # work has rows >= cols
    rotated, v = _jacobi_onesided(np.asarray(work, dtype=np.float64))
    sigma = np.sqrt(np.sum(rotated * rotated, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    rotated = rotated[:, order]
    v = v[:, order]
    left = np.zeros_like(rotated)
    nz = sigma > 0.0
    left[:, nz] = rotated[:, nz] / sigma[nz]
    _complete_orthonormal(left, ~nz)
    if transposed:
        # m = (work)^T = (left S v^T)^T = v S left^T
        return SvdResult(u=v, sigma=sigma, vt=left.T)
    return SvdResult(u=left, sigma=sigma, vt=v.T)


# ---------------------------------------------------------------------------
# Orthonormal bases and projections
# ---------------------------------------------------------------------------


@dataclass
class Basis:
    """Rows are orthonormal vectors in R^d; zero rows (r=0) is legal."""

    vectors: np.ndarray  # (r, d)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise DimensionError("basis vectors must form a 2-D matrix")

    @property
    def rank(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def orthonormality_defect(self) -> float:
        if self.rank == 0:
            return 0.0
        g = self.vectors @ self.vectors.T
        return float(np.max(np.abs(g - np.eye(self.rank))))


def empty_basis(dim: int) -> Basis:
    return Basis(np.zeros((0, dim)))


def select_basis(svd: SvdResult, epsilon: float) -> Basis:
    """First k right-singular vectors covering an ``epsilon`` energy fraction.

    k is the smallest index with sum_{i<=k} sigma_i^2 / sum_i sigma_i^2 >=
    epsilon; all-zero sigma yields an empty basis. sigma must be
    non-increasing.
    """
    if not (0.0 < epsilon <= 1.0):
        raise ParameterError(f"epsilon must lie in (0, 1], got {epsilon}")
    sigma = np.asarray(svd.sigma, dtype=np.float64)
    if np.any(np.diff(sigma) > 0.0):
        raise ParameterError("sigma must be non-increasing")
    if np.any(sigma < 0.0):
        raise ParameterError("sigma must be non-negative")
    energy = np.cumsum(sigma * sigma)
    if energy.size == 0 or energy[-1] == 0.0:
        return empty_basis(svd.vt.shape[1])
    ratio = energy / energy[-1]
    k = int(np.argmax(ratio >= epsilon)) + 1
    return Basis(svd.vt[:k].copy())


def project_out(m: np.ndarray, phi: Basis) -> np.ndarray:
    """m minus its component in span(phi rows): m - Phi^T Phi m."""
    m = np.asarray(m, dtype=np.float64)
    if phi.rank == 0:
        return m.copy()
    if phi.dim != m.shape[0]:
        raise DimensionError(
            f"projection dim mismatch: basis dim {phi.dim}, matrix rows {m.shape[0]}"
        )
    return m - phi.vectors.T @ (phi.vectors @ m)


def project_into(m: np.ndarray, psi: Basis) -> np.ndarray:
    """Component of m in span(psi rows): Psi^T Psi m; empty psi annihilates."""
    m = np.asarray(m, dtype=np.float64)
    if psi.rank == 0:
        return np.zeros_like(m)
    if psi.dim != m.shape[0]:
        raise DimensionError(
            f"projection dim mismatch: basis dim {psi.dim}, matrix rows {m.shape[0]}"
        )
    return psi.vectors.T @ (psi.vectors @ m)


# ---------------------------------------------------------------------------
# Softmax and its Jacobian
# ---------------------------------------------------------------------------


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction."""
    m = np.asarray(m, dtype=np.float64)
    z = m - np.max(m, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_jacobian(p: np.ndarray) -> np.ndarray:
    """Jacobian of softmax at probability vector p: diag(p) - p p^T.

    p must sum to 1 within 1e-12. Each Jacobian row sums to zero.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if abs(p.sum() - 1.0) > 1e-12:
        raise ParameterError("probability vector must sum to 1 within 1e-12")
    return np.diag(p) - np.outer(p, p)
