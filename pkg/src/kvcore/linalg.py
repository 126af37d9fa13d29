"""Dense matrix arithmetic, a cyclic-Jacobi symmetric eigensolver, and a
direct SVD built on top of it.

Everything operates on 2-D float64 C-order ndarrays. The Jacobi solver is
deliberately self-contained: matrices here are at most a few thousand wide
(one Gram matrix per attention layer), so an O(d^3)-per-sweep method with a
hard convergence criterion is simpler to reason about than a LAPACK contract
and is plenty fast at that scale.

Sign convention: every eigenvector / right-singular-vector column is
canonicalized so that its largest-magnitude entry is non-negative (ties
broken by lowest row index). Singular vector pairs are flipped together so
the decomposition is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, ShapeError

_JACOBI_MAX_SWEEPS = 100
_JACOBI_REL_TOL = 1e-12
_SYMMETRY_REL_TOL = 1e-8
_EIG_CLAMP_REL = 1e-10
_SV_NULL_REL = 1e-12


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Coerce ``data`` to a finite 2-D float64 C-order array.

    Raises ShapeError for non-2-D input and ValueError if any entry is
    NaN or infinite.
    """
    a = np.ascontiguousarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: contains NaN or Inf entries")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check, 64-bit accumulation."""
    a = as_matrix(a, "matmul lhs")
    b = as_matrix(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ: {a.shape} x {b.shape}"
        )
    return a @ b


def frobenius_norm(a: np.ndarray) -> float:
    """sqrt of the sum of squared entries."""
    a = as_matrix(a, "frobenius_norm")
    return float(np.linalg.norm(a, "fro"))


def canonical_signs(v: np.ndarray) -> np.ndarray:
    """Flip columns of ``v`` in place so each column's largest-magnitude
    entry is non-negative. Returns the flip signs (+-1) per column."""
    if v.size == 0:
        return np.ones(v.shape[1])
    idx = np.argmax(np.abs(v), axis=0)  # first max wins ties
    signs = np.where(v[idx, np.arange(v.shape[1])] < 0.0, -1.0, 1.0)
    v *= signs
    return signs


@dataclass(frozen=True)
class EigenResult:
    """Eigenvalues in descending order; eigenvector columns paired with them."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD: ``a = u @ diag(sigma) @ v.T`` with r = min(rows, cols)."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def sym_eigh(a: np.ndarray) -> EigenResult:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    The input is symmetrized as (A + A^T)/2 before solving; a symmetry
    defect above 1e-8 * max|A| is rejected. Sweeps stop once every
    off-diagonal entry is below 1e-12 * max|A|; more than 100 sweeps raises
    ConvergenceError. Eigenvalues negative by less than 1e-10 * lambda_max
    are clamped to zero, since the Gram matrices this solver exists for are
    PSD in exact arithmetic.
    """
    a = as_matrix(a, "sym_eigh")
    n = a.shape[0]
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"sym_eigh: matrix must be square, got {a.shape}")

    scale = float(np.max(np.abs(a))) if n else 0.0
    defect = float(np.max(np.abs(a - a.T))) if n else 0.0
    if scale > 0.0 and defect > _SYMMETRY_REL_TOL * scale:
        raise ShapeError(
            f"sym_eigh: symmetry defect {defect:.3e} exceeds "
            f"{_SYMMETRY_REL_TOL:.0e} * max|A| = {_SYMMETRY_REL_TOL * scale:.3e}"
        )

    w = (a + a.T) / 2.0
    vecs = np.eye(n)

    if scale > 0.0:
        thresh = _JACOBI_REL_TOL * scale
        off_mask = ~np.eye(n, dtype=bool)
        for _ in range(_JACOBI_MAX_SWEEPS):
            off = float(np.max(np.abs(w[off_mask]))) if n > 1 else 0.0
            if off < thresh:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = w[p, q]
                    if abs(apq) < thresh:
                        continue
                    tau = (w[q, q] - w[p, p]) / (2.0 * apq)
                    if tau >= 0.0:
                        t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                    else:
                        t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                    c = 1.0 / np.sqrt(1.0 + t * t)
                    s = t * c
                    # two-sided rotation G^T W G in the (p, q) plane
                    wp = w[:, p].copy()
                    wq = w[:, q].copy()
                    w[:, p] = c * wp - s * wq
                    w[:, q] = s * wp + c * wq
                    wp = w[p, :].copy()
                    wq = w[q, :].copy()
                    w[p, :] = c * wp - s * wq
                    w[q, :] = s * wp + c * wq
                    w[p, q] = 0.0
                    w[q, p] = 0.0
                    vp = vecs[:, p].copy()
                    vq = vecs[:, q].copy()
                    vecs[:, p] = c * vp - s * vq
                    vecs[:, q] = s * vp + c * vq
        else:
            off = float(np.max(np.abs(w[off_mask]))) if n > 1 else 0.0
            if off >= thresh:
                raise ConvergenceError(
                    f"sym_eigh: Jacobi did not converge in {_JACOBI_MAX_SWEEPS} "
                    f"sweeps; off-diagonal residual {off:.3e} "
                    f"(threshold {thresh:.3e})"
                )

    lam = np.diag(w).copy()
    order = np.argsort(-lam, kind="stable")
    lam = lam[order]
    vecs = vecs[:, order]

    if n and lam[0] > 0.0:
        clamp = -_EIG_CLAMP_REL * lam[0]
        lam[(lam < 0.0) & (lam > clamp)] = 0.0

    canonical_signs(vecs)
    return EigenResult(_freeze(lam), _freeze(vecs))


def _complete_orthonormal(basis: np.ndarray, need: int) -> np.ndarray:
    """Deterministically extend ``basis`` (orthonormal columns) by ``need``
    further orthonormal columns, preferring the standard basis directions
    with the largest residual at each step."""
    n = basis.shape[0]
    q = basis
    added = []
    for _ in range(need):
        resid_sq = 1.0 - np.sum(q * q, axis=1)  # residual of each e_j
        j = int(np.argmax(resid_sq))
        r = -q @ q[j, :]
        r[j] += 1.0
        r /= np.linalg.norm(r)
        r -= q @ (q.T @ r)  # second pass for orthogonality
        r /= np.linalg.norm(r)
        added.append(r)
        q = np.column_stack([q, r])
    return np.column_stack(added) if added else np.empty((n, 0))


def svd_direct(a: np.ndarray) -> SvdResult:
    """Thin SVD via eigendecomposition of the smaller Gram matrix.

    For rows >= cols the right singular vectors come from eig(A^T A) and
    each singular value is recovered as ||A v_i||, which keeps the small end
    of the spectrum honest; left vectors with sigma below 1e-12 * sigma_max
    are filled by deterministic orthogonal completion. rows < cols mirrors
    the construction on A A^T.
    """
    a = as_matrix(a, "svd_direct")
    rows, cols = a.shape
    if rows < 1 or cols < 1:
        raise ShapeError(f"svd_direct: empty matrix {a.shape}")

    if cols <= rows:
        eig = sym_eigh(a.T @ a)
        v = np.array(eig.eigenvectors)
        av = a @ v
        sigma = np.linalg.norm(av, axis=0)
        order = np.argsort(-sigma, kind="stable")
        sigma = sigma[order]
        v = v[:, order]
        av = av[:, order]
        u = _recover_factor(av, sigma)
    else:
        eig = sym_eigh(a @ a.T)
        u = np.array(eig.eigenvectors)
        atu = a.T @ u
        sigma = np.linalg.norm(atu, axis=0)
        order = np.argsort(-sigma, kind="stable")
        sigma = sigma[order]
        u = u[:, order]
        atu = atu[:, order]
        v = _recover_factor(atu, sigma)

    # canonical sign on v, with the paired u column flipped to preserve a = u s v^T
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.where(v[idx, np.arange(v.shape[1])] < 0.0, -1.0, 1.0)
    v *= signs
    u *= signs
    return SvdResult(_freeze(u), _freeze(sigma.copy()), _freeze(v))


def _recover_factor(product: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Normalize columns of ``product`` by sigma, completing the columns
    whose singular value is numerically zero."""
    smax = sigma[0] if sigma.size else 0.0
    thresh = _SV_NULL_REL * smax
    keep = sigma > thresh
    out = np.empty_like(product)
    out[:, keep] = product[:, keep] / sigma[keep]
    n_missing = int(np.sum(~keep))
    if n_missing:
        out[:, ~keep] = _complete_orthonormal(out[:, keep], n_missing)
    return out
