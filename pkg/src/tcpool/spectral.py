"""Matrix square roots for symmetric positive semi-definite matrices.

Two routes are provided.  The production route is the coupled Newton-Schulz
iteration, which uses only matrix products and is therefore differentiable
through the autodiff tape.  The verification route is an eigendecomposition
square root built on a hand-written cyclic Jacobi solver; it is exact (to
solver tolerance) but not differentiable and exists to cross-check the
iterative route.

The iteration

    Q_0 = A', R_0 = I
    Q_k = 1/2 * Q_{k-1} (3I - R_{k-1} Q_{k-1})
    R_k = 1/2 * (3I - R_{k-1} Q_{k-1}) R_{k-1}

converges to (sqrt(A'), inverse-sqrt(A')) only when the spectrum of A' lies
inside (0, 3), so the input is scaled before iterating and the result is
compensated by the square root of the same scale.  The scale is the mean
eigenvalue tr(A)/d, inflated just enough to pull the largest eigenvalue
below a safety ceiling when the spectrum is too spread for the basin.  The
largest eigenvalue is bounded differentiably by the 16th root of tr(A'^16)
(four squarings), a bound that is tight for near-rank-one matrices and
never smaller than the true extreme.  For matrices whose spectrum already
fits (scalar multiples of the identity, moderate condition numbers) the
inflation is exactly zero, so those inputs see plain mean-eigenvalue
scaling and identity multiples are exact at any iteration count; sharply
conditioned covariances from training data stay inside the basin instead
of diverging.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pooling import CovarianceMatrix
from .tensor import (
    DOUBLE,
    IntegrityError,
    ShapeError,
    Tensor,
    add,
    matmul,
    mean_over,
    mul,
    reciprocal,
    relu,
    reshape,
    scale,
    sqrt,
    sub,
    transpose,
)

__all__ = [
    "SqrtResult",
    "newton_schulz_sqrt",
    "sqrt_batch",
    "jacobi_eigh",
    "eig_sqrt_oracle",
    "JacobiConvergenceError",
]

DEGENERATE_TRACE = 1e-12

# Scaled eigenvalues are kept at or below this value, inside the iteration's
# (0, 3) convergence basin with margin for floating-point error.
SPECTRUM_CEILING = 2.8


@dataclass
class SqrtResult:
    """Outcome of the iterative square root.

    ``norm_scale`` is the scalar the input was divided by before iterating:
    the mean eigenvalue tr(A)/d, inflated when the largest eigenvalue would
    otherwise exceed ``SPECTRUM_CEILING``.  ``residual`` measures how far
    the pre-compensation iterate is from a true root of the scaled matrix,
    ``|Q_K @ Q_K - A'|_F / |A'|_F``.
    """

    sqrt_mat: Tensor
    iterations: int
    norm_scale: float
    residual: float
    degenerate: bool = False


def _mean_diag(x: Tensor) -> Tensor:
    """Mean diagonal entry of each (d, d) slab of a (B, d, d) tensor -> (B, 1, 1)."""
    d = x.shape[-1]
    mask = Tensor._wrap(np.eye(d, dtype=x.dtype))
    m = mean_over(mul(x, mask), (1, 2))  # sums d diagonal entries over d*d cells
    return reshape(scale(m, float(d)), (x.shape[0], 1, 1))


def sqrt_batch(x: Tensor, iterations: int) -> Tensor:
    """Differentiable square root of a stack of symmetric PSD matrices.

    ``x`` is (B, d, d).  Each slab is divided by its mean eigenvalue, then
    by a further factor when the scaled spectrum would still poke above
    ``SPECTRUM_CEILING``, run through the coupled iteration, compensated by
    the square root of the total scale, and symmetrized.  Slabs with
    (numerically) zero trace come out as zero matrices; the guard constants
    added to their scales only touch those slabs and carry no gradient.
    """
    if x.ndim != 3 or x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"sqrt_batch expects stacked square matrices, got {x.shape}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    d = x.shape[-1]
    s = _mean_diag(x)
    # Zero-trace slabs would divide by zero; bump only those by a constant.
    guard = Tensor._wrap((np.abs(s.data) <= DEGENERATE_TRACE).astype(x.dtype))
    s_safe = add(s, guard)
    xn = mul(x, reciprocal(s_safe))

    # Largest-eigenvalue bound per slab: tr(xn^16) ** (1/16).  xn has unit
    # mean eigenvalue, so tr(xn^16) >= d >= 1 except for degenerate slabs,
    # where the same guard keeps the root chain away from zero.
    p2 = matmul(xn, xn)
    p4 = matmul(p2, p2)
    p8 = matmul(p4, p4)
    p16 = matmul(p8, p8)
    t16 = add(scale(_mean_diag(p16), float(d)), guard)
    top = sqrt(sqrt(sqrt(sqrt(t16))))
    one = Tensor._wrap(np.ones_like(s.data))
    inflate = add(one, relu(sub(scale(top, 1.0 / SPECTRUM_CEILING), one)))
    xb = mul(xn, reciprocal(inflate))

    three_ident = Tensor._wrap(3.0 * np.eye(d, dtype=x.dtype))
    q = xb
    r = None  # R_0 = I; the first R product is folded away analytically
    for _ in range(iterations):
        rq = q if r is None else matmul(r, q)
        t = sub(three_ident, rq)
        q = scale(matmul(q, t), 0.5)
        r = scale(t, 0.5) if r is None else scale(matmul(t, r), 0.5)
    comp = mul(q, sqrt(mul(s_safe, inflate)))
    return scale(add(comp, transpose(comp)), 0.5)


def newton_schulz_sqrt(a: CovarianceMatrix | Tensor | np.ndarray, iterations: int = 3) -> SqrtResult:
    """Square root of one symmetric PSD matrix, with diagnostics.

    Raises :class:`IntegrityError` when the input is visibly asymmetric.
    A numerically zero matrix (trace <= 1e-12) short-circuits to the zero
    matrix with ``degenerate=True``.
    """
    mat = a.mat if isinstance(a, CovarianceMatrix) else a
    if isinstance(mat, np.ndarray):
        mat = Tensor(mat)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ShapeError(f"expected one square matrix, got {mat.shape}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    m = mat.data
    tol = 1e-4 * max(1.0, float(np.abs(m).max(initial=0.0)))
    if float(np.abs(m - m.T).max(initial=0.0)) > tol:
        raise IntegrityError("matrix is not symmetric within tolerance")
    d = mat.shape[0]
    trace = float(np.trace(m))
    if trace <= DEGENERATE_TRACE:
        return SqrtResult(
            sqrt_mat=Tensor._wrap(np.zeros_like(m)),
            iterations=iterations,
            norm_scale=0.0,
            residual=0.0,
            degenerate=True,
        )
    x3 = reshape(mat, (1, d, d))
    root3 = sqrt_batch(x3, iterations)
    root = reshape(root3, (d, d))

    # Diagnostics are plain float arithmetic outside the tape, mirroring
    # the scale rule used inside sqrt_batch.
    md = m.astype(DOUBLE)
    mean_eig = trace / d
    xn = md / mean_eig
    p = xn @ xn
    p = p @ p
    p = p @ p
    p = p @ p
    top = float(np.trace(p)) ** (1.0 / 16.0)
    s = mean_eig * max(1.0, top / SPECTRUM_CEILING)
    a_norm = md / s
    q = root.data.astype(DOUBLE) / np.sqrt(s)
    num = np.linalg.norm(q @ q - a_norm)
    den = max(np.linalg.norm(a_norm), np.finfo(DOUBLE).tiny)
    return SqrtResult(
        sqrt_mat=root,
        iterations=iterations,
        norm_scale=s,
        residual=float(num / den),
        degenerate=False,
    )


# ---------------------------------------------------------------------------
# Eigendecomposition oracle (plain numpy arrays, no tape)


class JacobiConvergenceError(RuntimeError):
    """The cyclic Jacobi sweep limit was reached before convergence."""


def _offdiag_norm(a: np.ndarray) -> float:
    # Summing the off-diagonal entries directly avoids the cancellation of
    # the ``full - diagonal`` difference, which can dip below zero once the
    # off-diagonal mass is near roundoff.
    m = a.copy()
    np.fill_diagonal(m, 0.0)
    return float(np.linalg.norm(m))


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(w, v)`` with eigenvalues ``w`` ascending and orthonormal
    eigenvector columns ``v`` such that ``a ~= v @ diag(w) @ v.T``.  Sweeps
    run until the off-diagonal Frobenius norm drops below ``tol`` times the
    Frobenius norm of the input.
    """
    if isinstance(a, Tensor):
        a = a.data
    a = np.array(a, dtype=DOUBLE, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    d = a.shape[0]
    fro = float(np.linalg.norm(a))
    v = np.eye(d)
    if d == 1 or fro == 0.0:
        w = np.diag(a).copy()
        order = np.argsort(w)
        return w[order], v[:, order]
    stop = tol * fro
    converged = False
    for _ in range(max_sweeps):
        if _offdiag_norm(a) <= stop:
            converged = True
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if abs(apq) <= np.finfo(DOUBLE).tiny:
                    a[p, q] = a[q, p] = 0.0
                    continue
                # Rotation angle that annihilates a[p, q].
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                # hypot keeps theta**2 from overflowing for tiny pivots
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        converged = _offdiag_norm(a) <= stop
    if not converged:
        raise JacobiConvergenceError(f"no convergence in {max_sweeps} sweeps (d={d})")
    w = np.diag(a).copy()
    order = np.argsort(w)
    return w[order], v[:, order]


def eig_sqrt_oracle(a: CovarianceMatrix | Tensor | np.ndarray) -> np.ndarray:
    """Exact PSD square root via the Jacobi solver (float64, not differentiable).

    Eigenvalues that come out slightly negative (roundoff on rank-deficient
    input) are clamped to zero before taking their square root.
    """
    if isinstance(a, CovarianceMatrix):
        m = a.mat.data
    elif isinstance(a, Tensor):
        m = a.data
    else:
        m = np.asarray(a)
    m = m.astype(DOUBLE)
    tol = 1e-4 * max(1.0, float(np.abs(m).max(initial=0.0)))
    if float(np.abs(m - m.T).max(initial=0.0)) > tol:
        raise IntegrityError("matrix is not symmetric within tolerance")
    if m.shape[0] > 256:
        raise ShapeError("oracle is meant for small matrices (d <= 256)")
    w, v = jacobi_eigh(m)
    w = np.maximum(w, 0.0)
    root = (v * np.sqrt(w)) @ v.T
    return (root + root.T) / 2.0
