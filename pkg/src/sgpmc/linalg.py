"""Dense symmetric linear algebra with a jitter policy and Cholesky adjoints.

All matrices are float64.  The reverse-mode Cholesky kernel has two
interchangeable backends: a compiled extension (sgpmc._cholrev) and a pure
numpy/LAPACK formulation based on triangular solves.  The compiled backend
is picked automatically at import when available; set the environment
variable ``SGPMC_PURE=1`` to force the pure path.
"""

import os
from collections import namedtuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, solve_triangular

try:
    from . import _cholrev as _compiled
except ImportError:
    _compiled = None

HAVE_COMPILED = _compiled is not None and not os.environ.get("SGPMC_PURE")

# Relative jitter ladder: scaled by mean(diag(K)) before each attempt.
JITTER_LADDER = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2)

CholResult = namedtuple("CholResult", ["L", "jitter"])


class NotPositiveDefinite(Exception):
    """Raised when a matrix cannot be factorized at maximum jitter."""


def _check_symmetric(K, rtol=1e-12):
    scale = max(np.max(np.abs(K)), 1.0)
    if np.max(np.abs(K - K.T)) > rtol * scale:
        raise ValueError("matrix is not symmetric to within tolerance")


def cholesky(K, check_symmetry=True):
    """Lower Cholesky factor of ``K`` with escalating diagonal jitter.

    Attempts the factorization at each rung of the jitter ladder (relative
    to mean(diag(K))) and returns ``CholResult(L, jitter)`` for the first
    success, where ``L L^T = K + jitter*I``.

    Raises
    ------
    NotPositiveDefinite
        If the factorization fails at the largest rung.
    """
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError("expected a square matrix")
    if check_symmetry:
        _check_symmetric(K)
    diag_mean = float(np.mean(np.diag(K)))
    scale = abs(diag_mean) if diag_mean != 0.0 else 1.0
    for rung in JITTER_LADDER:
        jitter = rung * scale
        try:
            Kj = K if jitter == 0.0 else K + jitter * np.eye(K.shape[0])
            c, _ = cho_factor(Kj, lower=True, check_finite=False)
            L = np.tril(c)
            if np.all(np.diag(L) > 0):
                return CholResult(L, jitter)
        except (LinAlgError, ValueError):
            continue
    raise NotPositiveDefinite(
        f"Cholesky failed for dim-{K.shape[0]} matrix at maximum jitter "
        f"{JITTER_LADDER[-1] * scale:.3e}"
    )


def tri_solve(L, B, transposed=False):
    """Solve ``L X = B`` (or ``L^T X = B`` when ``transposed``) for lower-triangular L."""
    B = np.asarray(B, dtype=np.float64)
    if L.shape[0] != B.shape[0]:
        raise ValueError(
            f"dimension mismatch: L is {L.shape[0]}x{L.shape[1]}, B has {B.shape[0]} rows"
        )
    return solve_triangular(L, B, lower=True, trans="T" if transposed else "N", check_finite=False)


def _phi(M):
    """Lower triangle with halved diagonal (the Cholesky-differential mask)."""
    out = np.tril(M)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def _chol_rev_pure(L, Lbar):
    # Adjoint via two triangular solves: L^{-T} Phi(L^T Lbar) L^{-1},
    # restricted to the lower-triangle parameterization on return.
    P = _phi(L.T @ np.tril(Lbar))
    X = solve_triangular(L, P, lower=True, trans="T", check_finite=False)
    raw = solve_triangular(L, X.T, lower=True, trans="T", check_finite=False).T
    # Fold the strict upper part onto the lower triangle so both backends
    # return the same lower-triangular representation.
    return np.tril(raw) + np.tril(raw.T, -1)


def cholesky_reverse(L, Lbar, backend="auto"):
    """Adjoint of the Cholesky factorization.

    Parameters
    ----------
    L : (n, n) lower Cholesky factor of K.
    Lbar : (n, n) adjoint of a scalar function with respect to L (lower
        triangle; anything above the diagonal is ignored).
    backend : "auto", "compiled" or "python".

    Returns
    -------
    (n, n) symmetric matrix Kbar such that for symmetric perturbations dK,
    dF = sum(Kbar * dK).  Off-diagonal sensitivity is split evenly between
    the two triangles.
    """
    L = np.ascontiguousarray(L, dtype=np.float64)
    Lbar = np.ascontiguousarray(Lbar, dtype=np.float64)
    if L.shape != Lbar.shape or L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError("L and Lbar must be square and of equal shape")
    if backend == "auto":
        backend = "compiled" if HAVE_COMPILED else "python"
    if backend == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled backend requested but extension not built")
        tril_grad = _compiled.chol_rev(L, Lbar)
    elif backend == "python":
        tril_grad = _chol_rev_pure(L, Lbar)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return 0.5 * (tril_grad + tril_grad.T)
