"""RBF covariance functions (isotropic and ARD) and their adjoints.

Hyperparameters are stored and differentiated in log space.  The kernel
family is a closed enumeration: ``kind`` is "rbf" (one shared lengthscale)
or "ard" (one lengthscale per input dimension).
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class KernelParams:
    """Positive-scale kernel hyperparameters.

    variance : signal variance sigma^2 > 0
    lengthscales : shape (1,) for "rbf" or (D,) for "ard", all > 0
    """

    variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        self.lengthscales = np.atleast_1d(np.asarray(self.lengthscales, dtype=np.float64))
        if self.variance <= 0 or np.any(self.lengthscales <= 0):
            raise ValueError("kernel hyperparameters must be strictly positive")

    @property
    def log_vector(self):
        return np.concatenate(([np.log(self.variance)], np.log(self.lengthscales)))

    @classmethod
    def from_log_vector(cls, vec):
        vec = np.asarray(vec, dtype=np.float64)
        return cls(variance=float(np.exp(vec[0])), lengthscales=np.exp(vec[1:]))


def num_kernel_params(kind, dim):
    """Length of the log-parameter vector: variance plus lengthscales."""
    if kind == "rbf":
        return 2
    if kind == "ard":
        return 1 + dim
    raise ValueError(f"unknown kernel kind {kind!r}")


def _scaled_sqdist(A, B, lengthscales):
    """Matrix of sum_d (a_d - b_d)^2 / l_d^2, clamped at zero."""
    As = A / lengthscales
    Bs = B / lengthscales
    sq = (
        np.sum(As * As, axis=1)[:, None]
        + np.sum(Bs * Bs, axis=1)[None, :]
        - 2.0 * As @ Bs.T
    )
    return np.maximum(sq, 0.0)


def _expand_ls(params, D):
    ls = params.lengthscales
    if ls.shape[0] == 1:
        return np.full(D, ls[0])
    if ls.shape[0] != D:
        raise ValueError(f"lengthscales have length {ls.shape[0]}, inputs have dim {D}")
    return ls


def kuf(params, Z, X):
    """Cross-covariance block k(z_i, x_j), shape (M, N)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if Z.shape[1] != X.shape[1]:
        raise ValueError("input dimension mismatch between Z and X")
    ls = _expand_ls(params, Z.shape[1])
    return params.variance * np.exp(-0.5 * _scaled_sqdist(Z, X, ls))


def kuu(params, Z):
    """Covariance block over inducing inputs, exactly symmetric, shape (M, M)."""
    K = kuf(params, Z, Z)
    K = 0.5 * (K + K.T)
    np.fill_diagonal(K, params.variance)
    return K


def kdiag(params, X):
    """diag of k over X: the constant vector (variance,) * N."""
    X = np.atleast_2d(X)
    return np.full(X.shape[0], params.variance)


def kernel_adjoints(params, Z, X, dKuu_bar=None, dKuf_bar=None, dKdiag_bar=None,
                    want_z_grad=True):
    """Chain-rule gradients of sum(adjoint * block) over the three blocks.

    Parameters are the adjoints of kuu(params, Z), kuf(params, Z, X) and
    kdiag(params, X); any may be None (treated as zero).  dKuu_bar is
    symmetrized on entry.

    Returns
    -------
    dlog : gradient w.r.t. the log-parameter vector [log variance, log ls...],
        length matching ``params.log_vector``.
    dZ : (M, D) gradient w.r.t. inducing locations, or None when
        ``want_z_grad`` is False.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    D = Z.shape[1]
    ls = _expand_ls(params, D)
    iso = params.lengthscales.shape[0] == 1

    dlog_var = 0.0
    dlog_ls = np.zeros(D)
    dZ = np.zeros_like(Z) if want_z_grad else None

    def accumulate(E, A, B, symmetric):
        # E = adjoint (*) primal kernel block over point sets (A, B).
        nonlocal dlog_var
        dlog_var += float(np.sum(E))
        rs = E.sum(axis=1)
        for d in range(D):
            diff_sq_sum = float(
                rs @ (A[:, d] ** 2)
                + E.sum(axis=0) @ (B[:, d] ** 2)
                - 2.0 * A[:, d] @ E @ B[:, d]
            )
            dlog_ls[d] += diff_sq_sum / ls[d] ** 2
        if want_z_grad:
            factor = 2.0 if symmetric else 1.0
            for d in range(D):
                dZ[:, d] += -factor / ls[d] ** 2 * (rs * A[:, d] - E @ B[:, d])

    if dKuu_bar is not None:
        G = 0.5 * (dKuu_bar + dKuu_bar.T)
        accumulate(G * kuu(params, Z), Z, Z, symmetric=True)
    if dKuf_bar is not None:
        accumulate(dKuf_bar * kuf(params, Z, X), Z, X, symmetric=False)
    if dKdiag_bar is not None:
        dlog_var += params.variance * float(np.sum(dKdiag_bar))

    if iso:
        dlog = np.array([dlog_var, float(np.sum(dlog_ls))])
    else:
        dlog = np.concatenate(([dlog_var], dlog_ls))
    return dlog, dZ
