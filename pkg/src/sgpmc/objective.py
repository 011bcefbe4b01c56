"""The MCMC target: whitened log-density of the optimal free-form posterior.

Evaluates log q(v, theta) up to its normalizing constant, with exact
gradients assembled by a reverse sweep: likelihood partials -> conditional
moments -> kernel-block adjoints -> reverse-mode Cholesky -> log-space
hyperparameter gradients.  The same sparse-moment machinery backs the
variational ELBO in sgpmc.vb.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from . import kernels, likelihoods, linalg

_LOG2PI = math.log(2.0 * math.pi)

# Conditional variances are floored here inside objective evaluations;
# gradients are masked where the floor binds.
GAMMA_FLOOR = 1e-12


@dataclass
class GammaPrior:
    """Gamma(shape, rate) on the positive scale, evaluated on the log scale
    with the reparameterization Jacobian included."""

    shape: float = 1.0
    rate: float = 1.0

    def logp(self, t):
        return (
            self.shape * t
            - self.rate * np.exp(t)
            + self.shape * math.log(self.rate)
            - gammaln(self.shape)
        )

    def dlogp(self, t):
        return self.shape - self.rate * np.exp(t)


@dataclass
class WhitenedState:
    """Whitened inducing values (M x P) and unconstrained hyperparameters."""

    v: np.ndarray
    theta: np.ndarray

    def flatten(self):
        return np.concatenate([self.v.ravel(), self.theta])


@dataclass
class ModelSpec:
    """Dataset, kernel family, likelihood, inducing inputs and priors.

    The P latent functions (P = num_classes for robust-max, else 1) share
    the inducing inputs and the kernel hyperparameters.
    """

    X: np.ndarray
    y: np.ndarray
    kernel: str  # "rbf" | "ard"
    likelihood: object
    Z: np.ndarray
    priors: dict = field(default_factory=dict)
    quad_order: int = likelihoods.DEFAULT_ORDER

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=np.float64))
        if self.X.shape[1] != self.Z.shape[1]:
            raise ValueError("X and Z must share the input dimension")
        if self.kernel not in ("rbf", "ard"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        self._rule = likelihoods.gauss_hermite(self.quad_order)

    # -- hyperparameter registry -------------------------------------------

    @property
    def num_latent(self):
        return likelihoods.num_latent(self.likelihood)

    @property
    def num_inducing(self):
        return self.Z.shape[0]

    @property
    def theta_names(self):
        names = ["log_variance"]
        n_ls = kernels.num_kernel_params(self.kernel, self.X.shape[1]) - 1
        if n_ls == 1:
            names.append("log_lengthscale")
        else:
            names.extend(f"log_lengthscale_{d}" for d in range(n_ls))
        names.extend(self.likelihood.param_names)
        return names

    @property
    def theta_dim(self):
        return len(self.theta_names)

    @property
    def num_kernel_params(self):
        return kernels.num_kernel_params(self.kernel, self.X.shape[1])

    def prior_for(self, name):
        return self.priors.get(name, GammaPrior(1.0, 1.0))

    def split_theta(self, theta):
        """Unpack the unconstrained vector into kernel params and a
        likelihood spec carrying the current parameter values."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.theta_dim,):
            raise ValueError(f"theta must have length {self.theta_dim}")
        nk = self.num_kernel_params
        kp = kernels.KernelParams.from_log_vector(theta[:nk])
        lik = self.likelihood
        if isinstance(lik, likelihoods.Gaussian):
            lik = replace(lik, noise_variance=float(np.exp(theta[nk])))
        return kp, lik

    def initial_theta(self):
        """Log parameters from the values stored on the spec components."""
        nk = self.num_kernel_params
        vec = np.zeros(self.theta_dim)
        kp = getattr(self, "_init_kernel_params", None)
        if kp is not None:
            vec[:nk] = kp.log_vector
        if isinstance(self.likelihood, likelihoods.Gaussian):
            vec[nk] = math.log(self.likelihood.noise_variance)
        return vec

    def log_prior(self, theta):
        names = self.theta_names
        val = sum(self.prior_for(n).logp(t) for n, t in zip(names, theta))
        grad = np.array([self.prior_for(n).dlogp(t) for n, t in zip(names, theta)])
        return val, grad


# ---------------------------------------------------------------------------
# Sparse conditional moments and the shared reverse sweep
# ---------------------------------------------------------------------------


@dataclass
class SparseParts:
    """Primal quantities reused by forward and reverse passes."""

    kp: kernels.KernelParams
    lik: object
    R: np.ndarray
    jitter: float
    A: np.ndarray           # M x N, R^{-1} K_uf
    gamma_raw: np.ndarray   # N, may touch zero at inducing locations


def compute_parts(model, theta, Xq=None, Z=None):
    kp, lik = model.split_theta(theta)
    Z = model.Z if Z is None else np.atleast_2d(Z)
    Xq = model.X if Xq is None else np.atleast_2d(Xq)
    K = kernels.kuu(kp, Z)
    R, jitter = linalg.cholesky(K, check_symmetry=False)
    Kuf = kernels.kuf(kp, Z, Xq)
    A = linalg.tri_solve(R, Kuf)
    gamma_raw = kernels.kdiag(kp, Xq) - np.einsum("mn,mn->n", A, A)
    return SparseParts(kp=kp, lik=lik, R=R, jitter=jitter, A=A, gamma_raw=gamma_raw)


def backprop_parts(model, parts, Abar, kdiag_bar, Xq=None, Z=None, want_z_grad=False):
    """Adjoints on (A, kdiag) -> gradients w.r.t. log kernel params and Z.

    ``Abar`` must already include every dependence on A except the one
    through gamma = kdiag - colsum(A*A), which is carried by ``kdiag_bar``
    (the adjoint of gamma).
    """
    Z = model.Z if Z is None else np.atleast_2d(Z)
    Xq = model.X if Xq is None else np.atleast_2d(Xq)
    Abar_total = Abar - 2.0 * parts.A * kdiag_bar[None, :]
    Kuf_bar = linalg.tri_solve(parts.R, Abar_total, transposed=True)
    Rbar = np.tril(-Kuf_bar @ parts.A.T)
    Kuu_bar = linalg.cholesky_reverse(parts.R, Rbar)
    return kernels.kernel_adjoints(
        parts.kp, Z, Xq, Kuu_bar, Kuf_bar, kdiag_bar, want_z_grad=want_z_grad
    )


def conditional_moments(model, state, Xq=None, Z=None):
    """Per-latent conditional mean and variance of f at the query inputs.

    mu = A^T v and gamma = diag(K_qq - A^T A) with A = R^{-1} K_uq, the R
    factorization shared across the P latent functions.  Returns
    (|Xq| x P, |Xq| x P) arrays; gamma is common to all latents.
    """
    parts = compute_parts(model, state.theta, Xq=Xq, Z=Z)
    v = np.atleast_2d(state.v)
    mu = parts.A.T @ v
    gamma = np.tile(parts.gamma_raw[:, None], (1, v.shape[1]))
    return mu, gamma


def unwhiten(model, state, Z=None):
    """u = R v per latent function, with R R^T = K_uu(theta, Z)."""
    kp, _ = model.split_theta(state.theta)
    Z = model.Z if Z is None else np.atleast_2d(Z)
    R, _ = linalg.cholesky(kernels.kuu(kp, Z), check_symmetry=False)
    return R @ state.v


@dataclass
class Objective:
    value: float
    dv: np.ndarray = None
    dtheta: np.ndarray = None
    dZ: np.ndarray = None


def log_qhat(state, model, want_v_grad=True, want_theta_grad=True, want_z_grad=False):
    """log q(v, theta) up to the constant, with requested exact gradients.

    value = sum_n E[log p(y_n|f_n)] + log N(v|0,I) + log p(theta); the
    normalizer -log C is omitted throughout.  A nonfinite value signals a
    rejection to the sampler; NotPositiveDefinite propagates.
    """
    v = np.atleast_2d(state.v)
    M, P = v.shape
    if P != model.num_latent:
        raise ValueError("state.v has wrong number of latent functions")
    parts = compute_parts(model, state.theta)
    gamma = np.maximum(parts.gamma_raw, GAMMA_FLOOR)
    floor_mask = parts.gamma_raw > GAMMA_FLOOR

    mu = parts.A.T @ v  # N x P
    if isinstance(model.likelihood, likelihoods.RobustMax):
        gam_in = np.tile(gamma[:, None], (1, P))
        lik_val, dmu, dgamma = likelihoods.robustmax_expectations(
            parts.lik, model.y, mu, gam_in, model._rule
        )
        dgamma_shared = dgamma.sum(axis=1)
    else:
        lik_val, dmu_1d, dgamma_shared = likelihoods.variational_expectations(
            parts.lik, model.y, mu[:, 0], gamma, model._rule
        )
        dmu = dmu_1d[:, None]

    logp_v = -0.5 * float(np.sum(v * v)) - 0.5 * M * P * _LOG2PI
    prior_val, prior_grad = model.log_prior(state.theta)
    value = float(np.sum(lik_val)) + logp_v + prior_val

    out = Objective(value=value)
    if not np.isfinite(value):
        ndim = model.theta_dim
        out.dv = np.zeros_like(v)
        out.dtheta = np.zeros(ndim)
        return out

    if want_v_grad:
        out.dv = parts.A @ dmu - v
    if want_theta_grad or want_z_grad:
        gamma_bar = np.where(floor_mask, dgamma_shared, 0.0)
        Abar = v @ dmu.T
        dkern, dZ = backprop_parts(
            model, parts, Abar, gamma_bar, want_z_grad=want_z_grad
        )
        dlik = likelihoods.lik_param_grads(parts.lik, model.y, mu[:, 0], gamma)
        out.dtheta = np.concatenate([dkern, dlik]) + prior_grad
        out.dZ = dZ
    return out


# ---------------------------------------------------------------------------
# Sampler-facing target
# ---------------------------------------------------------------------------


class McmcTarget:
    """Flattened (v, theta) view of log_qhat for the samplers.

    Coordinates are [v.ravel(), theta]; v is M x P, row-major.  Failed
    factorizations and nonfinite values are reported as -inf so the
    samplers reject the move.
    """

    def __init__(self, model):
        self.model = model
        self.M = model.num_inducing
        self.P = model.num_latent
        self.dim_v = self.M * self.P
        self.dim = self.dim_v + model.theta_dim

    def unflatten(self, x):
        v = x[: self.dim_v].reshape(self.M, self.P)
        return WhitenedState(v=v, theta=x[self.dim_v:])

    def value_and_grad(self, x):
        state = self.unflatten(x)
        try:
            res = log_qhat(state, self.model)
        except linalg.NotPositiveDefinite:
            return -np.inf, np.zeros_like(x)
        if not np.isfinite(res.value):
            return -np.inf, np.zeros_like(x)
        return res.value, np.concatenate([res.dv.ravel(), res.dtheta])

    def value_and_grad_v(self, x):
        """Value and gradient w.r.t. the v block only (theta chain skipped)."""
        state = self.unflatten(x)
        try:
            res = log_qhat(state, self.model, want_theta_grad=False)
        except linalg.NotPositiveDefinite:
            return -np.inf, np.zeros(self.dim_v)
        if not np.isfinite(res.value):
            return -np.inf, np.zeros(self.dim_v)
        return res.value, res.dv.ravel()

    def value(self, x):
        state = self.unflatten(x)
        try:
            res = log_qhat(state, self.model, want_v_grad=False, want_theta_grad=False)
        except linalg.NotPositiveDefinite:
            return -np.inf
        return res.value if np.isfinite(res.value) else -np.inf
