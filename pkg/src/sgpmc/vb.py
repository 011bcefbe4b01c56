"""Gaussian variational fitting in the whitened parameterization.

Step one of the inference strategy: maximize the ELBO over the variational
mean and lower-triangular factor per latent function, the hyperparameters,
and (in the second phase) the inducing inputs.  The fitted approximation
initializes the samplers.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import likelihoods, objective
from .objective import GAMMA_FLOOR

_LOG2PI = math.log(2.0 * math.pi)


class NonFiniteElbo(Exception):
    """Raised when the objective becomes nonfinite; carries the iterate."""

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


@dataclass
class GaussianApprox:
    """Whitened Gaussian approximation q(v_p) = N(m_p, L_p L_p^T).

    m : (M, P) means; L : (P, M, M) lower-triangular factors with positive
    diagonals; theta : unconstrained hyperparameters; Z : inducing inputs.
    """

    m: np.ndarray
    L: np.ndarray
    theta: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        self.m = np.atleast_2d(np.asarray(self.m, dtype=np.float64))
        self.L = np.asarray(self.L, dtype=np.float64)
        if self.L.ndim == 2:
            self.L = self.L[None]
        if np.any(np.diagonal(self.L, axis1=1, axis2=2) <= 0):
            raise ValueError("L factors need strictly positive diagonals")

    @property
    def num_inducing(self):
        return self.m.shape[0]

    @property
    def num_latent(self):
        return self.m.shape[1]


# ---------------------------------------------------------------------------
# k-means initialization of the inducing inputs
# ---------------------------------------------------------------------------


def kmeans_init(X, M, seed=0, max_iter=100, tol=1e-6):
    """M cluster centers of X by Lloyd's algorithm with k-means++ seeding.

    Deterministic given the seed; empty clusters are reseeded at the point
    farthest from its assigned center.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    N = X.shape[0]
    if M > N:
        raise ValueError(f"cannot place {M} centers on {N} points")
    rng = np.random.default_rng(seed)

    centers = np.empty((M, X.shape[1]))
    centers[0] = X[rng.integers(N)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, M):
        total = d2.sum()
        if total <= 0:
            centers[j:] = X[rng.choice(N, M - j, replace=False)]
            break
        centers[j] = X[rng.choice(N, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((X - centers[j]) ** 2, axis=1))

    prev_inertia = np.inf
    for _ in range(max_iter):
        dist = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assign = np.argmin(dist, axis=1)
        inertia = float(dist[np.arange(N), assign].sum())
        for j in range(M):
            members = assign == j
            if members.any():
                centers[j] = X[members].mean(axis=0)
            else:
                centers[j] = X[np.argmax(dist[np.arange(N), assign])]
        if prev_inertia - inertia <= tol * max(prev_inertia, 1e-30):
            break
        prev_inertia = inertia
    return centers


# ---------------------------------------------------------------------------
# ELBO and gradients
# ---------------------------------------------------------------------------


@dataclass
class ElboResult:
    value: float
    exp_ll: float
    kl: float
    log_prior: float
    dm: np.ndarray = None
    dL: np.ndarray = None
    dtheta: np.ndarray = None
    dZ: np.ndarray = None


def elbo(approx, model, want_grads=True, want_z_grad=True):
    """Evidence lower bound and gradients w.r.t. (m, L, theta, Z).

    value = sum_n E_q[log p(y_n|f_n)] - sum_p KL[q(v_p) || N(0, I)]
            + log p(theta),
    with marginals q(f_n) of mean A^T m and variance
    gamma + rowsum((A^T L) ** 2).
    """
    m, L = approx.m, approx.L
    M, P = m.shape
    parts = objective.compute_parts(model, approx.theta, Z=approx.Z)
    gamma = np.maximum(parts.gamma_raw, GAMMA_FLOOR)
    floor_mask = parts.gamma_raw > GAMMA_FLOOR

    mu = parts.A.T @ m  # N x P
    T = np.stack([parts.A.T @ L[p] for p in range(P)])  # P x N x M
    s = gamma[:, None] + np.einsum("pnm,pnm->pn", T, T).T  # N x P

    if isinstance(model.likelihood, likelihoods.RobustMax):
        lik_val, dmu, ds = likelihoods.robustmax_expectations(
            parts.lik, model.y, mu, s, model._rule
        )
    else:
        lik_val, dmu_1d, ds_1d = likelihoods.variational_expectations(
            parts.lik, model.y, mu[:, 0], s[:, 0], model._rule
        )
        dmu, ds = dmu_1d[:, None], ds_1d[:, None]

    diags = np.diagonal(L, axis1=1, axis2=2)
    kl = 0.5 * float(
        np.sum(m * m) + np.sum(L * L) - M * P - 2.0 * np.sum(np.log(diags))
    )
    prior_val, prior_grad = model.log_prior(approx.theta)
    exp_ll = float(np.sum(lik_val))
    value = exp_ll - kl + prior_val

    out = ElboResult(value=value, exp_ll=exp_ll, kl=kl, log_prior=prior_val)
    if not want_grads:
        return out
    if not np.isfinite(value):
        raise NonFiniteElbo("ELBO is not finite", iterate=approx)

    Tbar = 2.0 * ds.T[:, :, None] * T  # P x N x M
    dL = np.empty_like(L)
    Abar = m @ dmu.T  # M x N
    for p in range(P):
        dL[p] = np.tril(parts.A @ Tbar[p]) - np.tril(L[p])
        dL[p][np.diag_indices(M)] += 1.0 / diags[p]
        Abar += L[p] @ Tbar[p].T
    out.dm = parts.A @ dmu - m
    out.dL = dL

    gamma_bar = np.where(floor_mask, ds.sum(axis=1), 0.0)
    dkern, dZ = objective.backprop_parts(
        model, parts, Abar, gamma_bar, Z=approx.Z, want_z_grad=want_z_grad
    )
    dlik = likelihoods.lik_param_grads(parts.lik, model.y, mu[:, 0], s[:, 0])
    out.dtheta = np.concatenate([dkern, dlik]) + prior_grad
    out.dZ = dZ
    return out


def gaussian_optimal_qu(model, theta, Z=None):
    """Closed-form optimal (m, L) for the Gaussian likelihood at fixed
    (theta, Z): m = (I + A A^T / s2)^{-1} A y / s2, cov = (I + A A^T/s2)^{-1}."""
    if not isinstance(model.likelihood, likelihoods.Gaussian):
        raise TypeError("closed-form optimum requires the Gaussian likelihood")
    parts = objective.compute_parts(model, theta, Z=Z)
    s2 = parts.lik.noise_variance
    M = parts.A.shape[0]
    Q = np.eye(M) + parts.A @ parts.A.T / s2
    m = np.linalg.solve(Q, parts.A @ model.y / s2)
    cov = np.linalg.inv(Q)
    cov = 0.5 * (cov + cov.T)
    L = np.linalg.cholesky(cov)
    return m[:, None], L[None]


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


@dataclass
class VbConfig:
    iters_fixed: int = 200       # phase A: Z held at its initial value
    iters_free: int = 500        # phase B: all variables free
    learning_rate: float = 0.02
    optimizer: str = "adam"      # "adam" | "lsearch"
    polish: bool = True          # L-BFGS refinement after phase B
    polish_maxiter: int = 1000
    grad_tol: float = 1e-5
    seed: int = 0
    optimize_z: bool = True
    m_init_std: float = 0.1
    l_init: float = 0.1


class _Packing:
    """Flat view of (m, L, theta[, Z]) with log-diagonal L parameterization."""

    def __init__(self, M, P, theta_dim, D, with_z):
        self.M, self.P, self.D, self.with_z = M, P, D, with_z
        self.theta_dim = theta_dim
        self.tril = np.tril_indices(M)
        self.n_tril = len(self.tril[0])
        self.sizes = [M * P, P * self.n_tril, theta_dim] + ([M * D] if with_z else [])
        self.dim = sum(self.sizes)

    def pack(self, m, L, theta, Z):
        blocks = [m.ravel()]
        for p in range(self.P):
            Lw = L[p].copy()
            Lw[np.diag_indices(self.M)] = np.log(np.diag(Lw))
            blocks.append(Lw[self.tril])
        blocks.append(theta)
        if self.with_z:
            blocks.append(Z.ravel())
        return np.concatenate(blocks)

    def unpack(self, x, Z_fixed=None):
        i = 0
        m = x[: self.M * self.P].reshape(self.M, self.P)
        i = self.M * self.P
        L = np.zeros((self.P, self.M, self.M))
        for p in range(self.P):
            L[p][self.tril] = x[i : i + self.n_tril]
            i += self.n_tril
            d = np.diag_indices(self.M)
            L[p][d] = np.exp(L[p][d])
        theta = x[i : i + self.theta_dim]
        i += self.theta_dim
        Z = x[i:].reshape(self.M, self.D) if self.with_z else Z_fixed
        return m, L, theta, Z

    def pack_grads(self, res, L):
        blocks = [res.dm.ravel()]
        for p in range(self.P):
            g = res.dL[p].copy()
            d = np.diag_indices(self.M)
            g[d] *= np.diag(L[p])
            blocks.append(g[self.tril])
        blocks.append(res.dtheta)
        if self.with_z:
            blocks.append(res.dZ.ravel())
        return np.concatenate(blocks)


def _adam(fun, x0, iters, lr, grad_tol, track):
    x = x0.copy()
    mt = np.zeros_like(x)
    vt = np.zeros_like(x)
    for it in range(iters):
        f, g = fun(x)
        track(f, x)
        if np.linalg.norm(g) < grad_tol:
            break
        mt = 0.9 * mt + 0.1 * g
        vt = 0.999 * vt + 0.001 * g * g
        mhat = mt / (1.0 - 0.9 ** (it + 1))
        vhat = vt / (1.0 - 0.999 ** (it + 1))
        x = x + lr * mhat / (np.sqrt(vhat) + 1e-8)
    return x


def _line_search_ascent(fun, x0, iters, lr, grad_tol, track):
    x = x0.copy()
    f, g = fun(x)
    track(f, x)
    step = lr
    for _ in range(iters):
        if np.linalg.norm(g) < grad_tol:
            break
        while step > 1e-14:
            x_new = x + step * g
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and f_new >= f:
                break
            step *= 0.5
        else:
            break
        x, f, g = x_new, f_new, g_new
        track(f, x)
        step = min(step * 1.3, 1e3)
    return x


def fit(model, config=None):
    """Two-phase ELBO maximization; returns the best-ELBO iterate.

    Phase A runs with Z fixed, phase B frees all variables (Z included when
    ``optimize_z``); an optional L-BFGS polish follows.  Deterministic
    given ``config.seed``.
    """
    config = config or VbConfig()
    rng = np.random.default_rng(config.seed)
    M, P = model.num_inducing, model.num_latent
    D = model.Z.shape[1]

    m = rng.normal(0.0, config.m_init_std, (M, P))
    L = np.tile(config.l_init * np.eye(M), (P, 1, 1))
    theta = model.initial_theta()
    Z = model.Z.copy()

    best = {"value": -np.inf, "approx": None}
    trace = []

    def run_phase(m, L, theta, Z, iters, with_z):
        packing = _Packing(M, P, model.theta_dim, D, with_z)
        x0 = packing.pack(m, L, theta, Z)

        def negate_free(x):
            mm, LL, tt, ZZ = packing.unpack(x, Z_fixed=Z)
            approx = GaussianApprox(m=mm, L=LL, theta=tt, Z=ZZ)
            res = elbo(approx, model, want_z_grad=with_z)
            return res.value, packing.pack_grads(res, LL), approx

        def fun(x):
            v, g, _ = negate_free(x)
            return v, g

        def track(f, x):
            trace.append(f)
            if f > best["value"]:
                mm, LL, tt, ZZ = packing.unpack(x, Z_fixed=Z)
                best["value"] = f
                best["approx"] = GaussianApprox(m=mm, L=LL, theta=tt, Z=ZZ)

        stepper = _adam if config.optimizer == "adam" else _line_search_ascent
        x = stepper(fun, x0, iters, config.learning_rate, config.grad_tol, track)
        return packing.unpack(x, Z_fixed=Z), packing

    (m, L, theta, Z), _ = run_phase(m, L, theta, Z, config.iters_fixed, with_z=False)
    with_z = config.optimize_z
    if config.iters_free > 0:
        (m, L, theta, Z), _ = run_phase(m, L, theta, Z, config.iters_free, with_z=with_z)

    if config.polish:
        packing = _Packing(M, P, model.theta_dim, D, with_z)
        Z_fixed = Z

        def neg(x):
            mm, LL, tt, ZZ = packing.unpack(x, Z_fixed=Z_fixed)
            approx = GaussianApprox(m=mm, L=LL, theta=tt, Z=ZZ)
            try:
                res = elbo(approx, model, want_z_grad=with_z)
            except NonFiniteElbo:
                return 1e15, np.zeros(packing.dim)
            trace.append(res.value)
            if res.value > best["value"]:
                best["value"] = res.value
                best["approx"] = approx
            return -res.value, -packing.pack_grads(res, LL)

        x0 = packing.pack(m, L, theta, Z)
        minimize(
            neg,
            x0,
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": config.polish_maxiter, "gtol": config.grad_tol},
        )

    if best["approx"] is None:
        raise NonFiniteElbo("no finite ELBO iterate encountered")
    best["approx"].trace = np.asarray(trace)
    return best["approx"]


# ---------------------------------------------------------------------------
# Bound check and checkpointing
# ---------------------------------------------------------------------------


@dataclass
class BoundReport:
    elbo_bound: float       # exp_ll - kl at the supplied approximation
    dense_lml: float        # exact log marginal likelihood at matched theta
    gap: float


def dense_log_marginal(model, theta):
    """Exact Gaussian-likelihood log p(y | theta) by dense factorization."""
    from . import kernels, linalg

    kp, lik = model.split_theta(theta)
    if not isinstance(lik, likelihoods.Gaussian):
        raise TypeError("dense marginal likelihood requires the Gaussian likelihood")
    N = model.X.shape[0]
    K = kernels.kuf(kp, model.X, model.X)
    K = 0.5 * (K + K.T) + lik.noise_variance * np.eye(N)
    R, _ = linalg.cholesky(K, check_symmetry=False)
    alpha = linalg.tri_solve(R, model.y)
    return float(
        -0.5 * alpha @ alpha - np.sum(np.log(np.diag(R))) - 0.5 * N * _LOG2PI
    )


def elbo_bound_check(approx, model):
    """Verify ELBO <= exact log marginal likelihood (Gaussian likelihood).

    The comparison excludes the hyperparameter prior: the bound property
    holds per theta between (exp_ll - kl) and the dense marginal.
    """
    res = elbo(approx, model, want_grads=False)
    bound = res.exp_ll - res.kl
    lml = dense_log_marginal(model, approx.theta)
    return BoundReport(elbo_bound=bound, dense_lml=lml, gap=lml - bound)


CHECKPOINT_HEADER = "# sgpmc gaussian-approx checkpoint v1"


def save_checkpoint(path, approx):
    """Flat text record: dims, then theta, Z, m, and L row-major per latent."""
    M, P = approx.m.shape
    D = approx.Z.shape[1]
    with open(path, "w") as fh:
        fh.write(CHECKPOINT_HEADER + "\n")
        fh.write(f"M {M}\nP {P}\nD {D}\nT {len(approx.theta)}\n")
        for name, arr in (
            ("theta", approx.theta),
            ("Z", approx.Z),
            ("m", approx.m),
            ("L", approx.L),
        ):
            flat = np.asarray(arr).ravel()
            fh.write(name + " " + " ".join(repr(float(x)) for x in flat) + "\n")


def load_checkpoint(path):
    with open(path) as fh:
        header = fh.readline().strip()
        if header != CHECKPOINT_HEADER:
            raise ValueError(f"not a checkpoint file: {path}")
        dims = {}
        for _ in range(4):
            key, val = fh.readline().split()
            dims[key] = int(val)
        arrays = {}
        for _ in range(4):
            parts = fh.readline().split()
            arrays[parts[0]] = np.array([float(x) for x in parts[1:]])
    M, P, D, T = dims["M"], dims["P"], dims["D"], dims["T"]
    return GaussianApprox(
        m=arrays["m"].reshape(M, P),
        L=arrays["L"].reshape(P, M, M),
        theta=arrays["theta"],
        Z=arrays["Z"].reshape(M, D),
    )
