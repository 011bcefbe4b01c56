"""Predictions from a fitted Gaussian approximation or an MCMC chain.

Chain predictions Monte-Carlo average the sparse conditional over the
retained samples: mixture mean, mixture variance through the second
moment, and per-point predictive log densities by log-mean-exp.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import likelihoods, linalg, objective


@dataclass
class Prediction:
    mean: np.ndarray          # |X*| x P mixture mean of f
    variance: np.ndarray      # |X*| x P mixture variance of f
    log_density: np.ndarray   # |X*| predictive log density of y*
    extras: dict = field(default_factory=dict)


def _moments_for_sample(model, state, Xstar):
    parts = objective.compute_parts(model, state.theta, Xq=Xstar)
    mu = parts.A.T @ np.atleast_2d(state.v)
    gamma = np.maximum(parts.gamma_raw, 0.0)
    return mu, gamma, parts.lik


def _per_sample_density(model, lik, y, mu, gamma):
    if isinstance(model.likelihood, likelihoods.RobustMax):
        P = mu.shape[1]
        return likelihoods.predictive_density(
            lik, y, mu, np.tile(gamma[:, None], (1, P)), model._rule
        )
    return likelihoods.predictive_density(lik, y, mu[:, 0], gamma, model._rule)


def predict_chain(chain, model, Xstar, y_star=None, thin=1, max_skip_fraction=0.01):
    """Monte-Carlo prediction from retained (v, theta) samples.

    Per sample: conditional moments at Xstar; the mixture mean averages
    mu*, the mixture second moment averages gamma* + mu*^2, and predictive
    log densities aggregate by log-mean-exp.  Samples whose factorization
    fails are skipped and counted; more than ``max_skip_fraction`` of
    skips fails the run.
    """
    if len(chain) == 0:
        raise ValueError("empty chain")
    target = objective.McmcTarget(model)
    Xstar = np.atleast_2d(Xstar)
    P = model.num_latent
    Nq = Xstar.shape[0]

    idx = range(0, len(chain), thin)
    mean_acc = np.zeros((Nq, P))
    second_acc = np.zeros((Nq, P))
    rate_samples = [] if isinstance(model.likelihood, likelihoods.Poisson) else None
    prob_acc = (
        np.zeros((Nq, model.likelihood.num_classes))
        if isinstance(model.likelihood, likelihoods.RobustMax)
        else None
    )
    prob_one_acc = (
        np.zeros(Nq) if isinstance(model.likelihood, likelihoods.BernoulliProbit) else None
    )
    logdens = [] if y_star is not None else None
    used = 0
    skipped = 0
    for k in idx:
        state = target.unflatten(chain.samples[k])
        try:
            mu, gamma, lik = _moments_for_sample(model, state, Xstar)
        except linalg.NotPositiveDefinite:
            skipped += 1
            continue
        used += 1
        mean_acc += mu
        second_acc += gamma[:, None] + mu * mu
        if rate_samples is not None:
            rate_samples.append(np.exp(mu[:, 0] + 0.5 * gamma))
        if prob_acc is not None:
            probs = likelihoods.robustmax_class_probs(
                lik, mu, np.tile(gamma[:, None], (1, P)), model._rule
            )
            prob_acc += probs
        if prob_one_acc is not None:
            from scipy.special import ndtr

            prob_one_acc += ndtr(mu[:, 0] / np.sqrt(1.0 + gamma))
        if logdens is not None:
            logdens.append(_per_sample_density(model, lik, y_star, mu, gamma))
    total = used + skipped
    if used == 0 or skipped > max_skip_fraction * total:
        raise RuntimeError(
            f"too many unusable samples: {skipped}/{total} failed factorization"
        )

    mean = mean_acc / used
    variance = second_acc / used - mean * mean
    ld = (
        logsumexp(np.stack(logdens), axis=0) - np.log(used)
        if logdens is not None
        else None
    )
    extras = {"num_samples_used": used, "num_samples_skipped": skipped}
    if rate_samples is not None:
        extras["rate_samples"] = np.stack(rate_samples)
    if prob_acc is not None:
        extras["class_probs"] = prob_acc / used
    if prob_one_acc is not None:
        extras["prob_one"] = prob_one_acc / used
    return Prediction(mean=mean, variance=variance, log_density=ld, extras=extras)


def predict_vb(approx, model, Xstar, y_star=None):
    """Gaussian predictive marginals from the variational approximation.

    q(f*) has mean A^T m and variance gamma + rowsum((A^T L)^2) per latent;
    predictive densities integrate the likelihood against these marginals.
    """
    Xstar = np.atleast_2d(Xstar)
    parts = objective.compute_parts(model, approx.theta, Xq=Xstar, Z=approx.Z)
    gamma = np.maximum(parts.gamma_raw, 0.0)
    P = approx.num_latent
    mean = parts.A.T @ approx.m
    var = np.empty_like(mean)
    for p in range(P):
        T = parts.A.T @ approx.L[p]
        var[:, p] = gamma + np.einsum("nm,nm->n", T, T)

    ld = None
    if y_star is not None:
        if isinstance(model.likelihood, likelihoods.RobustMax):
            ld = likelihoods.predictive_density(parts.lik, y_star, mean, var, model._rule)
        else:
            ld = likelihoods.predictive_density(
                parts.lik, y_star, mean[:, 0], var[:, 0], model._rule
            )
    extras = {}
    if isinstance(model.likelihood, likelihoods.RobustMax):
        extras["class_probs"] = likelihoods.robustmax_class_probs(
            parts.lik, mean, var, model._rule
        )
    if isinstance(model.likelihood, likelihoods.BernoulliProbit):
        from scipy.special import ndtr

        extras["prob_one"] = ndtr(mean[:, 0] / np.sqrt(1.0 + var[:, 0]))
    if isinstance(model.likelihood, likelihoods.Poisson):
        extras["rate_mean"] = np.exp(mean[:, 0] + 0.5 * var[:, 0])
    return Prediction(mean=mean, variance=var, log_density=ld, extras=extras)


@dataclass
class Scores:
    mean_log_density: float
    accuracy: float = None
    per_point_log_density: np.ndarray = None


def score(prediction, y_test, model):
    """Held-out metrics: mean log predictive density, plus accuracy for
    classification tasks."""
    ld = prediction.log_density
    if ld is None:
        raise ValueError("prediction carries no densities; pass y_star when predicting")
    acc = None
    lik = model.likelihood
    if isinstance(lik, likelihoods.RobustMax):
        labels = np.argmax(prediction.extras["class_probs"], axis=1)
        acc = float(np.mean(labels == np.asarray(y_test, dtype=np.intp)))
    elif isinstance(lik, likelihoods.BernoulliProbit):
        p1 = prediction.extras["prob_one"]
        acc = float(np.mean((p1 > 0.5) == (np.asarray(y_test) > 0.5)))
    return Scores(
        mean_log_density=float(np.mean(ld)),
        accuracy=acc,
        per_point_log_density=ld,
    )
