"""Chain-quality metrics: effective sample size, time-normalized ESS and
the potential scale reduction factor across parallel chains.
"""

from dataclasses import dataclass

import numpy as np


def _autocorr(x):
    """Autocorrelation function of a 1-D series via FFT (biased estimator)."""
    n = x.size
    x = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conjugate(f), nfft)[:n].real / n
    if acov[0] <= 0:
        return None
    return acov / acov[0]


@dataclass
class EssResult:
    ess: np.ndarray
    constant: np.ndarray  # flags: parameter had zero variance


def ess(draws, return_flags=False):
    """Per-parameter effective sample size S / (1 + 2 sum rho_k).

    Autocorrelations are truncated by Geyer's initial positive sequence:
    paired sums Gamma_m = rho_{2m} + rho_{2m+1} are accumulated while they
    stay positive.  Zero-variance parameters are flagged and reported as S.
    """
    draws = np.atleast_2d(np.asarray(draws, dtype=np.float64))
    if draws.ndim != 2:
        raise ValueError("expected an S x Q draw matrix")
    S, Q = draws.shape
    if S < 10:
        raise ValueError("need at least 10 retained samples")
    out = np.empty(Q)
    flags = np.zeros(Q, dtype=bool)
    for q in range(Q):
        rho = _autocorr(draws[:, q])
        if rho is None:
            out[q] = float(S)
            flags[q] = True
            continue
        # tau = -1 + 2 * sum of positive-sequence pair sums
        tau = -1.0
        m = 0
        while 2 * m + 1 < S:
            pair = rho[2 * m] + rho[2 * m + 1]
            if pair <= 0.0:
                break
            tau += 2.0 * pair
            m += 1
        tau = max(tau, 1.0 / S)
        out[q] = min(S / tau, float(S))
    if return_flags:
        return EssResult(ess=out, constant=flags)
    return out


def tn_ess(draws, wall_clock_seconds):
    """(min ESS / seconds, per-parameter ESS / seconds)."""
    if wall_clock_seconds <= 0:
        raise ValueError("wall clock must be positive")
    e = ess(draws)
    return float(np.min(e) / wall_clock_seconds), e / wall_clock_seconds


def psrf(chains):
    """Gelman-Rubin potential scale reduction factor per parameter.

    chains : list of equally shaped S x Q draw matrices (>= 2 chains).
    Degenerate parameters (zero within- and between-chain variance) are
    reported as exactly 1.0.
    """
    mats = [np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in chains]
    if len(mats) < 2:
        raise ValueError("need at least two chains")
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise ValueError("chains must have equal shapes")
    draws = np.stack(mats)  # m x S x Q
    m, S, _ = draws.shape
    means = draws.mean(axis=1)                      # m x Q
    W = draws.var(axis=1, ddof=1).mean(axis=0)      # Q
    B_over_n = means.var(axis=0, ddof=1)            # Q
    V = (S - 1) / S * W + (1.0 + 1.0 / m) * B_over_n
    out = np.empty(shape[1])
    for q in range(shape[1]):
        if W[q] <= 0:
            out[q] = 1.0 if B_over_n[q] <= 0 else np.inf
        else:
            out[q] = np.sqrt(V[q] / W[q])
    return out


def psrf_split(chains):
    """Split-chain PSRF: each chain halved before the standard computation."""
    halves = []
    for c in chains:
        c = np.atleast_2d(np.asarray(c))
        h = c.shape[0] // 2
        halves.extend([c[:h], c[h : 2 * h]])
    return psrf(halves)


def psrf_evolution(chains, num_points=20, min_length=10):
    """PSRF on growing prefixes, for convergence plots.

    Returns (prefix_lengths, values) with values shaped
    (num_points, Q).
    """
    S = np.atleast_2d(np.asarray(chains[0])).shape[0]
    lengths = np.unique(
        np.linspace(max(min_length, 2), S, num_points).astype(int)
    )
    vals = np.stack([psrf([np.atleast_2d(c)[:n] for c in chains]) for n in lengths])
    return lengths, vals


def worst_parameters(psrf_final, k=20):
    """Indices of the k largest final PSRF values, worst first."""
    order = np.argsort(psrf_final)[::-1]
    return order[: min(k, len(order))]


def save_report(path, min_ess, tn, acceptance=None, extra=None):
    """Structured-text diagnostics summary consumed by the plot emitter."""
    with open(path, "w") as fh:
        fh.write("# sgpmc diagnostics v1\n")
        fh.write(f"min_ess {min_ess!r}\n")
        fh.write(f"tn_ess {tn!r}\n")
        if acceptance is not None:
            fh.write(f"acceptance_rate {acceptance!r}\n")
        for key, val in (extra or {}).items():
            fh.write(f"{key} {val!r}\n")
