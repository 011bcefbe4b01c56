"""Hamiltonian Monte Carlo over (v, theta) jointly, ESJD-based tuning, and
the Gibbs baseline (HMC on v conditional on theta, isotropic random-walk
Metropolis-Hastings on theta).

Targets are either callables ``x -> (logp, grad)`` or objects exposing
``value_and_grad`` (plus ``value_and_grad_v``/``value``/``dim_v`` for the
Gibbs sampler, as provided by sgpmc.objective.McmcTarget).  The mass
matrix is the identity; leapfrog counts are drawn uniformly from
{1, ..., L_max} each iteration.  Chains are bitwise reproducible given the
seed.
"""

import time
from dataclasses import dataclass, field

import numpy as np

DEFAULT_L_MAX_GRID = (1, 2, 5, 10, 20, 50)


@dataclass
class HmcConfig:
    step_size: float
    L_max: int = 10
    iterations: int = 10_000
    burn_in: int = 1_000
    seed: int = 0

    def __post_init__(self):
        if self.step_size < 0:
            raise ValueError("step_size must be nonnegative")
        if self.L_max < 1:
            raise ValueError("L_max must be at least 1")
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")


@dataclass
class GibbsConfig:
    v_step_size: float
    v_L_max: int = 10
    mh_step: float = 0.1
    iterations: int = 10_000
    burn_in: int = 1_000
    seed: int = 0


@dataclass
class Chain:
    """Retained samples (after burn-in) with per-iteration metadata."""

    samples: np.ndarray        # S x dim
    log_density: np.ndarray    # S
    accepted: np.ndarray       # S (bool); v-updates for the Gibbs sampler
    wall_clock_seconds: float
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.samples.shape[0]


def _as_value_and_grad(target):
    if callable(target):
        return target
    return target.value_and_grad


def leapfrog(value_and_grad, x, p, step_size, n_steps, grad=None):
    """Store-and-iterate leapfrog; returns (x, p, logp, grad, ok).

    ``ok`` is False as soon as a nonfinite position/gradient shows up, in
    which case the caller should reject.
    """
    if grad is None:
        _, grad = value_and_grad(x)
    x = x.copy()
    p = p + 0.5 * step_size * grad
    for i in range(n_steps):
        x = x + step_size * p
        logp, grad = value_and_grad(x)
        if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
            return x, p, -np.inf, grad, False
        if i < n_steps - 1:
            p = p + step_size * grad
    p = p + 0.5 * step_size * grad
    return x, p, logp, grad, True


def hmc_run(target, init, config):
    """Leapfrog HMC with identity mass and randomized trajectory lengths.

    Per iteration the number of leapfrog steps is uniform on
    {1, ..., L_max}; the Metropolis correction is applied to the joint
    Hamiltonian; nonfinite proposals are rejected.
    """
    vg = _as_value_and_grad(target)
    rng = np.random.default_rng(config.seed)
    x = np.array(init, dtype=np.float64)
    logp, grad = vg(x)
    if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
        raise ValueError("target is not finite at the initial point")

    keep = config.iterations - config.burn_in
    samples = np.empty((keep, x.size))
    log_density = np.empty(keep)
    accepted = np.zeros(keep, dtype=bool)
    n_accept = 0

    t0 = time.perf_counter()
    for it in range(config.iterations):
        p0 = rng.standard_normal(x.size)
        n_steps = int(rng.integers(1, config.L_max + 1))
        x_new, p_new, logp_new, grad_new, ok = leapfrog(
            vg, x, p0, config.step_size, n_steps, grad=grad
        )
        accept = False
        if ok:
            log_ratio = (logp_new - 0.5 * p_new @ p_new) - (logp - 0.5 * p0 @ p0)
            accept = np.log(rng.uniform()) < log_ratio
        if accept:
            x, logp, grad = x_new, logp_new, grad_new
            n_accept += 1
        if it >= config.burn_in:
            k = it - config.burn_in
            samples[k] = x
            log_density[k] = logp
            accepted[k] = accept
    wall = time.perf_counter() - t0

    return Chain(
        samples=samples,
        log_density=log_density,
        accepted=accepted,
        wall_clock_seconds=wall,
        meta={
            "kind": "hmc",
            "acceptance_rate": n_accept / config.iterations,
            "config": config,
        },
    )


# ---------------------------------------------------------------------------
# ESJD tuning
# ---------------------------------------------------------------------------


@dataclass
class TuneResult:
    config: HmcConfig
    records: list  # (step_size, L_max, esjd, score, acceptance)


def esjd(samples):
    """Mean squared Euclidean jump between successive states."""
    if samples.shape[0] < 2:
        return 0.0
    d = np.diff(samples, axis=0)
    return float(np.mean(np.sum(d * d, axis=1)))


def tune(
    target,
    init,
    L_max_grid=DEFAULT_L_MAX_GRID,
    budget=30,
    samples_per=30,
    step_range=(1e-3, 2.0),
    penalize=True,
    seed=0,
):
    """Pick (step_size, L_max) by maximizing ESJD penalized by sqrt(L_max).

    Random log-uniform search over the first half of the budget, then
    local refinement around the incumbent; each candidate is scored with a
    short pilot chain from ``init``.
    """
    if budget < 1:
        raise ValueError("need at least one tuning evaluation")
    rng = np.random.default_rng(seed)
    grid = sorted(L_max_grid)
    lo, hi = np.log(step_range[0]), np.log(step_range[1])

    records = []
    best = None  # (score, step, L_max)

    def evaluate(step, L_max, k):
        cfg = HmcConfig(
            step_size=step,
            L_max=L_max,
            iterations=samples_per,
            burn_in=0,
            seed=seed * 100003 + 7919 * k,
        )
        chain = hmc_run(target, init, cfg)
        j = esjd(chain.samples)
        score = j / np.sqrt(L_max) if penalize else j
        records.append(
            (step, L_max, j, score, chain.meta["acceptance_rate"])
        )
        return score

    n_explore = max(1, budget // 2)
    for k in range(budget):
        if k < n_explore or best is None:
            step = float(np.exp(rng.uniform(lo, hi)))
            L_max = int(grid[rng.integers(len(grid))])
        else:
            _, step0, L0 = best
            step = float(step0 * np.exp(rng.normal(0.0, 0.3)))
            step = float(np.clip(step, step_range[0], step_range[1]))
            i0 = grid.index(L0)
            L_max = grid[int(np.clip(i0 + rng.integers(-1, 2), 0, len(grid) - 1))]
        score = evaluate(step, L_max, k)
        if best is None or score > best[0]:
            best = (score, step, L_max)

    if all(not np.isfinite(r[2]) or r[2] == 0.0 for r in records):
        raise RuntimeError(
            "tuning failed: no pilot chain moved; records: " + repr(records)
        )
    _, step, L_max = best
    return TuneResult(config=HmcConfig(step_size=step, L_max=L_max), records=records)


def tune_mh(logp, init, budget=30, samples_per=30, step_range=(1e-3, 10.0), seed=0):
    """ESJD tuning of an isotropic random-walk MH step size (no penalty)."""
    rng = np.random.default_rng(seed)
    lo, hi = np.log(step_range[0]), np.log(step_range[1])
    records = []
    best = None
    n_explore = max(1, budget // 2)
    for k in range(budget):
        if k < n_explore or best is None:
            step = float(np.exp(rng.uniform(lo, hi)))
        else:
            step = float(np.clip(best[1] * np.exp(rng.normal(0.0, 0.3)), *step_range))
        sub = np.random.default_rng(seed * 99991 + 31 * k)
        x = np.array(init, dtype=np.float64)
        f = logp(x)
        acc = 0
        draws = np.empty((samples_per, x.size))
        for t in range(samples_per):
            prop = x + step * sub.standard_normal(x.size)
            f_new = logp(prop)
            if np.log(sub.uniform()) < f_new - f:
                x, f = prop, f_new
                acc += 1
            draws[t] = x
        j = esjd(draws)
        records.append((step, j, acc / samples_per))
        if best is None or j > best[0]:
            best = (j, step)
    return best[1], records


# ---------------------------------------------------------------------------
# Gibbs baseline
# ---------------------------------------------------------------------------


def gibbs_run(target, init, config):
    """Alternate an HMC update of v at fixed theta with an isotropic
    random-walk MH update of theta, in the whitened representation.

    ``target`` must expose value_and_grad_v, value and dim_v (see
    objective.McmcTarget).
    """
    rng = np.random.default_rng(config.seed)
    x = np.array(init, dtype=np.float64)
    dv = target.dim_v
    logp, grad_v = target.value_and_grad_v(x)
    if not np.isfinite(logp):
        raise ValueError("target is not finite at the initial point")

    keep = config.iterations - config.burn_in
    samples = np.empty((keep, x.size))
    log_density = np.empty(keep)
    accepted_v = np.zeros(keep, dtype=bool)
    accepted_t = np.zeros(keep, dtype=bool)
    nav = nat = 0

    def vg_v(xfull):
        return target.value_and_grad_v(xfull)

    t0 = time.perf_counter()
    for it in range(config.iterations):
        # (a) HMC on the v block, theta fixed
        p0 = rng.standard_normal(dv)
        n_steps = int(rng.integers(1, config.v_L_max + 1))
        xv = x.copy()
        p = p0 + 0.5 * config.v_step_size * grad_v
        ok = True
        logp_new, grad_new = logp, grad_v
        for i in range(n_steps):
            xv[:dv] = xv[:dv] + config.v_step_size * p
            logp_new, grad_new = vg_v(xv)
            if not (np.isfinite(logp_new) and np.all(np.isfinite(grad_new))):
                ok = False
                break
            if i < n_steps - 1:
                p = p + config.v_step_size * grad_new
        acc_v = False
        if ok:
            p = p + 0.5 * config.v_step_size * grad_new
            log_ratio = (logp_new - 0.5 * p @ p) - (logp - 0.5 * p0 @ p0)
            acc_v = np.log(rng.uniform()) < log_ratio
        if acc_v:
            x, logp, grad_v = xv, logp_new, grad_new
            nav += 1

        # (b) isotropic random-walk MH on theta, v fixed
        x_prop = x.copy()
        x_prop[dv:] = x_prop[dv:] + config.mh_step * rng.standard_normal(x.size - dv)
        logp_prop = target.value(x_prop)
        acc_t = np.log(rng.uniform()) < logp_prop - logp
        if acc_t:
            x = x_prop
            logp, grad_v = target.value_and_grad_v(x)
            nat += 1

        if it >= config.burn_in:
            k = it - config.burn_in
            samples[k] = x
            log_density[k] = logp
            accepted_v[k] = acc_v
            accepted_t[k] = acc_t
    wall = time.perf_counter() - t0

    return Chain(
        samples=samples,
        log_density=log_density,
        accepted=accepted_v,
        wall_clock_seconds=wall,
        meta={
            "kind": "gibbs",
            "acceptance_rate": nav / config.iterations,
            "theta_acceptance_rate": nat / config.iterations,
            "theta_accepted": accepted_t,
            "config": config,
        },
    )


def tune_gibbs(target, init, budget=30, samples_per=30, L_max_grid=DEFAULT_L_MAX_GRID,
               seed=0):
    """Tune both Gibbs sub-kernels by ESJD.

    The v-updates are not penalized for trajectory length (they are cheap
    relative to hyperparameter moves); the MH step is tuned on the theta
    conditional with v frozen at the initial value.
    """
    dv = target.dim_v

    class _VTarget:
        def __call__(self, xv):
            xfull = np.concatenate([xv, init[dv:]])
            logp, g = target.value_and_grad_v(xfull)
            return logp, g

    v_res = tune(
        _VTarget(),
        init[:dv],
        L_max_grid=L_max_grid,
        budget=budget,
        samples_per=samples_per,
        penalize=False,
        seed=seed,
    )

    def logp_theta(th):
        return target.value(np.concatenate([init[:dv], th]))

    mh_step, mh_records = tune_mh(
        logp_theta, init[dv:], budget=budget, samples_per=samples_per, seed=seed + 1
    )
    cfg = GibbsConfig(
        v_step_size=v_res.config.step_size,
        v_L_max=v_res.config.L_max,
        mh_step=mh_step,
    )
    return cfg, {"v": v_res.records, "mh": mh_records}


# ---------------------------------------------------------------------------
# Chain storage (columnar text)
# ---------------------------------------------------------------------------


def save_chain(path, chain, column_names=None):
    """One record per retained sample: index, log-density, accept flag and
    the flattened coordinates.  Wall-clock lives in the run's timing file,
    not here, so reruns with equal seeds are byte-identical."""
    dim = chain.samples.shape[1]
    if column_names is None:
        column_names = [f"x{i}" for i in range(dim)]
    if len(column_names) != dim:
        raise ValueError("column_names length mismatch")
    with open(path, "w") as fh:
        fh.write("# sgpmc chain v1 kind=" + chain.meta.get("kind", "hmc") + "\n")
        fh.write("iter log_density accepted " + " ".join(column_names) + "\n")
        for k in range(len(chain)):
            row = [str(k), repr(float(chain.log_density[k])), str(int(chain.accepted[k]))]
            row.extend(repr(float(v)) for v in chain.samples[k])
            fh.write(" ".join(row) + "\n")


def load_chain(path):
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("# sgpmc chain"):
            raise ValueError(f"not a chain file: {path}")
        kind = header.strip().split("kind=")[-1]
        fh.readline()  # column names
        data = np.loadtxt(fh, ndmin=2)
    return Chain(
        samples=data[:, 3:],
        log_density=data[:, 1],
        accepted=data[:, 2].astype(bool),
        wall_clock_seconds=0.0,
        meta={"kind": kind},
    )


def save_tuning_report(path, result):
    with open(path, "w") as fh:
        fh.write("# sgpmc tuning report v1\n")
        fh.write(
            f"chosen step_size {result.config.step_size!r} L_max {result.config.L_max}\n"
        )
        fh.write("step_size L_max esjd score acceptance\n")
        for step, L, j, score, acc in result.records:
            fh.write(f"{step!r} {L} {j!r} {score!r} {acc!r}\n")
