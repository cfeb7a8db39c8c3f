"""Expectation propagation for the Poisson observation model.

The Poisson likelihood is extended to real rates by the rectified transform
(counts are forced to zero for nonpositive rates) and decoupled from the
linear operator through the auxiliary variable u = Hx.  The augmented
posterior is approximated with four Gaussian factors:

* q_u0 (diagonal) for the count likelihood, refined from per-pixel 1D
  tilted moments: a two-piece truncated-Gaussian closed form when the count
  is zero, mode-centered Simpson quadrature otherwise;
* q_x1 / q_x0 for the x side, reusing the Gaussian-model machinery with the
  noise term replaced by the current diagonal q_u0;
* q_u1 (isotropic) for the coupling, fitted by the Newton isotropic KL
  update from quadratic forms of the x-side joint covariance.

One iteration runs q_u0, q_x1, q_u1, q_x0 in that order; convergence is
monitored on the x-side joint moments.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, log_ndtr, logsumexp

from .ep_gaussian import EPConfig, EPResult, EPState, GaussianFactor, update_q_x0, update_q_x1
from .gmm import AdaptedGMM
from .kl_updates import PRECISION_FLOOR, iso_kl_update
from .operators import DegradationOperator, all_row_quadratic_forms
from .partitions import Partition

__all__ = ["rectified_poisson_tilted", "run_ep_poisson"]

_SIMPSON_POINTS = 513
_SPAN_STD = 10.0
_LARGE_VARIANCE = 1e8


def _truncated_normal_moments(mu, sigma2, lower: bool):
    """Mean and variance of N(mu, sigma2) truncated to u > 0 (lower=True)
    or u <= 0 (lower=False), plus the log truncation probability.

    Hazards are evaluated through log_ndtr; deep-tail cases switch to the
    asymptotic expansion to avoid catastrophic cancellation.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.sqrt(sigma2)
    if lower:
        alpha = (0.0 - mu) / sigma          # standardized cut, keep u > alpha
        log_mass = log_ndtr(-alpha)
        log_phi = -0.5 * alpha ** 2 - 0.5 * np.log(2 * np.pi)
        lam = np.exp(log_phi - log_mass)    # phi(alpha) / (1 - Phi(alpha))
        deep = alpha > 25.0
        mean = np.where(deep, 0.0 + sigma * (1.0 / np.maximum(alpha, 1e-12)
                                             - 1.0 / np.maximum(alpha, 1e-12) ** 3),
                        mu + sigma * lam)
        var = np.where(deep, sigma2 / np.maximum(alpha, 1e-12) ** 2,
                       sigma2 * (1.0 + alpha * lam - lam ** 2))
        return mean, np.maximum(var, 0.0), log_mass
    # upper truncation u <= 0: mirror of the lower case for -u
    m_mean, m_var, log_mass = _truncated_normal_moments(-mu, sigma2, lower=True)
    return -m_mean, m_var, log_mass


def _tilted_zero_counts(mu1: np.ndarray, c1: float):
    """Closed-form moments of [e^{-u} 1(u>0) + 1(u<=0)] N(u; mu1, c1):
    a two-component mixture of truncated Gaussians.  The positive piece is
    exp(c1/2 - mu1) N(u; mu1 - c1, c1) restricted to u > 0."""
    mean_a, var_a, log_mass_a = _truncated_normal_moments(mu1 - c1, c1, lower=True)
    log_wa = 0.5 * c1 - mu1 + log_mass_a
    mean_b, var_b, log_wb = _truncated_normal_moments(mu1, c1, lower=False)

    log_z = logsumexp(np.stack([log_wa, log_wb]), axis=0)
    wa = np.exp(log_wa - log_z)
    wb = np.exp(log_wb - log_z)
    mean = wa * mean_a + wb * mean_b
    second = wa * (var_a + mean_a ** 2) + wb * (var_b + mean_b ** 2)
    return log_z, mean, np.maximum(second - mean ** 2, 0.0)


def _tilted_positive_counts(y: np.ndarray, mu1: np.ndarray, c1: float):
    """Simpson quadrature of u^y e^{-u} / y! * N(u; mu1, c1) on u > 0,
    centered at the integrand's log-mode with span +-10 effective std."""
    y = np.asarray(y, dtype=float)
    mu1 = np.asarray(mu1, dtype=float)
    # stationary point of g(u) = y log u - u - (u - mu1)^2 / (2 c1):
    # the positive root of u^2 + (c1 - mu1) u - y c1 = 0
    half_b = 0.5 * (c1 - mu1)
    mode = -half_b + np.sqrt(half_b ** 2 + y * c1)
    for _ in range(2):  # Newton polish of g'(u) = 0
        grad = y / mode - 1.0 - (mode - mu1) / c1
        hess = -y / mode ** 2 - 1.0 / c1
        mode = np.maximum(mode - grad / hess, 1e-300)
    std_eff = 1.0 / np.sqrt(y / mode ** 2 + 1.0 / c1)

    lo = np.maximum(mode - _SPAN_STD * std_eff, 1e-300)
    hi = mode + _SPAN_STD * std_eff
    t = np.linspace(0.0, 1.0, _SIMPSON_POINTS)
    u = lo[:, None] + (hi - lo)[:, None] * t[None, :]

    log_g = y[:, None] * np.log(u) - u - (u - mu1[:, None]) ** 2 / (2.0 * c1)
    g_max = y * np.log(mode) - mode - (mode - mu1) ** 2 / (2.0 * c1)
    f = np.exp(log_g - g_max[:, None])

    w = np.ones(_SIMPSON_POINTS)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    h = (hi - lo) / (_SIMPSON_POINTS - 1)
    z0 = (f @ w) * h / 3.0
    z1 = ((f * u) @ w) * h / 3.0
    z2 = ((f * u ** 2) @ w) * h / 3.0

    bad = ~np.isfinite(z0) | (z0 < 1e-300)
    safe_z0 = np.where(bad, 1.0, z0)
    mean = np.where(bad, mu1, z1 / safe_z0)
    var = np.where(bad, c1, z2 / safe_z0 - mean ** 2)
    log_z = np.where(
        bad, -np.inf,
        np.log(safe_z0) + g_max - gammaln(y + 1) - 0.5 * np.log(2 * np.pi * c1))
    return log_z, mean, np.maximum(var, 0.0), int(np.sum(bad))


def rectified_poisson_tilted_batch(y: np.ndarray, mu1: np.ndarray, c1: float,
                                   chunk: int = 4096):
    """Per-pixel tilted moments for all counts; returns
    (log Z, mean, variance, quadrature-failure count)."""
    y = np.asarray(y)
    mu1 = np.asarray(mu1, dtype=float)
    log_z = np.empty(y.size)
    mean = np.empty(y.size)
    var = np.empty(y.size)
    n_bad = 0

    zero = y == 0
    if np.any(zero):
        log_z[zero], mean[zero], var[zero] = _tilted_zero_counts(mu1[zero], c1)
    pos_idx = np.flatnonzero(~zero)
    for start in range(0, pos_idx.size, chunk):
        sel = pos_idx[start:start + chunk]
        lz, m, v, bad = _tilted_positive_counts(y[sel], mu1[sel], c1)
        log_z[sel], mean[sel], var[sel] = lz, m, v
        n_bad += bad
    return log_z, mean, var, n_bad


def rectified_poisson_tilted(y: int, mu1: float, c1: float):
    """Normalizing constant, mean, and variance of the 1D tilted density
    rectified-Poisson(y; u) * N(u; mu1, c1)."""
    if y < 0 or int(y) != y:
        raise ValueError("count must be a nonnegative integer")
    if c1 <= 0:
        raise ValueError("cavity variance must be positive")
    log_z, mean, var, _ = rectified_poisson_tilted_batch(
        np.array([y]), np.array([float(mu1)]), float(c1))
    return float(np.exp(log_z[0])), float(mean[0]), float(var[0])


@dataclass
class PoissonFactors:
    """u-side factor pair: q_u0 diagonal, q_u1 isotropic (natural params)."""

    prec_u0: np.ndarray
    eta_u0: np.ndarray
    prec_u1: float
    eta_u1: np.ndarray

    def u0_moments(self):
        c0 = 1.0 / self.prec_u0
        return self.eta_u0 * c0, c0

    def u1_moments(self):
        c1 = 1.0 / self.prec_u1
        return self.eta_u1 * c1, c1

    def joint_u_moments(self):
        prec = self.prec_u0 + self.prec_u1
        mean = (self.eta_u0 + self.eta_u1) / prec
        return mean, 1.0 / prec


def update_q_u0(factors: PoissonFactors, y: np.ndarray, config: EPConfig):
    """Count-likelihood update from the 1D tilted moments; nonpositive
    precisions escape to a large variance (1e8) before the mean update."""
    mu1, c1 = factors.u1_moments()
    _, t_mean, t_var, n_bad = rectified_poisson_tilted_batch(y, mu1, c1)

    prec_new = 1.0 / t_var - 1.0 / c1
    escapes = int(np.sum(prec_new <= 0)) + n_bad
    prec_new = np.where(prec_new <= 0, 1.0 / _LARGE_VARIANCE, prec_new)
    eta_new = t_mean * (prec_new + 1.0 / c1) - factors.eta_u1

    eps = config.damping
    factors.prec_u0 = eps * prec_new + (1 - eps) * factors.prec_u0
    factors.eta_u0 = eps * eta_new + (1 - eps) * factors.eta_u0
    return escapes


def update_q_u1(factors: PoissonFactors, state: EPState,
                operator: DegradationOperator, config: EPConfig):
    """Coupling update: per-pixel products of q_u0 with the Gaussian image
    of the x-side joint, then the isotropic Newton fit of the q_u1 precision.

    The Gaussian image of pixel n must exclude that pixel's own count
    information (its precision enters the x-side joint through the
    likelihood factor); a Sherman-Morrison step recovers the leave-one-out
    quantities from s_n = h_n Sigma* h_n^T and t_n = h_n m* at O(1) each.
    Without this correction the count information is double-counted and
    Q(u) drifts away from H Q(x) even under the identity operator.
    """
    s = all_row_quadratic_forms(operator, state.joint_cov())
    t = operator.apply(state.mean)
    mu0, c0 = factors.u0_moments()

    valid = s > 0
    s_safe = np.where(valid, s, 1.0)
    denom = 1.0 - factors.prec_u0 * s_safe
    loo_ok = valid & (denom > 1e-6)
    # fall back to the uncorrected values where the block approximation
    # leaves no removable contribution
    s_loo = np.where(loo_ok, s_safe / np.where(loo_ok, denom, 1.0), s_safe)
    t_loo = np.where(loo_ok,
                     (t - factors.prec_u0 * s_safe * mu0) / np.where(loo_ok, denom, 1.0),
                     t)

    t_var = np.where(valid, 1.0 / (factors.prec_u0 + 1.0 / s_loo), c0)
    t_mean = np.where(valid, t_var * (factors.eta_u0 + t_loo / s_loo), mu0)

    prec_new = iso_kl_update(t_var[valid], factors.prec_u0[valid],
                             init_precision=factors.prec_u1)
    eta_new = (prec_new + factors.prec_u0) * t_mean - factors.eta_u0

    eps = config.damping
    factors.prec_u1 = eps * prec_new + (1 - eps) * factors.prec_u1
    factors.eta_u1 = eps * eta_new + (1 - eps) * factors.eta_u1


def _write_trace(trace, record: dict) -> None:
    if trace is None:
        return
    if isinstance(trace, list):
        trace.append(record)
    else:
        trace.write(json.dumps(record) + "\n")


def run_ep_poisson(y: np.ndarray, operator: DegradationOperator,
                   adapted: AdaptedGMM, partition: Partition,
                   config: EPConfig | None = None, trace=None) -> EPResult:
    """Data-augmented EP for  y ~ Poisson(Hx)  with a GMM patch prior.

    All means start at y + 1 and all per-pixel variances at y + 1 (the
    isotropic q_u1 uses their mean).  The update order is q_u0, q_x1, q_u1,
    q_x0; the stopping rule matches the Gaussian loop (x-side moments).
    """
    config = config or EPConfig()
    y = np.asarray(y, dtype=float)
    n = partition.n_pixels
    if y.shape != (n,):
        raise ValueError("observation length does not match the partition")
    if np.any(y < 0) or np.any(y != np.rint(y)):
        raise ValueError("Poisson observations must be nonnegative integers")
    if isinstance(getattr(operator, "kernel", None), np.ndarray) and np.any(operator.kernel < 0):
        raise ValueError("Poisson models require nonnegative kernel entries")

    structure = config.resolve_structure(operator)
    rng = np.random.Generator(np.random.Philox(config.seed))
    init_mean = y + 1.0
    init_var = y + 1.0

    state = EPState(
        q0=GaussianFactor.from_moments(structure, partition, init_mean, init_var),
        q1=GaussianFactor.from_moments(structure, partition, init_mean, init_var),
        partition=partition,
    )
    state.sync()
    factors = PoissonFactors(
        prec_u0=1.0 / init_var,
        eta_u0=init_mean / init_var,
        prec_u1=1.0 / float(np.mean(init_var)),
        eta_u1=init_mean / float(np.mean(init_var)),
    )

    weights = None
    warnings = 0
    converged = False
    prev_mean = state.mean.copy()
    prev_var = state.marginal_var.copy()
    warm = None
    for iteration in range(1, config.max_iterations + 1):
        t0 = time.perf_counter()
        escapes = update_q_u0(factors, y, config)

        mu0, _ = factors.u0_moments()
        obs_weights = factors.prec_u0
        obs_eta = operator.apply_adjoint(obs_weights * mu0)
        cg_iters, w1 = update_q_x1(state, operator, obs_weights, obs_eta,
                                   config, rng, warm_start=warm)
        state.sync()
        warm = state.mean.copy()

        update_q_u1(factors, state, operator, config)

        weights_new, w0 = update_q_x0(state, adapted, config)
        if weights_new is not None:
            weights = weights_new
        state.sync()
        warnings += w0 + w1
        state.iteration = iteration

        dm2 = float(np.sum((state.mean - prev_mean) ** 2))
        dv2 = float(np.sum((state.marginal_var - prev_var) ** 2))
        _write_trace(trace, {
            "iteration": iteration, "dm2": dm2, "dvar2": dv2,
            "cg_iterations": cg_iters, "c1": 1.0 / factors.prec_u1,
            "negative_precision_escapes": escapes,
            "wall_time_s": time.perf_counter() - t0,
        })
        prev_mean = state.mean.copy()
        prev_var = state.marginal_var.copy()
        if dm2 < config.stop_tol * n and dv2 < config.stop_tol * n:
            converged = True
            break

    u_mean, u_var = factors.joint_u_moments()
    return EPResult(
        mean=state.mean.copy(),
        marginal_var=state.marginal_var.copy(),
        cov=state.joint_cov(),
        weights=weights,
        iterations=state.iteration,
        converged=converged,
        status="converged" if converged else "max_iterations",
        state=state,
        u_mean=u_mean,
        u_var=u_var,
        warnings=warnings,
    )
