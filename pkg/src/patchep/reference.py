"""Independent ground-truth machinery for validation.

Everything here deliberately avoids the production EP code paths: moments
are computed with dense linear algebra, explicit enumeration, brute-force
quadrature, or MCMC.  These oracles back the test suite and the ``verify``
command.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln, logsumexp

from .gmm import AdaptedGMM
from .operators import DegradationOperator
from .partitions import Partition

__all__ = [
    "BlockPosterior",
    "exact_diagonal_gaussian_posterior",
    "dense_operator",
    "dense_reference_moments",
    "sample_prior_image",
    "naive_full_ep",
    "mcmc_poisson_reference",
]


@dataclass
class BlockPosterior:
    """Exact per-block mixture posterior (diagonal H, Gaussian noise)."""

    weights: list          # per block, (K,)
    means: list            # per block, (b,)
    covs: list             # per block, (b, b)
    mean: np.ndarray       # global posterior mean
    marginal_var: np.ndarray


def _gaussian_logpdf(x, mean, cov):
    dim = x.size
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise np.linalg.LinAlgError("covariance not positive definite")
    diff = x - mean
    return -0.5 * (dim * np.log(2 * np.pi) + logdet + diff @ np.linalg.solve(cov, diff))


def exact_diagonal_gaussian_posterior(y: np.ndarray, operator: DegradationOperator,
                                      sigma2: float, adapted: AdaptedGMM,
                                      partition: Partition) -> BlockPosterior:
    """Closed-form posterior for diagonal H: per block, a conjugate GMM
    update with the likelihood restricted to the observed pixels."""
    if not operator.is_diagonal:
        raise ValueError("exact posterior requires a diagonal operator")
    y = np.asarray(y, dtype=float)
    diag_h = operator.diag_gram()  # squared diagonal entries of H
    n = partition.n_pixels

    all_w, all_m, all_c = [], [], []
    mean = np.empty(n)
    mvar = np.empty(n)
    for j, idx in enumerate(partition.blocks):
        local = partition.local_indices[j]
        prior = adapted if len(local) == adapted.dim else adapted.marginal(local)
        b = len(idx)
        obs_prec = diag_h[idx] / sigma2
        obs = obs_prec > 0
        eta = np.where(obs, y[idx] / sigma2, 0.0)

        k = prior.n_components
        log_w = np.log(prior.weights).copy()
        means_k = np.empty((k, b))
        covs_k = np.empty((k, b, b))
        for comp in range(k):
            prior_prec = np.linalg.inv(prior.covs[comp])
            post_prec = prior_prec + np.diag(obs_prec)
            cov = np.linalg.inv(post_prec)
            cov = 0.5 * (cov + cov.T)
            means_k[comp] = cov @ (prior_prec @ prior.means[comp] + eta)
            covs_k[comp] = cov
            if np.any(obs):
                sub = np.ix_(obs, obs)
                marg_cov = prior.covs[comp][sub] + sigma2 * np.eye(int(obs.sum()))
                log_w[comp] += _gaussian_logpdf(y[idx][obs], prior.means[comp][obs], marg_cov)
        log_w -= logsumexp(log_w)
        w = np.exp(log_w)
        mix_mean = w @ means_k
        mix_cov = np.einsum("k,kab->ab", w, covs_k)
        mix_cov += np.einsum("k,ka,kb->ab", w, means_k, means_k)
        mix_cov -= np.outer(mix_mean, mix_mean)
        mix_cov = 0.5 * (mix_cov + mix_cov.T)

        all_w.append(w)
        all_m.append(mix_mean)
        all_c.append(mix_cov)
        mean[idx] = mix_mean
        mvar[idx] = np.diag(mix_cov)
    return BlockPosterior(all_w, all_m, all_c, mean, mvar)


def dense_operator(operator: DegradationOperator) -> np.ndarray:
    """Materialize H column by column (N <= 1024 guard)."""
    n = operator.n_pixels
    if n > 1024:
        raise ValueError("dense materialization limited to N <= 1024")
    h = np.empty((n, n))
    eye = np.eye(n)
    for m in range(n):
        h[:, m] = operator.apply(eye[m])
    return h


def dense_reference_moments(operator: DegradationOperator, obs_weights: np.ndarray,
                            omega0: np.ndarray, rhs: np.ndarray):
    """Exact mean and full covariance of N(.; Q^{-1} rhs, Q^{-1}) with
    Q = H^T W H + Omega0, by dense assembly and factorization."""
    h = dense_operator(operator)
    q = h.T @ (np.asarray(obs_weights)[:, None] * h) + np.asarray(omega0)
    cov = np.linalg.inv(q)
    cov = 0.5 * (cov + cov.T)
    return cov @ np.asarray(rhs), cov


def sample_prior_image(adapted: AdaptedGMM, partition: Partition,
                       rng: np.random.Generator) -> np.ndarray:
    """Draw one image from the patch prior (independent blocks)."""
    x = np.empty(partition.n_pixels)
    for j, idx in enumerate(partition.blocks):
        local = partition.local_indices[j]
        prior = adapted if len(local) == adapted.dim else adapted.marginal(local)
        comp = rng.choice(prior.n_components, p=prior.weights)
        chol = np.linalg.cholesky(prior.covs[comp])
        x[idx] = prior.means[comp] + chol @ rng.standard_normal(len(idx))
    return x


def _tilted_gmm_block(prior: AdaptedGMM, cav_mean: np.ndarray, cav_cov: np.ndarray):
    """Inline tilted-GMM moments (independent of the production kernel)."""
    k, b = prior.n_components, cav_mean.size
    log_w = np.empty(k)
    means = np.empty((k, b))
    covs = np.empty((k, b, b))
    cav_prec = np.linalg.inv(cav_cov)
    for comp in range(k):
        log_w[comp] = np.log(prior.weights[comp]) + _gaussian_logpdf(
            cav_mean, prior.means[comp], cav_cov + prior.covs[comp])
        prior_prec = np.linalg.inv(prior.covs[comp])
        cov = np.linalg.inv(prior_prec + cav_prec)
        covs[comp] = 0.5 * (cov + cov.T)
        means[comp] = cov @ (prior_prec @ prior.means[comp] + cav_prec @ cav_mean)
    log_w -= logsumexp(log_w)
    w = np.exp(log_w)
    mean = w @ means
    cov = np.einsum("k,kab->ab", w, covs) + np.einsum("k,ka,kb->ab", w, means, means)
    cov -= np.outer(mean, mean)
    return w, mean, 0.5 * (cov + cov.T)


def naive_full_ep(y: np.ndarray, operator: DegradationOperator, sigma2: float,
                  adapted: AdaptedGMM, partition: Partition,
                  max_iterations: int = 20, damping: float = 0.7,
                  stop_tol: float = 1e-8):
    """EP with J+1 factors and full N x N covariances (tiny images only).

    The Gaussian likelihood factor is exact and set once; the J patch-prior
    factors are refined sequentially, each against the full-covariance
    cavity, with the same constrained precision optimization the scalable
    algorithm uses per block, but at full image size.
    """
    from .kl_updates import BlockKLProblem, update_block_precision

    n = partition.n_pixels
    if n > 1024:
        raise ValueError("naive EP limited to N <= 1024")
    y = np.asarray(y, dtype=float)
    h = dense_operator(operator)

    lik_prec = h.T @ h / sigma2
    lik_eta = h.T @ y / sigma2

    j_blocks = partition.n_blocks
    prec = [np.eye(n) / (sigma2 * j_blocks) for _ in range(j_blocks)]
    eta = [y / (sigma2 * j_blocks) for _ in range(j_blocks)]

    def joint():
        q = lik_prec + sum(prec)
        e = lik_eta + sum(eta)
        cov = np.linalg.inv(q)
        return 0.5 * (cov + cov.T), cov @ e

    cov_q, mean_q = joint()
    for _ in range(max_iterations):
        prev_mean = mean_q.copy()
        prev_var = np.diag(cov_q).copy()
        for j, idx in enumerate(partition.blocks):
            local = partition.local_indices[j]
            prior = adapted if len(local) == adapted.dim else adapted.marginal(local)
            cav_prec = lik_prec + sum(prec[t] for t in range(j_blocks) if t != j)
            cav_eta = lik_eta + sum(eta[t] for t in range(j_blocks) if t != j)
            cav_cov = np.linalg.inv(cav_prec)
            cav_cov = 0.5 * (cav_cov + cav_cov.T)
            cav_mean = cav_cov @ cav_eta

            _, t_mean_j, t_cov_j = _tilted_gmm_block(prior, cav_mean[idx], cav_cov[np.ix_(idx, idx)])
            rest = np.setdiff1d(np.arange(n), idx)
            gain = cav_cov[np.ix_(rest, idx)] @ np.linalg.inv(cav_cov[np.ix_(idx, idx)])
            t_mean = np.empty(n)
            t_mean[idx] = t_mean_j
            t_mean[rest] = cav_mean[rest] + gain @ (t_mean_j - cav_mean[idx])
            t_cov = np.empty((n, n))
            t_cov[np.ix_(idx, idx)] = t_cov_j
            cross = gain @ t_cov_j
            t_cov[np.ix_(rest, idx)] = cross
            t_cov[np.ix_(idx, rest)] = cross.T
            t_cov[np.ix_(rest, rest)] = (cav_cov[np.ix_(rest, rest)]
                                         - gain @ cav_cov[np.ix_(idx, rest)]
                                         + gain @ t_cov_j @ gain.T)
            t_cov = 0.5 * (t_cov + t_cov.T)

            problem = BlockKLProblem(t_cov, cav_prec, prec[j], structure="full")
            new_prec = update_block_precision(problem, max_iters=100, tol=1e-10)
            new_eta = (new_prec + cav_prec) @ t_mean - cav_eta
            prec[j] = damping * new_prec + (1 - damping) * prec[j]
            eta[j] = damping * new_eta + (1 - damping) * eta[j]
        cov_q, mean_q = joint()
        dm2 = float(np.sum((mean_q - prev_mean) ** 2))
        dv2 = float(np.sum((np.diag(cov_q) - prev_var) ** 2))
        if dm2 < stop_tol * n and dv2 < stop_tol * n:
            break
    return mean_q, cov_q


def _rectified_poisson_loglik(u: np.ndarray, y: np.ndarray) -> np.ndarray:
    """log of the rectified Poisson pmf at counts y with real rates u."""
    out = np.where(y == 0, 0.0, -np.inf).astype(float)
    pos = u > 0
    if np.any(pos):
        up = u[pos]
        yp = y[pos]
        out[pos] = yp * np.log(up) - up - gammaln(yp + 1)
    return out


def mcmc_poisson_reference(y: np.ndarray, operator: DegradationOperator,
                           adapted: AdaptedGMM, partition: Partition,
                           n_samples: int = 1_000_000, burn_in: float = 0.2,
                           seed: int = 0, thin: int = 1,
                           likelihood: str = "poisson", sigma2: float = 1.0):
    """Random-walk Metropolis on the exact rectified-Poisson posterior.

    For diagonal H the posterior factorizes over patches, so per-block
    proposals are accepted independently (a blocked random-walk kernel on
    the joint).  Returns posterior means, variances, and batch-means Monte
    Carlo standard errors of the mean estimates.

    ``likelihood="gaussian"`` swaps in a Gaussian observation term, which
    makes the target tractable and validates the chain machinery against
    :func:`exact_diagonal_gaussian_posterior`.
    """
    if not operator.is_diagonal:
        raise ValueError("the MCMC reference supports diagonal operators only")
    if likelihood not in ("poisson", "gaussian"):
        raise ValueError(f"unknown likelihood {likelihood!r}")
    n = partition.n_pixels
    if n > 256:
        raise ValueError("MCMC reference limited to N <= 256")
    y = np.asarray(y, dtype=float)
    rng = np.random.Generator(np.random.Philox(seed))
    diag_h = np.sqrt(operator.diag_gram())

    groups: dict[tuple, list[int]] = {}
    for j, loc in enumerate(partition.local_indices):
        groups.setdefault(tuple(loc.tolist()), []).append(j)

    # per-group stacked state, priors, and observation slices
    stacks = []
    for key, block_ids in groups.items():
        prior = adapted if len(key) == adapted.dim else adapted.marginal(key)
        chols = np.linalg.cholesky(prior.covs)
        logdets = 2.0 * np.sum(np.log(np.diagonal(chols, axis1=-2, axis2=-1)), axis=-1)
        idx = np.stack([partition.blocks[j] for j in block_ids])
        stacks.append({
            "ids": block_ids, "prior": prior, "chols": chols,
            "logdets": logdets, "idx": idx,
            "x": np.maximum(y[idx] / np.maximum(diag_h[idx], 1e-12), 1.0),
            "scale": 0.5 * np.ones(len(block_ids)),
        })

    def prior_logpdf(stack, x):
        prior = stack["prior"]
        b = x.shape[1]
        parts = np.empty((x.shape[0], prior.n_components))
        for comp in range(prior.n_components):
            diff = x - prior.means[comp]
            z = solve_triangular(stack["chols"][comp], diff.T, lower=True)
            quad = np.sum(z ** 2, axis=0)
            parts[:, comp] = (np.log(prior.weights[comp])
                              - 0.5 * (b * np.log(2 * np.pi) + stack["logdets"][comp] + quad))
        return logsumexp(parts, axis=1)

    def lik_logpdf(stack, x):
        u = diag_h[stack["idx"]] * x
        if likelihood == "gaussian":
            obs = diag_h[stack["idx"]] > 0
            return np.sum(np.where(obs, -0.5 * (y[stack["idx"]] - u) ** 2 / sigma2, 0.0), axis=1)
        return np.sum(_rectified_poisson_loglik(u.ravel(), y[stack["idx"]].ravel())
                      .reshape(u.shape), axis=1)

    for stack in stacks:
        stack["logp"] = prior_logpdf(stack, stack["x"]) + lik_logpdf(stack, stack["x"])

    n_burn = int(burn_in * n_samples)
    kept = 0
    running_sum = np.zeros(n)
    running_sq = np.zeros(n)
    n_batches = 50
    batch_len = max((n_samples - n_burn) // n_batches, 1)
    batch_sums = np.zeros((n_batches + 1, n))
    accept_counts = [np.zeros(len(stack["ids"])) for stack in stacks]

    for step in range(n_samples):
        for gi, stack in enumerate(stacks):
            proposal = stack["x"] + stack["scale"][:, None] * rng.standard_normal(stack["x"].shape)
            logp_new = prior_logpdf(stack, proposal) + lik_logpdf(stack, proposal)
            accept = np.log(rng.random(proposal.shape[0])) < logp_new - stack["logp"]
            stack["x"][accept] = proposal[accept]
            stack["logp"][accept] = logp_new[accept]
            accept_counts[gi] += accept
        if step < n_burn:
            if (step + 1) % 500 == 0:  # adapt proposal scales during burn-in
                for gi, stack in enumerate(stacks):
                    rate = accept_counts[gi] / 500.0
                    stack["scale"] *= np.where(rate < 0.15, 0.7, np.where(rate > 0.4, 1.4, 1.0))
                    accept_counts[gi][:] = 0
            continue
        if (step - n_burn) % thin:
            continue
        kept += 1
        current = np.empty(n)
        for stack in stacks:
            current[stack["idx"].ravel()] = stack["x"].ravel()
        running_sum += current
        running_sq += current ** 2
        batch = min((step - n_burn) // batch_len, n_batches)
        batch_sums[batch] += current

    means = running_sum / kept
    variances = running_sq / kept - means ** 2
    batch_means = batch_sums[:n_batches] / batch_len
    se = np.std(batch_means, axis=0, ddof=1) / np.sqrt(n_batches)
    return means, variances, se
