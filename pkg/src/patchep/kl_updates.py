"""KL-minimizing factor updates under covariance structure constraints.

Matching the moments of a Gaussian approximation against a tilted
distribution, subject to positive definiteness and a structure constraint on
the factor precision, reduces per block to minimizing

    -log det(P + P_cav) + <P + P_cav, C>

over the factor precision P, where C is the tilted covariance block and
P_cav the cavity precision block.  The block (full or diagonal-constrained)
case is solved by projected gradient descent with Barzilai-Borwein step
initialization and backtracking; the diagonal and isotropic cases have
closed-form / Newton solutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BlockKLProblem",
    "kl_block_loss",
    "update_block_precision",
    "diag_kl_update",
    "iso_kl_update",
    "factor_mean_update",
]

PRECISION_FLOOR = 1e-8


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _chol_or_none(a: np.ndarray):
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return None


@dataclass
class BlockKLProblem:
    tilted_cov: np.ndarray        # Cov_P of the block, SPD
    cavity_precision: np.ndarray  # precision of the other factor's block
    init_precision: np.ndarray
    structure: str = "full"       # "full" | "diagonal"

    def __post_init__(self):
        self.tilted_cov = _sym(np.asarray(self.tilted_cov, dtype=float))
        self.cavity_precision = _sym(np.asarray(self.cavity_precision, dtype=float))
        self.init_precision = _sym(np.asarray(self.init_precision, dtype=float))
        shapes = {self.tilted_cov.shape, self.cavity_precision.shape, self.init_precision.shape}
        if len(shapes) != 1:
            raise ValueError("problem matrices must share one shape")
        if self.structure not in ("full", "diagonal"):
            raise ValueError(f"unknown structure {self.structure!r}")


def kl_block_loss(precision: np.ndarray, cavity_precision: np.ndarray,
                  tilted_cov: np.ndarray) -> float:
    """-log det(P + P_cav) + trace((P + P_cav) C); the variable part of the
    block KL divergence at the matched mean."""
    total = _sym(np.asarray(precision) + np.asarray(cavity_precision))
    chol = _chol_or_none(total)
    if chol is None:
        raise np.linalg.LinAlgError("precision sum is not positive definite")
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-logdet + np.trace(total @ tilted_cov))


def update_block_precision(problem: BlockKLProblem, max_iters: int = 200,
                           tol: float = 1e-8,
                           loss_history: list | None = None) -> np.ndarray:
    """Minimize the block KL loss over SPD precisions of the given structure.

    Gradient steps P <- P - lam * (C - (P + P_cav)^{-1}); for the diagonal
    structure only the gradient's diagonal is applied.  The step is seeded by
    the Barzilai-Borwein rule (lam = <dP, dG>/<dG, dG>, 1 on the first step)
    and halved until the loss strictly decreases and the iterate stays SPD.
    If 50 halvings fail the previous iterate is returned.
    """
    cov = problem.tilted_cov
    cav = problem.cavity_precision
    omega = _sym(problem.init_precision)
    diagonal = problem.structure == "diagonal"

    loss = kl_block_loss(omega, cav, cov)
    if loss_history is not None:
        loss_history.append(loss)
    prev_omega = None
    prev_grad = None
    for _ in range(max_iters):
        grad = cov - np.linalg.inv(_sym(omega + cav))
        if diagonal:
            grad = np.diag(np.diag(grad))
        if prev_grad is None:
            lam = 1.0
        else:
            d_omega = omega - prev_omega
            d_grad = grad - prev_grad
            denom = float(np.sum(d_grad * d_grad))
            lam = float(np.sum(d_omega * d_grad)) / denom if denom > 0 else 1.0
            if lam <= 0:  # a nonpositive step would not descend
                lam = 1.0
        accepted = None
        for _halving in range(50):
            candidate = _sym(omega - lam * grad)
            if _chol_or_none(candidate) is not None:
                try:
                    cand_loss = kl_block_loss(candidate, cav, cov)
                except np.linalg.LinAlgError:
                    cand_loss = np.inf
                if cand_loss < loss:
                    accepted = (candidate, cand_loss)
                    break
            lam *= 0.5
        if accepted is None:
            return omega
        prev_omega, prev_grad = omega, grad
        omega, new_loss = accepted
        if loss_history is not None:
            loss_history.append(new_loss)
        if abs(loss - new_loss) < tol * abs(loss):
            return omega
        loss = new_loss
    return omega


def diag_kl_update(tilted_var: float, cavity_precision: float) -> float:
    """Closed-form diagonal update: 1/d - p_cav, floored at a small positive
    value when the unconstrained minimizer is nonpositive."""
    if tilted_var <= 0:
        raise ValueError("tilted variance must be positive")
    p = 1.0 / tilted_var - cavity_precision
    return p if p > 0 else PRECISION_FLOOR


def iso_kl_update(tilted_vars: np.ndarray, cavity_precisions: np.ndarray,
                  init_precision: float = 1.0) -> float:
    """Newton-Raphson fit of the single precision of an isotropic factor.

    Minimizes sum_n -log(p + p_n) + (p + p_n) d_n over p, clamping each
    iterate at 1e-8 so the covariance stays positive definite.
    """
    d = np.asarray(tilted_vars, dtype=float)
    q = np.asarray(cavity_precisions, dtype=float)
    if np.any(d <= 0):
        raise ValueError("tilted variances must be positive")
    p = max(float(init_precision), PRECISION_FLOOR)
    for _ in range(100):
        inv = 1.0 / (p + q)
        step = (np.sum(inv) - np.sum(d)) / np.sum(inv ** 2)
        new_p = max(p + step, PRECISION_FLOOR)
        if abs(new_p - p) / p < 1e-10:
            return new_p
        p = new_p
    return p


def factor_mean_update(tilted_mean: np.ndarray, own_precision: np.ndarray,
                       cavity_precision: np.ndarray,
                       cavity_mean: np.ndarray) -> np.ndarray:
    """Mean of one factor so that the factor product matches the tilted mean:
    P_i^{-1} ((P_i + P_cav) E_P - P_cav m_cav)."""
    tilted_mean = np.asarray(tilted_mean, dtype=float)
    rhs = (own_precision + cavity_precision) @ tilted_mean - cavity_precision @ np.asarray(cavity_mean, dtype=float)
    return np.linalg.solve(own_precision, rhs)
