"""Combining correlated vector estimates of a common parameter.

Given ``J`` stacked estimates ``theta = (theta_1, ..., theta_J)`` of a
``P``-vector and the covariance ``sigma`` of ``sqrt(n) theta``, the
precision-weighted combination is

    beta = Omega sum_j Lambda_j. theta,    Omega = (sum_jk Lambda_jk)^-1,

where ``Lambda = sigma^-1`` is partitioned into ``P x P`` blocks.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NotPositiveDefinite

__all__ = [
    "StackedEstimates",
    "MetaResult",
    "meta_combine",
    "meta_combine_fixed",
    "meta_combine_kronecker",
    "block_sum",
]


def _cholesky(A: np.ndarray, what: str):
    try:
        return cho_factor(A, lower=True)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(f"{what} is not positive definite") from None


def block_sum(A: np.ndarray, P: int) -> np.ndarray:
    """Sum of the ``P x P`` blocks of a ``JP x JP`` matrix."""
    J = A.shape[0] // P
    return A.reshape(J, P, J, P).sum(axis=(0, 2))


@dataclass(frozen=True, eq=False)
class StackedEstimates:
    theta: np.ndarray
    sigma: np.ndarray
    J: int
    P: int
    n: int

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).ravel()
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if theta.size != self.J * self.P:
            raise ValueError(f"theta has {theta.size} entries, expected J*P = {self.J * self.P}")
        if sigma.shape != (theta.size, theta.size):
            raise ValueError("sigma must be square with one row per entry of theta")
        if not np.allclose(sigma, sigma.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(sigma).max())):
            raise ValueError("sigma must be symmetric")
        if self.n < 1:
            raise ValueError("n must be positive")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "sigma", 0.5 * (sigma + sigma.T))

    def blocks(self) -> np.ndarray:
        return self.theta.reshape(self.J, self.P)

    def permute(self, order: Sequence[int]) -> StackedEstimates:
        idx = np.concatenate([np.arange(j * self.P, (j + 1) * self.P) for j in order])
        return StackedEstimates(self.theta[idx], self.sigma[np.ix_(idx, idx)], self.J, self.P, self.n)


@dataclass(frozen=True, eq=False)
class MetaResult:
    beta_hat: np.ndarray
    covariance: np.ndarray
    omega_hat: np.ndarray
    weights: np.ndarray

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


def meta_combine(est: StackedEstimates) -> MetaResult:
    """Generalised precision weighting using the full joint covariance.

    ``weights`` has shape ``(J, P, P)``: ``weights[j] = Omega Lambda_j.``
    restricted to block ``j``'s columns, so ``beta = sum_j weights[j] theta_j``
    and ``sum_j weights[j] = I``.
    """
    P, J = est.P, est.J
    cf = _cholesky(est.sigma, "stacked covariance")
    if J == 1:
        return MetaResult(est.theta.copy(), est.sigma / est.n, est.sigma.copy(), np.eye(P)[None])
    Lam = cho_solve(cf, np.eye(J * P))
    Lam = 0.5 * (Lam + Lam.T)
    S = block_sum(Lam, P)
    cs = _cholesky(S, "sum of precision blocks")
    Omega = cho_solve(cs, np.eye(P))
    Omega = 0.5 * (Omega + Omega.T)
    # (1' x Omega) Lambda: a P x JP weight matrix.
    W = Omega @ Lam.reshape(J, P, J * P).sum(axis=0)
    beta = W @ est.theta
    # (1' x Omega) Lambda (1 x Omega) / n reduces to Omega / n.
    cov = W @ est.sigma @ W.T / est.n
    cov = 0.5 * (cov + cov.T)
    return MetaResult(beta, cov, Omega, W.reshape(P, J, P).transpose(1, 0, 2))


def meta_combine_fixed(est: StackedEstimates, weights: Sequence[float]) -> MetaResult:
    """``beta = sum_j w_j theta_j`` with scalar weights summing to one."""
    w = np.asarray(weights, dtype=float)
    if w.shape != (est.J,):
        raise ValueError(f"need {est.J} weights")
    if not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-12):
        raise ValueError("weights must sum to 1")
    K = np.kron(w[None, :], np.eye(est.P))
    cov = K @ est.sigma @ K.T / est.n
    return MetaResult(K @ est.theta, 0.5 * (cov + cov.T), np.full((est.P, est.P), np.nan), K.reshape(est.P, est.J, est.P).transpose(1, 0, 2))


def meta_combine_kronecker(est: StackedEstimates, average: bool = False) -> MetaResult:
    """Combination assuming ``sigma = Sigma_tilde kron Psi``.

    ``Sigma_tilde`` is read from the first coordinate of each block
    (``average=True`` averages the ``P`` coordinate-wise candidates).  The
    covariance formula is valid whether or not the structure holds.
    """
    P, J = est.P, est.J
    S4 = est.sigma.reshape(J, P, J, P)
    if average:
        St = np.mean([S4[:, k, :, k] for k in range(P)], axis=0)
    else:
        St = S4[:, 0, :, 0]
    cf = _cholesky(St, "Kronecker factor Sigma_tilde")
    Lt = cho_solve(cf, np.eye(J))
    Lt = 0.5 * (Lt + Lt.T)
    v = Lt.sum(axis=1)
    total = v.sum()
    K = np.kron(v[None, :], np.eye(P)) / total
    cov = K @ est.sigma @ K.T / est.n
    return MetaResult(K @ est.theta, 0.5 * (cov + cov.T), np.eye(P) / total, K.reshape(P, J, P).transpose(1, 0, 2))
