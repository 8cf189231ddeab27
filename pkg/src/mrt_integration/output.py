"""Uniform result container for every estimator of the target effect."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import NotPositiveDefinite

__all__ = ["EstimatorOutput", "Z95"]

Z95 = 1.96


@dataclass(frozen=True, eq=False)
class EstimatorOutput:
    method: str
    beta_r_hat: np.ndarray
    covariance: np.ndarray
    labels: tuple[str, ...] = ()
    n_internal: int = 0
    n_external: int = 0
    nuisance_report: dict = field(default_factory=dict)

    def __post_init__(self):
        beta = np.asarray(self.beta_r_hat, dtype=float).ravel()
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape != (beta.size, beta.size):
            raise ValueError(f"covariance shape {cov.shape} does not match {beta.size} coefficients")
        cov = 0.5 * (cov + cov.T)
        diag = np.diag(cov)
        if np.any(diag <= 0) or not np.all(np.isfinite(cov)):
            raise NotPositiveDefinite(f"{self.method}: non-positive variance on the diagonal")
        object.__setattr__(self, "beta_r_hat", beta)
        object.__setattr__(self, "covariance", cov)
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"b{k}" for k in range(beta.size)))

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    @property
    def ci95(self) -> np.ndarray:
        """``(P, 2)`` array of ``estimate -/+ 1.96 se``."""
        return np.column_stack([self.beta_r_hat - Z95 * self.se, self.beta_r_hat + Z95 * self.se])

    @property
    def z(self) -> np.ndarray:
        return self.beta_r_hat / self.se

    @property
    def p_values(self) -> np.ndarray:
        return 2 * norm.sf(np.abs(self.z))

    def rows(self):
        """Tabular view: one dict per coefficient."""
        for k, lab in enumerate(self.labels):
            lo, hi = self.ci95[k]
            yield {
                "method": self.method,
                "coefficient": lab,
                "estimate": float(self.beta_r_hat[k]),
                "se": float(self.se[k]),
                "ci_low": float(lo),
                "ci_high": float(hi),
                "p_value": float(self.p_values[k]),
            }
