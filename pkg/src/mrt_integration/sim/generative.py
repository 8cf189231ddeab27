"""Generative model for the two-study simulation.

Covariates per participant and time point:

* ``X1`` follows a stationary AR(1) with coefficient ``ar`` and Gaussian
  innovations of standard deviation ``innovation_sd``.
* ``X2 = 1 - X1 + 3 t_10`` internally, ``X2 = 2.7 t_10`` externally.
* ``X3 = -1 + 0.5 X1 - 0.8 X2 + t_10``.

Treatment is Bernoulli with
``p_h = 1 / (1 + exp(0.2 + 0.3 I + 0.05 X1 - 0.03 X2 + 0.06 X3))`` and the
proximal outcome is
``Y = 4 + 2 X1 - 1.5 X1 X2 + 0.4 X3^3 + A (1 + 2 X1 - 3 X2) + eps`` with
``eps`` an independent AR(1) noise process.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import t as student_t

from ..datamodel import CombinedDataset
from ..features import FeatureSpec

__all__ = [
    "GenerativeTruth",
    "TRUTH",
    "DF",
    "true_beta_r",
    "treatment_prob",
    "generate_study",
    "generate_combined",
    "true_density_ratio",
    "generate_multiarm",
    "default_features",
]

DF = 10


@dataclass(frozen=True)
class GenerativeTruth:
    beta_s_true: tuple[float, ...] = (1.0, 2.0, -3.0)
    beta_r_true_internal: tuple[float, ...] = (-2.0, 5.0)
    beta_r_true_external: tuple[float, ...] = (1.0, 2.0)

    def __post_init__(self):
        # E[X2 | X1] = 1 - X1 internally and 0 externally.
        gamma_int = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, -1.0]])
        gamma_ext = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        bs = np.array(self.beta_s_true)
        if not np.allclose(gamma_int @ bs, self.beta_r_true_internal):
            raise ValueError("internal truth inconsistent with beta_s and E[X2|X1]")
        if not np.allclose(gamma_ext @ bs, self.beta_r_true_external):
            raise ValueError("external truth inconsistent with beta_s and E[X2|X1]")


TRUTH = GenerativeTruth()


def true_beta_r(is_internal: bool) -> np.ndarray:
    return np.array(TRUTH.beta_r_true_internal if is_internal else TRUTH.beta_r_true_external)


def treatment_prob(X: np.ndarray, study) -> np.ndarray:
    """``p_h(1 | H_t)`` of the generative model for rows of ``(x1, x2, x3)``."""
    X = np.atleast_2d(X)
    lin = 0.2 + 0.3 * np.asarray(study, dtype=float) + 0.05 * X[:, 0] - 0.03 * X[:, 1] + 0.06 * X[:, 2]
    return expit(-lin)


def _ar1(rng: np.random.Generator, n: int, T: int, coef: float, sd: float) -> np.ndarray:
    out = np.empty((n, T))
    out[:, 0] = rng.normal(0.0, sd / np.sqrt(1 - coef**2), n)
    innov = rng.normal(0.0, sd, (n, T - 1))
    for t in range(1, T):
        out[:, t] = coef * out[:, t - 1] + innov[:, t - 1]
    return out


def generate_study(
    n: int,
    is_internal: bool,
    T: int = 20,
    seed=None,
    *,
    ar_coefficient: float = 0.5,
    innovation_sd: float = 1.0,
    effect_shift: float = 0.0,
    id_offset: int = 0,
) -> CombinedDataset:
    """Simulate ``n`` participants of one study; deterministic given ``seed``.

    ``effect_shift`` is added to the intercept of the treatment effect, which
    breaks effect sharing between studies when applied to one of them.
    """
    if n < 1 or T < 1:
        raise ValueError("n and T must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    I = 1 if is_internal else 0
    x1 = _ar1(rng, n, T, ar_coefficient, innovation_sd)
    t2 = rng.standard_t(DF, (n, T))
    x2 = (1 - x1 + 3 * t2) if is_internal else 2.7 * t2
    x3 = -1 + 0.5 * x1 - 0.8 * x2 + rng.standard_t(DF, (n, T))
    X = np.stack([x1, x2, x3], axis=-1).reshape(n * T, 3)
    ph = treatment_prob(X, I)
    a = (rng.random(n * T) < ph).astype(np.int64)
    eps = _ar1(rng, n, T, ar_coefficient, 1.0).ravel()
    x1, x2, x3 = X.T
    y = (
        4 + 2 * x1 - 1.5 * x1 * x2 + 0.4 * x3**3
        + a * (1 + effect_shift + 2 * x1 - 3 * x2)
        + eps
    )
    pid = np.repeat(np.arange(id_offset, id_offset + n), T)
    t = np.tile(np.arange(1, T + 1), n)
    return CombinedDataset(
        participant_ids=tuple(range(id_offset, id_offset + n)),
        participant_study=np.full(n, I),
        row_participant=pid - id_offset,
        t=t,
        X=X,
        a=a,
        y=y,
        prob_h=ph,
        level_count=1,
    )


def generate_combined(
    n1: int,
    n0: int,
    T: int = 20,
    seed: int = 0,
    *,
    ar_coefficient: float = 0.5,
    innovation_sd: float = 1.0,
    external_effect_shift: float = 0.0,
) -> CombinedDataset:
    """Internal participants first (ids ``0..n1-1``), then external ones.

    The two studies draw from independent streams spawned from ``seed``.
    """
    kw = dict(ar_coefficient=ar_coefficient, innovation_sd=innovation_sd)
    internal = generate_study(n1, True, T, np.random.default_rng([seed, 1]), **kw)
    if n0 == 0:
        return internal
    external = generate_study(
        n0, False, T, np.random.default_rng([seed, 0]), effect_shift=external_effect_shift, id_offset=n1, **kw
    )
    return CombinedDataset.concat(internal, external)


def true_density_ratio(X: np.ndarray) -> np.ndarray:
    """Exact ``p(S | I=1) / p(S | I=0)`` for ``S = (X1, X2)``.

    ``X1`` has the same law in both studies, so only the conditional density
    of ``X2`` given ``X1`` contributes.
    """
    X = np.atleast_2d(X)
    num = student_t.pdf(X[:, 1], DF, loc=1 - X[:, 0], scale=3.0)
    den = student_t.pdf(X[:, 1], DF, loc=0.0, scale=2.7)
    return num / den


def generate_multiarm(
    n: int,
    T: int,
    probs: tuple[float, ...],
    effects: tuple[float, ...],
    seed=None,
) -> CombinedDataset:
    """Constant-probability multi-arm trial with effects relative to control.

    ``probs`` lists the probabilities of levels ``0..J``; ``effects`` the
    constant effects of levels ``1..J``.  One AR(1) covariate enters the
    baseline outcome.
    """
    probs = np.asarray(probs, dtype=float)
    if not np.isclose(probs.sum(), 1.0) or len(effects) != probs.size - 1:
        raise ValueError("probs must sum to one and match the number of effects plus control")
    rng = np.random.default_rng(seed)
    x1 = _ar1(rng, n, T, 0.5, 1.0).ravel()
    a = rng.choice(probs.size, size=n * T, p=probs)
    eff = np.concatenate([[0.0], np.asarray(effects, dtype=float)])
    y = 1 + x1 + 0.5 * x1**2 + eff[a] + rng.normal(0.0, 1.0, n * T)
    return CombinedDataset(
        participant_ids=tuple(range(n)),
        participant_study=np.ones(n, dtype=np.int64),
        row_participant=np.repeat(np.arange(n), T),
        t=np.tile(np.arange(1, T + 1), n),
        X=x1[:, None],
        a=a,
        y=y,
        prob_h=np.broadcast_to(probs[1:], (n * T, probs.size - 1)),
        level_count=probs.size - 1,
    )


def default_features() -> dict[str, FeatureSpec]:
    """Feature maps used throughout the simulation."""
    return {
        "f_r": FeatureSpec.parse("1 + x1", "f_r"),
        "f_s": FeatureSpec.parse("1 + x1 + x2", "f_s"),
        "g": FeatureSpec.parse("1 + x1 + x2 + x3", "g"),
        "d": FeatureSpec.parse("1 + x1 + x2 + x1*x2 + x2^2", "d"),
        "ph": FeatureSpec.parse("1 + I + x1 + x2 + x3", "ph"),
    }
