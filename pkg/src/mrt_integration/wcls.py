"""Weighted and centered least squares (WCLS).

The estimating equation for ``J`` non-control levels is

    0 = P_n sum_t  w_t W_t [Y - g'alpha - sum_j (A_j - p_rj) f_j' beta_j] z_t,
    z_t = (g, (A_1 - p_r1) f_1, ..., (A_J - p_rJ) f_J),

with ``W_t = p_r(A_t) / p_h(A_t)`` and ``w_t`` an additional row weight
(a population mask, or a density ratio for the reweighted external fit).
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .datamodel import CombinedDataset, validate
from .errors import EmptyExternalStudy, EmptyInternalStudy, PreconditionError, UnobservedLevel
from .features import FeatureSpec, eval_features
from .mestimation import (
    EquationBlock,
    FitResult,
    Params,
    StackedSystem,
    sandwich_covariance,
    solve_system,
    weighted_lstsq,
)
from .output import EstimatorOutput
from .propensity import ProbabilityModel

__all__ = [
    "wcls_weight",
    "ProbSource",
    "WCLSSpec",
    "WCLSFit",
    "WCLSBlock",
    "wcls_fit",
    "wcls_fit_multilevel",
    "observed_prob",
]


def wcls_weight(p_r_at: float, p_h_at: float, a: int) -> float:
    """``W = p_r(a) / p_h(a)`` for a binary treatment."""
    if not (0 < p_r_at < 1 and 0 < p_h_at < 1):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    if a not in (0, 1):
        raise ValueError("binary treatment expected")
    return (a * p_r_at + (1 - a) * (1 - p_r_at)) / (a * p_h_at + (1 - a) * (1 - p_h_at))


def observed_prob(P: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Probability of the action actually taken, given ``(N, J)`` level probabilities."""
    p0 = 1.0 - P.sum(axis=1)
    full = np.column_stack([p0, P])
    return full[np.arange(a.size), a]


@dataclass(frozen=True, eq=False)
class ProbSource:
    """Row-level treatment probabilities, either fixed or read from a block."""

    fn: Callable[[Params], np.ndarray]
    reads: tuple[str, ...] = ()

    @classmethod
    def fixed(cls, values: np.ndarray) -> ProbSource:
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        return cls(lambda params: values)

    @classmethod
    def from_model(cls, model: ProbabilityModel) -> ProbSource:
        return cls(lambda params: model.probs(params[model.name]), (model.name,))

    def __call__(self, params: Params) -> np.ndarray:
        return self.fn(params)


@dataclass(frozen=True, eq=False)
class WCLSBlock:
    """Builder for one WCLS equation block on a dataset.

    ``row_weight`` is a fixed non-negative multiplier; ``ratio`` optionally
    supplies an extra parameter-dependent multiplier ``(reads, fn)``.
    """

    name: str
    dataset: CombinedDataset
    g: np.ndarray
    f: tuple[np.ndarray, ...]
    p_r: ProbSource
    p_h: ProbSource
    row_weight: np.ndarray
    ratio: tuple[tuple[str, ...], Callable[[Params], np.ndarray]] | None = None
    labels: tuple[str, ...] | None = None

    @property
    def q(self) -> int:
        return self.g.shape[1]

    @property
    def levels(self) -> int:
        return len(self.f)

    @property
    def dim(self) -> int:
        return self.q + sum(f.shape[1] for f in self.f)

    def beta_slices(self) -> list[slice]:
        out, pos = [], self.q
        for f in self.f:
            out.append(slice(pos, pos + f.shape[1]))
            pos += f.shape[1]
        return out

    def design(self, params: Params) -> tuple[np.ndarray, np.ndarray]:
        """``(z, w)`` with ``w`` the total row weight including ``W_t``."""
        ds = self.dataset
        Pr = self.p_r(params)
        Ph = self.p_h(params)
        W = observed_prob(Pr, ds.a) / observed_prob(Ph, ds.a)
        w = self.row_weight * W
        if self.ratio is not None:
            w = w * self.ratio[1](params)
        cols = [self.g]
        for j, f in enumerate(self.f):
            cA = (ds.a == j + 1) - Pr[:, j]
            cols.append(f * cA[:, None])
        return np.hstack(cols), w

    def sigma_r_sq(self, params: Params) -> np.ndarray:
        Pr = self.p_r(params)
        return Pr[:, 0] * (1 - Pr[:, 0])

    def block(self) -> EquationBlock:
        ds, name, y = self.dataset, self.name, self.dataset.y
        reads = tuple(dict.fromkeys(self.p_r.reads + self.p_h.reads + (self.ratio[0] if self.ratio else ())))

        def score(params: Params) -> np.ndarray:
            z, w = self.design(params)
            e = y - z @ params[name]
            return ds.group_sum(z * (w * e)[:, None])

        def solve(params: Params) -> np.ndarray:
            z, w = self.design(params)
            return weighted_lstsq(z, y, w, f"WCLS normal equations ({name})")

        def jac(params: Params):
            z, w = self.design(params)
            return {name: -(z * w[:, None]).T @ z / ds.n}

        return EquationBlock(name, self.dim, score, reads, solve, jac, labels=self.labels)


@dataclass(frozen=True)
class WCLSSpec:
    """Configuration of a single WCLS fit.

    ``pr_source`` is ``constant`` (intercept-only fit, stacked), ``supplied``
    (``pr_value`` held fixed) or ``logistic`` (fit on ``pr_spec``).
    ``ph_source`` is ``supplied`` (the dataset's ``prob_h``) or ``logistic``
    (fit on ``ph_spec``, binary treatments only).
    """

    g: FeatureSpec
    f_r: FeatureSpec | tuple[FeatureSpec, ...]
    pr_source: str = "constant"
    ph_source: str = "supplied"
    population: str = "internal"
    dof_adjust: bool = True
    pr_value: float | tuple[float, ...] | None = None
    pr_spec: FeatureSpec | None = None
    ph_spec: FeatureSpec | None = None

    def __post_init__(self):
        if self.pr_source not in ("constant", "supplied", "logistic"):
            raise ValueError(f"unknown pr_source {self.pr_source!r}")
        if self.ph_source not in ("supplied", "logistic"):
            raise ValueError(f"unknown ph_source {self.ph_source!r}")
        if self.population not in ("internal", "pooled", "external"):
            raise ValueError(f"unknown population {self.population!r}")
        if self.pr_source == "supplied" and self.pr_value is None:
            raise ValueError("pr_source='supplied' needs pr_value")
        if self.pr_source == "logistic" and self.pr_spec is None:
            raise ValueError("pr_source='logistic' needs pr_spec")
        if self.ph_source == "logistic" and self.ph_spec is None:
            raise ValueError("ph_source='logistic' needs ph_spec (a correctly specified p_h model)")

    @property
    def f_list(self) -> tuple[FeatureSpec, ...]:
        return self.f_r if isinstance(self.f_r, tuple) else (self.f_r,)


@dataclass(frozen=True, eq=False)
class WCLSFit:
    alpha_hat: np.ndarray
    beta_r_hat: np.ndarray | list[np.ndarray]
    fit: FitResult
    sigma_r_sq: Callable[[np.ndarray], np.ndarray]
    system: StackedSystem
    spec: WCLSSpec
    block_name: str = "wcls"

    def beta_cov(self, level: int | None = None) -> np.ndarray:
        sl = self.fit.slices[self.block_name]
        cov = self.fit.covariance[sl, sl]
        q = self.alpha_hat.size
        if level is None:
            return cov[q:, q:]
        sizes = [len(f) for f in self.spec.f_list]
        start = q + sum(sizes[:level])
        return cov[start:start + sizes[level], start:start + sizes[level]]

    def output(self, method: str = "WCLS", level: int = 0) -> EstimatorOutput:
        beta = self.beta_r_hat if isinstance(self.beta_r_hat, np.ndarray) else self.beta_r_hat[level]
        return EstimatorOutput(
            method,
            beta,
            self.beta_cov(level if self.spec.f_list[1:] else None),
            self.spec.f_list[level].labels,
        )


def _prob_source(dataset, source, value, spec, name, mask, levels):
    """Build ``(ProbSource, model or None)`` for a p_r / p_h model setting."""
    if source == "supplied":
        if value is None:
            raise PreconditionError(f"{name}: no supplied probabilities")
        vals = np.asarray(value, dtype=float)
        if vals.ndim == 0 or vals.ndim == 1 and vals.size == levels and vals.size != dataset.n_rows:
            vals = np.broadcast_to(np.atleast_1d(vals), (dataset.n_rows, levels))
        return ProbSource.fixed(vals), None
    design = np.ones((dataset.n_rows, 1)) if source == "constant" else eval_features(dataset.X, spec, dataset.study)
    model = ProbabilityModel(name, dataset, design, mask, levels, spec or FeatureSpec.parse("1"))
    return ProbSource.from_model(model), model


def _population(dataset: CombinedDataset, population: str) -> CombinedDataset:
    if population == "internal":
        if dataset.n1 == 0:
            raise EmptyInternalStudy("no participants with I=1")
        return dataset if dataset.n0 == 0 else dataset.select(dataset.participant_study == 1)
    if population == "external":
        if dataset.n0 == 0:
            raise EmptyExternalStudy("no participants with I=0")
        return dataset if dataset.n1 == 0 else dataset.select(dataset.participant_study == 0)
    return dataset


def wcls_fit(dataset: CombinedDataset, spec: WCLSSpec) -> WCLSFit:
    """Fit WCLS on the configured population with stacked nuisance models."""
    ds = _population(dataset, spec.population)
    levels = ds.level_count
    f_list = spec.f_list
    if len(f_list) == 1 and levels > 1:
        f_list = f_list * levels
    if len(f_list) != levels:
        raise ValueError(f"need one moderator spec per treatment level ({levels})")
    validate(ds, None, extra_specs=(spec.g,) + tuple(f_list)).raise_if_invalid()
    for j in range(levels):
        if not np.any(ds.a == j + 1):
            raise UnobservedLevel(f"treatment level {j + 1} never observed")
    if not np.any(ds.a == 0):
        raise UnobservedLevel("control level never observed")

    mask = np.ones(ds.n_rows)
    pr, pr_model = _prob_source(ds, spec.pr_source, spec.pr_value, spec.pr_spec, "p_r", mask, levels)
    if spec.ph_source == "logistic" and levels > 1:
        raise PreconditionError("an estimated p_h is supported for binary treatments only")
    ph, ph_model = _prob_source(ds, spec.ph_source, ds.prob_h, spec.ph_spec, "p_h", mask, levels)

    g = eval_features(ds.X, spec.g)
    F = tuple(eval_features(ds.X, f) for f in f_list)
    labels = tuple(f"alpha:{lab}" for lab in spec.g.labels) + tuple(
        (f"a{j + 1}:" if levels > 1 else "") + lab for j, f in enumerate(f_list) for lab in f.labels
    )
    builder = WCLSBlock("wcls", ds, g, F, pr, ph, mask, labels=labels)
    blocks = [m.block() for m in (pr_model, ph_model) if m is not None] + [builder.block()]
    system = StackedSystem(blocks, ds.n)
    theta = solve_system(system)
    fit = sandwich_covariance(system, theta, spec.dof_adjust)
    est = fit.estimate("wcls")
    q = g.shape[1]
    betas = [est[sl] for sl in builder.beta_slices()]
    params = system.params(theta)

    if pr_model is not None:
        model = pr_model

        def sigma_r_sq(X, _coef=model.coefs(params[model.name])):
            X = np.atleast_2d(X)
            D = np.ones((X.shape[0], 1)) if spec.pr_source == "constant" else eval_features(X, spec.pr_spec)
            p = 1 / (1 + np.exp(-(D @ _coef[0])))
            return p * (1 - p)
    else:
        p0 = float(np.atleast_1d(spec.pr_value)[0])

        def sigma_r_sq(X, _p=p0):
            return np.full(np.atleast_2d(X).shape[0], _p * (1 - _p))

    return WCLSFit(est[:q], betas[0] if levels == 1 else betas, fit, sigma_r_sq, system, spec)


def wcls_fit_multilevel(
    dataset: CombinedDataset,
    specs: Sequence[FeatureSpec],
    g: FeatureSpec,
    spec: WCLSSpec | None = None,
) -> WCLSFit:
    """Multi-level WCLS with per-level moderators ``specs``.

    Returns a fit whose ``beta_r_hat`` is a list with one vector per level;
    ``fit.covariance`` holds the joint sandwich.
    """
    base = spec or WCLSSpec(g, tuple(specs))
    spec = WCLSSpec(
        g, tuple(specs), base.pr_source, base.ph_source, base.population, base.dof_adjust,
        base.pr_value, base.pr_spec, base.ph_spec,
    )
    out = wcls_fit(dataset, spec)
    if dataset.level_count == 1:
        return WCLSFit(out.alpha_hat, [out.beta_r_hat], out.fit, out.sigma_r_sq, out.system, out.spec)
    return out
