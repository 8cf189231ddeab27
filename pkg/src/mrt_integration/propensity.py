"""Treatment-probability models and the exponential-tilt density ratio.

Both are logistic likelihoods.  The density ratio
``p(S | I=1) / p(S | I=0) = exp{d(S)'omega}`` is fitted by regressing the
study indicator on ``d(S)`` with the fixed offset ``log(n1 / n0)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .datamodel import CombinedDataset
from .errors import (
    EmptyExternalStudy,
    EmptyInternalStudy,
    ExtremeWeightsWarning,
    NonConvergence,
    PreconditionError,
    RankDeficient,
    Separation,
    UnobservedLevel,
    WeightClampWarning,
)
from .features import FeatureSpec, eval_features
from .mestimation import EquationBlock, Params

__all__ = [
    "LogisticFit",
    "DensityRatioFit",
    "ProbabilityModel",
    "TiltModel",
    "fit_logistic",
    "constant_pr",
    "fit_density_ratio",
    "ratio_weights",
    "check_weight_overlap",
    "CLAMP",
    "SEPARATION_NORM",
]

CLAMP = 50.0
SEPARATION_NORM = 1e3
EXTREME_RATIO = 1e3


def _newton_logistic(X, y, w, offset, init, tol, max_iter, units):
    """Maximise ``sum w [y eta - log(1 + e^eta)] / units`` with step-halving.

    Returns ``(coef, iterations)``.  Raises :class:`Separation` when the
    coefficients diverge.
    """
    beta = np.zeros(X.shape[1]) if init is None else np.array(init, dtype=float)

    def loglik(b):
        eta = X @ b + offset
        return np.sum(w * (y * eta - np.logaddexp(0.0, eta))) / units

    ll = loglik(beta)
    for it in range(1, max_iter + 1):
        eta = X @ beta + offset
        p = expit(eta)
        grad = X.T @ (w * (y - p)) / units
        if np.max(np.abs(grad)) <= tol:
            return beta, it - 1
        H = (X * (w * p * (1 - p))[:, None]).T @ X / units
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise Separation("information matrix became singular; fitted probabilities hit 0 or 1") from None
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            new = loglik(cand)
            if np.isfinite(new) and new >= ll - 1e-15 * abs(ll):
                break
            t *= 0.5
        beta, ll = cand, new
        if np.linalg.norm(beta) > SEPARATION_NORM:
            raise Separation(f"coefficients diverge (norm {np.linalg.norm(beta):.3g}); the MLE does not exist")
    eta = X @ beta + offset
    grad = X.T @ (w * (y - expit(eta))) / units
    if np.max(np.abs(grad)) <= tol:
        return beta, max_iter
    raise NonConvergence(f"logistic Newton did not converge in {max_iter} iterations")


def _check_design(X, w, what):
    Xw = X[w != 0]
    if Xw.shape[0] == 0 or np.linalg.matrix_rank(Xw) < X.shape[1]:
        raise RankDeficient(f"{what}: design is not of full column rank")


def _check_separation(X, y, w, beta, offset, what):
    keep = w != 0
    p = expit(X[keep] @ beta + offset[keep])
    if np.max(np.abs(y[keep] - p)) < 1e-6:
        raise Separation(f"{what}: fitted probabilities reproduce the labels exactly")


@dataclass(frozen=True, eq=False)
class LogisticFit:
    """Coefficients of one or more per-level logistic models.

    ``coefficients`` has shape ``(levels, k)``; for a binary treatment it is
    a single row, and :attr:`coef` returns it as a vector.
    """

    coefficients: np.ndarray
    feature_spec: FeatureSpec | None
    converged: bool
    iterations: int = 0
    score_block: EquationBlock | None = None

    @property
    def coef(self) -> np.ndarray:
        return self.coefficients.ravel() if self.coefficients.shape[0] == 1 else self.coefficients

    @property
    def levels(self) -> int:
        return self.coefficients.shape[0]

    def predict(self, design: np.ndarray, offset=0.0) -> np.ndarray:
        """``(N, levels)`` probabilities on a design matrix."""
        eta = np.atleast_2d(np.asarray(design, dtype=float)) @ self.coefficients.T
        off = np.asarray(offset, dtype=float)
        return expit(eta + (off[:, None] if off.ndim else off))

    @property
    def probabilities(self) -> np.ndarray:
        """Level probabilities for an intercept-only fit."""
        if self.coefficients.shape[1] != 1:
            raise ValueError("probabilities is defined for intercept-only fits")
        return expit(self.coefficients[:, 0])


def fit_logistic(
    rows,
    labels,
    offset_weights=None,
    *,
    offset=None,
    feature_spec: FeatureSpec | None = None,
    units: int | None = None,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> LogisticFit:
    """Maximum-likelihood logistic regression by Newton's method.

    Parameters
    ----------
    rows : (N, k) design matrix.
    labels : binary vector of length N.
    offset_weights : optional non-negative row weights (zero drops a row).
    offset : optional fixed linear-predictor offset.
    units : number of independent units the likelihood is averaged over
        (participants); defaults to the number of rows.
    """
    X = np.atleast_2d(np.asarray(rows, dtype=float))
    if X.shape[0] == 1 and np.ndim(rows) == 1:
        X = X.T
    y = np.asarray(labels, dtype=float)
    if y.shape != (X.shape[0],):
        raise ValueError("labels must have one entry per row")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    w = np.ones_like(y) if offset_weights is None else np.asarray(offset_weights, dtype=float)
    off = np.zeros_like(y) if offset is None else np.broadcast_to(np.asarray(offset, dtype=float), y.shape)
    yk = y[w != 0]
    if yk.size == 0 or np.all(yk == yk[0]):
        raise Separation("labels are all equal; the MLE does not exist")
    _check_design(X, w, "logistic regression")
    units = X.shape[0] if units is None else units
    beta, iters = _newton_logistic(X, y, w, off, None, tol, max_iter, units)
    _check_separation(X, y, w, beta, off, "logistic regression")
    return LogisticFit(beta[None, :], feature_spec, True, iters)


def _empirical_logit(y, w):
    m = np.sum(w * y) / np.sum(w)
    return np.log(m / (1 - m))


# --- stackable models ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ProbabilityModel:
    """Per-level logistic model for ``P(A = j | features)`` on dataset rows.

    Level ``j`` is fitted as a binary regression of ``1{A = j}`` on the
    design, restricted to rows with non-zero ``mask``.  With more than one
    treatment level the design must be intercept-only, which yields the
    multinomial sample proportions.
    """

    name: str
    dataset: CombinedDataset
    design: np.ndarray
    mask: np.ndarray
    levels: int = 1
    feature_spec: FeatureSpec | None = None
    n_units: int | None = None

    def __post_init__(self):
        if self.levels > 1 and not (self.design.shape[1] == 1 and np.all(self.design == 1)):
            raise ValueError("multi-level probability models must be intercept-only")
        object.__setattr__(self, "_targets", np.column_stack(
            [(self.dataset.a == j + 1).astype(float) for j in range(self.levels)]
        ))
        if self.n_units is None:
            object.__setattr__(self, "n_units", self.dataset.n)

    @property
    def k(self) -> int:
        return self.design.shape[1]

    @property
    def dim(self) -> int:
        return self.k * self.levels

    def coefs(self, theta: np.ndarray) -> np.ndarray:
        return np.asarray(theta).reshape(self.levels, self.k)

    def probs(self, theta: np.ndarray) -> np.ndarray:
        """``(N, levels)`` fitted probabilities for the non-control levels."""
        return expit(self.design @ self.coefs(theta).T)

    def fit(self, tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
        out = []
        for j in range(self.levels):
            y = self._targets[:, j]
            yk = y[self.mask != 0]
            if yk.size == 0 or np.all(yk == 0):
                raise UnobservedLevel(f"{self.name}: treatment level {j + 1} never observed")
            if np.all(yk == 1):
                raise Separation(f"{self.name}: treatment level {j + 1} always assigned")
            if self.k == 1 and np.all(self.design == 1):
                out.append(np.array([_empirical_logit(y, self.mask)]))
                continue
            _check_design(self.design, self.mask, self.name)
            beta, _ = _newton_logistic(
                self.design, y, self.mask, np.zeros_like(y), None, tol, max_iter, self.n_units
            )
            _check_separation(self.design, y, self.mask, beta, np.zeros_like(y), self.name)
            out.append(beta)
        return np.concatenate(out)

    def block(self) -> EquationBlock:
        ds, D, mask, name = self.dataset, self.design, self.mask, self.name
        targets = self._targets
        n = ds.n

        def score(params: Params) -> np.ndarray:
            P = self.probs(params[name])
            resid = (targets - P) * mask[:, None]
            rows = np.hstack([D * resid[:, [j]] for j in range(self.levels)])
            return ds.group_sum(rows)

        def jac(params: Params):
            P = self.probs(params[name])
            J = np.zeros((self.dim, self.dim))
            for j in range(self.levels):
                v = mask * P[:, j] * (1 - P[:, j])
                sl = slice(j * self.k, (j + 1) * self.k)
                J[sl, sl] = -(D * v[:, None]).T @ D / n
            return {name: J}

        labels = tuple(
            f"{lab}" if self.levels == 1 else f"a{j + 1}:{lab}"
            for j in range(self.levels)
            for lab in (self.feature_spec.labels if self.feature_spec else range(self.k))
        )
        return EquationBlock(name, self.dim, score, (), lambda p: self.fit(), jac, labels=labels)

    def to_fit(self, theta: np.ndarray) -> LogisticFit:
        return LogisticFit(self.coefs(theta).copy(), self.feature_spec, True, 0, self.block())


def constant_pr(
    dataset: CombinedDataset,
    level_count: int | None = None,
    population: str = "internal",
    name: str = "p_r",
) -> LogisticFit:
    """Intercept-only fit of each non-control level's assignment probability."""
    levels = dataset.level_count if level_count is None else level_count
    model = ProbabilityModel(
        name, dataset, np.ones((dataset.n_rows, 1)), dataset.row_mask(population), levels,
        FeatureSpec.parse("1"),
    )
    return model.to_fit(model.fit())


@dataclass(frozen=True, eq=False)
class DensityRatioFit:
    omega: np.ndarray
    d_spec: FeatureSpec
    rho: float
    converged: bool = True
    iterations: int = 0
    loglik: float = np.nan
    score_block: EquationBlock | None = None

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not np.all(np.isfinite(self.omega)):
            raise ValueError("omega must be finite")


def _clamped_exp(eta: np.ndarray, warn: bool) -> np.ndarray:
    clipped = np.clip(eta, -CLAMP, CLAMP)
    if warn and np.any(clipped != eta):
        warnings.warn(
            f"density-ratio linear predictor clamped to [-{CLAMP:g}, {CLAMP:g}] on "
            f"{int(np.sum(clipped != eta))} rows",
            WeightClampWarning,
            stacklevel=3,
        )
    return np.exp(clipped)


def ratio_weights(fit: DensityRatioFit | np.ndarray, s_features) -> np.ndarray | float:
    """``exp{d(S)'omega}`` for one feature vector ``d(S)`` or a matrix of rows."""
    omega = fit.omega if isinstance(fit, DensityRatioFit) else np.asarray(fit, dtype=float)
    d = np.asarray(s_features, dtype=float)
    if d.shape[-1] != omega.shape[0]:
        raise ValueError(f"feature length {d.shape[-1]} does not match omega length {omega.shape[0]}")
    out = _clamped_exp(d @ omega, warn=True)
    return float(out) if np.ndim(out) == 0 else out


def check_weight_overlap(weights: np.ndarray, threshold: float = EXTREME_RATIO) -> float:
    """Warn when ``max / median`` of the density-ratio weights exceeds ``threshold``."""
    weights = np.asarray(weights, dtype=float)
    if weights.size == 0:
        return 1.0
    med = np.median(weights)
    ratio = np.inf if med <= 0 else float(np.max(weights) / med)
    if ratio > threshold:
        warnings.warn(
            f"density-ratio weights are extreme (max/median = {ratio:.3g}); the studies may overlap poorly",
            ExtremeWeightsWarning,
            stacklevel=3,
        )
    return ratio


@dataclass(frozen=True, eq=False)
class TiltModel:
    """Exponential-tilt likelihood as a stackable block.

    The per-row score is ``d(S) [I - q]`` with
    ``q = rho e^{d'omega} / (1 + rho e^{d'omega})`` and ``rho = n1 / n0``
    held fixed.
    """

    dataset: CombinedDataset
    d_spec: FeatureSpec
    name: str = "omega"

    def __post_init__(self):
        ds = self.dataset
        if ds.n1 == 0:
            raise EmptyInternalStudy("density ratio needs internal participants")
        if ds.n0 == 0:
            raise EmptyExternalStudy("density ratio needs external participants")
        if not self.d_spec.has_intercept:
            raise PreconditionError("density-ratio features must include an intercept")
        if self.d_spec.uses_study:
            raise PreconditionError("density-ratio features cannot use the study indicator")
        object.__setattr__(self, "design", eval_features(ds.X, self.d_spec))
        object.__setattr__(self, "label", ds.study.astype(float))

    @property
    def rho(self) -> float:
        return self.dataset.n1 / self.dataset.n0

    @property
    def dim(self) -> int:
        return len(self.d_spec)

    def weights(self, omega: np.ndarray, warn: bool = False) -> np.ndarray:
        """``omega(S_t)`` on every row."""
        return _clamped_exp(self.design @ omega, warn)

    def loglik(self, omega: np.ndarray) -> float:
        eta = self.design @ omega
        val = self.label * eta - np.logaddexp(0.0, eta + np.log(self.rho))
        return float(np.sum(val) / self.dataset.n)

    def fit(self, tol: float = 1e-10, max_iter: int = 100) -> tuple[np.ndarray, int]:
        D, y = self.design, self.label
        _check_design(D, np.ones_like(y), "density-ratio features")
        off = np.full_like(y, np.log(self.rho))
        omega, iters = _newton_logistic(D, y, np.ones_like(y), off, None, tol, max_iter, self.dataset.n)
        _check_separation(D, y, np.ones_like(y), omega, off, "density ratio")
        return omega, iters

    def block(self) -> EquationBlock:
        ds, D, y, name = self.dataset, self.design, self.label, self.name
        off = np.log(self.rho)

        def score(params: Params) -> np.ndarray:
            q = expit(D @ params[name] + off)
            return ds.group_sum(D * (y - q)[:, None])

        def jac(params: Params):
            q = expit(D @ params[name] + off)
            return {name: -(D * (q * (1 - q))[:, None]).T @ D / ds.n}

        return EquationBlock(name, self.dim, score, (), lambda p: self.fit()[0], jac, labels=self.d_spec.labels)


def fit_density_ratio(dataset: CombinedDataset, d_spec: FeatureSpec, *, tol: float = 1e-10, max_iter: int = 100) -> DensityRatioFit:
    """Fit ``omega`` by maximising the exponential-tilt log-likelihood."""
    model = TiltModel(dataset, d_spec)
    omega, iters = model.fit(tol, max_iter)
    check_weight_overlap(model.weights(omega, warn=True)[dataset.study == 0])
    return DensityRatioFit(omega, d_spec, model.rho, True, iters, model.loglik(omega), model.block())
