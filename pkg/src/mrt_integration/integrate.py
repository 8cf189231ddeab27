"""Data-integration estimators built on stacked WCLS equations.

Every estimator is assembled from named equation blocks:

========== ==============================================================
``ph``     estimated ``p_h`` (only when requested; otherwise supplied)
``pr_int`` constant ``p_r`` fitted on internal rows (centering, ``sigma_r^2``)
``pr_pool`` constant treatment probability on pooled rows
``W_int``  WCLS with ``f_r`` on internal rows
``W_pool`` WCLS with ``f_r`` on pooled rows (the naive estimator)
``Ws_int`` WCLS with ``f_s`` on internal rows (``beta_s``)
``Ws_pool`` WCLS with ``f_s`` on pooled rows (``beta_s``, shared model)
``P_int``  projection of ``f_s'beta_s`` (internal ``beta_s``) onto ``f_r``
``P_pool`` projection of ``f_s'beta_s`` (pooled ``beta_s``) onto ``f_r``
``gamma``  regressions of the non-shared ``f_s`` columns on ``f_r``
``omega``  exponential-tilt density ratio
``et``     density-ratio reweighted WCLS on external rows
``pi``     internal-study fraction
``dr_int`` pseudo-outcome regression on internal rows
``dr_ext`` doubly robust external-study equation
========== ==============================================================

Blocks whose ``p_h`` is estimated carry an ``_obs`` suffix.  All requested
methods share one stacked system, so cross-estimator covariances are
coherent; each method's covariance is the sub-block of the joint sandwich
over the blocks it depends on, with its own ``n / (n - p)`` factor.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .datamodel import CombinedDataset, ModeratorConfig, validate
from .errors import (
    EmptyExternalStudy,
    EmptyInternalStudy,
    PreconditionError,
)
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
from .meta import StackedEstimates, meta_combine, meta_combine_fixed, meta_combine_kronecker
from .output import EstimatorOutput
from .propensity import ProbabilityModel, TiltModel, check_weight_overlap
from .wcls import ProbSource, WCLSBlock, observed_prob

__all__ = [
    "IntegrationOptions",
    "SharedModel",
    "GammaEstimate",
    "SharedEffectsReport",
    "Assembly",
    "METHODS",
    "run_methods",
    "fit_shared_model",
    "estimate_gamma",
    "awcls",
    "pwcls",
    "etwcls",
    "dr_internal",
    "dr_external",
    "drwcls",
    "petwcls",
    "shared_effects_test",
]


@dataclass(frozen=True)
class IntegrationOptions:
    """Options shared by the integration estimators.

    Parameters
    ----------
    dof_adjust
        Multiply each method's covariance by ``n / (n - p)`` with ``p`` the
        number of parameters its estimate depends on.
    ph_spec
        Features of the logistic ``p_h`` model used by the ``-Obs`` variant
        (and by every block when ``estimate_ph`` is set).
    estimate_ph
        Estimate ``p_h`` for all methods instead of using supplied values.
    kron_average
        Average the Kronecker factor over all coordinates.
    tol, max_iter
        Solver controls.
    """

    dof_adjust: bool = True
    ph_spec: FeatureSpec | None = None
    estimate_ph: bool = False
    kron_average: bool = False
    tol: float = 1e-10
    max_iter: int = 100


@dataclass(frozen=True, eq=False)
class SharedModel:
    """Outcome model ``m(H, a) = g'alpha + (a - p_s) f_s'beta_s``."""

    alpha_hat: np.ndarray
    beta_s_hat: np.ndarray
    p_s: float
    g: FeatureSpec
    f_s: FeatureSpec

    def m(self, X: np.ndarray, a) -> np.ndarray:
        X = np.atleast_2d(X)
        return eval_features(X, self.g) @ self.alpha_hat + (np.asarray(a) - self.p_s) * self.effect(X)

    def effect(self, X: np.ndarray) -> np.ndarray:
        """``m(H, 1) - m(H, 0) = f_s(S)'beta_s``."""
        return eval_features(np.atleast_2d(X), self.f_s) @ self.beta_s_hat


@dataclass(frozen=True, eq=False)
class GammaEstimate:
    gamma_hat: np.ndarray
    free_columns: np.ndarray
    c: int
    score_block: EquationBlock | None = None


@dataclass(frozen=True)
class SharedEffectsReport:
    statistic: float
    dof: int
    p_value: float
    interaction: np.ndarray
    covariance: np.ndarray


# --- method table ----------------------------------------------------------


@dataclass(frozen=True)
class MethodPlan:
    kind: str  # direct | delta | meta | kron | equal
    parts: tuple[str, ...]
    population: str = "pooled"  # participants defining n for the dof factor


METHODS: dict[str, MethodPlan] = {
    "WCLS-Internal": MethodPlan("direct", ("W_int",), "internal"),
    "WCLS-Pooled": MethodPlan("direct", ("W_pool",)),
    "P-WCLS-Internal": MethodPlan("direct", ("P_int",), "internal"),
    "P-WCLS-Pooled": MethodPlan("direct", ("P_pool",)),
    "P-WCLS-Pooled-Obs": MethodPlan("direct", ("P_pool_obs",)),
    "A-WCLS": MethodPlan("delta", ("Ws_pool", "gamma")),
    "A-WCLS-Internal": MethodPlan("delta", ("Ws_int", "gamma"), "internal"),
    "ET-WCLS-Raw": MethodPlan("direct", ("et",)),
    "ET-WCLS": MethodPlan("meta", ("W_int", "et")),
    "ET-WCLS-Kron": MethodPlan("kron", ("W_int", "et")),
    "ET-WCLS-Equal": MethodPlan("equal", ("W_int", "et")),
    "DR-WCLS-Internal": MethodPlan("direct", ("dr_int",)),
    "DR-WCLS-External": MethodPlan("direct", ("dr_ext",)),
    "DR-WCLS": MethodPlan("meta", ("dr_int", "dr_ext")),
    "PET-WCLS": MethodPlan("meta", ("W_int", "P_pool", "et")),
}

# Methods reported in the main simulation table.
TABLE_METHODS = (
    "WCLS-Internal",
    "WCLS-Pooled",
    "P-WCLS-Internal",
    "P-WCLS-Pooled",
    "P-WCLS-Pooled-Obs",
    "ET-WCLS-Equal",
    "ET-WCLS-Kron",
    "ET-WCLS",
    "DR-WCLS",
    "PET-WCLS",
)

# --- block assembly --------------------------------------------------------


class Assembly:
    """Lazily builds the equation blocks needed by a set of methods.

    ``shared`` injects a fixed outcome model for the doubly robust blocks
    and ``ratio`` a fixed per-row density ratio; neither is then stacked.
    """

    def __init__(
        self,
        dataset: CombinedDataset,
        config: ModeratorConfig,
        d_spec: FeatureSpec | None = None,
        options: IntegrationOptions | None = None,
        *,
        shared: SharedModel | None = None,
        ratio: np.ndarray | None = None,
    ):
        self.ds = dataset
        self.config = config
        self.d_spec = d_spec if d_spec is not None else config.d
        self.options = options or IntegrationOptions()
        self.shared = shared
        self.ratio = None if ratio is None else np.asarray(ratio, dtype=float)
        X = dataset.X
        self.G = eval_features(X, config.g)
        self.Fr = eval_features(X, config.f_r)
        self.Fs = eval_features(X, config.f_s)
        self.I = dataset.study.astype(float)
        self.E = 1.0 - self.I
        self.ones = np.ones(dataset.n_rows)
        self.blocks: dict[str, EquationBlock] = {}
        self.models: dict[str, object] = {}
        self._aux: dict[str, dict] = {}

    # -- registry --

    def require(self, *names: str) -> None:
        for name in names:
            if name in self.blocks:
                continue
            obs = name.endswith("_obs") or (self.options.estimate_ph and name not in ("pr_int", "pr_pool", "omega", "pi", "gamma"))
            base = name[:-4] if name.endswith("_obs") else name
            builder = getattr(self, f"_build_{base}", None)
            if builder is None:
                raise KeyError(f"unknown block {name!r}")
            block = builder(name, obs)
            for r in block.reads:
                if r not in self.blocks:
                    raise RuntimeError(f"block {name!r} built before its dependency {r!r}")
            self.blocks[name] = block

    def system(self) -> StackedSystem:
        return StackedSystem(tuple(self.blocks.values()), self.ds.n)

    def _name(self, base: str, obs: bool) -> str:
        return f"{base}_obs" if obs and not self.options.estimate_ph else base

    # -- nuisance probabilities --

    def _ph_source(self, obs: bool) -> ProbSource:
        if obs:
            self.require("ph")
            return ProbSource.from_model(self.models["ph"])
        if self.ds.prob_h is None:
            raise PreconditionError(
                "dataset has no prob_h column; supply p_h or request an estimated p_h model"
            )
        return ProbSource.fixed(self.ds.prob_h)

    def _build_ph(self, name, obs):
        spec = self.options.ph_spec
        if spec is None:
            raise PreconditionError("estimating p_h needs a ph_spec")
        if self.ds.level_count != 1:
            raise PreconditionError("integration estimators support binary treatments only")
        model = ProbabilityModel(name, self.ds, eval_features(self.ds.X, spec, self.ds.study), self.ones, 1, spec)
        self.models[name] = model
        return model.block()

    def _constant(self, name, mask):
        if self.ds.level_count != 1:
            raise PreconditionError("integration estimators support binary treatments only")
        model = ProbabilityModel(name, self.ds, np.ones((self.ds.n_rows, 1)), mask, 1, FeatureSpec.parse("1"))
        self.models[name] = model
        return model.block()

    def _build_pr_int(self, name, obs):
        if self.ds.n1 == 0:
            raise EmptyInternalStudy("no participants with I=1")
        return self._constant(name, self.I)

    def _build_pr_pool(self, name, obs):
        return self._constant(name, self.ones)

    def _pr(self, name: str) -> ProbSource:
        self.require(name)
        return ProbSource.from_model(self.models[name])

    # -- WCLS blocks --

    def _wcls(self, name, F, labels_f, pr_name, mask, obs, ratio=None):
        pr = self._pr(pr_name)
        ph = self._ph_source(obs)
        labels = tuple(f"alpha:{lab}" for lab in self.config.g.labels) + labels_f
        builder = WCLSBlock(name, self.ds, self.G, (F,), pr, ph, mask, ratio, labels)
        self.models[name] = builder
        return builder.block()

    def _build_W_int(self, name, obs):
        return self._wcls(name, self.Fr, self.config.f_r.labels, "pr_int", self.I, obs)

    def _build_W_pool(self, name, obs):
        return self._wcls(name, self.Fr, self.config.f_r.labels, "pr_pool", self.ones, obs)

    def _build_Ws_int(self, name, obs):
        return self._wcls(name, self.Fs, self.config.f_s.labels, "pr_int", self.I, obs)

    def _build_Ws_pool(self, name, obs):
        return self._wcls(name, self.Fs, self.config.f_s.labels, "pr_pool", self.ones, obs)

    def beta_part(self, params: Params, name: str) -> np.ndarray:
        return params[name][self.G.shape[1]:]

    # -- projection-type blocks --

    def _sigma2(self, params: Params) -> np.ndarray:
        """``sigma_r^2`` on every row from the internal p_r fit."""
        p = self.models["pr_int"].probs(params["pr_int"])[:, 0]
        return p * (1 - p)

    def _projection(self, name, target_fn, weight_fn, reads, labels):
        ds, Fr = self.ds, self.Fr

        def score(params):
            w = weight_fn(params)
            e = target_fn(params) - Fr @ params[name]
            return ds.group_sum(Fr * (w * e)[:, None])

        def solve(params):
            return weighted_lstsq(Fr, target_fn(params), weight_fn(params), f"projection ({name})")

        def jac(params):
            w = weight_fn(params)
            return {name: -(Fr * w[:, None]).T @ Fr / ds.n}

        return EquationBlock(name, Fr.shape[1], score, reads, solve, jac, labels=labels)

    def _build_P(self, name, obs, source):
        src = self._name(source, obs)
        self.require("pr_int", src)
        Fs = self.Fs

        def target(params):
            return Fs @ self.beta_part(params, src)

        def weight(params):
            return self.I * self._sigma2(params)

        return self._projection(name, target, weight, (src, "pr_int"), self.config.f_r.labels)

    def _build_P_int(self, name, obs):
        return self._build_P(name, obs, "Ws_int")

    def _build_P_pool(self, name, obs):
        return self._build_P(name, obs, "Ws_pool")

    def _build_gamma(self, name, obs):
        self.require("pr_int")
        c, ds, Fr = self.config.c, self.ds, self.Fr
        targets = self.Fs[:, c:]
        d_r, k = Fr.shape[1], targets.shape[1]

        def score(params):
            w = self.I * self._sigma2(params)
            G = params[name].reshape(k, d_r)
            E = targets - Fr @ G.T
            cols = [Fr * (w * E[:, j])[:, None] for j in range(k)]
            return ds.group_sum(np.hstack(cols)) if k else np.zeros((ds.n, 0))

        def solve(params):
            w = self.I * self._sigma2(params)
            return np.concatenate([weighted_lstsq(Fr, targets[:, j], w, "gamma regression") for j in range(k)] + [[]])

        def jac(params):
            w = self.I * self._sigma2(params)
            blk = -(Fr * w[:, None]).T @ Fr / ds.n
            return {name: np.kron(np.eye(k), blk)}

        labels = tuple(
            f"{self.config.f_s.labels[c + j]}~{lab}" for j in range(k) for lab in self.config.f_r.labels
        )
        return EquationBlock(name, d_r * k, score, ("pr_int",), solve, jac, labels=labels)

    # -- density ratio --

    def _build_omega(self, name, obs):
        if self.d_spec is None:
            raise PreconditionError("density-ratio features (d) are required")
        model = TiltModel(self.ds, self.d_spec, name)
        self.models[name] = model
        return model.block()

    def _ratio_reader(self) -> tuple[tuple[str, ...], Callable[[Params], np.ndarray]]:
        if self.ratio is not None:
            r = self.ratio
            return (), lambda params: r
        self.require("omega")
        model = self.models["omega"]
        return ("omega",), lambda params: model.weights(params["omega"])

    def _build_et(self, name, obs):
        if self.ds.n0 == 0:
            raise EmptyExternalStudy("no participants with I=0")
        return self._wcls(name, self.Fr, self.config.f_r.labels, "pr_int", self.E, obs, self._ratio_reader())

    def _build_pi(self, name, obs):
        if self.ds.n0 == 0:
            raise EmptyExternalStudy("no participants with I=0")
        ds = self.ds
        Ip = ds.participant_study.astype(float)

        def score(params):
            return (Ip - params[name][0])[:, None]

        return EquationBlock(
            name, 1, score, (), lambda p: np.array([Ip.mean()]),
            lambda p: {name: np.array([[-1.0]])}, labels=("pi",),
        )

    # -- doubly robust --

    def _shared_terms(self, obs):
        """``(reads, fn)`` with ``fn(params) -> (W, resid, effect)`` on every row.

        ``resid = Y - m(H, A)`` and ``effect = f_s'beta_s``; ``W`` uses the
        internal ``p_r``.
        """
        self.require("pr_int")
        ph = self._ph_source(obs)
        ds, G, Fs = self.ds, self.G, self.Fs
        pr_model = self.models["pr_int"]
        if self.shared is not None:
            sm = self.shared
            alpha, beta_s, p_s = sm.alpha_hat, sm.beta_s_hat, sm.p_s
            gA = eval_features(ds.X, sm.g) @ alpha
            eff_fixed = eval_features(ds.X, sm.f_s) @ beta_s
            fixed_resid = ds.y - gA - (ds.a - p_s) * eff_fixed
            reads: tuple[str, ...] = ("pr_int",) + ph.reads

            def fn(params):
                Pr = pr_model.probs(params["pr_int"])
                W = observed_prob(Pr, ds.a) / observed_prob(ph(params), ds.a)
                return W, Pr[:, 0], fixed_resid, eff_fixed
        else:
            ws = self._name("Ws_pool", obs)
            self.require("pr_pool", ws)
            ps_model = self.models["pr_pool"]
            q = G.shape[1]
            reads = ("pr_int", "pr_pool", ws) + ph.reads

            def fn(params):
                Pr = pr_model.probs(params["pr_int"])
                p_s = ps_model.probs(params["pr_pool"])[:, 0]
                th = params[ws]
                eff = Fs @ th[q:]
                resid = ds.y - G @ th[:q] - (ds.a - p_s) * eff
                W = observed_prob(Pr, ds.a) / observed_prob(ph(params), ds.a)
                return W, Pr[:, 0], resid, eff

        return tuple(dict.fromkeys(reads)), fn

    def _build_dr_int(self, name, obs):
        if self.ds.n1 == 0:
            raise EmptyInternalStudy("no participants with I=1")
        reads, terms = self._shared_terms(obs)
        a = self.ds.a

        def target(params):
            W, pr, resid, eff = terms(params)
            s2 = pr * (1 - pr)
            return W * (a - pr) * resid / s2 + eff

        def weight(params):
            return self.I * self._sigma2(params)

        return self._projection(name, target, weight, reads, self.config.f_r.labels)

    def _build_dr_ext(self, name, obs):
        if self.ds.n0 == 0:
            raise EmptyExternalStudy("no participants with I=0")
        reads, terms = self._shared_terms(obs)
        rreads, ratio = self._ratio_reader()
        self.require("pi")
        reads = tuple(dict.fromkeys(reads + rreads + ("pi",)))
        ds, Fr, I, E, a = self.ds, self.Fr, self.I, self.E, self.ds.a

        def pieces(params):
            W, pr, resid, eff = terms(params)
            pi = params["pi"][0]
            s2 = pr * (1 - pr)
            u = E / (1 - pi) * ratio(params) * W * (a - pr) * resid + I / pi * s2 * eff
            v = I / pi * s2
            return u, v

        def score(params):
            u, v = pieces(params)
            return ds.group_sum(Fr * (u - v * (Fr @ params[name]))[:, None])

        def solve(params):
            u, v = pieces(params)
            lhs = (Fr * v[:, None]).T @ Fr
            rhs = Fr.T @ u
            try:
                return np.linalg.solve(lhs, rhs)
            except np.linalg.LinAlgError:
                raise PreconditionError("external doubly robust equations are singular") from None

        def jac(params):
            _, v = pieces(params)
            return {name: -(Fr * v[:, None]).T @ Fr / ds.n}

        return EquationBlock(name, Fr.shape[1], score, reads, solve, jac, labels=self.config.f_r.labels)


# --- running methods -------------------------------------------------------


def _check_inputs(dataset, config, methods):
    validate(dataset, config).raise_if_invalid()
    if dataset.level_count != 1:
        raise PreconditionError("integration estimators support binary treatments only")
    for m in methods:
        if m not in METHODS:
            raise KeyError(f"unknown method {m!r}; choose from {sorted(METHODS)}")


def _dof_factor(n: int, p: int, adjust: bool) -> float:
    if not adjust:
        return 1.0
    if n <= p:
        raise PreconditionError(f"degrees-of-freedom adjustment needs n > p (n={n}, p={p})")
    return n / (n - p)


@dataclass(frozen=True, eq=False)
class MethodsFit:
    """Joint fit of several methods; ``outputs`` maps method to result."""

    outputs: dict[str, EstimatorOutput]
    fit: FitResult
    system: StackedSystem
    assembly: Assembly


def run_methods(
    dataset: CombinedDataset,
    config: ModeratorConfig,
    methods: Sequence[str],
    d_spec: FeatureSpec | None = None,
    options: IntegrationOptions | None = None,
    *,
    shared: SharedModel | None = None,
    ratio: np.ndarray | None = None,
    check: bool = True,
) -> MethodsFit:
    """Fit several methods in one stacked system and extract each estimate."""
    options = options or IntegrationOptions()
    if check:
        _check_inputs(dataset, config, methods)
    asm = Assembly(dataset, config, d_spec, options, shared=shared, ratio=ratio)
    for m in methods:
        plan = METHODS[m]
        parts = [p if not p.endswith("_obs") or not options.estimate_ph else p[:-4] for p in plan.parts]
        asm.require(*parts)
    system = asm.system()
    theta = solve_system(system, tol=options.tol, max_iter=options.max_iter)
    fit = sandwich_covariance(system, theta, dof_adjust=False)
    params = system.params(theta)

    if "omega" in asm.models:
        check_weight_overlap(asm.models["omega"].weights(params["omega"], warn=True)[dataset.study == 0])

    labels = config.f_r.labels
    q = asm.G.shape[1]
    d_r = len(config.f_r)
    base_report = _nuisance_report(asm, params)
    outputs = {}
    for m in methods:
        plan = METHODS[m]
        parts = [asm._name(p[:-4], True) if p.endswith("_obs") else p for p in plan.parts]
        closure = system.closure(parts)
        p_m = sum(system.block(b).dim for b in closure)
        n_m = dataset.n1 if plan.population == "internal" else dataset.n
        k = _dof_factor(n_m, p_m, options.dof_adjust)

        def beta_index(part):
            idx = np.arange(system.p)[system.slices[part]]
            return idx[q:] if isinstance(asm.models.get(part), WCLSBlock) else idx

        report = base_report
        if plan.kind == "direct":
            idx = beta_index(parts[0])
            est, cov = theta[idx], fit.covariance[np.ix_(idx, idx)] * k
        elif plan.kind == "delta":
            est, cov = _awcls_delta(asm, system, fit, parts)
            cov = cov * k
        else:
            idx = np.concatenate([beta_index(p) for p in parts])
            stacked = StackedEstimates(theta[idx], fit.sigma_hat[np.ix_(idx, idx)] * k, len(parts), d_r, fit.n)
            if plan.kind == "meta":
                res = meta_combine(stacked)
            elif plan.kind == "kron":
                res = meta_combine_kronecker(stacked, average=options.kron_average)
            else:
                res = meta_combine_fixed(stacked, np.full(len(parts), 1.0 / len(parts)))
            est, cov = res.beta_hat, res.covariance
            report = dict(report, constituents=list(parts), weights=res.weights)
        outputs[m] = EstimatorOutput(
            m, est, cov, labels, dataset.n1, dataset.n0 if plan.population != "internal" else 0, report
        )
    return MethodsFit(outputs, fit, system, asm)


def _nuisance_report(asm: Assembly, params: Params) -> dict:
    out = {}
    for name in ("pr_int", "pr_pool"):
        if name in asm.models:
            out[name] = float(asm.models[name].probs(params[name])[0, 0])
    if "omega" in asm.models:
        out["omega"] = params["omega"].copy()
    if "pi" in asm.blocks:
        out["pi"] = float(params["pi"][0])
    return out


def gamma_matrix(gamma_free: np.ndarray, c: int, d_r: int, d_s: int) -> np.ndarray:
    """``Gamma = [[I_c; 0], gamma_(c+1), ..., gamma_(d_s)]`` of shape ``(d_r, d_s)``."""
    G = np.zeros((d_r, d_s))
    G[:c, :c] = np.eye(c)
    G[:, c:] = np.asarray(gamma_free).reshape(d_s - c, d_r).T
    return G


def _awcls_delta(asm: Assembly, system: StackedSystem, fit: FitResult, parts):
    ws, gname = parts
    c, d_r, d_s = asm.config.c, len(asm.config.f_r), len(asm.config.f_s)
    q = asm.G.shape[1]
    idx_bs = np.arange(system.p)[system.slices[ws]][q:]
    idx_g = np.arange(system.p)[system.slices[gname]]
    idx = np.concatenate([idx_bs, idx_g])
    phi = fit.theta_hat[idx]
    beta_s, gam = phi[:d_s], phi[d_s:]
    Gam = gamma_matrix(gam, c, d_r, d_s)
    D = np.hstack([Gam, np.kron(beta_s[c:][None, :], np.eye(d_r))])
    cov = D @ fit.covariance[np.ix_(idx, idx)] @ D.T
    return Gam @ beta_s, 0.5 * (cov + cov.T)


# --- public estimators -----------------------------------------------------


def fit_shared_model(
    dataset: CombinedDataset,
    config: ModeratorConfig,
    options: IntegrationOptions | None = None,
    population: str = "pooled",
) -> SharedModel:
    """Fit ``m(H, a)`` by WCLS with moderators ``f_s`` on ``population`` rows."""
    asm = Assembly(dataset, config, None, options)
    name = "Ws_pool" if population == "pooled" else "Ws_int"
    asm.require(name)
    system = asm.system()
    theta = solve_system(system)
    params = system.params(theta)
    q = asm.G.shape[1]
    ps_name = "pr_pool" if population == "pooled" else "pr_int"
    p_s = float(asm.models[ps_name].probs(params[ps_name])[0, 0])
    th = params[asm._name(name, False)]
    return SharedModel(th[:q].copy(), th[q:].copy(), p_s, config.g, config.f_s)


def estimate_gamma(
    dataset: CombinedDataset, config: ModeratorConfig, options: IntegrationOptions | None = None
) -> GammaEstimate:
    """Weighted regressions of the non-shared ``f_s`` columns on ``f_r`` (internal rows)."""
    if dataset.n1 == 0:
        raise EmptyInternalStudy("no participants with I=1")
    asm = Assembly(dataset, config, None, options)
    asm.require("gamma")
    system = asm.system()
    theta = solve_system(system)
    free = system.params(theta)["gamma"].copy()
    c, d_r, d_s = config.c, len(config.f_r), len(config.f_s)
    return GammaEstimate(gamma_matrix(free, c, d_r, d_s), free.reshape(d_s - c, d_r), c, asm.blocks["gamma"])


def awcls(
    dataset: CombinedDataset,
    config: ModeratorConfig,
    options: IntegrationOptions | None = None,
    *,
    population: str = "pooled",
) -> EstimatorOutput:
    """``beta_r = Gamma beta_s`` with a delta-method covariance."""
    method = "A-WCLS" if population == "pooled" else "A-WCLS-Internal"
    return run_methods(dataset, config, [method], None, options).outputs[method]


def pwcls(
    dataset: CombinedDataset,
    config: ModeratorConfig,
    options: IntegrationOptions | None = None,
    *,
    population: str = "pooled",
    observed_ph: bool = False,
) -> EstimatorOutput:
    """Project ``f_s'beta_s`` onto ``f_r`` over internal rows."""
    if population == "internal":
        method = "P-WCLS-Internal"
    else:
        method = "P-WCLS-Pooled-Obs" if observed_ph else "P-WCLS-Pooled"
    return run_methods(dataset, config, [method], None, options).outputs[method]


_ET_VARIANTS = {"meta": "ET-WCLS", "kron": "ET-WCLS-Kron", "equal": "ET-WCLS-Equal", "none": "ET-WCLS-Raw"}


def etwcls(
    dataset: CombinedDataset,
    config: ModeratorConfig,
    d_spec: FeatureSpec | None = None,
    options: IntegrationOptions | None = None,
    *,
    combine: str = "meta",
) -> EstimatorOutput:
    """Density-ratio reweighted WCLS on the external study.

    ``combine`` selects how the reweighted estimate is pooled with
    WCLS-Internal: ``meta`` (full covariance), ``kron`` (Kronecker
    structure), ``equal`` (fixed halves) or ``none`` (the reweighted
    estimate alone).
    """
    if combine not in _ET_VARIANTS:
        raise ValueError(f"combine must be one of {sorted(_ET_VARIANTS)}")
    method = _ET_VARIANTS[combine]
    return run_methods(dataset, config, [method], d_spec, options).outputs[method]


def dr_internal(
    dataset: CombinedDataset,
    shared: SharedModel | None,
    config: ModeratorConfig,
    options: IntegrationOptions | None = None,
) -> EstimatorOutput:
    """Pseudo-outcome regression on the internal study.

    With ``shared=None`` the outcome model is fitted on pooled data inside
    the same stacked system; otherwise the given model is held fixed.
    """
    return run_methods(dataset, config, ["DR-WCLS-Internal"], None, options, shared=shared).outputs["DR-WCLS-Internal"]


def dr_external(
    dataset: CombinedDataset,
    shared: SharedModel | None,
    ratio,
    config: ModeratorConfig,
    options: IntegrationOptions | None = None,
) -> EstimatorOutput:
    """Doubly robust external-study estimator.

    ``ratio`` is either a feature spec ``d`` (the tilt model is fitted and
    stacked) or a per-row array of fixed density-ratio values.
    """
    if isinstance(ratio, FeatureSpec) or ratio is None:
        return run_methods(dataset, config, ["DR-WCLS-External"], ratio, options, shared=shared).outputs["DR-WCLS-External"]
    return run_methods(
        dataset, config, ["DR-WCLS-External"], None, options, shared=shared, ratio=np.asarray(ratio)
    ).outputs["DR-WCLS-External"]


def drwcls(
    dataset: CombinedDataset,
    config: ModeratorConfig,
    d_spec: FeatureSpec | None = None,
    options: IntegrationOptions | None = None,
) -> EstimatorOutput:
    """Meta-combination of the internal and external doubly robust estimates."""
    return run_methods(dataset, config, ["DR-WCLS"], d_spec, options).outputs["DR-WCLS"]


def petwcls(
    dataset: CombinedDataset,
    config: ModeratorConfig,
    d_spec: FeatureSpec | None = None,
    options: IntegrationOptions | None = None,
) -> EstimatorOutput:
    """Meta-combination of WCLS-Internal, P-WCLS-Pooled and the reweighted estimate."""
    return run_methods(dataset, config, ["PET-WCLS"], d_spec, options).outputs["PET-WCLS"]


def shared_effects_test(
    dataset: CombinedDataset,
    config: ModeratorConfig,
    options: IntegrationOptions | None = None,
) -> SharedEffectsReport:
    """Wald test that the ``f_s``-moderated effects are equal across studies.

    Fits pooled WCLS with moderators ``(f_s, I f_s)`` and tests the
    interaction block with a chi-squared reference on ``d_s`` degrees of
    freedom.
    """
    options = options or IntegrationOptions()
    validate(dataset, config).raise_if_invalid()
    if dataset.n1 == 0:
        raise EmptyInternalStudy("no participants with I=1")
    if dataset.n0 == 0:
        raise EmptyExternalStudy("the shared-effects test needs an external study")
    asm = Assembly(dataset, config, None, options)
    asm.require("pr_pool")
    obs = options.estimate_ph
    ph = asm._ph_source(obs)
    F = np.hstack([asm.Fs, asm.Fs * asm.I[:, None]])
    labs = config.f_s.labels + tuple(f"I*{lab}" for lab in config.f_s.labels)
    builder = WCLSBlock("W_int_test", dataset, asm.G, (F,), asm._pr("pr_pool"), ph, asm.ones, None, labs)
    blocks = list(asm.blocks.values()) + [builder.block()]
    system = StackedSystem(blocks, dataset.n)
    theta = solve_system(system, tol=options.tol, max_iter=options.max_iter)
    fit = sandwich_covariance(system, theta, options.dof_adjust)
    d_s = len(config.f_s)
    idx = np.arange(system.p)[system.slices["W_int_test"]][-d_s:]
    delta = theta[idx]
    V = fit.covariance[np.ix_(idx, idx)]
    stat = float(delta @ np.linalg.solve(V, delta))
    return SharedEffectsReport(stat, d_s, float(chi2.sf(stat, d_s)), delta, V)
