"""Stacked estimating equations with a joint sandwich covariance.

A :class:`StackedSystem` is an ordered list of :class:`EquationBlock`
objects.  Each block owns a contiguous slice of the joint parameter vector
and returns one score row per participant (already summed over time).  A
block may read the parameters of earlier blocks, which is how nuisance
uncertainty propagates into the sandwich.

Sign convention: the bread is ``B = -d/dtheta mean_i psi_i(theta)`` so that
``sigma_hat = B^-1 M B^-T`` is the covariance of ``sqrt(n) * theta_hat``.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import NonConvergence, SingularBread, SingularNormalEquations

__all__ = [
    "Params",
    "EquationBlock",
    "StackedSystem",
    "FitResult",
    "solve_system",
    "sandwich_covariance",
    "delta_method",
    "finite_difference_jacobian",
    "block_jacobian_check",
    "weighted_lstsq",
]

ScoreFn = Callable[["Params"], np.ndarray]
JacFn = Callable[["Params"], Mapping[str, np.ndarray]]


class Params(Mapping):
    """Read-only view of a joint parameter vector, indexed by block name."""

    __slots__ = ("theta", "slices")

    def __init__(self, theta: np.ndarray, slices: Mapping[str, slice]):
        self.theta = theta
        self.slices = slices

    def __getitem__(self, name: str) -> np.ndarray:
        return self.theta[self.slices[name]]

    def __iter__(self):
        return iter(self.slices)

    def __len__(self) -> int:
        return len(self.slices)

    def replace(self, name: str, value: np.ndarray) -> Params:
        theta = self.theta.copy()
        theta[self.slices[name]] = value
        return Params(theta, self.slices)


@dataclass(frozen=True, eq=False)
class EquationBlock:
    """One set of estimating equations in a stacked system.

    Parameters
    ----------
    name
        Unique label; other blocks refer to it in ``reads``.
    dim
        Number of parameters (and score components) owned by the block.
    score
        ``params -> (n, dim)`` per-participant score contributions.
    reads
        Names of upstream blocks whose parameters enter ``score``.
    solve
        Optional closed-form or specialised solver returning this block's
        parameters given upstream values.  Blocks without one are solved by
        damped Newton iterations.
    jacobian
        Optional analytic ``d mean(score) / d theta_name`` for some subset of
        ``(name,) + reads``; missing entries fall back to central finite
        differences.
    """

    name: str
    dim: int
    score: ScoreFn
    reads: tuple[str, ...] = ()
    solve: Callable[[Params], np.ndarray] | None = None
    jacobian: JacFn | None = None
    init: np.ndarray | None = None
    labels: tuple[str, ...] | None = None

    def mean_score(self, params: Params) -> np.ndarray:
        return self.score(params).mean(axis=0)


@dataclass(frozen=True, eq=False)
class StackedSystem:
    blocks: tuple[EquationBlock, ...]
    n: int
    slices: dict[str, slice] = field(init=False, repr=False)
    stages: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        blocks = tuple(self.blocks)
        object.__setattr__(self, "blocks", blocks)
        slices: dict[str, slice] = {}
        stages: dict[str, int] = {}
        pos = 0
        for b in blocks:
            if b.name in slices:
                raise ValueError(f"duplicate block name {b.name!r}")
            for r in b.reads:
                if r not in slices:
                    raise ValueError(f"block {b.name!r} reads {r!r}, which is not an earlier block")
            slices[b.name] = slice(pos, pos + b.dim)
            stages[b.name] = 1 + max((stages[r] for r in b.reads), default=-1)
            pos += b.dim
        object.__setattr__(self, "slices", slices)
        object.__setattr__(self, "stages", stages)
        if self.n < 1:
            raise ValueError("system needs at least one participant")

    @property
    def p(self) -> int:
        return sum(b.dim for b in self.blocks)

    def block(self, name: str) -> EquationBlock:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def closure(self, names: Sequence[str]) -> list[str]:
        """Names of ``names`` plus every block they depend on, in system order."""
        need = set(names)
        for b in reversed(self.blocks):
            if b.name in need:
                need.update(b.reads)
        return [b.name for b in self.blocks if b.name in need]

    def indices(self, names: Sequence[str]) -> np.ndarray:
        return np.concatenate([np.arange(self.p)[self.slices[nm]] for nm in names])

    def labels(self) -> list[str]:
        out = []
        for b in self.blocks:
            labs = b.labels or tuple(str(k) for k in range(b.dim))
            out += [f"{b.name}[{lab}]" for lab in labs]
        return out

    def initial_theta(self) -> np.ndarray:
        theta = np.zeros(self.p)
        for b in self.blocks:
            if b.init is not None:
                theta[self.slices[b.name]] = b.init
        return theta

    def params(self, theta: np.ndarray) -> Params:
        return Params(np.asarray(theta, dtype=float), self.slices)

    def scores(self, theta: np.ndarray) -> np.ndarray:
        """Per-participant stacked scores, shape ``(n, p)``."""
        params = self.params(theta)
        return np.hstack([b.score(params) for b in self.blocks])

    def mean_score(self, theta: np.ndarray) -> np.ndarray:
        return self.scores(theta).mean(axis=0)


@dataclass(frozen=True, eq=False)
class FitResult:
    theta_hat: np.ndarray
    sigma_hat: np.ndarray
    bread: np.ndarray
    meat: np.ndarray
    n: int
    dof_adjusted: bool
    slices: dict[str, slice]
    labels: tuple[str, ...] = ()

    @property
    def p(self) -> int:
        return self.theta_hat.shape[0]

    @property
    def covariance(self) -> np.ndarray:
        """Covariance of ``theta_hat`` itself, ``sigma_hat / n``."""
        return self.sigma_hat / self.n

    def estimate(self, name: str) -> np.ndarray:
        return self.theta_hat[self.slices[name]]

    def cov_block(self, rows: str, cols: str | None = None) -> np.ndarray:
        cols = rows if cols is None else cols
        return self.covariance[self.slices[rows], self.slices[cols]]


# --- linear algebra helpers ------------------------------------------------


def weighted_lstsq(Z: np.ndarray, y: np.ndarray, w: np.ndarray, what: str = "design") -> np.ndarray:
    """Solve ``sum w z (y - z'b) = 0`` with a rank check.

    Rank deficiency raises :class:`SingularNormalEquations` instead of
    silently dropping columns, so coefficients keep their meaning.
    """
    keep = w != 0
    if not np.any(keep):
        raise SingularNormalEquations(f"{what}: no rows carry positive weight")
    if np.any(w[keep] < 0):
        raise ValueError("weights must be non-negative")
    sw = np.sqrt(w[keep])
    A = Z[keep] * sw[:, None]
    b = y[keep] * sw
    coef, _, rank, sv = np.linalg.lstsq(A, b, rcond=None)
    tol = sv.max() * max(A.shape) * np.finfo(float).eps if sv.size else 0.0
    if rank < Z.shape[1] or (sv.size and sv.min() <= tol):
        raise SingularNormalEquations(f"{what}: rank {rank} < {Z.shape[1]} columns")
    return coef


def _steps(theta: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return 1e-6 * (1.0 + np.abs(theta[idx]))


def finite_difference_jacobian(
    fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, idx: np.ndarray | None = None
) -> np.ndarray:
    """Central differences of ``fn`` with step ``1e-6 (1 + |theta_j|)``."""
    theta = np.asarray(theta, dtype=float)
    idx = np.arange(theta.size) if idx is None else np.asarray(idx)
    h = _steps(theta, idx)
    cols = []
    for j, hj in zip(idx, h):
        up = theta.copy()
        dn = theta.copy()
        up[j] += hj
        dn[j] -= hj
        cols.append((np.asarray(fn(up)) - np.asarray(fn(dn))) / (2 * hj))
    return np.column_stack(cols) if cols else np.zeros((np.size(fn(theta)), 0))


def _block_jacobian(system: StackedSystem, block: EquationBlock, theta: np.ndarray, use_analytic: bool = True):
    """Row band of ``d mean(score) / d theta`` for one block, shape ``(dim, p)``."""
    band = np.zeros((block.dim, system.p))
    params = system.params(theta)
    analytic = dict(block.jacobian(params)) if (use_analytic and block.jacobian) else {}
    for name in (block.name,) + block.reads:
        sl = system.slices[name]
        if name in analytic:
            band[:, sl] = analytic[name]
            continue
        idx = np.arange(system.p)[sl]

        def f(th):
            return block.mean_score(system.params(th))

        band[:, sl] = finite_difference_jacobian(f, theta, idx)
    return band


def block_jacobian_check(system: StackedSystem, theta: np.ndarray) -> dict[str, float]:
    """Max relative deviation between analytic and finite-difference partials.

    Returns one entry per ``(block, upstream)`` pair that has an analytic
    override; the scale is ``max(1, max |entry|)`` of the analytic matrix.
    """
    theta = np.asarray(theta, dtype=float)
    out = {}
    params = system.params(theta)
    for b in system.blocks:
        if b.jacobian is None:
            continue
        for name, J in b.jacobian(params).items():
            idx = np.arange(system.p)[system.slices[name]]
            fd = finite_difference_jacobian(lambda th: b.mean_score(system.params(th)), theta, idx)
            scale = max(1.0, float(np.max(np.abs(J))) if J.size else 1.0)
            out[f"{b.name}/{name}"] = float(np.max(np.abs(J - fd)) / scale) if J.size else 0.0
    return out


# --- solving ---------------------------------------------------------------


def _newton_block(system, block, theta, tol, max_iter):
    sl = system.slices[block.name]
    for it in range(max_iter):
        params = system.params(theta)
        psi = block.mean_score(params)
        if np.max(np.abs(psi)) <= tol:
            return theta
        J = _block_jacobian(system, block, theta)[:, sl]
        try:
            step = np.linalg.solve(J, -psi)
        except np.linalg.LinAlgError:
            raise SingularNormalEquations(f"block {block.name!r}: singular Jacobian") from None
        base = np.max(np.abs(psi))
        t = 1.0
        for _ in range(30):
            trial = theta.copy()
            trial[sl] += t * step
            new = np.max(np.abs(block.mean_score(system.params(trial))))
            if np.isfinite(new) and new < base:
                break
            t *= 0.5
        theta = trial
    raise NonConvergence(f"block {block.name!r} did not converge in {max_iter} iterations")


def solve_system(
    system: StackedSystem,
    init: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> np.ndarray:
    """Solve the blocks in order, each with its upstream values held fixed.

    After the sequential pass the joint mean score is checked: every
    component must satisfy ``|mean psi_k| <= tol * max(1, mean_i |psi_ik|)``
    (the scale guards against outcomes measured in large units).
    """
    theta = system.initial_theta() if init is None else np.array(init, dtype=float)
    if theta.shape != (system.p,):
        raise ValueError(f"init must have length {system.p}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("init must be finite")
    for b in system.blocks:
        sl = system.slices[b.name]
        if b.solve is not None:
            theta[sl] = b.solve(system.params(theta))
        else:
            theta = _newton_block(system, b, theta, tol, max_iter)
    S = system.scores(theta)
    resid = np.abs(S.mean(axis=0))
    scale = np.maximum(1.0, np.abs(S).mean(axis=0))
    if not np.all(resid <= tol * scale):
        worst = int(np.argmax(resid / scale))
        raise NonConvergence(
            f"joint score not zero at solution: component {system.labels()[worst]} = {resid[worst]:.3g}"
        )
    return theta


def bread_matrix(system: StackedSystem, theta: np.ndarray) -> np.ndarray:
    """``B = -d mean(psi) / d theta`` using analytic partials where supplied."""
    return -np.vstack([_block_jacobian(system, b, theta) for b in system.blocks])


def _block_triangular_inverse(system: StackedSystem, bread: np.ndarray) -> np.ndarray:
    """Invert the bread by block forward substitution.

    Blocks only read earlier blocks, so the bread is block lower-triangular
    and is invertible exactly when every diagonal block is.  Checking the
    diagonal blocks separately keeps the test meaningful when blocks live
    on very different scales.
    """
    p = system.p
    inv = np.zeros((p, p))
    eye = np.eye(p)
    for b in system.blocks:
        sl = system.slices[b.name]
        Bii = bread[sl, sl]
        cond = np.linalg.cond(Bii) if Bii.size else 1.0
        if not np.isfinite(cond) or cond > 1e14:
            raise SingularBread(f"bread block {b.name!r} is singular (condition number {cond:.3g})")
        rhs = eye[sl] - bread[sl, : sl.start] @ inv[: sl.start]
        inv[sl] = np.linalg.solve(Bii, rhs)
    return inv


def sandwich_covariance(system: StackedSystem, theta_hat: np.ndarray, dof_adjust: bool = True) -> FitResult:
    theta_hat = np.asarray(theta_hat, dtype=float)
    n = system.n
    S = system.scores(theta_hat)
    meat = S.T @ S / n
    bread = bread_matrix(system, theta_hat)
    binv = _block_triangular_inverse(system, bread)
    sigma = binv @ meat @ binv.T
    p = system.p
    if dof_adjust:
        if n <= p:
            raise SingularBread(f"degrees-of-freedom adjustment needs n > p (n={n}, p={p})")
        sigma = sigma * (n / (n - p))
    sigma = 0.5 * (sigma + sigma.T)
    return FitResult(
        theta_hat=theta_hat,
        sigma_hat=sigma,
        bread=bread,
        meat=meat,
        n=n,
        dof_adjusted=dof_adjust,
        slices=dict(system.slices),
        labels=tuple(system.labels()),
    )


def delta_method(
    fit: FitResult,
    transform: Callable[[np.ndarray], np.ndarray],
    jacobian_at: Callable[[np.ndarray], np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``transform(theta_hat)`` and ``D sigma_hat D' / n``."""
    est = np.atleast_1d(np.asarray(transform(fit.theta_hat), dtype=float))
    D = np.atleast_2d(np.asarray(jacobian_at(fit.theta_hat), dtype=float))
    if D.shape != (est.size, fit.p):
        raise ValueError(f"jacobian has shape {D.shape}, expected {(est.size, fit.p)}")
    cov = D @ fit.sigma_hat @ D.T / fit.n
    return est, 0.5 * (cov + cov.T)
