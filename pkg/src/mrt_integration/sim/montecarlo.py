"""Monte Carlo evaluation of the estimators under the generative model."""

from __future__ import annotations

import csv
import warnings
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..datamodel import ModeratorConfig
from ..errors import MRTError, ReplicationFailure
from ..features import FeatureSpec
from ..integrate import METHODS, TABLE_METHODS, IntegrationOptions, run_methods
from ..output import Z95
from .generative import default_features, generate_combined, true_beta_r

__all__ = [
    "SimConfig",
    "MetricsRow",
    "MonteCarloResult",
    "SweepPoint",
    "simulate",
    "run_monte_carlo",
    "sweep",
    "metrics_from_estimates",
    "write_metrics_csv",
    "write_replicates_csv",
    "METRICS_HEADER",
    "MAX_FAILURE_RATE",
]

MAX_FAILURE_RATE = 0.05
METRICS_HEADER = (
    "method", "coefficient", "true_value", "avg_estimate",
    "relative_efficiency_pct", "rmse", "coverage_pct", "failed_reps",
)
BASELINE = "WCLS-Internal"


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo settings.

    ``efficiency`` selects the relative-efficiency convention against
    WCLS-Internal: ``variance`` (ratio of empirical variances) or ``sd``
    (ratio of empirical standard deviations).
    """

    n1: int = 400
    n0: int = 400
    T: int = 20
    reps: int = 400
    seed: int = 0
    methods: tuple[str, ...] = TABLE_METHODS
    d_spec: FeatureSpec | None = None
    ar_coefficient: float = 0.5
    innovation_sd: float = 1.0
    estimate_ph: bool = False
    external_effect_shift: float = 0.0
    dof_adjust: bool = True
    efficiency: str = "variance"
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if self.n1 < 2:
            raise ValueError("n1 must be at least 2")
        if self.n0 < 0:
            raise ValueError("n0 must be non-negative")
        if self.T < 1:
            raise ValueError("T must be positive")
        if not self.methods:
            raise ValueError("methods list is empty")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods: {unknown}")
        if self.efficiency not in ("variance", "sd"):
            raise ValueError("efficiency must be 'variance' or 'sd'")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    def moderator_config(self) -> ModeratorConfig:
        F = default_features()
        return ModeratorConfig(F["f_r"], F["f_s"], F["g"], self.d_spec or F["d"])

    def options(self) -> IntegrationOptions:
        return IntegrationOptions(
            dof_adjust=self.dof_adjust, ph_spec=default_features()["ph"], estimate_ph=self.estimate_ph
        )


@dataclass(frozen=True)
class MetricsRow:
    method: str
    coefficient: str
    true_value: float
    avg_estimate: float
    relative_efficiency: float
    rmse: float
    coverage: float
    failed_reps: int = 0
    empirical_se: float = float("nan")

    def __post_init__(self):
        if not (0 <= self.coverage <= 100):
            raise ValueError("coverage must be a percentage")
        if self.rmse < 0:
            raise ValueError("rmse must be non-negative")

    def as_csv_row(self) -> list[str]:
        def fmt(x):
            return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))

        return [
            self.method, self.coefficient, fmt(self.true_value), fmt(self.avg_estimate),
            fmt(self.relative_efficiency), fmt(self.rmse), fmt(self.coverage), str(self.failed_reps),
        ]


@dataclass(frozen=True, eq=False)
class MonteCarloResult:
    config: SimConfig
    metrics: list[MetricsRow]
    estimates: np.ndarray  # (reps_ok, methods, P)
    ses: np.ndarray
    ok_reps: np.ndarray
    failures: dict[int, str] = field(default_factory=dict)

    def row(self, method: str, coefficient: str | int) -> MetricsRow:
        for r in self.metrics:
            if r.method == method and (r.coefficient == coefficient or (
                isinstance(coefficient, int) and r.coefficient == _coef_labels(self.config)[coefficient]
            )):
                return r
        raise KeyError((method, coefficient))

    def method_estimates(self, method: str) -> np.ndarray:
        return self.estimates[:, self.config.methods.index(method)]

    def method_ses(self, method: str) -> np.ndarray:
        return self.ses[:, self.config.methods.index(method)]


def _coef_labels(config: SimConfig) -> tuple[str, ...]:
    return ("Intercept", "Slope")


def _one_replication(args) -> tuple[int, np.ndarray | None, np.ndarray | None, str]:
    config, r = args
    seed_r = config.seed + r
    ds = generate_combined(
        config.n1, config.n0, config.T, seed_r,
        ar_coefficient=config.ar_coefficient, innovation_sd=config.innovation_sd,
        external_effect_shift=config.external_effect_shift,
    )
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = run_methods(
                ds, config.moderator_config(), config.methods, None, config.options(), check=(r == 0)
            ).outputs
    except (MRTError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return r, None, None, f"{type(exc).__name__}: {exc}"
    est = np.array([out[m].beta_r_hat for m in config.methods])
    se = np.array([out[m].se for m in config.methods])
    return r, est, se, ""


def metrics_from_estimates(
    methods: Sequence[str],
    estimates: np.ndarray,
    ses: np.ndarray,
    truth: np.ndarray,
    labels: Sequence[str],
    failed: int = 0,
    efficiency: str = "variance",
) -> list[MetricsRow]:
    """Aggregate replicate estimates into one row per (method, coefficient)."""
    estimates = np.asarray(estimates, dtype=float)
    ses = np.asarray(ses, dtype=float)
    R = estimates.shape[0]
    sd = estimates.std(axis=0, ddof=1) if R > 1 else np.full(estimates.shape[1:], np.nan)
    base = list(methods).index(BASELINE) if BASELINE in methods else None
    rows = []
    for k, m in enumerate(methods):
        err = estimates[:, k] - truth
        rmse = np.sqrt(np.mean(err**2, axis=0))
        cover = 100.0 * np.mean(np.abs(err) <= Z95 * ses[:, k], axis=0)
        for c, lab in enumerate(labels):
            if base is None or R < 2:
                releff = float("nan")
            elif efficiency == "variance":
                releff = 100.0 * sd[base, c] ** 2 / sd[k, c] ** 2
            else:
                releff = 100.0 * sd[base, c] / sd[k, c]
            rows.append(MetricsRow(
                m, lab, float(truth[c]), float(estimates[:, k, c].mean()), float(releff),
                float(rmse[c]), float(cover[c]), failed, float(sd[k, c]),
            ))
    return rows


def simulate(config: SimConfig) -> MonteCarloResult:
    """Run all replications and aggregate.

    Replication ``r`` uses seed ``config.seed + r`` for data generation, so
    results do not depend on ``workers``.  Failed replications are excluded
    and counted; more than 5% failures raise :class:`ReplicationFailure`.
    """
    jobs = [(config, r) for r in range(config.reps)]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            results = list(pool.map(_one_replication, jobs, chunksize=max(1, config.reps // (4 * config.workers))))
    else:
        results = [_one_replication(j) for j in jobs]
    results.sort(key=lambda x: x[0])
    failures = {r: msg for r, _, _, msg in results if msg}
    if len(failures) > MAX_FAILURE_RATE * config.reps:
        first = next(iter(failures.values()))
        raise ReplicationFailure(
            f"{len(failures)} of {config.reps} replications failed (first: {first})",
            failed=len(failures), total=config.reps,
        )
    ok = [(r, e, s) for r, e, s, msg in results if not msg]
    if not ok:
        raise ReplicationFailure("every replication failed", failed=len(failures), total=config.reps)
    est = np.stack([e for _, e, _ in ok])
    se = np.stack([s for _, _, s in ok])
    metrics = metrics_from_estimates(
        config.methods, est, se, true_beta_r(True), _coef_labels(config), len(failures), config.efficiency
    )
    return MonteCarloResult(config, metrics, est, se, np.array([r for r, _, _ in ok]), failures)


def run_monte_carlo(config: SimConfig) -> list[MetricsRow]:
    return simulate(config).metrics


@dataclass(frozen=True, eq=False)
class SweepPoint:
    axis: str
    value: int
    result: MonteCarloResult

    @property
    def metrics(self) -> list[MetricsRow]:
        return self.result.metrics

    def empirical_se(self, method: str) -> np.ndarray:
        return self.result.method_estimates(method).std(axis=0, ddof=1)


def sweep(config: SimConfig, axis: str, values: Sequence[int]) -> list[SweepPoint]:
    """Repeat :func:`simulate` over ascending values of ``n0`` or ``n1``."""
    if axis not in ("n0", "n1"):
        raise ValueError("axis must be 'n0' or 'n1'")
    values = list(values)
    if not values:
        raise ValueError("values must be non-empty")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError("values must be sorted ascending without repeats")
    from dataclasses import replace

    return [SweepPoint(axis, v, simulate(replace(config, **{axis: v}))) for v in values]


def write_metrics_csv(rows: Sequence[MetricsRow], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r.as_csv_row())


def write_replicates_csv(result: MonteCarloResult, path: str | Path) -> None:
    """One row per (replication, method, coefficient) with estimate and SE."""
    labels = _coef_labels(result.config)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replication", "seed", "method", "coefficient", "estimate", "se"])
        for i, r in enumerate(result.ok_reps):
            for k, m in enumerate(result.config.methods):
                for c, lab in enumerate(labels):
                    w.writerow([int(r), result.config.seed + int(r), m, lab,
                                repr(float(result.estimates[i, k, c])), repr(float(result.ses[i, k, c]))])
