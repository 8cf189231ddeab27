"""Panel data for combined micro-randomized trials.

The record-style types (:class:`TimePoint`, :class:`Trajectory`) are the
convenient way to build or inspect a dataset by hand.  Estimation works on
:class:`CombinedDataset`, which stores the same information column-wise
with one row per randomization, rows grouped by participant.

The proximal outcome observed after randomization ``t`` is stored on the
row of randomization ``t``.
"""

from __future__ import annotations

import csv
import re
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyExternalStudy,
    EmptyInternalStudy,
    NonMonotoneTime,
    ParseError,
    PositivityViolation,
    ValidationError,
)
from .features import FeatureSpec

__all__ = [
    "TimePoint",
    "Trajectory",
    "CombinedDataset",
    "ModeratorConfig",
    "Violation",
    "ValidationReport",
    "validate",
    "read_csv",
    "write_csv",
    "DEFAULT_EPSILON",
]

DEFAULT_EPSILON = 1e-6


@dataclass(frozen=True)
class TimePoint:
    t: int
    covariates: tuple[float, ...]
    treatment: int
    outcome: float
    prob_h: float | tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(float(v) for v in self.covariates))
        if isinstance(self.prob_h, (list, np.ndarray)):
            object.__setattr__(self, "prob_h", tuple(float(v) for v in self.prob_h))


@dataclass(frozen=True)
class Trajectory:
    participant_id: object
    study_indicator: int
    points: tuple[TimePoint, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        if self.study_indicator not in (0, 1):
            raise ValueError("study_indicator must be 0 or 1")

    def history(self, t: int) -> tuple[TimePoint, ...]:
        """Points observed strictly before randomization ``t`` plus ``X_t``.

        Returned as the prefix of points with index below ``t``; the caller
        reads ``X_t`` from the point at ``t`` itself.
        """
        return tuple(p for p in self.points if p.t < t)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CombinedDataset:
    """Column-wise storage of internal (``I=1``) and external (``I=0``) trials.

    Rows are grouped by participant; ``starts[i]`` is the first row of
    participant ``i``.  Use :meth:`from_arrays` or :meth:`from_trajectories`
    rather than the raw constructor.
    """

    participant_ids: tuple
    participant_study: np.ndarray
    row_participant: np.ndarray
    t: np.ndarray
    X: np.ndarray
    a: np.ndarray
    y: np.ndarray
    prob_h: np.ndarray | None
    level_count: int = 1
    starts: np.ndarray = field(init=False, repr=False)
    _row_study: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.participant_ids)
        pid = np.asarray(self.row_participant, dtype=np.int64)
        if pid.size == 0 or n == 0:
            raise ValueError("dataset has no rows")
        if np.any(np.diff(pid) < 0):
            raise ValueError("rows must be grouped by participant")
        counts = np.bincount(pid, minlength=n)
        if np.any(counts == 0):
            raise ValueError("every participant needs at least one row")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        object.__setattr__(self, "starts", _readonly(starts))
        object.__setattr__(self, "row_participant", _readonly(pid))
        object.__setattr__(self, "participant_study", _readonly(np.asarray(self.participant_study, dtype=np.int64)))
        object.__setattr__(self, "t", _readonly(np.asarray(self.t, dtype=np.int64)))
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or X.shape[0] != pid.size:
            raise DimensionMismatch("covariate matrix must have one row per randomization")
        object.__setattr__(self, "X", _readonly(X))
        object.__setattr__(self, "a", _readonly(np.asarray(self.a, dtype=np.int64)))
        object.__setattr__(self, "y", _readonly(np.asarray(self.y, dtype=float)))
        if self.prob_h is not None:
            ph = np.asarray(self.prob_h, dtype=float)
            if ph.ndim == 1:
                ph = ph[:, None]
            if ph.shape != (pid.size, self.level_count):
                raise DimensionMismatch(
                    f"prob_h must have shape (rows, {self.level_count}), got {ph.shape}"
                )
            object.__setattr__(self, "prob_h", _readonly(ph))
        for name in ("t", "a", "y"):
            if getattr(self, name).shape != (pid.size,):
                raise DimensionMismatch(f"{name} must have one entry per row")
        if self.participant_study.shape != (n,):
            raise DimensionMismatch("participant_study must have one entry per participant")
        if not np.all(np.isin(self.participant_study, (0, 1))):
            raise ValidationError("study indicator must be 0 or 1")
        object.__setattr__(self, "_row_study", _readonly(self.participant_study[pid]))

    # -- construction -------------------------------------------------------

    @classmethod
    def from_arrays(
        cls,
        participant_id: Sequence,
        study: Sequence[int],
        t: Sequence[int],
        X,
        a: Sequence[int],
        y: Sequence[float],
        prob_h=None,
        level_count: int | None = None,
    ) -> CombinedDataset:
        """Build from row-aligned arrays.

        Rows are grouped by participant in order of first appearance; the
        order of rows within a participant is preserved (so a non-monotone
        time index is reported by :func:`validate` instead of being fixed).
        """
        ids = list(participant_id)
        codes: dict = {}
        code = np.empty(len(ids), dtype=np.int64)
        for i, pid in enumerate(ids):
            code[i] = codes.setdefault(pid, len(codes))
        order = np.argsort(code, kind="stable")
        study = np.asarray(study, dtype=np.int64)
        part_study = np.full(len(codes), -1, dtype=np.int64)
        for c, s in zip(code, study):
            if part_study[c] == -1:
                part_study[c] = s
            elif part_study[c] != s:
                raise ValidationError(
                    f"study indicator varies within participant {ids[int(np.flatnonzero(code == c)[0])]!r}"
                )
        a = np.asarray(a)
        if level_count is None:
            if prob_h is not None and np.ndim(prob_h) == 2:
                level_count = np.shape(prob_h)[1]
            else:
                level_count = max(1, int(a.max()) if a.size else 1)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        ph = None if prob_h is None else np.asarray(prob_h, dtype=float)[order]
        return cls(
            participant_ids=tuple(codes),
            participant_study=part_study,
            row_participant=code[order],
            t=np.asarray(t)[order],
            X=X[order],
            a=a[order],
            y=np.asarray(y, dtype=float)[order],
            prob_h=ph,
            level_count=int(level_count),
        )

    @classmethod
    def from_trajectories(cls, trajectories: Iterable[Trajectory], level_count: int | None = None) -> CombinedDataset:
        trajectories = list(trajectories)
        if not trajectories:
            raise ValueError("no trajectories supplied")
        dims = {len(p.covariates) for tr in trajectories for p in tr.points}
        if len(dims) > 1:
            raise DimensionMismatch(f"covariate dimension differs across points: {sorted(dims)}")
        has_ph = {p.prob_h is not None for tr in trajectories for p in tr.points}
        if len(has_ph) > 1:
            raise DimensionMismatch("prob_h must be supplied on every point or on none")
        pid, study, t, X, a, y, ph = [], [], [], [], [], [], []
        for tr in trajectories:
            if not tr.points:
                raise ValueError(f"trajectory {tr.participant_id!r} has no points")
            for p in tr.points:
                pid.append(tr.participant_id)
                study.append(tr.study_indicator)
                t.append(p.t)
                X.append(p.covariates)
                a.append(p.treatment)
                y.append(p.outcome)
                ph.append(np.atleast_1d(p.prob_h) if p.prob_h is not None else None)
        prob_h = np.vstack(ph) if True in has_ph else None
        return cls.from_arrays(pid, study, t, np.asarray(X, dtype=float), a, y, prob_h, level_count)

    # -- derived quantities -------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.participant_ids)

    @property
    def n1(self) -> int:
        return int(self.participant_study.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def n_rows(self) -> int:
        return self.y.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    @property
    def T(self) -> int:
        return int(self.t.max())

    @property
    def study(self) -> np.ndarray:
        """Row-level study indicator."""
        return self._row_study

    def row_mask(self, population: str) -> np.ndarray:
        """0/1 row weights selecting ``internal``, ``external`` or ``pooled`` rows."""
        if population == "pooled":
            return np.ones(self.n_rows)
        if population == "internal":
            return self.study.astype(float)
        if population == "external":
            return 1.0 - self.study
        raise ValueError(f"unknown population {population!r}")

    def participants_in(self, population: str) -> int:
        return {"pooled": self.n, "internal": self.n1, "external": self.n0}[population]

    def group_sum(self, rows: np.ndarray) -> np.ndarray:
        """Sum row contributions within participant: ``(N, k) -> (n, k)``."""
        return np.add.reduceat(rows, self.starts, axis=0)

    def trajectories(self) -> Iterator[Trajectory]:
        ends = np.append(self.starts[1:], self.n_rows)
        for i, (s, e) in enumerate(zip(self.starts, ends)):
            pts = []
            for r in range(s, e):
                if self.prob_h is None:
                    ph = None
                elif self.level_count == 1:
                    ph = float(self.prob_h[r, 0])
                else:
                    ph = tuple(self.prob_h[r])
                pts.append(TimePoint(int(self.t[r]), tuple(self.X[r]), int(self.a[r]), float(self.y[r]), ph))
            yield Trajectory(self.participant_ids[i], int(self.participant_study[i]), tuple(pts))

    def select(self, participants: np.ndarray) -> CombinedDataset:
        """Subset by a boolean mask over participants."""
        keep = np.asarray(participants, dtype=bool)
        if keep.shape != (self.n,):
            raise ValueError("mask must have one entry per participant")
        rows = keep[self.row_participant]
        new_code = np.cumsum(keep) - 1
        return CombinedDataset(
            participant_ids=tuple(p for p, k in zip(self.participant_ids, keep) if k),
            participant_study=self.participant_study[keep],
            row_participant=new_code[self.row_participant[rows]],
            t=self.t[rows],
            X=self.X[rows],
            a=self.a[rows],
            y=self.y[rows],
            prob_h=None if self.prob_h is None else self.prob_h[rows],
            level_count=self.level_count,
        )

    def with_outcome(self, y: np.ndarray) -> CombinedDataset:
        return CombinedDataset(
            self.participant_ids, self.participant_study, self.row_participant,
            self.t, self.X, self.a, np.asarray(y, dtype=float), self.prob_h, self.level_count,
        )

    def without_prob_h(self) -> CombinedDataset:
        return CombinedDataset(
            self.participant_ids, self.participant_study, self.row_participant,
            self.t, self.X, self.a, self.y, None, self.level_count,
        )

    @staticmethod
    def concat(first: CombinedDataset, second: CombinedDataset) -> CombinedDataset:
        clash = set(first.participant_ids) & set(second.participant_ids)
        if clash:
            raise ValueError(f"participant ids overlap: {sorted(clash, key=str)[:3]}")
        if first.level_count != second.level_count:
            raise DimensionMismatch("level counts differ")
        if (first.prob_h is None) != (second.prob_h is None):
            raise DimensionMismatch("prob_h present in only one dataset")
        return CombinedDataset(
            participant_ids=first.participant_ids + second.participant_ids,
            participant_study=np.concatenate([first.participant_study, second.participant_study]),
            row_participant=np.concatenate([first.row_participant, second.row_participant + first.n]),
            t=np.concatenate([first.t, second.t]),
            X=np.vstack([first.X, second.X]),
            a=np.concatenate([first.a, second.a]),
            y=np.concatenate([first.y, second.y]),
            prob_h=None if first.prob_h is None else np.vstack([first.prob_h, second.prob_h]),
            level_count=first.level_count,
        )


@dataclass(frozen=True)
class ModeratorConfig:
    """Feature maps for one analysis.

    ``f_r`` holds the target moderators, ``f_s`` the shared-effect
    moderators (its leading ``common_count`` terms must equal those of
    ``f_r``), ``g`` the outcome working model and ``d`` the density-ratio
    features.
    """

    f_r: FeatureSpec
    f_s: FeatureSpec
    g: FeatureSpec
    d: FeatureSpec | None = None
    common_count: int | None = None

    def __post_init__(self):
        prefix = 0
        for tr, ts in zip(self.f_r.terms, self.f_s.terms):
            if tr != ts:
                break
            prefix += 1
        c = prefix if self.common_count is None else self.common_count
        if c > prefix:
            raise ValueError(
                f"first {c} terms of f_r and f_s must be identical (only {prefix} are)"
            )
        object.__setattr__(self, "common_count", c)
        if not self.f_r.covariate_indices() <= self.f_s.covariate_indices():
            raise ValueError("covariates used by f_r must also appear in f_s (R_t within S_t)")
        for spec in (self.f_r, self.f_s):
            if spec.uses_study:
                raise ValueError("moderator features may not use the study indicator")
        if self.d is not None and not self.d.covariate_indices() <= self.f_s.covariate_indices():
            raise ValueError("density-ratio features must be functions of S_t")

    @property
    def c(self) -> int:
        return self.common_count

    @property
    def d_r(self) -> int:
        return len(self.f_r)

    @property
    def d_s(self) -> int:
        return len(self.f_s)

    def specs(self) -> dict[str, FeatureSpec]:
        out = {"f_r": self.f_r, "f_s": self.f_s, "g": self.g}
        if self.d is not None:
            out["d"] = self.d
        return out


# --- validation ------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: type
    message: str
    participant: object = None
    row: int | None = None


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def raise_if_invalid(self) -> None:
        if self.violations:
            v = self.violations[0]
            extra = f" ({len(self.violations) - 1} more)" if len(self.violations) > 1 else ""
            raise v.kind(v.message + extra, participant=v.participant, row=v.row)


def validate(
    dataset: CombinedDataset,
    config: ModeratorConfig | None = None,
    epsilon: float = DEFAULT_EPSILON,
    *,
    require_external: bool = False,
    extra_specs: Iterable[FeatureSpec] = (),
) -> ValidationReport:
    """Check positivity, time ordering, dimensions and study arms.

    Returns a report listing every violation found rather than stopping at
    the first one.  ``row`` in a violation is the zero-based row index in
    the dataset's internal (participant-grouped) order.
    """
    if not 0 < epsilon < 0.5:
        raise ValueError("epsilon must lie in (0, 0.5)")
    out: list[Violation] = []
    pids = dataset.participant_ids

    if dataset.prob_h is not None:
        ph = dataset.prob_h
        p0 = 1.0 - ph.sum(axis=1)
        full = np.column_stack([p0, ph]) if dataset.level_count > 1 else ph
        bad = np.flatnonzero(~np.all((full > epsilon) & (full < 1 - epsilon), axis=1))
        for r in bad[:20]:
            out.append(Violation(
                PositivityViolation,
                f"treatment probability {full[r].tolist()} outside ({epsilon}, {1 - epsilon})",
                pids[dataset.row_participant[r]], int(r),
            ))

    bad_a = np.flatnonzero((dataset.a < 0) | (dataset.a > dataset.level_count))
    for r in bad_a[:20]:
        out.append(Violation(
            DimensionMismatch,
            f"treatment {int(dataset.a[r])} outside 0..{dataset.level_count}",
            pids[dataset.row_participant[r]], int(r),
        ))

    same = dataset.row_participant[1:] == dataset.row_participant[:-1]
    bad_t = np.flatnonzero(same & (np.diff(dataset.t) <= 0)) + 1
    for r in bad_t[:20]:
        out.append(Violation(
            NonMonotoneTime, "time index not strictly increasing",
            pids[dataset.row_participant[r]], int(r),
        ))
    for r in np.flatnonzero(dataset.t < 1)[:20]:
        out.append(Violation(NonMonotoneTime, "time index must start at 1",
                             pids[dataset.row_participant[r]], int(r)))

    specs = list(extra_specs)
    if config is not None:
        specs += list(config.specs().values())
    for spec in specs:
        if spec.max_index() >= dataset.n_covariates:
            out.append(Violation(
                DimensionMismatch,
                f"feature spec {spec.formula!r} needs x{spec.max_index() + 1}; "
                f"dataset has {dataset.n_covariates} covariates",
            ))

    if not np.all(np.isfinite(dataset.X)) or not np.all(np.isfinite(dataset.y)):
        out.append(Violation(DimensionMismatch, "non-finite covariate or outcome values"))

    if dataset.n1 == 0:
        out.append(Violation(EmptyInternalStudy, "no participants with I=1"))
    if require_external and dataset.n0 == 0:
        out.append(Violation(EmptyExternalStudy, "no participants with I=0"))
    return ValidationReport(tuple(out))


# --- CSV -------------------------------------------------------------------

_XCOL = re.compile(r"x(\d+)$")
_PHCOL = re.compile(r"prob_h(\d*)$")


def _cell(value: str, line: int, column: str, kind=float):
    try:
        if kind is int:
            f = float(value)
            if not f.is_integer():
                raise ValueError
            return int(f)
        return float(value)
    except ValueError:
        raise ParseError(f"non-numeric value {value!r}", line=line, column=column) from None


def read_csv(path: str | Path) -> CombinedDataset:
    """Read ``participant_id,study,t,x1..xK,a,y[,prob_h]`` rows.

    Multi-level treatments use ``prob_h1..prob_hJ`` columns.  Errors name
    the file line (header is line 1) and the column.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        required = ["participant_id", "study", "t", "a", "y"]
        for col in required:
            if col not in header:
                raise ParseError(f"missing column {col!r}", line=1)
        xcols = sorted((int(m.group(1)), i) for i, h in enumerate(header) if (m := _XCOL.match(h)))
        if not xcols:
            raise ParseError("no covariate columns x1..xK", line=1)
        if [k for k, _ in xcols] != list(range(1, len(xcols) + 1)):
            raise ParseError("covariate columns must be x1..xK without gaps", line=1)
        phcols = sorted(
            (int(m.group(1) or 1), i) for i, h in enumerate(header) if (m := _PHCOL.match(h))
        )
        idx = {h: i for i, h in enumerate(header)}
        pid, study, t, X, a, y, ph = [], [], [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            pid.append(row[idx["participant_id"]].strip())
            s = _cell(row[idx["study"]], lineno, "study", int)
            if s not in (0, 1):
                raise ParseError("study must be 0 or 1", line=lineno, column="study")
            study.append(s)
            t.append(_cell(row[idx["t"]], lineno, "t", int))
            X.append([_cell(row[i], lineno, f"x{k}") for k, i in xcols])
            a.append(_cell(row[idx["a"]], lineno, "a", int))
            y.append(_cell(row[idx["y"]], lineno, "y"))
            if phcols:
                ph.append([_cell(row[i], lineno, header[i]) for _, i in phcols])
    if not pid:
        raise ParseError("no data rows", line=2)
    prob_h = np.asarray(ph, dtype=float) if phcols else None
    level_count = len(phcols) if phcols else None
    return CombinedDataset.from_arrays(pid, study, t, np.asarray(X), a, y, prob_h, level_count)


def write_csv(dataset: CombinedDataset, path: str | Path) -> None:
    path = Path(path)
    K = dataset.n_covariates
    header = ["participant_id", "study", "t"] + [f"x{k + 1}" for k in range(K)] + ["a", "y"]
    if dataset.prob_h is not None:
        if dataset.level_count == 1:
            header.append("prob_h")
        else:
            header += [f"prob_h{j + 1}" for j in range(dataset.level_count)]
    study = dataset.study
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in range(dataset.n_rows):
            row = [dataset.participant_ids[dataset.row_participant[r]], int(study[r]), int(dataset.t[r])]
            row += [repr(float(v)) for v in dataset.X[r]]
            row += [int(dataset.a[r]), repr(float(dataset.y[r]))]
            if dataset.prob_h is not None:
                row += [repr(float(v)) for v in dataset.prob_h[r]]
            w.writerow(row)
