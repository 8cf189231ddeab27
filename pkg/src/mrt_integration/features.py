"""Declarative feature maps and the ``1 + x1 + x1*x2 + x3^3`` formula language.

Covariate indices are zero-based internally; formulas use one-based names
(``x1`` is column 0).  The token ``I`` refers to the study indicator, which
is not a covariate column but is occasionally needed (e.g. a pooled
treatment-probability model with a study-specific intercept).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import IndexOutOfRange, ParseError

__all__ = ["Term", "FeatureSpec", "parse_formula", "eval_features"]

_KINDS = ("intercept", "covariate", "product", "power", "study")


@dataclass(frozen=True)
class Term:
    kind: str
    indices: tuple[int, ...] = ()
    power: int = 1

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown term kind {self.kind!r}")
        n_idx = {"intercept": 0, "study": 0, "covariate": 1, "power": 1}
        if self.kind in n_idx and len(self.indices) != n_idx[self.kind]:
            raise ValueError(f"{self.kind} term takes {n_idx[self.kind]} indices")
        if self.kind == "product" and len(self.indices) < 2:
            raise ValueError("product term needs at least two indices")
        if any(i < 0 for i in self.indices):
            raise ValueError("covariate indices must be non-negative")
        if self.kind == "power" and self.power < 1:
            raise ValueError("power must be a positive integer")

    @classmethod
    def intercept(cls) -> Term:
        return cls("intercept")

    @classmethod
    def covariate(cls, index: int) -> Term:
        return cls("covariate", (index,))

    @classmethod
    def product(cls, *indices: int) -> Term:
        return cls("product", tuple(indices))

    @classmethod
    def pow(cls, index: int, power: int) -> Term:
        if power == 1:
            return cls.covariate(index)
        return cls("power", (index,), power)

    @classmethod
    def study(cls) -> Term:
        return cls("study")

    @property
    def label(self) -> str:
        if self.kind == "intercept":
            return "1"
        if self.kind == "study":
            return "I"
        if self.kind == "covariate":
            return f"x{self.indices[0] + 1}"
        if self.kind == "product":
            return "*".join(f"x{i + 1}" for i in self.indices)
        return f"x{self.indices[0] + 1}^{self.power}"

    def covariate_indices(self) -> frozenset[int]:
        return frozenset(self.indices)

    def evaluate(self, X: np.ndarray, study: np.ndarray | None) -> np.ndarray:
        if self.kind == "intercept":
            return np.ones(X.shape[0])
        if self.kind == "study":
            if study is None:
                raise ValueError("term 'I' needs the study indicator")
            return np.asarray(study, dtype=float)
        if self.kind == "covariate":
            return X[:, self.indices[0]].astype(float, copy=True)
        if self.kind == "product":
            return np.prod(X[:, list(self.indices)], axis=1)
        return X[:, self.indices[0]] ** self.power


@dataclass(frozen=True)
class FeatureSpec:
    """An ordered list of terms mapping a covariate vector to a design row."""

    terms: tuple[Term, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise ValueError("a feature spec needs at least one term")
        if sum(t.kind == "intercept" for t in self.terms) > 1:
            raise ValueError("intercept may appear at most once")
        if len(set(self.terms)) != len(self.terms):
            raise ValueError("duplicate terms in feature spec")

    @classmethod
    def parse(cls, text: str, name: str = "") -> FeatureSpec:
        return parse_formula(text, name=name)

    def __len__(self) -> int:
        return len(self.terms)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(t.label for t in self.terms)

    @property
    def formula(self) -> str:
        return " + ".join(self.labels)

    @property
    def has_intercept(self) -> bool:
        return any(t.kind == "intercept" for t in self.terms)

    @property
    def uses_study(self) -> bool:
        return any(t.kind == "study" for t in self.terms)

    def covariate_indices(self) -> frozenset[int]:
        out: frozenset[int] = frozenset()
        for t in self.terms:
            out |= t.covariate_indices()
        return out

    def max_index(self) -> int:
        idx = self.covariate_indices()
        return max(idx) if idx else -1

    def __str__(self) -> str:
        return self.formula


_TOKEN = re.compile(r"\s*(?:(?P<one>1)|(?P<study>I)|(?P<var>x(?P<idx>\d+)(?:\s*\^\s*(?P<pow>\d+))?))\s*")


def _parse_factor(text: str, offset: int, line: int | None):
    m = _TOKEN.fullmatch(text)
    if m is None:
        col = offset + (len(text) - len(text.lstrip())) + 1
        raise ParseError(f"cannot parse term {text.strip()!r}", line=line, column=col)
    return m


def parse_formula(text: str, name: str = "", *, line: int | None = None) -> FeatureSpec:
    """Parse ``"1 + x1 + x1*x2 + x3^3"`` into a :class:`FeatureSpec`.

    Whitespace is ignored.  ``xJ*xK`` is a product, ``xK^p`` a power and
    ``I`` the study indicator.  Errors carry the one-based column of the
    offending term.
    """
    if not text.strip():
        raise ParseError("empty feature formula", line=line, column=1)
    terms = []
    pos = 0
    for chunk in text.split("+"):
        if not chunk.strip():
            raise ParseError("empty term", line=line, column=pos + 1)
        factors = chunk.split("*")
        if len(factors) == 1:
            m = _parse_factor(chunk, pos, line)
            if m.group("one"):
                terms.append(Term.intercept())
            elif m.group("study"):
                terms.append(Term.study())
            else:
                idx = int(m.group("idx"))
                if idx < 1:
                    raise ParseError("covariates are numbered from x1", line=line, column=pos + 1)
                terms.append(Term.pow(idx - 1, int(m.group("pow") or 1)))
        else:
            idxs = []
            fpos = pos
            for f in factors:
                m = _parse_factor(f, fpos, line)
                if not m.group("var") or m.group("pow"):
                    raise ParseError(
                        "products may only combine plain covariates", line=line, column=fpos + 1
                    )
                idx = int(m.group("idx"))
                if idx < 1:
                    raise ParseError("covariates are numbered from x1", line=line, column=fpos + 1)
                idxs.append(idx - 1)
                fpos += len(f) + 1
            terms.append(Term.product(*idxs))
        pos += len(chunk) + 1
    try:
        return FeatureSpec(tuple(terms), name=name)
    except ValueError as exc:
        raise ParseError(str(exc), line=line) from exc


def eval_features(covariates, spec: FeatureSpec, study=None) -> np.ndarray:
    """Evaluate ``spec`` on one covariate vector or on a matrix of rows.

    A 1-d input returns a vector of length ``len(spec)``; a 2-d input with
    ``N`` rows returns an ``(N, len(spec))`` matrix.
    """
    X = np.asarray(covariates, dtype=float)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError("covariates must be a vector or a matrix")
    if spec.max_index() >= X.shape[1]:
        raise IndexOutOfRange(
            f"feature spec {spec.formula!r} references x{spec.max_index() + 1} "
            f"but only {X.shape[1]} covariates exist"
        )
    if study is not None:
        study = np.broadcast_to(np.asarray(study, dtype=float), (X.shape[0],))
    out = np.column_stack([t.evaluate(X, study) for t in spec.terms])
    return out[0] if single else out
