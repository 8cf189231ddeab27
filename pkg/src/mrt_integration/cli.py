"""Command-line interface: ``mrt-integrate <command> [options]``.

Commands
--------
simulate     Monte Carlo table for one design.
sweep        Monte Carlo tables over a grid of ``n0`` or ``n1``.
fit          Estimate the target effect on a CSV dataset.
test-shared  Chi-squared test that moderated effects are shared by the studies.
generate     Write one simulated two-study dataset as CSV.

Exit codes: 0 ok, 1 usage or configuration, 2 data validation,
3 estimation failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .datamodel import ModeratorConfig, read_csv, write_csv
from .errors import (
    ConfigError,
    EstimationError,
    ParseError,
    ReplicationFailure,
    ValidationError,
)
from .features import FeatureSpec, parse_formula
from .integrate import METHODS, TABLE_METHODS, IntegrationOptions, run_methods, shared_effects_test
from .sim.generative import default_features, generate_combined
from .sim.montecarlo import METRICS_HEADER, SimConfig, simulate, sweep, write_replicates_csv

__all__ = ["RunConfig", "main", "resolve_methods", "EXIT_OK", "EXIT_CONFIG", "EXIT_VALIDATION",
           "EXIT_ESTIMATION", "EXIT_IO"]

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_ESTIMATION, EXIT_IO = 0, 1, 2, 3, 4
COMMANDS = ("simulate", "sweep", "fit", "test-shared", "generate")
_DEFAULT_FEATURES = {k: v.formula for k, v in default_features().items()}


# --- run configuration -----------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Every setting a command can read, with the defaults used by the CLI.

    A config file is flat ``key = value`` text using these field names;
    lists are comma separated and booleans are ``true``/``false``.
    """

    command: str = "simulate"
    data: str = ""
    out: str = "-"
    replicates: str = ""
    methods: tuple[str, ...] = ("all",)
    f_r: str = _DEFAULT_FEATURES["f_r"]
    f_s: str = _DEFAULT_FEATURES["f_s"]
    g: str = _DEFAULT_FEATURES["g"]
    d: str = _DEFAULT_FEATURES["d"]
    ph: str = _DEFAULT_FEATURES["ph"]
    seed: int = 0
    reps: int = 400
    n1: int = 400
    n0: int = 400
    T: int = 20
    dof_adjust: bool = True
    estimate_ph: bool = False
    axis: str = "n0"
    values: tuple[int, ...] = ()
    workers: int = 1
    efficiency: str = "variance"
    external_effect_shift: float = 0.0

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        for k in ("reps", "n1", "T", "workers"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be at least 1, got {getattr(self, k)}")
        if self.n0 < 0:
            raise ConfigError("n0 must be non-negative")
        if self.axis not in ("n0", "n1"):
            raise ConfigError("axis must be n0 or n1")
        if self.efficiency not in ("variance", "sd"):
            raise ConfigError("efficiency must be variance or sd")
        if not self.methods:
            raise ConfigError("methods list is empty")

    # serialisation

    def serialize(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                text = "true" if v else "false"
            elif isinstance(v, tuple):
                text = ", ".join(str(x) for x in v)
            else:
                text = str(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> RunConfig:
        return cls(**parse_config_text(text))

    def merged(self, overrides: dict) -> RunConfig:
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    # derived objects

    def feature(self, key: str) -> FeatureSpec:
        try:
            return parse_formula(getattr(self, key), name=key)
        except ParseError as exc:
            raise ConfigError(f"bad {key} formula: {exc}") from None

    def moderator_config(self) -> ModeratorConfig:
        return ModeratorConfig(self.feature("f_r"), self.feature("f_s"), self.feature("g"), self.feature("d"))

    def options(self) -> IntegrationOptions:
        return IntegrationOptions(dof_adjust=self.dof_adjust, ph_spec=self.feature("ph"), estimate_ph=self.estimate_ph)

    def sim_config(self) -> SimConfig:
        default_d = self.d == _DEFAULT_FEATURES["d"]
        return SimConfig(
            n1=self.n1, n0=self.n0, T=self.T, reps=self.reps, seed=self.seed,
            methods=resolve_methods(self.methods),
            d_spec=None if default_d else self.feature("d"),
            estimate_ph=self.estimate_ph, external_effect_shift=self.external_effect_shift,
            dof_adjust=self.dof_adjust, efficiency=self.efficiency, workers=self.workers,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str, line: int | None, column: int | None):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple[int, ...]":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if kind == "tuple[str, ...]":
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key}", line=line, column=column) from None


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` text into typed RunConfig keyword arguments."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno, column=len(line) - len(line.lstrip()) + 1)
        key_part, value_part = line.split("=", 1)
        key = key_part.strip()
        key_col = len(key_part) - len(key_part.lstrip()) + 1
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}", line=lineno, column=key_col)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", line=lineno, column=key_col)
        value_col = len(key_part) + 2 + (len(value_part) - len(value_part.lstrip()))
        out[key] = _convert(key, value_part.strip(), lineno, value_col)
    return out


def _norm(name: str) -> str:
    return name.replace("-", "").replace("_", "").lower()


_METHOD_ALIASES = {_norm(m): m for m in METHODS}


def resolve_methods(names) -> tuple[str, ...]:
    """Map user method names (``all``, ``pwcls-pooled``, ``PET-WCLS``...) to method labels."""
    out: list[str] = []
    for raw in names:
        if _norm(raw) == "all":
            out.extend(TABLE_METHODS)
            continue
        key = _norm(raw)
        if key not in _METHOD_ALIASES:
            raise ConfigError(f"unknown method {raw!r}; known: {', '.join(METHODS)}")
        out.append(_METHOD_ALIASES[key])
    return tuple(dict.fromkeys(out))


# --- argument parsing ------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in _csv_list(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' file; flags override its keys")
    common.add_argument("--out", help="output CSV path ('-' for standard output)")
    common.add_argument("--methods", type=_csv_list, help="comma-separated method names, or 'all'")
    common.add_argument("--seed", type=int)
    common.add_argument("--dof-adjust", dest="dof_adjust", action=argparse.BooleanOptionalAction, default=None,
                        help="small-sample n/(n-p) covariance factor (default on)")
    common.add_argument("--estimate-ph", dest="estimate_ph", action=argparse.BooleanOptionalAction, default=None,
                        help="estimate p_h by logistic regression instead of using supplied values")
    for key in ("f_r", "f_s", "g", "d", "ph"):
        common.add_argument(f"--{key.replace('_', '-')}", dest=key, help=f"{key} feature formula, e.g. '1 + x1'")

    design = _Parser(add_help=False)
    design.add_argument("--n1", type=int)
    design.add_argument("--n0", type=int)
    design.add_argument("--T", "--time-points", dest="T", type=int)
    design.add_argument("--external-effect-shift", dest="external_effect_shift", type=float)

    mc = _Parser(add_help=False)
    mc.add_argument("--reps", type=int)
    mc.add_argument("--workers", type=int)
    mc.add_argument("--efficiency", choices=("variance", "sd"))
    mc.add_argument("--replicates", help="optional per-replication CSV dump")

    parser = _Parser(prog="mrt-integrate", description="Data-integration estimators for micro-randomized trials.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common, design, mc], help="Monte Carlo metrics table")
    sw = sub.add_parser("sweep", parents=[common, design, mc], help="metrics over a sample-size grid")
    sw.add_argument("--axis", choices=("n0", "n1"))
    sw.add_argument("--values", type=_int_list, help="ascending comma-separated sizes")
    helps = {"fit": "estimate effects on a CSV dataset", "test-shared": "test that the studies share moderated effects"}
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", help="dataset CSV")
    sub.add_parser("generate", parents=[common, design], help="write a simulated dataset CSV")
    return parser


def load_run_config(argv) -> RunConfig:
    ns = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(ns).items() if k != "config"}
    base = {}
    if ns.config:
        try:
            text = Path(ns.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read config file {ns.config}: {exc.strerror or exc}") from None
        base = parse_config_text(text)
    base.pop("command", None)
    return RunConfig(command=ns.command, **base).merged(flags)


# --- commands --------------------------------------------------------------


def _open_out(path: str):
    if path in ("", "-"):
        return _StdoutTarget()
    return Path(path).open("w", newline="", encoding="utf-8")


class _StdoutTarget(io.StringIO):
    def close(self):
        sys.stdout.write(self.getvalue())
        super().close()


def _write_meta(cfg: RunConfig, extra: dict) -> None:
    lines = [f"{k} = {v}" for k, v in extra.items()]
    if cfg.out in ("", "-"):
        for line in lines:
            print(f"# {line}", file=sys.stderr)
        return
    Path(cfg.out + ".meta").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _efficiency_note(cfg: RunConfig) -> str:
    return ("100 * Var(WCLS-Internal) / Var(method)" if cfg.efficiency == "variance"
            else "100 * SD(WCLS-Internal) / SD(method)")


def cmd_simulate(cfg: RunConfig) -> int:
    sc = cfg.sim_config()
    result = simulate(sc)
    with _open_out(cfg.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in result.metrics:
            w.writerow(row.as_csv_row())
    if cfg.replicates:
        write_replicates_csv(result, cfg.replicates)
    _write_meta(cfg, {"relative_efficiency": _efficiency_note(cfg), "truth": "internal beta_r",
                      "failed_reps": len(result.failures), "reps": sc.reps, "seed": sc.seed})
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    if not cfg.values:
        raise ConfigError("sweep needs --values")
    points = sweep(cfg.sim_config(), cfg.axis, cfg.values)
    with _open_out(cfg.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("axis", "value") + METRICS_HEADER + ("empirical_se",))
        for pt in points:
            for row in pt.metrics:
                w.writerow([pt.axis, pt.value] + row.as_csv_row() + [repr(row.empirical_se)])
    _write_meta(cfg, {"relative_efficiency": _efficiency_note(cfg), "axis": cfg.axis,
                      "values": ", ".join(map(str, cfg.values))})
    return EXIT_OK


def _load_data(cfg: RunConfig):
    if not cfg.data:
        raise ConfigError(f"{cfg.command} needs --data")
    ds = read_csv(cfg.data)
    if ds.prob_h is None and not cfg.estimate_ph:
        print("note: no prob_h column; estimating p_h", file=sys.stderr)
        cfg = replace(cfg, estimate_ph=True)
    return ds, cfg


def _stars(p: float) -> str:
    return "*" if p < 0.05 else ""


def cmd_fit(cfg: RunConfig) -> int:
    ds, cfg = _load_data(cfg)
    methods = resolve_methods(cfg.methods)
    d_default = cfg.d == _DEFAULT_FEATURES["d"]
    res = run_methods(ds, cfg.moderator_config(), methods, None if d_default else cfg.feature("d"), cfg.options())
    rows = [r for m in methods for r in res.outputs[m].rows()]
    if cfg.out not in ("", "-"):
        with _open_out(cfg.out) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "coefficient", "estimate", "se", "ci_low", "ci_high", "p_value", "significant"])
            for r in rows:
                w.writerow([r["method"], r["coefficient"]] + [repr(r[k]) for k in
                           ("estimate", "se", "ci_low", "ci_high", "p_value")] + [int(r["p_value"] < 0.05)])
    width = max(len(m) for m in methods)
    print(f"{'method':<{width}}  {'coef':<10} {'estimate':>10} {'(se)':>10}   95% CI")
    for r in rows:
        est = f"{r['estimate']:.3f}{_stars(r['p_value'])}"
        print(f"{r['method']:<{width}}  {r['coefficient']:<10} {est:>10} {'(' + format(r['se'], '.3f') + ')':>10}"
              f"   [{r['ci_low']:.3f}, {r['ci_high']:.3f}]")
    print("* significant at the 0.05 level")
    return EXIT_OK


def cmd_test_shared(cfg: RunConfig) -> int:
    ds, cfg = _load_data(cfg)
    rep = shared_effects_test(ds, cfg.moderator_config(), cfg.options())
    with _open_out(cfg.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["statistic", "dof", "p_value"])
        w.writerow([repr(rep.statistic), rep.dof, repr(rep.p_value)])
    return EXIT_OK


def cmd_generate(cfg: RunConfig) -> int:
    ds = generate_combined(cfg.n1, cfg.n0, cfg.T, cfg.seed, external_effect_shift=cfg.external_effect_shift)
    if cfg.out in ("", "-"):
        raise ConfigError("generate needs --out")
    write_csv(ds, cfg.out)
    return EXIT_OK


_COMMANDS = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "fit": cmd_fit,
    "test-shared": cmd_test_shared,
    "generate": cmd_generate,
}


def main(argv=None) -> int:
    try:
        cfg = load_run_config(argv)
        return _COMMANDS[cfg.command](cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValidationError, ParseError) as exc:
        where = f" (row {exc.row})" if getattr(exc, "row", None) is not None else ""
        print(f"validation error: {type(exc).__name__}: {exc}{where}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EstimationError, ReplicationFailure) as exc:
        print(f"estimation error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
