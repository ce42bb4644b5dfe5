"""Command-line driver: ``lbse inspect|generate|benchmark|sweep``.

Configuration is a flat ``key = value`` file (``#`` starts a comment); any
key can also be given as a ``--key value`` flag, which wins over the file.
Every output directory receives ``config.txt``, the fully resolved
configuration, which can be passed back with ``--config`` to repeat a run.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .estimator import SolverOptions
from .grid import CaseParseError, NetworkStructureError, UnsupportedFeatureError, build_admittance, \
    load_case, summary
from .measurements import MeasurementPlan, PlanError, default_plan
from .pipelines import METHODS, PipelineError, Prepared, prepare, run_methods
from .scenario import ConfigError, VariabilityScenario, build_dataset, get_scenario, save_dataset

log = logging.getLogger("lbse")

DESK_INSTANCES = 2500
FULL_INSTANCES = 10000
SWEEP_CELLS = "low:5:15,medium:5:15,high:5:15,medium:15:5,medium:5:25"
RESIDUAL_METHODS = ("UN", "PM", "PMstar")

EXIT_OK, EXIT_DIVERGED, EXIT_FAILED = 0, 1, 2


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.replace(" ", "").split(",") if t]


@dataclass
class RunConfig:
    case_path: str = ""                 # empty = bundled 33-bus feeder
    seed: int = 1
    n_instances: int = DESK_INSTANCES
    train_fraction: float = 0.8
    variability: str = "medium"
    v_range: str = ""                   # "lo,hi" overrides the preset
    theta_range_deg: str = ""           # "lo,hi" in degrees overrides the preset
    n_pmu: int = 5
    n_scada: int = 15
    scada_buses: str = ""
    pmu_buses: str = ""
    meter_buses: str = ""
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    max_iter: int = SolverOptions.max_iter
    un_tol: float = 1e-10
    methods: str = ",".join(METHODS)
    sweep_cells: str = SWEEP_CELLS
    sweep_pairs: str = "PM:PMstar"
    max_diverged: float = 0.001
    workers: int = 1
    raw_errors: bool = True
    out: str = "lbse-out"

    # -- construction -------------------------------------------------------
    @classmethod
    def from_text(cls, text: str) -> dict[str, str]:
        values = {}
        known = {f.name for f in dataclasses.fields(cls)}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"config line {lineno}: unknown key {key!r}")
            values[key] = value
        return values

    @classmethod
    def build(cls, values: dict[str, str]) -> "RunConfig":
        kwargs = {}
        types = {f.name: type(f.default) for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            typ = types[key]
            try:
                if typ is bool:
                    low = str(raw).lower()
                    if low not in ("1", "0", "true", "false", "yes", "no"):
                        raise ValueError(raw)
                    kwargs[key] = low in ("1", "true", "yes")
                else:
                    kwargs[key] = typ(raw)
            except ValueError:
                raise ConfigError(f"{key}: cannot read {raw!r} as {typ.__name__}") from None
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.n_instances < 2:
            raise ConfigError("n_instances must be at least 2")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")
        if self.n_pmu < 0 or self.n_scada < 0:
            raise ConfigError("sensor counts must be non-negative")
        if not 0.0 <= self.max_diverged < 1.0:
            raise ConfigError("max_diverged must be in [0, 1)")
        bad = [m for m in self.method_list if m not in METHODS]
        if bad or not self.method_list:
            raise ConfigError(f"unknown methods {bad}; choose from {', '.join(METHODS)}")
        for a, b in self.pair_list:
            if a not in METHODS or b not in METHODS:
                raise ConfigError(f"sweep pair {a}:{b} names an unknown method")
        for name, _, _ in self.cell_list:
            get_scenario(name)
        self.scenario()
        for name in ("scada_buses", "pmu_buses", "meter_buses"):
            try:
                _ints(getattr(self, name))
            except ValueError:
                raise ConfigError(f"{name}: expected comma-separated bus numbers") from None

    # -- derived views --------------------------------------------------------
    @property
    def method_list(self) -> list[str]:
        return [m.strip() for m in self.methods.split(",") if m.strip()]

    @property
    def pair_list(self) -> list[tuple[str, str]]:
        pairs = []
        for item in self.sweep_pairs.split(","):
            if item.strip():
                a, _, b = item.strip().partition(":")
                pairs.append((a, b))
        return pairs

    @property
    def cell_list(self) -> list[tuple[str, int, int]]:
        cells = []
        for item in self.sweep_cells.split(","):
            if not item.strip():
                continue
            parts = item.strip().split(":")
            if len(parts) != 3:
                raise ConfigError(f"sweep cell {item!r}: expected variability:n_pmu:n_scada")
            try:
                cells.append((parts[0], int(parts[1]), int(parts[2])))
            except ValueError:
                raise ConfigError(f"sweep cell {item!r}: counts must be integers") from None
        return cells

    def scenario(self, name: str | None = None) -> VariabilityScenario:
        base = get_scenario(name or self.variability)
        if name is not None or not (self.v_range or self.theta_range_deg):
            return base
        try:
            v = tuple(float(t) for t in self.v_range.split(",")) if self.v_range else base.v_range
            th = tuple(float(np.radians(float(t))) for t in self.theta_range_deg.split(",")) \
                if self.theta_range_deg else base.theta_range
        except ValueError:
            raise ConfigError("v_range / theta_range_deg must be 'lo,hi'") from None
        if len(v) != 2 or len(th) != 2:
            raise ConfigError("v_range / theta_range_deg must be 'lo,hi'")
        return VariabilityScenario("custom", v, th)

    def placement(self) -> dict[str, list[int]]:
        out = {}
        for key, name in (("scada", "scada_buses"), ("pmu", "pmu_buses"), ("meters", "meter_buses")):
            if getattr(self, name).strip():
                out[key] = _ints(getattr(self, name))
        return out

    def solver(self) -> SolverOptions:
        return SolverOptions(grad_tol=self.grad_tol, step_tol=self.step_tol, max_iter=self.max_iter)

    def snapshot(self) -> str:
        lines = ["# resolved run configuration; reuse with --config"]
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# stages

def _stage(name: str):
    def wrap(func):
        def inner(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except StageError:
                raise
            except (ConfigError, PlanError, PipelineError, ev.ReportError, CaseParseError,
                    NetworkStructureError, UnsupportedFeatureError, FileNotFoundError,
                    OSError, ValueError) as exc:
                raise StageError(name, str(exc)) from exc
            log.info("%s done in %.1f s", name, time.perf_counter() - t0)
            return result
        return inner
    return wrap


@_stage("case")
def load_network(cfg: RunConfig):
    net = load_case(cfg.case_path or None)
    return net, build_admittance(net)


@_stage("plan")
def make_plan(cfg: RunConfig, net, n_pmu: int | None = None, n_scada: int | None = None) -> MeasurementPlan:
    placement = cfg.placement() if n_pmu is None else {}
    return default_plan(net, cfg.n_pmu if n_pmu is None else n_pmu,
                        cfg.n_scada if n_scada is None else n_scada, placement=placement)


@_stage("dataset")
def make_dataset(cfg: RunConfig, plan, adm, scenario):
    return build_dataset(cfg.n_instances, cfg.train_fraction, scenario, plan, adm, cfg.seed)


@_stage("labels")
def make_prepared(cfg: RunConfig, ds, adm) -> Prepared:
    return prepare(ds, adm, cfg.solver(), workers=_workers(cfg), un_tol=cfg.un_tol)


@_stage("methods")
def fit_and_run(tags, prep):
    with warnings.catch_warnings():
        # the enhanced design repeats the substation flow when the slack
        # carries a smart meter; the minimal-norm fit handles that
        warnings.filterwarnings("ignore", message="design matrix rank")
        return run_methods(tags, prep)


def _workers(cfg: RunConfig) -> int:
    return cfg.workers if cfg.workers > 0 else (os.cpu_count() or 1)


def divergence(prep: Prepared, estimates: dict) -> dict[str, float]:
    """Fraction of failed solves per solve family."""
    out = {"retrospective": float(np.mean(~prep.retro_ok)), "unobservable": float(np.mean(~prep.un_ok))}
    for tag, es in estimates.items():
        out[tag] = float(np.mean(~es.converged)) if len(es.converged) else 0.0
    return out


def _write_estimates(estimates: dict, adm, path: Path) -> None:
    n = adm.n_bus
    header = ["instance", "method", "converged"] + [f"v_{k}" for k in range(1, n + 1)] + \
        [f"th_{k}" for k in range(1, n + 1) if k != adm.slack + 1]
    rows = ([int(i), tag, int(es.converged[j])] + [ev._fmt(x) for x in es.states[j]]
            for tag, es in estimates.items() for j, i in enumerate(es.ids))
    ev._write(path, header, rows)


# ---------------------------------------------------------------------------
# commands

def cmd_inspect(args, cfg: RunConfig) -> int:
    path = args.case or cfg.case_path or None
    net = load_case(path)
    print(summary(net))
    try:
        plan = default_plan(net, cfg.n_pmu, cfg.n_scada, placement=cfg.placement())
        print(f"default plan ({cfg.n_pmu} PMU, {cfg.n_scada} SCADA): m_a = {plan.m_a}, "
              f"m_d = {plan.m_d}, states = {2 * net.n_bus - 1}")
    except PlanError as exc:
        print(f"default plan unavailable: {exc}")
    return EXIT_OK


def cmd_generate(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.snapshot())
    net, adm = load_network(cfg)
    plan = make_plan(cfg, net)
    ds = make_dataset(cfg, plan, adm, cfg.scenario())
    save_dataset(ds, out / "dataset.csv")
    (out / "plan.csv").write_text(plan.to_csv())
    print(f"wrote {len(ds)} instances ({len(ds.train)} train / {len(ds.test)} test) to {out}")
    return EXIT_OK


@dataclass
class BenchmarkResult:
    prep: Prepared
    methods: dict
    estimates: dict
    reports: dict[str, ev.MethodReport]
    failed: dict[str, float]


def run_benchmark(cfg: RunConfig, out: Path | None = None) -> BenchmarkResult:
    """Full pipeline; writes the report files into ``out`` when given."""
    net, adm = load_network(cfg)
    plan = make_plan(cfg, net)
    ds = make_dataset(cfg, plan, adm, cfg.scenario())
    prep = make_prepared(cfg, ds, adm)
    methods, estimates = fit_and_run(cfg.method_list, prep)
    if out is not None:
        write_benchmark(cfg, out, prep, methods, estimates)
    reports = dict(zip(estimates, _reports(prep, estimates)))
    return BenchmarkResult(prep, methods, estimates, reports, divergence(prep, estimates))


def _reports(prep, estimates):
    mask = ev.paired_mask(estimates.values())
    key = f"{prep.plan.digest()}:{prep.dataset.seed}:{prep.dataset.scenario.name}"
    return [ev.method_report(es, prep.dataset, prep.adm, mask, key) for es in estimates.values()]


@_stage("report")
def write_benchmark(cfg: RunConfig, out: Path, prep: Prepared, methods: dict, estimates: dict) -> None:
    ds, adm = prep.dataset, prep.adm
    mask = ev.paired_mask(estimates.values())
    reports = _reports(prep, estimates)
    stats = [ev.residual_stats(estimates[t], ds, adm, mask) for t in RESIDUAL_METHODS if t in estimates]
    ev.emit_report(out, reports, stats)
    if stats:
        ev.write_residuals_raw(stats, estimates[stats[0].tag].ids[mask], out / "residuals_raw.csv")
    if cfg.raw_errors:
        ev.write_errors_raw(list(estimates.values()), ds, adm, mask, out / "errors_raw.csv")
    _write_estimates(estimates, adm, out / "estimates.csv")
    for tag, m in methods.items():
        if m.model is not None:
            (out / f"model_{tag}.csv").write_text(m.model.to_csv())
    lines = [f"instances {len(ds)} train {len(ds.train)} test {len(ds.test)} paired {int(mask.sum())}"]
    lines += [f"failed {k} {v:.6f}" for k, v in divergence(prep, estimates).items()]
    lines.append(f"unobservable residual above {prep.un_tol:g} {float(np.mean(~prep.un_exact)):.6f}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")


def _check_divergence(frac: dict[str, float], limit: float, where: str) -> bool:
    bad = {k: v for k, v in frac.items() if v > limit}
    for k, v in bad.items():
        log.error("%s: %.2f%% of %s solves failed (limit %.2f%%)", where, 100 * v, k, 100 * limit)
    return not bad


def cmd_benchmark(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.snapshot())
    result = run_benchmark(cfg, out)
    reports, frac = result.reports, result.failed
    width = max(len(r.name) for r in reports.values())
    print(f"{'method':<{width}}  " + "  ".join(f"{m:>9}" for m in ev.TABLE_MAGNITUDES))
    for r in reports.values():
        print(f"{r.name:<{width}}  " + "  ".join(f"{r.rmse[m]:9.4f}" for m in ev.TABLE_MAGNITUDES))
    print(f"reports in {out}")
    return EXIT_OK if _check_divergence(frac, cfg.max_diverged, "benchmark") else EXIT_DIVERGED


def run_sweep(cfg: RunConfig, cache: dict | None = None) -> tuple[list[ev.SweepRow], bool]:
    """One row per cell and method pair.

    ``cache`` may map ``(variability, n_pmu, n_scada)`` to an already
    prepared dataset built from the same configuration.
    """
    cache = cache or {}
    pairs = cfg.pair_list
    if not cfg.cell_list or not pairs:
        raise StageError("sweep", "no sweep cells or method pairs configured")
    tags = list(dict.fromkeys(t for p in pairs for t in p))
    net, adm = load_network(cfg)
    rows, healthy = [], True
    for name, n_pmu, n_scada in cfg.cell_list:
        where = f"cell {name}/{n_pmu}/{n_scada}"
        try:
            plan = make_plan(cfg, net, n_pmu, n_scada)
        except StageError as exc:
            log.warning("%s infeasible: %s", where, exc)
            rows += [ev.SweepRow(name, n_pmu, n_scada, a, b, float("nan"), float("nan"), 0,
                                 "infeasible") for a, b in pairs]
            continue
        prep = cache.get((name, n_pmu, n_scada))
        if prep is None:
            ds = make_dataset(cfg, plan, adm, cfg.scenario(name))
            prep = make_prepared(cfg, ds, adm)
        _, estimates = fit_and_run(tags, prep)
        reports = dict(zip(estimates, _reports(prep, estimates)))
        frac = divergence(prep, estimates)
        ok = _check_divergence(frac, cfg.max_diverged, where)
        healthy &= ok
        for a, b in pairs:
            rows.append(ev.SweepRow(name, n_pmu, n_scada, a, b,
                                    ev.delta_rmse(reports[a], reports[b], "V"),
                                    ev.delta_rmse(reports[a], reports[b], "Sf"),
                                    reports[a].count, "ok" if ok else "diverged"))
        log.info("%s: dV=%.4f dSf=%.4f", where, rows[-1].delta_v, rows[-1].delta_sf)
    return rows, healthy


def cmd_sweep(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.snapshot())
    rows, healthy = run_sweep(cfg)
    ev.write_table4(rows, out / "table4.csv")
    for r in rows:
        print(f"{r.scenario:>8} {r.n_pmu:>3} PMU {r.n_scada:>3} SCADA  {r.standard}-{r.enhanced}: "
              f"dV = {r.delta_v:.4f}  dSf = {r.delta_sf:.4f}  [{r.status}]")
    print(f"table in {out / 'table4.csv'}")
    return EXIT_OK if healthy else EXIT_DIVERGED


# ---------------------------------------------------------------------------
# argument handling

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lbse", description="Learning-aided state estimation benchmark")
    sub = p.add_subparsers(dest="command", required=True)
    commands = {
        "inspect": "summarize a case file and its default sensor plan",
        "generate": "write a synthetic dataset",
        "benchmark": "run all methods and write the error tables",
        "sweep": "enhanced-minus-standard RMSE over variability and sensor mixes",
    }
    for name, help_text in commands.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if name == "inspect":
            sp.add_argument("case", nargs="?", help="MATPOWER case file (default: bundled 33-bus)")
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--full-scale", action="store_true",
                        help=f"use {FULL_INSTANCES} instances instead of {DESK_INSTANCES}")
        for f in dataclasses.fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            sp.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper(),
                            help=f"default: {f.default!r}")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(RunConfig.from_text(path.read_text()))
    if args.full_scale:
        values["n_instances"] = str(FULL_INSTANCES)
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return RunConfig.build(values)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    handlers = {"inspect": cmd_inspect, "generate": cmd_generate,
                "benchmark": cmd_benchmark, "sweep": cmd_sweep}
    try:
        cfg = resolve_config(args)
        return handlers[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
    except (FileNotFoundError, CaseParseError, UnsupportedFeatureError, NetworkStructureError) as exc:
        print(f"error [case]: {exc}", file=sys.stderr)
    return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
