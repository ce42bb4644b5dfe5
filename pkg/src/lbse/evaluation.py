"""Error metrics, residual statistics and CSV report tables.

Everything here works in reporting units: voltage in p.u., angles in degrees,
powers in MW / MVAr / MVA (scaled by the network base). Angle errors are taken
over the non-slack buses only, since the slack angle is fixed by definition.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grid import AdmittanceMatrix
from .measurements import Kind
from .pipelines import DISPLAY, EstimateSet
from .scenario import Dataset

MAGNITUDES = ("V", "theta", "P", "Q", "Pf", "Qf", "Sf")
TABLE_MAGNITUDES = ("V", "theta", "P", "Q", "Pf", "Qf")
UNITS = {"V": "pu", "theta": "deg", "P": "MW", "Q": "MVAr", "Pf": "MW", "Qf": "MVAr", "Sf": "MVA"}
NO_PSEUDO = {"FL"}


class ReportError(ValueError):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def magnitude_values(y: np.ndarray, adm: AdmittanceMatrix, magnitude: str) -> np.ndarray:
    """Slice full output vectors (rows = instances) into one magnitude, in reporting units."""
    n, nb, base = adm.n_bus, adm.n_branch, adm.base_mva
    y = np.atleast_2d(y)
    if magnitude == "V":
        return y[:, :n]
    if magnitude == "theta":
        return np.degrees(np.delete(y[:, n:2 * n], adm.slack, axis=1))
    pf, qf = y[:, 4 * n:4 * n + nb], y[:, 4 * n + nb:4 * n + 2 * nb]
    parts = {"P": y[:, 2 * n:3 * n], "Q": y[:, 3 * n:4 * n], "Pf": pf, "Qf": qf,
             "Sf": np.hypot(pf, qf)}
    if magnitude not in parts:
        raise ReportError(f"unknown magnitude {magnitude!r}; choose from {', '.join(MAGNITUDES)}")
    return parts[magnitude] * base


def errors(estimates: EstimateSet, dataset: Dataset, adm: AdmittanceMatrix, magnitude: str,
           mask: np.ndarray | None = None) -> np.ndarray:
    """Signed estimate-minus-truth errors, ``K x R``, against noise-free true values."""
    est = magnitude_values(estimates.outputs(adm), adm, magnitude)
    true = magnitude_values(dataset.y_true[estimates.ids], adm, magnitude)
    err = est - true
    if magnitude == "theta":
        err = (err + 180.0) % 360.0 - 180.0
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    return err


def rmse(err: np.ndarray) -> float:
    """Root of the mean squared error over every instance and location."""
    err = np.asarray(err, dtype=float)
    if err.size == 0:
        raise ReportError("no paired instances to score")
    return float(np.sqrt(np.mean(err ** 2)))


def paired_mask(estimates: Iterable[EstimateSet]) -> np.ndarray:
    """Instances every method solved; flagged ones are dropped from all methods together."""
    sets = list(estimates)
    if not sets:
        raise ReportError("no estimate sets")
    ids = sets[0].ids
    for es in sets[1:]:
        if not np.array_equal(es.ids, ids):
            raise ReportError(f"{es.tag} covers different instances than {sets[0].tag}")
    return np.logical_and.reduce([es.converged for es in sets])


@dataclass(frozen=True)
class MethodReport:
    tag: str
    rmse: dict[str, float]
    count: int                     # paired instances K
    locations: dict[str, int]      # R per magnitude
    config: str = ""               # identifies the dataset/plan the report belongs to

    @property
    def name(self) -> str:
        return DISPLAY.get(self.tag, self.tag)


def method_report(estimates: EstimateSet, dataset: Dataset, adm: AdmittanceMatrix,
                  mask: np.ndarray, config: str = "") -> MethodReport:
    values, locs = {}, {}
    for mag in MAGNITUDES:
        err = errors(estimates, dataset, adm, mag, mask)
        values[mag] = rmse(err)
        locs[mag] = err.shape[1]
    return MethodReport(estimates.tag, values, int(np.count_nonzero(mask)), locs, config)


def delta_rmse(standard: MethodReport, enhanced: MethodReport, magnitude: str) -> float:
    """Standard minus enhanced RMSE; positive means the enhancement helps."""
    if standard.config != enhanced.config or standard.count != enhanced.count:
        raise ReportError(f"{standard.name} and {enhanced.name} come from different runs")
    return standard.rmse[magnitude] - enhanced.rmse[magnitude]


# ---------------------------------------------------------------------------
# residuals of the delayed measurements

@dataclass(frozen=True)
class ResidualStats:
    tag: str
    labels: tuple[str, ...]         # delayed measurement labels, e.g. "pinj_19"
    mean: np.ndarray
    std: np.ndarray
    samples: np.ndarray = field(repr=False, default_factory=lambda: np.empty((0, 0)))

    def by_label(self) -> dict[str, tuple[float, float]]:
        return {lab: (float(m), float(s)) for lab, m, s in zip(self.labels, self.mean, self.std)}


def residual_stats(estimates: EstimateSet, dataset: Dataset, adm: AdmittanceMatrix,
                   mask: np.ndarray | None = None, kind: Kind | None = Kind.PINJ) -> ResidualStats:
    """Mean and std over instances of ``z_d - z_d_hat`` per delayed measurement (MW/MVAr).

    ``kind`` limits the statistics to one measurement kind; ``None`` keeps all.
    """
    if estimates.tag in NO_PSEUDO or estimates.pseudo is None:
        raise ReportError(f"method {estimates.tag} produces no pseudo-measurements")
    specs = dataset.plan.delayed.specs
    cols = [j for j, s in enumerate(specs) if kind is None or s.kind is Kind(kind)]
    res = (dataset.z_d[estimates.ids] - estimates.pseudo)[:, cols] * adm.base_mva
    if mask is not None:
        res = res[np.asarray(mask, dtype=bool)]
    if res.shape[0] == 0:
        raise ReportError("no instances for residual statistics")
    return ResidualStats(estimates.tag, tuple(specs[j].label for j in cols),
                         res.mean(axis=0), res.std(axis=0), res)


# ---------------------------------------------------------------------------
# report files

@dataclass(frozen=True)
class SweepRow:
    scenario: str
    n_pmu: int
    n_scada: int
    standard: str
    enhanced: str
    delta_v: float
    delta_sf: float
    count: int
    status: str = "ok"


def _write(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def write_table2(reports: Sequence[MethodReport], path: Path) -> Path:
    header = ["method"] + [f"{m}_{UNITS[m]}" for m in TABLE_MAGNITUDES]
    return _write(path, header, ([r.name] + [_fmt(r.rmse[m]) for m in TABLE_MAGNITUDES]
                                 for r in reports))


def write_rmse_all(reports: Sequence[MethodReport], path: Path) -> Path:
    header = ["method", "K"] + [f"{m}_{UNITS[m]}" for m in MAGNITUDES] + \
        [f"R_{m}" for m in MAGNITUDES]
    return _write(path, header, ([r.name, r.count] + [_fmt(r.rmse[m]) for m in MAGNITUDES]
                                 + [r.locations[m] for m in MAGNITUDES] for r in reports))


def write_table1(stats: Sequence[ResidualStats], path: Path) -> Path:
    labels = stats[0].labels if stats else ()
    for s in stats:
        if s.labels != labels:
            raise ReportError("residual statistics cover different measurements")
    header = ["measurement"] + [f"{DISPLAY.get(s.tag, s.tag)}_{c}" for s in stats
                                for c in ("mean", "std")]
    rows = ([lab] + [_fmt(v) for s in stats for v in (s.mean[j], s.std[j])]
            for j, lab in enumerate(labels))
    return _write(path, header, rows)


def write_table4(rows: Sequence[SweepRow], path: Path) -> Path:
    header = ["variability", "n_pmu", "n_scada", "standard", "enhanced",
              "delta_V_pu", "delta_Sf_MVA", "K", "status"]
    return _write(path, header, ([r.scenario, r.n_pmu, r.n_scada, DISPLAY.get(r.standard, r.standard),
                                  DISPLAY.get(r.enhanced, r.enhanced), _fmt(r.delta_v),
                                  _fmt(r.delta_sf), r.count, r.status] for r in rows))


def _locations(magnitude: str, adm: AdmittanceMatrix) -> list[int]:
    if magnitude in ("Pf", "Qf", "Sf"):
        return list(range(1, adm.n_branch + 1))
    return [k + 1 for k in range(adm.n_bus) if magnitude != "theta" or k != adm.slack]


def write_errors_raw(estimates: Sequence[EstimateSet], dataset: Dataset, adm: AdmittanceMatrix,
                     mask: np.ndarray, path: Path, magnitudes: Sequence[str] = ("V", "Sf")) -> Path:
    """Tidy per-instance absolute errors (one row per instance, method, location)."""
    def rows():
        for es in estimates:
            ids = es.ids[mask]
            for mag in magnitudes:
                err = np.abs(errors(es, dataset, adm, mag, mask))
                locs = _locations(mag, adm)
                for i, inst in enumerate(ids):
                    for r, loc in enumerate(locs):
                        yield inst, DISPLAY.get(es.tag, es.tag), mag, loc, _fmt(err[i, r])
    return _write(path, ["instance", "method", "magnitude", "location", "abs_error"], rows())


def write_residuals_raw(stats: Sequence[ResidualStats], ids: np.ndarray, path: Path) -> Path:
    def rows():
        for s in stats:
            for i, inst in enumerate(ids):
                for j, lab in enumerate(s.labels):
                    yield inst, DISPLAY.get(s.tag, s.tag), lab, _fmt(s.samples[i, j])
    return _write(path, ["instance", "method", "measurement", "residual"], rows())


def emit_report(destination: str | Path, reports: Sequence[MethodReport] = (),
                stats: Sequence[ResidualStats] = (), sweep: Sequence[SweepRow] | None = None) -> list[Path]:
    """Write the summary tables; raw per-instance files are written separately."""
    dest = Path(destination)
    try:
        dest.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create report directory {dest}: {exc}") from None
    out = [write_table2(reports, dest / "table2.csv"), write_rmse_all(reports, dest / "rmse_all.csv")]
    if stats:
        out.append(write_table1(stats, dest / "table1.csv"))
    if sweep is not None:
        out.append(write_table4(sweep, dest / "table4.csv"))
    return out
