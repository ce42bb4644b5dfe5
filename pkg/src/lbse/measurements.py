"""Measurement functions, their Jacobian, and sensor plans.

Every electrical output of the network is laid out in one "full output"
vector ``[V(n), theta(n), P(n), Q(n), Pf(nb), Qf(nb)]``. A plan is an ordered
selection of rows of that vector, so ``eval_h`` and ``eval_jacobian`` share a
single row-index array and can never disagree on ordering.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .grid import AdmittanceMatrix, Network


class PlanError(ValueError):
    """Invalid sensor placement or plan specification."""


class Kind(str, enum.Enum):
    VMAG = "vmag"
    VANG = "vang"
    PINJ = "pinj"
    QINJ = "qinj"
    PFLOW = "pflow"
    QFLOW = "qflow"

    @property
    def is_branch(self) -> bool:
        return self in (Kind.PFLOW, Kind.QFLOW)

    @property
    def is_power(self) -> bool:
        return self not in (Kind.VMAG, Kind.VANG)


class Availability(str, enum.Enum):
    REALTIME = "realtime"
    DELAYED = "delayed"


POWER_SIGMA = 0.01
VOLTAGE_SIGMA = 0.001


@dataclass(frozen=True)
class StateVector:
    """Bus voltage magnitudes (p.u.) and angles (rad); the slack angle is 0."""

    v: np.ndarray
    theta: np.ndarray

    @classmethod
    def flat(cls, n: int) -> "StateVector":
        return cls(np.ones(n), np.zeros(n))

    @classmethod
    def from_free(cls, x: np.ndarray, slack: int) -> "StateVector":
        n = (len(x) + 1) // 2
        theta = np.insert(np.asarray(x[n:], dtype=float), slack, 0.0)
        return cls(np.array(x[:n], dtype=float), theta)

    def free(self, slack: int) -> np.ndarray:
        """Free-variable vector ``[v, theta without slack]`` of length 2n-1."""
        return np.concatenate([self.v, np.delete(self.theta, slack)])

    @property
    def n(self) -> int:
        return len(self.v)


@dataclass(frozen=True)
class MeasurementSpec:
    kind: Kind
    location: int
    sigma: float
    availability: Availability = Availability.REALTIME

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "availability", Availability(self.availability))
        if not self.sigma > 0:
            raise PlanError(f"sigma must be positive, got {self.sigma}")

    @property
    def label(self) -> str:
        return f"{self.kind.value}_{self.location}"


def full_index(kind: Kind, location: int, n_bus: int, n_branch: int) -> int:
    """Row of ``(kind, location)`` in the full output vector; locations are 1-based."""
    kind = Kind(kind)
    limit = n_branch if kind.is_branch else n_bus
    if not 1 <= location <= limit:
        raise PlanError(f"{kind.value} location {location} out of range 1..{limit}")
    offsets = {Kind.VMAG: 0, Kind.VANG: n_bus, Kind.PINJ: 2 * n_bus, Kind.QINJ: 3 * n_bus,
               Kind.PFLOW: 4 * n_bus, Kind.QFLOW: 4 * n_bus + n_branch}
    return offsets[kind] + location - 1


def full_labels(n_bus: int, n_branch: int) -> list[str]:
    labels = []
    for kind in Kind:
        count = n_branch if kind.is_branch else n_bus
        labels += [f"{kind.value}_{k}" for k in range(1, count + 1)]
    return labels


@dataclass(frozen=True)
class MeasurementPlan:
    """Ordered sensor list; the vector layout is all realtime rows, then all delayed rows."""

    specs: tuple[MeasurementSpec, ...]

    def __post_init__(self):
        specs = tuple(self.specs)
        ordered = tuple(s for s in specs if s.availability is Availability.REALTIME) + \
            tuple(s for s in specs if s.availability is Availability.DELAYED)
        seen = set()
        for s in ordered:
            key = (s.kind, s.location, s.availability)
            if key in seen:
                raise PlanError(f"duplicate measurement {s.label} ({s.availability.value})")
            seen.add(key)
        object.__setattr__(self, "specs", ordered)

    def __len__(self) -> int:
        return len(self.specs)

    @property
    def m_a(self) -> int:
        return sum(s.availability is Availability.REALTIME for s in self.specs)

    @property
    def m_d(self) -> int:
        return len(self.specs) - self.m_a

    @cached_property
    def available(self) -> "MeasurementPlan":
        return MeasurementPlan(self.specs[: self.m_a])

    @cached_property
    def delayed(self) -> "MeasurementPlan":
        return MeasurementPlan(self.specs[self.m_a:])

    @cached_property
    def sigmas(self) -> np.ndarray:
        return np.array([s.sigma for s in self.specs], dtype=float)

    @property
    def weights(self) -> np.ndarray:
        return self.sigmas ** -2

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.specs]

    def rows(self, n_bus: int, n_branch: int) -> np.ndarray:
        cache = self.__dict__.setdefault("_rows_cache", {})
        key = (n_bus, n_branch)
        if key not in cache:
            cache[key] = np.array(
                [full_index(s.kind, s.location, n_bus, n_branch) for s in self.specs], dtype=int)
        return cache[key]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "location", "sigma", "availability"])
        for s in self.specs:
            w.writerow([s.kind.value, s.location, repr(s.sigma), s.availability.value])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MeasurementPlan":
        reader = csv.DictReader(io.StringIO(text))
        try:
            specs = [MeasurementSpec(Kind(r["kind"]), int(r["location"]), float(r["sigma"]),
                                     Availability(r["availability"])) for r in reader]
        except (KeyError, ValueError) as exc:
            raise PlanError(f"bad plan CSV: {exc}") from None
        return cls(tuple(specs))

    def digest(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# measurement functions

def _phasors(v, theta):
    return v * np.exp(1j * theta)


def full_outputs(state: StateVector, adm: AdmittanceMatrix) -> np.ndarray:
    """Every measurable quantity ``[V, theta, P, Q, Pf, Qf]`` in p.u. and radians."""
    V = _phasors(state.v, state.theta)
    S = V * np.conj(adm.ybus @ V)
    f, t = adm.from_idx, adm.to_idx
    y = adm.branch_g + 1j * adm.branch_b
    i_from = (y + 0.5j * adm.branch_b_sh) * V[f] - y * V[t]
    Sf = V[f] * np.conj(i_from)
    return np.concatenate([state.v, state.theta, S.real, S.imag, Sf.real, Sf.imag])


def full_jacobian(state: StateVector, adm: AdmittanceMatrix) -> np.ndarray:
    """Jacobian of :func:`full_outputs` w.r.t. the free state ``[v, theta without slack]``."""
    n, nb = adm.n_bus, adm.n_branch
    v = state.v
    V = _phasors(v, state.theta)
    Vn = V / v
    Y = adm.ybus
    I = Y @ V

    dS_dth = 1j * (np.diag(V * np.conj(I)) - V[:, None] * np.conj(Y) * np.conj(V)[None, :])
    dS_dv = V[:, None] * np.conj(Y) * np.conj(Vn)[None, :] + np.diag(np.conj(I) * Vn)

    f, t = adm.from_idx, adm.to_idx
    y = adm.branch_g + 1j * adm.branch_b
    yff = y + 0.5j * adm.branch_b_sh
    yft = -y
    i_from = yff * V[f] + yft * V[t]
    rows = np.arange(nb)
    dSf_dth = np.zeros((nb, n), dtype=complex)
    dSf_dv = np.zeros((nb, n), dtype=complex)
    dSf_dth[rows, f] = 1j * (V[f] * np.conj(i_from) - v[f] ** 2 * np.conj(yff))
    dSf_dth[rows, t] = -1j * V[f] * np.conj(yft * V[t])
    dSf_dv[rows, f] = Vn[f] * np.conj(i_from) + v[f] * np.conj(yff)
    dSf_dv[rows, t] = V[f] * np.conj(yft * Vn[t])

    eye = np.eye(n)
    J = np.block([
        [eye, np.zeros((n, n))],
        [np.zeros((n, n)), eye],
        [dS_dv.real, dS_dth.real],
        [dS_dv.imag, dS_dth.imag],
        [dSf_dv.real, dSf_dth.real],
        [dSf_dv.imag, dSf_dth.imag],
    ])
    return np.delete(J, n + adm.slack, axis=1)


def eval_h(state: StateVector, plan: MeasurementPlan, adm: AdmittanceMatrix) -> np.ndarray:
    """Measurement vector of ``plan`` at ``state`` (plan order)."""
    return full_outputs(state, adm)[plan.rows(adm.n_bus, adm.n_branch)]


def eval_jacobian(state: StateVector, plan: MeasurementPlan, adm: AdmittanceMatrix) -> np.ndarray:
    """``m x (2n-1)`` Jacobian of :func:`eval_h`; columns ``[v(1..n), theta(non-slack)]``."""
    return full_jacobian(state, adm)[plan.rows(adm.n_bus, adm.n_branch)]


# ---------------------------------------------------------------------------
# default sensor placement

# Preference orders for the bundled 33-bus feeder. The first 15 SCADA buses
# together with the slack and the Table-style smart-meter buses
# {4,7,10,11,14,16,18,19,20,22,23,25,26,27,28,30,32} partition all 33 buses.
SCADA_ORDER_33 = (3, 9, 15, 21, 29, 2, 5, 6, 8, 12, 13, 17, 24, 31, 33,
                  4, 7, 11, 14, 18, 20, 23, 26, 28, 32, 10, 16, 19, 22, 25, 27, 30)
PMU_ORDER_33 = (3, 9, 15, 21, 29, 6, 12, 18, 25, 33, 2, 5, 8, 13, 17,
                20, 23, 27, 31, 4, 7, 10, 11, 14, 16, 19, 22, 24, 26, 28, 30, 32)


def _spread(candidates: list[int], count: int) -> list[int]:
    if count <= 0:
        return []
    idx = np.linspace(0, len(candidates) - 1, count).round().astype(int)
    return [candidates[i] for i in idx]


def ftu_branch(net: Network) -> int:
    """1-based position of the lowest-indexed in-service branch touching the slack."""
    for k, br in enumerate(net.active_branches, start=1):
        if net.slack_bus in (br.from_bus, br.to_bus):
            return k
    raise PlanError("slack bus has no in-service branch")


def default_plan(net: Network, n_pmu: int = 5, n_scada: int = 15,
                 placement: dict[str, list[int]] | None = None,
                 slack_meter: bool = True) -> MeasurementPlan:
    """Build the FTU + SCADA + PMU (realtime) and smart meter (delayed) plan.

    Locations are 1-based dense bus numbers. ``placement`` may override any of
    the ``"scada"``, ``"pmu"`` and ``"meters"`` bus lists. Smart meters default
    to every bus without a SCADA injection sensor; ``slack_meter`` decides
    whether the substation bus carries one.
    """
    placement = dict(placement or {})
    n = net.n_bus
    slack = net.slack_index + 1
    non_slack = [k for k in range(1, n + 1) if k != slack]
    if n_pmu < 0 or n_scada < 0 or n_pmu + n_scada > len(non_slack):
        raise PlanError(f"{n_pmu} PMUs + {n_scada} SCADA do not fit in {len(non_slack)} buses")

    if n == 33 and slack == 1:
        scada_order, pmu_order = list(SCADA_ORDER_33), list(PMU_ORDER_33)
    else:
        scada_order = _spread(non_slack, n_scada) + non_slack
        pmu_order = _spread(non_slack, n_pmu) + non_slack

    scada = placement.get("scada")
    if scada is None:
        scada = list(dict.fromkeys(scada_order))[:n_scada]
    pmu = placement.get("pmu")
    if pmu is None:
        pmu = list(dict.fromkeys(pmu_order))[:n_pmu]
    scada, pmu = sorted(set(scada)), sorted(set(pmu))
    if len(scada) != n_scada or len(pmu) != n_pmu:
        raise PlanError("placement list length does not match the requested counts")
    if slack in scada or slack in pmu:
        raise PlanError("slack bus cannot host SCADA injections or PMUs")
    meters = placement.get("meters")
    if meters is None:
        pool = range(1, n + 1) if slack_meter else non_slack
        meters = [k for k in pool if k not in scada]
    meters = sorted(set(meters))
    overlap = set(scada) & set(meters)
    if overlap:
        raise PlanError(f"buses {sorted(overlap)} have both SCADA and smart-meter injections")

    rt, dl = Availability.REALTIME, Availability.DELAYED
    ftu = ftu_branch(net)
    specs = [MeasurementSpec(Kind.VMAG, slack, VOLTAGE_SIGMA, rt),
             MeasurementSpec(Kind.PFLOW, ftu, POWER_SIGMA, rt),
             MeasurementSpec(Kind.QFLOW, ftu, POWER_SIGMA, rt)]
    for k in scada:
        specs += [MeasurementSpec(Kind.PINJ, k, POWER_SIGMA, rt),
                  MeasurementSpec(Kind.QINJ, k, POWER_SIGMA, rt)]
    for k in pmu:
        specs += [MeasurementSpec(Kind.VMAG, k, VOLTAGE_SIGMA, rt),
                  MeasurementSpec(Kind.VANG, k, VOLTAGE_SIGMA, rt)]
    for k in meters:
        specs += [MeasurementSpec(Kind.PINJ, k, POWER_SIGMA, dl),
                  MeasurementSpec(Kind.QINJ, k, POWER_SIGMA, dl)]
    return MeasurementPlan(tuple(specs))
