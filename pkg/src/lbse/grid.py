"""Network model: MATPOWER case parsing and bus admittance assembly."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

BUS_COLUMNS = 13
BRANCH_COLUMNS = 13


class CaseParseError(ValueError):
    """Malformed case file."""


class UnsupportedFeatureError(ValueError):
    """Case uses a modeling feature this package does not handle (taps, shifters)."""


class NetworkStructureError(ValueError):
    """Topology problem such as a disconnected network."""


@dataclass(frozen=True)
class Bus:
    id: int
    type: int = 1
    gs: float = 0.0
    bs: float = 0.0
    base_kv: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_sh: float = 0.0
    in_service: bool = True

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise NetworkStructureError(f"branch {self.from_bus}-{self.to_bus} is a self loop")
        if self.r == 0.0 and self.x == 0.0:
            raise NetworkStructureError(f"branch {self.from_bus}-{self.to_bus} has zero impedance")


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float
    slack_bus: int

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def active_branches(self) -> tuple[Branch, ...]:
        return tuple(br for br in self.branches if br.in_service)

    @property
    def n_branch(self) -> int:
        return len(self.active_branches)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def index(self, bus_id: int) -> int:
        """0-based dense index of an external bus id."""
        try:
            return self._index_map[bus_id]
        except KeyError:
            raise KeyError(f"unknown bus id {bus_id}") from None

    @property
    def slack_index(self) -> int:
        return self.index(self.slack_bus)

    @property
    def _index_map(self) -> dict[int, int]:
        # frozen dataclass: cache manually
        cache = self.__dict__.get("_idx_cache")
        if cache is None:
            cache = {b.id: k for k, b in enumerate(self.buses)}
            object.__setattr__(self, "_idx_cache", cache)
        return cache


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Real and imaginary parts of Ybus plus the per-branch data the flow functions need.

    ``from_idx``/``to_idx``, ``branch_g``/``branch_b`` (series admittance) and
    ``branch_b_sh`` (total line charging) are aligned with ``Network.active_branches``.
    """

    g: np.ndarray
    b: np.ndarray
    from_idx: np.ndarray
    to_idx: np.ndarray
    branch_g: np.ndarray
    branch_b: np.ndarray
    branch_b_sh: np.ndarray
    slack: int = 0
    base_mva: float = 1.0
    _ybus: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def n_bus(self) -> int:
        return self.g.shape[0]

    @property
    def n_branch(self) -> int:
        return self.from_idx.shape[0]

    @property
    def ybus(self) -> np.ndarray:
        if self._ybus is None:
            object.__setattr__(self, "_ybus", self.g + 1j * self.b)
        return self._ybus


_ASSIGN_RE = re.compile(r"^\s*mpc\.baseMVA\s*=\s*([^;]+);")
_MATRIX_START_RE = re.compile(r"^\s*mpc\.(\w+)\s*=\s*\[(.*)$")


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _read_matrices(text: str) -> tuple[float | None, dict[str, list[tuple[int, list[float]]]]]:
    base_mva = None
    matrices: dict[str, list[tuple[int, list[float]]]] = {}
    current = None
    pending: list[str] = []
    pending_line = 0

    def flush_row(lineno: int):
        nonlocal pending
        tokens = " ".join(pending).replace(",", " ").split()
        pending = []
        if not tokens:
            return
        try:
            values = [float(t) for t in tokens]
        except ValueError:
            raise CaseParseError(f"line {lineno}: non-numeric entry in mpc.{current}") from None
        matrices[current].append((lineno, values))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if current is None:
            m = _ASSIGN_RE.match(line)
            if m:
                try:
                    base_mva = float(m.group(1))
                except ValueError:
                    raise CaseParseError(f"line {lineno}: bad baseMVA value") from None
                continue
            m = _MATRIX_START_RE.match(line)
            if not m:
                continue
            current = m.group(1)
            matrices[current] = []
            line = m.group(2)
        end = line.find("]")
        body = line if end < 0 else line[:end]
        parts = body.split(";")
        for k, part in enumerate(parts):
            if not pending:
                pending_line = lineno
            pending.append(part)
            if k < len(parts) - 1:
                flush_row(pending_line)
        if end >= 0:
            flush_row(pending_line)
            current = None
        elif pending and not "".join(pending).strip():
            pending = []
        elif pending:
            # MATLAB also ends a row at a newline
            flush_row(pending_line)
    if current is not None:
        raise CaseParseError(f"unterminated matrix mpc.{current}")
    return base_mva, matrices


def parse_case(text: str, force_in_service: bool = True) -> Network:
    """Parse MATPOWER case text into a :class:`Network`.

    Only ``mpc.baseMVA``, ``mpc.bus`` and ``mpc.branch`` are read; every other
    statement is ignored. With ``force_in_service`` (the default) branch status
    columns are overridden so every branch is in service.
    """
    base_mva, matrices = _read_matrices(text)
    if base_mva is None:
        raise CaseParseError("missing mpc.baseMVA")
    for name in ("bus", "branch"):
        if name not in matrices:
            raise CaseParseError(f"missing mpc.{name} matrix")

    buses = []
    slack = []
    for lineno, row in matrices["bus"]:
        if len(row) != BUS_COLUMNS:
            raise CaseParseError(
                f"line {lineno}: bus row has {len(row)} columns, expected {BUS_COLUMNS}")
        bus = Bus(id=int(row[0]), type=int(row[1]), gs=row[4] / base_mva,
                  bs=row[5] / base_mva, base_kv=row[9])
        if bus.type == 3:
            slack.append(bus.id)
        buses.append(bus)
    if len({b.id for b in buses}) != len(buses):
        raise CaseParseError("duplicate bus ids")
    if len(slack) != 1:
        raise CaseParseError(f"expected exactly one reference bus, found {len(slack)}")

    known = {b.id for b in buses}
    branches = []
    for lineno, row in matrices["branch"]:
        if len(row) != BRANCH_COLUMNS:
            raise CaseParseError(
                f"line {lineno}: branch row has {len(row)} columns, expected {BRANCH_COLUMNS}")
        f, t = int(row[0]), int(row[1])
        if f not in known or t not in known:
            missing = f if f not in known else t
            raise CaseParseError(f"line {lineno}: branch references unknown bus {missing}")
        tap, shift = row[8], row[9]
        if tap not in (0.0, 1.0) or shift != 0.0:
            raise UnsupportedFeatureError(
                f"line {lineno}: transformer tap/phase shift not supported")
        try:
            branches.append(Branch(from_bus=f, to_bus=t, r=row[2], x=row[3], b_sh=row[4],
                                   in_service=force_in_service or row[10] != 0))
        except NetworkStructureError as exc:
            raise CaseParseError(f"line {lineno}: {exc}") from None

    return Network(buses=tuple(buses), branches=tuple(branches),
                   base_mva=base_mva, slack_bus=slack[0])


def load_case(path: str | Path | None = None, force_in_service: bool = True) -> Network:
    """Read a case file; ``None`` loads the bundled IEEE 33-bus feeder."""
    if path is None:
        text = resources.files("lbse.data").joinpath("case33bw.m").read_text()
    else:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"case file not found: {path}")
        text = path.read_text()
    return parse_case(text, force_in_service=force_in_service)


def dump_case(net: Network) -> str:
    """Serialize ``net`` back to MATPOWER syntax, one bus or branch per line.

    Floats are written with ``repr`` so parsing the output reproduces the
    network exactly.
    """
    out = ["function mpc = case_dump", f"mpc.baseMVA = {net.base_mva!r};", "mpc.bus = ["]
    for b in net.buses:
        row = [b.id, b.type, 0, 0, b.gs * net.base_mva, b.bs * net.base_mva, 1, 1, 0,
               b.base_kv, 1, 1.1, 0.9]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", "mpc.branch = ["]
    for br in net.branches:
        row = [br.from_bus, br.to_bus, br.r, br.x, br.b_sh, 0, 0, 0, 0, 0,
               int(br.in_service), -360, 360]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out.append("];")
    return "\n".join(out) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(v)
    return repr(float(v))


def build_admittance(net: Network) -> AdmittanceMatrix:
    """Assemble the dense bus admittance matrix of ``net``.

    Off-diagonal entries are ``-y_series``; the diagonal collects series
    admittances, half line charging of each incident branch and the bus shunt.
    """
    n = net.n_bus
    active = net.active_branches
    f = np.array([net.index(br.from_bus) for br in active], dtype=int)
    t = np.array([net.index(br.to_bus) for br in active], dtype=int)

    graph = coo_matrix((np.ones(len(f)), (f, t)), shape=(n, n))
    n_comp, _ = connected_components(graph, directed=False)
    if n_comp != 1:
        raise NetworkStructureError(f"network has {n_comp} disconnected islands")

    z = np.array([complex(br.r, br.x) for br in active])
    y = 1.0 / z
    b_sh = np.array([br.b_sh for br in active], dtype=float)

    ybus = np.zeros((n, n), dtype=complex)
    np.add.at(ybus, (f, t), -y)
    np.add.at(ybus, (t, f), -y)
    np.add.at(ybus, (f, f), y + 0.5j * b_sh)
    np.add.at(ybus, (t, t), y + 0.5j * b_sh)
    ybus[np.diag_indices(n)] += np.array([complex(b.gs, b.bs) for b in net.buses])

    return AdmittanceMatrix(g=ybus.real.copy(), b=ybus.imag.copy(), from_idx=f, to_idx=t,
                            branch_g=y.real.copy(), branch_b=y.imag.copy(), branch_b_sh=b_sh,
                            slack=net.slack_index, base_mva=net.base_mva)


def summary(net: Network) -> str:
    n_br = net.n_branch
    return (f"{net.n_bus} buses, {n_br} branch{'es' if n_br != 1 else ''}, "
            f"base {net.base_mva:g} MVA, slack bus {net.slack_bus}")
