"""Network data, admittance matrices, power flow and Kron reduction.

The bundled case is the IEEE 39-bus (10-machine New England) system with
classical machine data (constant EMF behind transient reactance).
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

BASE_MVA = 100.0
FREQ_HZ = 60.0
PF_TOL = 1e-8
PF_MAX_ITER = 50

BUS_TYPES = ("slack", "PV", "PQ")


class GridError(Exception):
    """Base class for network data and solution errors."""


class ParseError(GridError):
    def __init__(self, path, line, column, msg):
        self.path, self.line, self.column = path, line, column
        super().__init__(f"{path}:{line}: column '{column}': {msg}")


class ValidationError(GridError):
    pass


class SingularNetworkError(GridError):
    def __init__(self, bus, msg="singular sub-matrix during elimination"):
        self.bus = bus
        super().__init__(f"{msg} (at bus {bus})")


class IslandingError(GridError):
    pass


class ConvergenceError(GridError):
    def __init__(self, iterations, mismatch):
        self.iterations, self.mismatch = iterations, mismatch
        super().__init__(
            f"power flow did not converge after {iterations} iterations "
            f"(max mismatch {mismatch:.3e} pu)")


@dataclass(frozen=True)
class Bus:
    id: int
    type: str
    pd: float  # pu at k = 1
    qd: float
    vset: float
    base_kv: float = 345.0


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float
    tap: float = 1.0


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    pg: float  # pu scheduled output at k = 1
    h: float  # s
    d: float  # pu power per pu speed
    xdp: float  # pu


@dataclass(frozen=True)
class PowerSystem:
    """Immutable network description plus a loading factor.

    Loads and scheduled generator outputs are stored at base loading; the
    effective values are ``k`` times the base values.
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    k: float = 1.0
    base_mva: float = BASE_MVA
    freq: float = FREQ_HZ

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @cached_property
    def base_load(self) -> np.ndarray:
        """Complex base load per bus (pu), k = 1."""
        return np.array([complex(b.pd, b.qd) for b in self.buses])

    @property
    def load(self) -> np.ndarray:
        return self.k * self.base_load

    @cached_property
    def load_buses(self) -> list[int]:
        return [b.id for b in self.buses if b.pd != 0 or b.qd != 0]

    @cached_property
    def gen_bus_idx(self) -> np.ndarray:
        return np.array([self.bus_index[g.bus] for g in self.generators])

    @cached_property
    def h(self) -> np.ndarray:
        return np.array([g.h for g in self.generators])

    @cached_property
    def d(self) -> np.ndarray:
        return np.array([g.d for g in self.generators])

    @cached_property
    def xdp(self) -> np.ndarray:
        return np.array([g.xdp for g in self.generators])

    def line(self, line_id: int) -> Line:
        for ln in self.lines:
            if ln.id == line_id:
                return ln
        raise ValidationError(f"unknown line id {line_id}")


# --------------------------------------------------------------------------
# Loading

_BUS_COLS = ("bus_id", "type", "pd_mw", "qd_mvar", "vset_pu", "base_kv")
_LINE_COLS = ("line_id", "from_bus", "to_bus", "r_pu", "x_pu", "b_pu", "tap")
_GEN_COLS = ("gen_id", "bus_id", "pg_mw", "h_s", "d_pu", "xdp_pu")


def _read_table(path: Path, columns, converters):
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(path, 1, "-", "empty file") from None
        missing = [c for c in columns if c not in header]
        if missing:
            raise ParseError(path, 1, missing[0], "missing column")
        pos = {c: header.index(c) for c in columns}
        for lineno, raw in enumerate(reader, start=2):
            if not raw or all(not s.strip() for s in raw):
                continue
            row = {}
            for c in columns:
                if pos[c] >= len(raw):
                    raise ParseError(path, lineno, c, "missing value")
                text = raw[pos[c]].strip()
                try:
                    row[c] = converters[c](text)
                except ValueError:
                    raise ParseError(path, lineno, c, f"cannot parse {text!r}") from None
            rows.append((lineno, row))
    return rows


def _bus_type(text: str) -> str:
    for t in BUS_TYPES:
        if text.lower() == t.lower():
            return t
    raise ValueError(text)


def default_system_path() -> Path:
    return Path(str(resources.files("dscontrol") / "data" / "ieee39"))


def load_system(spec_path=None, *, expected_counts=(39, 46, 10)) -> PowerSystem:
    """Read ``buses.csv``, ``lines.csv`` and ``gens.csv`` from a directory.

    ``expected_counts`` is (buses, lines, generators); pass ``None`` to skip
    the size check for small test networks.
    """
    root = Path(spec_path) if spec_path is not None else default_system_path()
    if not root.is_dir():
        raise ValidationError(f"system data directory not found: {root}")
    f, i = float, int
    bus_rows = _read_table(root / "buses.csv", _BUS_COLS, dict(
        bus_id=i, type=_bus_type, pd_mw=f, qd_mvar=f, vset_pu=f, base_kv=f))
    line_rows = _read_table(root / "lines.csv", _LINE_COLS, dict(
        line_id=i, from_bus=i, to_bus=i, r_pu=f, x_pu=f, b_pu=f, tap=f))
    gen_rows = _read_table(root / "gens.csv", _GEN_COLS, dict(
        gen_id=i, bus_id=i, pg_mw=f, h_s=f, d_pu=f, xdp_pu=f))

    base = BASE_MVA
    seen = {}
    buses = []
    for lineno, r in bus_rows:
        if r["bus_id"] in seen:
            raise ParseError(root / "buses.csv", lineno, "bus_id",
                             f"duplicate bus id {r['bus_id']} (first on line {seen[r['bus_id']]})")
        seen[r["bus_id"]] = lineno
        buses.append(Bus(r["bus_id"], r["type"], r["pd_mw"] / base, r["qd_mvar"] / base,
                         r["vset_pu"], r["base_kv"]))
    lines = [Line(r["line_id"], r["from_bus"], r["to_bus"], r["r_pu"], r["x_pu"],
                  r["b_pu"], r["tap"]) for _, r in line_rows]
    gens = [Generator(r["gen_id"], r["bus_id"], r["pg_mw"] / base, r["h_s"], r["d_pu"],
                      r["xdp_pu"]) for _, r in gen_rows]
    sys = PowerSystem(tuple(buses), tuple(lines), tuple(gens))
    validate(sys, expected_counts)
    return sys


def validate(sys: PowerSystem, expected_counts=(39, 46, 10)) -> None:
    if expected_counts is not None:
        nb, nl, ng = expected_counts
        if len(sys.buses) != nb:
            raise ValidationError(f"expected {nb} buses, found {len(sys.buses)}")
        if len(sys.lines) != nl:
            raise ValidationError(f"expected {nl} lines, found {len(sys.lines)}")
        if len(sys.generators) != ng:
            raise ValidationError(f"expected {ng} generators, found {len(sys.generators)}")
    ids = [b.id for b in sys.buses]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate bus id")
    if sum(b.type == "slack" for b in sys.buses) != 1:
        raise ValidationError("expected exactly one slack bus")
    line_ids = [ln.id for ln in sys.lines]
    if len(set(line_ids)) != len(line_ids):
        raise ValidationError("duplicate line id")
    for ln in sys.lines:
        if ln.from_bus not in sys.bus_index or ln.to_bus not in sys.bus_index:
            raise ValidationError(f"line {ln.id} references an unknown bus")
        if abs(complex(ln.r, ln.x)) <= 0:
            raise ValidationError(f"line {ln.id} impedance must have positive magnitude")
        if ln.tap <= 0:
            raise ValidationError(f"line {ln.id} tap must be positive")
    gen_buses = set()
    for g in sys.generators:
        if g.bus not in sys.bus_index:
            raise ValidationError(f"generator {g.id} references an unknown bus")
        if g.bus in gen_buses:
            raise ValidationError(f"more than one generator at bus {g.bus}")
        gen_buses.add(g.bus)
        if g.h <= 0 or g.xdp <= 0 or g.d < 0:
            raise ValidationError(f"generator {g.id} needs H > 0, x'd > 0, D >= 0")
        if sys.buses[sys.bus_index[g.bus]].type == "PQ":
            raise ValidationError(f"generator {g.id} sits on PQ bus {g.bus}")
    for b in sys.buses:
        if b.type != "PQ" and b.id not in gen_buses:
            raise ValidationError(f"{b.type} bus {b.id} has no generator")
    if not sys.k > 0:
        raise ValidationError("loading factor must be positive")


def scale_loading(sys: PowerSystem, k: float) -> PowerSystem:
    """Return a copy with every load (and the generation schedule) scaled by k."""
    if not k > 0:
        raise ValidationError(f"loading factor must be positive, got {k}")
    return dataclasses.replace(sys, k=sys.k * k)


# --------------------------------------------------------------------------
# Admittance matrices


@dataclass(frozen=True)
class FaultTap:
    """Three-phase fault at ``location`` percent along a line, from its from-bus."""

    line: int
    location: float = 50.0
    r_fault_ohm: float = 0.001


@dataclass(frozen=True)
class Topology:
    """Per-line in-service flags plus an optional fault."""

    status: tuple[bool, ...] | None = None  # None means every line in service
    fault: FaultTap | None = None

    def in_service(self, sys: PowerSystem) -> np.ndarray:
        if self.status is None:
            return np.ones(len(sys.lines), dtype=bool)
        if len(self.status) != len(sys.lines):
            raise ValidationError("topology status length does not match line count")
        return np.asarray(self.status, dtype=bool)


def _stamp(Y, f, t, y_series, b_total, tap):
    ysh = 0.5j * b_total
    Y[f, f] += (y_series + ysh) / tap**2
    Y[t, t] += y_series + ysh
    Y[f, t] -= y_series / tap
    Y[t, f] -= y_series / tap


def build_ybus(sys: PowerSystem, topology: Topology | None = None):
    """Bus admittance matrix for the given topology.

    A fault adds one node (index ``n_bus``) splitting the faulted line, with a
    shunt conductance 1/R_fault to ground. Returns ``(Y, n_nodes)``.
    """
    topology = topology or Topology()
    on = topology.in_service(sys)
    fault = topology.fault
    n = sys.n_bus + (1 if fault is not None else 0)
    Y = np.zeros((n, n), dtype=complex)
    idx = sys.bus_index
    for ln, active in zip(sys.lines, on):
        f, t = idx[ln.from_bus], idx[ln.to_bus]
        z = complex(ln.r, ln.x)
        if fault is not None and fault.line == ln.id:
            # end-of-line faults sit a negligible distance inside the line
            frac = min(max(fault.location / 100.0, 1e-6), 1.0 - 1e-6)
            fn = sys.n_bus
            _stamp(Y, f, fn, 1 / (frac * z), frac * ln.b, ln.tap)
            _stamp(Y, fn, t, 1 / ((1 - frac) * z), (1 - frac) * ln.b, 1.0)
            continue
        if active:
            _stamp(Y, f, t, 1 / z, ln.b, ln.tap)
    if fault is not None:
        ln = sys.line(fault.line)
        if not fault.r_fault_ohm > 0:
            raise ValidationError("fault resistance must be positive")
        if not 0.0 <= fault.location <= 100.0:
            raise ValidationError("fault location must be within [0, 100] %")
        kv = sys.buses[idx[ln.from_bus]].base_kv
        z_base = kv**2 / sys.base_mva
        Y[sys.n_bus, sys.n_bus] += z_base / fault.r_fault_ohm
    return Y, n


def kron_reduce(Y: np.ndarray, keep, labels=None):
    """Eliminate every node not in ``keep``.

    Returns ``(Y_red, M)`` where ``M`` maps kept-node voltages to eliminated
    node voltages: ``V_elim = M @ V_keep`` (zero injections at eliminated nodes).
    """
    keep = np.asarray(keep)
    elim = np.setdiff1d(np.arange(Y.shape[0]), keep)
    Yaa = Y[np.ix_(keep, keep)]
    if elim.size == 0:
        return Yaa.copy(), np.zeros((0, keep.size), dtype=Y.dtype)
    Ybb = Y[np.ix_(elim, elim)]
    Yba = Y[np.ix_(elim, keep)]
    try:
        lu = np.linalg.solve(Ybb, Yba)
    except np.linalg.LinAlgError:
        bad = _first_singular_row(Ybb)
        node = elim[bad] if labels is None else labels[elim[bad]]
        raise SingularNetworkError(node) from None
    if not np.all(np.isfinite(lu)):
        raise SingularNetworkError(elim[0] if labels is None else labels[elim[0]])
    M = -lu
    Y_red = Yaa + Y[np.ix_(keep, elim)] @ M
    return Y_red, M


def _first_singular_row(A):
    # locate a row that leaves the matrix rank deficient
    n = A.shape[0]
    for i in range(n):
        if np.allclose(A[i], 0):
            return i
    _, _, vh = np.linalg.svd(A)
    return int(np.argmax(np.abs(vh[-1])))


def islands(sys: PowerSystem, topology: Topology | None = None) -> list[set[int]]:
    """Connected bus groups (bus ids) for the given line status."""
    topology = topology or Topology()
    on = topology.in_service(sys)
    parent = {b.id: b.id for b in sys.buses}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for ln, active in zip(sys.lines, on):
        faulted = topology.fault is not None and topology.fault.line == ln.id
        if active or faulted:
            parent[find(ln.from_bus)] = find(ln.to_bus)
    groups: dict[int, set[int]] = {}
    for b in sys.buses:
        groups.setdefault(find(b.id), set()).add(b.id)
    return sorted(groups.values(), key=min)


# --------------------------------------------------------------------------
# Power flow and equilibrium


@dataclass(frozen=True)
class OperatingPoint:
    v: np.ndarray  # complex bus voltages (pu)
    s_gen: np.ndarray  # complex generator output per generator (pu)
    delta0: np.ndarray  # rotor angles (rad)
    omega0: np.ndarray  # speeds (pu)
    e_mag: np.ndarray  # internal EMF magnitudes (pu)
    pe0: np.ndarray  # electrical power (pu)
    pm: np.ndarray  # mechanical power (pu)
    y_load: np.ndarray  # constant-impedance load admittance per bus (pu)
    iterations: int
    mismatch: float


def power_flow(sys: PowerSystem, tol: float = PF_TOL, max_iter: int = PF_MAX_ITER):
    """Newton-Raphson power flow in polar coordinates.

    Returns ``(V, iterations, mismatch)`` with complex bus voltages.
    """
    Y, _ = build_ybus(sys)
    n = sys.n_bus
    types = [b.type for b in sys.buses]
    slack = [i for i, t in enumerate(types) if t == "slack"]
    pv = [i for i, t in enumerate(types) if t == "PV"]
    pq = [i for i, t in enumerate(types) if t == "PQ"]
    pvpq = np.array(pv + pq, dtype=int)
    pq = np.array(pq, dtype=int)

    s_sched = -sys.load.copy()
    for g in sys.generators:
        i = sys.bus_index[g.bus]
        if types[i] != "slack":
            s_sched[i] += sys.k * g.pg

    vm = np.array([b.vset if b.type != "PQ" else 1.0 for b in sys.buses])
    va = np.zeros(n)

    def mismatch(vm, va):
        V = vm * np.exp(1j * va)
        s = V * np.conj(Y @ V)
        ds = s - s_sched
        return V, np.r_[ds.real[pvpq], ds.imag[pq]]

    V, f = mismatch(vm, va)
    err = np.max(np.abs(f))
    it = 0
    while err > tol:
        if it >= max_iter:
            raise ConvergenceError(it, err)
        # dS/dVa and dS/dVm (complex form)
        ibus = Y @ V
        diagV = np.diag(V)
        dS_dVa = 1j * diagV @ np.conj(np.diag(ibus) - Y @ diagV)
        dS_dVm = diagV @ np.conj(Y @ np.diag(V / np.abs(V))) + np.diag(np.conj(ibus) * V / np.abs(V))
        J = np.block([
            [dS_dVa.real[np.ix_(pvpq, pvpq)], dS_dVm.real[np.ix_(pvpq, pq)]],
            [dS_dVa.imag[np.ix_(pq, pvpq)], dS_dVm.imag[np.ix_(pq, pq)]],
        ])
        dx = np.linalg.solve(J, -f)
        va[pvpq] += dx[: pvpq.size]
        vm[pq] += dx[pvpq.size:]
        V, f = mismatch(vm, va)
        err = np.max(np.abs(f))
        it += 1
        if not np.isfinite(err):
            raise ConvergenceError(it, err)
    return V, it, float(err)


def initialize_equilibrium(sys: PowerSystem) -> OperatingPoint:
    """Solve the prefault power flow and place each machine at a fixed point."""
    V, it, err = power_flow(sys)
    Y, _ = build_ybus(sys)
    s_inj = V * np.conj(Y @ V)
    load = sys.load
    gi = sys.gen_bus_idx
    s_gen = s_inj[gi] + load[gi]
    vt = V[gi]
    i_gen = np.conj(s_gen / vt)
    e = vt + 1j * sys.xdp * i_gen
    pe = (e * np.conj(i_gen)).real
    y_load = np.conj(load) / np.abs(V) ** 2
    return OperatingPoint(
        v=V, s_gen=s_gen, delta0=np.angle(e), omega0=np.ones(sys.n_gen),
        e_mag=np.abs(e), pe0=pe, pm=pe.copy(), y_load=y_load,
        iterations=it, mismatch=err)


@dataclass(frozen=True)
class ReducedNetwork:
    """Admittance matrix seen from the generator internal nodes.

    ``recovery`` maps internal EMF phasors to every bus voltage of the
    original network: ``V_bus = recovery @ E``.
    """

    y: np.ndarray
    e_mag: np.ndarray
    recovery: np.ndarray
    gen_bus_idx: np.ndarray
    y_load: np.ndarray
    islanded: bool = False

    @cached_property
    def g(self) -> np.ndarray:
        return self.y.real

    @cached_property
    def b(self) -> np.ndarray:
        return self.y.imag


def build_reduced_network(sys: PowerSystem, topology: Topology | None = None, *,
                          op: OperatingPoint | None = None, strict: bool = True) -> ReducedNetwork:
    """Fold loads in as admittances, add internal nodes behind x'd and reduce.

    With ``strict`` a generator left on an island apart from the slack
    machine raises :class:`IslandingError`; otherwise the result is flagged.
    """
    topology = topology or Topology()
    if topology.fault is not None:
        sys.line(topology.fault.line)
    if op is None:
        op = initialize_equilibrium(sys)
    Yb, n = build_ybus(sys, topology)
    ng = sys.n_gen
    N = n + ng
    Y = np.zeros((N, N), dtype=complex)
    Y[:n, :n] = Yb
    Y[np.arange(sys.n_bus), np.arange(sys.n_bus)] += op.y_load
    gi = sys.gen_bus_idx
    yg = 1 / (1j * sys.xdp)
    internal = np.arange(n, N)
    Y[internal, internal] += yg
    Y[gi, gi] += yg
    Y[internal, gi] -= yg
    Y[gi, internal] -= yg

    groups = islands(sys, topology)
    gen_groups = {next(i for i, grp in enumerate(groups) if g.bus in grp) for g in sys.generators}
    islanded = len(gen_groups) > 1
    if islanded and strict:
        raise IslandingError(f"topology splits generators into {len(gen_groups)} islands")

    labels = [b.id for b in sys.buses] + (["fault"] if n > sys.n_bus else []) + \
        [f"internal:{g.id}" for g in sys.generators]
    Y_red, M = kron_reduce(Y, internal, labels=labels)
    return ReducedNetwork(y=Y_red, e_mag=op.e_mag.copy(), recovery=M[: sys.n_bus],
                          gen_bus_idx=gi, y_load=op.y_load, islanded=islanded)
