"""Fixed-step RK4 time-domain simulation of the classical swing model.

Topology changes happen at fault inception, clearance and the first
reclosing shot; the integrator lands exactly on every event time and
restarts with the new reduced network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import (FaultTap, OperatingPoint, PowerSystem, ReducedNetwork, Topology,
                   build_reduced_network, initialize_equilibrium)

DIVERGENCE_DEG = 1e6
_EPS = 1e-9

FEATURES = ("i_d", "i_q", "v_d", "v_q", "delta", "omega", "t_e", "p_g", "q_g")


@dataclass(frozen=True)
class SimConfig:
    t_start: float = 2.0
    horizon: float = 7.0
    step: float = 1e-3
    sample_period: float = 2e-3
    reclose_delay: float = 0.02
    second_shot: float = 5.0  # recorded only
    r_fault_ohm: float = 0.001
    tau_max: float = 0.4

    def __post_init__(self):
        ratio = self.sample_period / self.step
        if not self.step > 0 or abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("sample period must be an integer multiple of the step")
        if not self.t_start + self.tau_max < self.horizon:
            raise ValueError("t_start + tau_max must fall inside the horizon")

    @property
    def n_samples(self) -> int:
        return int(round(self.horizon / self.sample_period)) + 1


@dataclass(frozen=True)
class Disturbance:
    """What the simulator needs to know about a fault scenario."""

    line: int | None
    location: float = 50.0
    duration: float = 0.0

    @property
    def is_fault(self) -> bool:
        return self.line is not None and self.duration > 0


def fault_window(cfg: SimConfig, dist: Disturbance):
    return cfg.t_start, cfg.t_start + dist.duration, cfg.t_start + dist.duration + cfg.reclose_delay


def phase_at(t, cfg: SimConfig, dist: Disturbance) -> str:
    """Network state in effect at time t: 'closed', 'faulted' or 'open'.

    Fault flags follow the inclusive window t_start <= t <= t_end.
    """
    if not dist.is_fault:
        return "closed"
    t0, t1, t2 = fault_window(cfg, dist)
    if t0 - _EPS <= t <= t1 + _EPS:
        return "faulted"
    if t1 < t < t2 - _EPS:
        return "open"
    return "closed"


def switching_flags(times, cfg: SimConfig, dist: Disturbance):
    """Per-sample (line status, fault status) exactly as the scenario loop sets them."""
    t0, t1, _ = fault_window(cfg, dist)
    times = np.asarray(times)
    if not dist.is_fault:
        return np.ones(times.size, dtype=np.int8), np.zeros(times.size, dtype=np.int8)
    on = (times >= t0 - _EPS) & (times <= t1 + _EPS)
    return (~on).astype(np.int8), on.astype(np.int8)


@dataclass
class SimTrace:
    """Sampled generator states (n_samples x n_gen) and total load power."""

    time: np.ndarray
    delta_deg: np.ndarray
    omega: np.ndarray
    i_d: np.ndarray
    i_q: np.ndarray
    v_d: np.ndarray
    v_q: np.ndarray
    t_e: np.ndarray
    p_g: np.ndarray
    q_g: np.ndarray
    s_load: np.ndarray
    line_status: np.ndarray
    fault_status: np.ndarray
    diverged: bool = False
    islanded: bool = False
    meta: dict = field(default_factory=dict)

    def feature(self, name: str) -> np.ndarray:
        return self.delta_deg if name == "delta" else getattr(self, "omega" if name == "omega" else name)

    def primary(self) -> np.ndarray:
        """Array (n_gen, 9, n_samples) of the nine measurements."""
        return np.stack([self.feature(f).T for f in FEATURES], axis=1)


class _Dynamics:
    def __init__(self, sys: PowerSystem, op: OperatingPoint):
        self.ws = 2 * math.pi * sys.freq
        self.m = 2 * sys.h
        self.d = sys.d
        self.pm = op.pm
        self.e = op.e_mag

    def bind(self, net: ReducedNetwork):
        ee = np.outer(self.e, self.e)
        self.cg = ee * net.g
        self.cb = ee * net.b

    def pe(self, delta):
        dd = delta[:, None] - delta[None, :]
        return (self.cg * np.cos(dd) + self.cb * np.sin(dd)).sum(axis=1)

    def rhs(self, x):
        n = x.size // 2
        delta, omega = x[:n], x[n:]
        dw = omega - 1.0
        return np.concatenate((self.ws * dw, (self.pm - self.pe(delta) - self.d * dw) / self.m))


def _rk4(f, x, h, nsteps):
    for _ in range(nsteps):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def networks_for(sys: PowerSystem, dist: Disturbance, cfg: SimConfig, op: OperatingPoint):
    nets = {"closed": build_reduced_network(sys, op=op)}
    if dist.is_fault:
        fault = FaultTap(dist.line, dist.location, cfg.r_fault_ohm)
        nets["faulted"] = build_reduced_network(sys, Topology(fault=fault), op=op, strict=False)
        status = tuple(ln.id != dist.line for ln in sys.lines)
        nets["open"] = build_reduced_network(sys, Topology(status=status), op=op, strict=False)
    return nets


def simulate(sys: PowerSystem, dist: Disturbance, cfg: SimConfig | None = None,
             op: OperatingPoint | None = None) -> SimTrace:
    """Integrate the swing equations over the horizon and sample every period."""
    cfg = cfg or SimConfig()
    if dist.is_fault and not 0 < dist.duration <= cfg.horizon - cfg.t_start:
        raise ValueError("fault duration outside the simulated horizon")
    op = op or initialize_equilibrium(sys)
    nets = networks_for(sys, dist, cfg, op)
    dyn = _Dynamics(sys, op)

    n = cfg.n_samples
    ts = cfg.sample_period
    times = np.arange(n) * ts
    # integration breakpoints: samples plus event instants
    events = list(fault_window(cfg, dist)) if dist.is_fault else []
    states = np.empty((n, 2 * sys.n_gen))
    x = np.concatenate((op.delta0, op.omega0))
    states[0] = x
    t = 0.0
    diverged = False
    last = 0
    bound = math.radians(DIVERGENCE_DEG)
    for i in range(1, n):
        t_next = times[i]
        stops = [e for e in events if t + _EPS < e < t_next - _EPS] + [t_next]
        for stop in stops:
            # the interval (t, stop) lies in a single network phase
            mid = 0.5 * (t + stop)
            dyn.bind(nets[_phase_open_interval(mid, cfg, dist)])
            span = stop - t
            steps = max(1, math.ceil(span / cfg.step - 1e-6))
            x = _rk4(dyn.rhs, x, span / steps, steps)
            t = stop
        t = t_next
        states[i] = x
        last = i
        if not np.all(np.isfinite(x)) or np.max(np.abs(x[: sys.n_gen])) > bound:
            diverged = True
            break
    states = states[: last + 1]
    times = times[: last + 1]
    tr = _measure_all(sys, nets, dyn, op, states, times, cfg, dist)
    tr.diverged = diverged
    tr.islanded = any(net.islanded for net in nets.values())
    return tr


def _phase_open_interval(t, cfg, dist):
    if not dist.is_fault:
        return "closed"
    t0, t1, t2 = fault_window(cfg, dist)
    if t0 < t < t1:
        return "faulted"
    if t1 < t < t2:
        return "open"
    return "closed"


@dataclass(frozen=True)
class Measurement:
    i_d: np.ndarray
    i_q: np.ndarray
    v_d: np.ndarray
    v_q: np.ndarray
    delta_deg: np.ndarray
    omega: np.ndarray
    t_e: np.ndarray
    p_g: np.ndarray
    q_g: np.ndarray


def measure(delta, omega, net: ReducedNetwork) -> Measurement:
    """Machine-frame currents/voltages and powers for states (..., n_gen)."""
    delta = np.asarray(delta, dtype=float)
    omega = np.asarray(omega, dtype=float)
    e = net.e_mag * np.exp(1j * delta)
    i = e @ net.y.T
    v_bus = e @ net.recovery.T
    vt = v_bus[..., net.gen_bus_idx]
    rot = np.exp(-1j * (delta - math.pi / 2))
    idq = i * rot
    vdq = vt * rot
    s = vt * np.conj(i)
    pe = (e * np.conj(i)).real
    return Measurement(i_d=idq.real, i_q=idq.imag, v_d=vdq.real, v_q=vdq.imag,
                       delta_deg=np.degrees(delta), omega=omega, t_e=pe / omega,
                       p_g=s.real, q_g=s.imag)


def load_rms(delta, net: ReducedNetwork, base_load: np.ndarray) -> np.ndarray:
    """Total constant-impedance load apparent power, normalized so the k = 1
    prefault value is 1 (hence k at loading k)."""
    e = net.e_mag * np.exp(1j * np.asarray(delta, dtype=float))
    v = e @ net.recovery.T
    s = (np.abs(v) ** 2 * np.abs(net.y_load)).sum(axis=-1)
    return s / np.abs(base_load).sum()


def _measure_all(sys, nets, dyn, op, states, times, cfg, dist) -> SimTrace:
    ng = sys.n_gen
    delta, omega = states[:, :ng], states[:, ng:]
    phases = np.array([phase_at(t, cfg, dist) for t in times])
    out = {f: np.empty_like(delta) for f in Measurement.__dataclass_fields__}
    s_load = np.empty(times.size)
    for name, net in nets.items():
        sel = phases == name
        if not sel.any():
            continue
        m = measure(delta[sel], omega[sel], net)
        for f in out:
            out[f][sel] = getattr(m, f)
        s_load[sel] = load_rms(delta[sel], net, sys.base_load)
    line_status, fault_status = switching_flags(times, cfg, dist)
    meta = dict(k=sys.k, line=dist.line, location=dist.location, duration=dist.duration,
                t_start=cfg.t_start, reclose_delay=cfg.reclose_delay,
                second_shot=cfg.second_shot)
    return SimTrace(time=times, s_load=s_load, line_status=line_status,
                    fault_status=fault_status, meta=meta, **out)
