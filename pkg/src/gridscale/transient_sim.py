"""Classical multi-machine transient simulation.

Machines are constant EMFs behind transient reactance, loads are constant
admittances fixed at the pre-fault operating point, and renewables enter as
negative loads. Each topology segment (pre-fault, fault-on, post-clearing) gets
its own network solve ``V = Z @ E``; rotor dynamics are integrated with the
trapezoidal rule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid_model import NetworkCase
from .scenario_engine import FaultDescriptor, FaultType
from .steady_state import SteadyStateSolution, UnconvergedSolutionError, make_ybus

log = logging.getLogger(__name__)

OMEGA_S = 2 * math.pi * 60.0

# fault shunt susceptance magnitudes, pu on system base
DEFAULT_FAULT_SHUNTS = {
    FaultType.THREE_PHASE_GROUND.value: 1e4,
    FaultType.DOUBLE_LINE_GROUND.value: 30.0,
    FaultType.LINE_TO_LINE.value: 10.0,
    FaultType.SINGLE_LINE_GROUND.value: 4.0,
}


class TransientSimError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class DynamicParams:
    """Machine constants are on each machine's own MVA base (its p_max, at least ``min_rating``)
    unless given per generator in ``overrides`` as ``{gen_index: {"H":..,"D":..,"xd":..}}``
    on the system base."""

    H: float = 5.0
    D: float = 2.0
    xd_prime: float = 0.3
    dt: float = 0.005
    T: float = 5.0
    min_rating: float = 50.0
    fault_shunts: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_FAULT_SHUNTS))
    overrides: Mapping[int, Mapping[str, float]] = field(default_factory=dict)
    instability_angle: float = math.pi
    fixed_point_tol: float = 1e-11
    fixed_point_max: int = 50

    def __post_init__(self):
        if not self.H > 0:
            raise ValueError("H must be positive")
        if not 0 < self.dt <= 0.01:
            raise ValueError("dt must lie in (0, 0.01] s")
        if self.D < 0 or not self.xd_prime > 0:
            raise ValueError("D must be non-negative and xd_prime positive")
        for k, o in self.overrides.items():
            if "H" in o and not o["H"] > 0:
                raise ValueError(f"override H for generator {k} must be positive")


@dataclass(frozen=True)
class TransientTrace:
    times: np.ndarray           # s
    v_mag: np.ndarray           # (n_t, n_bus) pu
    rotor_angles: np.ndarray    # (n_t, n_machine) rad
    rotor_speeds: np.ndarray    # (n_t, n_machine) pu deviation from synchronous
    stable: bool
    machines: tuple[int, ...]   # generator index of each machine column
    fault: FaultDescriptor | None = None
    islanded: bool = False

    def __post_init__(self):
        n = len(self.times)
        for name in ("v_mag", "rotor_angles", "rotor_speeds"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} is not aligned with times")

    def sampled(self, stride: int) -> "TransientTrace":
        s = slice(None, None, stride)
        return TransientTrace(self.times[s], self.v_mag[s], self.rotor_angles[s], self.rotor_speeds[s],
                              self.stable, self.machines, self.fault, self.islanded)


class _Network:
    """Augmented admittance matrix and the EMF-to-voltage map for one topology."""

    def __init__(self, y_aug: sp.csc_matrix, inj: sp.csc_matrix, step: int | None = None):
        try:
            lu = splu(y_aug.tocsc())
        except RuntimeError:
            raise TransientSimError("network admittance matrix is singular", step) from None
        self.Z = lu.solve(inj.toarray())
        if not np.all(np.isfinite(self.Z)):
            raise TransientSimError("network admittance matrix is singular", step)


def _count_islands(case: NetworkCase, on: np.ndarray) -> int:
    from scipy.sparse.csgraph import connected_components
    idx = case.bus_index
    f = [idx[br.from_bus] for br, s in zip(case.branches, on) if s]
    t = [idx[br.to_bus] for br, s in zip(case.branches, on) if s]
    g = sp.coo_matrix((np.ones(len(f)), (f, t)), shape=(case.n_bus, case.n_bus))
    return connected_components(g, directed=False)[0]


def _machine_constants(case: NetworkCase, machines: Sequence[int], params: DynamicParams):
    H, D, X = [], [], []
    for k in machines:
        g = case.generators[k]
        o = params.overrides.get(k, {})
        rating = max(g.p_max, params.min_rating)
        ratio = rating / case.base_mva
        H.append(o.get("H", params.H * ratio))
        D.append(o.get("D", params.D * ratio))
        X.append(o.get("xd", params.xd_prime / ratio))
    return np.array(H), np.array(D), np.array(X)


def simulate_fault(case: NetworkCase, initial: SteadyStateSolution, fault: FaultDescriptor | None,
                   params: DynamicParams | None = None) -> TransientTrace:
    """Integrate the swing equations through the fault and its clearing.

    Bus short circuits add a shunt at the bus during [t_fault, t_clear). Short
    circuits on a branch sit at its from-bus and are cleared by opening the
    branch. A branch trip opens the branch at t_fault for the rest of the run.
    """
    p = params or DynamicParams()
    if not initial.converged:
        raise UnconvergedSolutionError("transient runs need a converged initial state")
    if fault is not None:
        fault.check(case)
        if p.T < fault.t_clear:
            raise ValueError("horizon ends before the fault is cleared")
    n = case.n_bus
    base = case.base_mva
    idx = case.bus_index
    gens = case.generators

    machines = tuple(k for k, g in enumerate(gens) if g.status and not g.kind.renewable)
    if not machines:
        raise ValueError("no synchronous machines in service")
    renewables = [k for k, g in enumerate(gens) if g.status and g.kind.renewable]
    H, D, X = _machine_constants(case, machines, p)
    mbus = np.array([idx[gens[k].bus] for k in machines])

    V0 = initial.voltage
    vsq = np.abs(V0) ** 2
    s_load = np.array([complex(b.load_p, b.load_q) for b in case.buses]) / base
    for k in renewables:
        s_load[idx[gens[k].bus]] -= complex(initial.gen_p[k], initial.gen_q[k]) / base
    y_shunt = np.conj(s_load) / vsq   # constant-impedance equivalent

    s_gen = np.array([complex(initial.gen_p[k], initial.gen_q[k]) for k in machines]) / base
    I0 = np.conj(s_gen / V0[mbus])
    E0 = V0[mbus] + 1j * X * I0
    E_mag = np.abs(E0)
    delta0 = np.angle(E0)
    Pm = (E0 * np.conj(I0)).real

    y_mach = 1.0 / (1j * X)
    inj = sp.csc_matrix((y_mach, (mbus, np.arange(len(machines)))), shape=(n, len(machines)))
    y_fixed = sp.diags(y_shunt) + sp.csc_matrix((y_mach, (mbus, mbus)), shape=(n, n))

    br_on = np.array([br.status for br in case.branches], dtype=bool)

    def network(branch_on, shunt_bus=None, shunt=0.0, step=None):
        ybus = make_ybus(case, branch_on)[0]
        y = ybus + y_fixed
        if shunt_bus is not None:
            y = y + sp.csc_matrix(([shunt], ([shunt_bus], [shunt_bus])), shape=(n, n))
        return _Network(y.tocsc(), inj, step)

    # topology segments: (start time, network)
    segments = [(0.0, network(br_on))]
    islanded = False
    if fault is not None:
        k_f, k_c = fault.t_fault, fault.t_clear
        if fault.fault_type is FaultType.BRANCH_TRIP:
            post_on = br_on.copy()
            post_on[fault.location] = False
            islanded = _count_islands(case, post_on) > 1
            segments.append((k_f, network(post_on)))
        else:
            y_f = -1j * float(p.fault_shunts[fault.fault_type.value])
            if fault.element == "bus":
                fbus = idx[fault.location]
                post_on = br_on
            else:
                fbus = idx[case.branches[fault.location].from_bus]
                post_on = br_on.copy()
                post_on[fault.location] = False
                islanded = _count_islands(case, post_on) > 1
            segments.append((k_f, network(br_on, fbus, y_f)))
            segments.append((k_c, network(post_on)))

    # time grid with every switching instant on it
    n_steps = int(round(p.T / p.dt))
    times = np.arange(n_steps + 1) * p.dt
    switch = [t for t, _ in segments[1:]]
    times = np.unique(np.concatenate([times, [t for t in switch if t < p.T]]))
    seg_start = np.array([t for t, _ in segments])

    def seg_at(t):
        # segment active on the interval starting at t (switches take effect at their instant)
        return segments[int(np.searchsorted(seg_start, t + 1e-12, side="right") - 1)][1]

    def rhs(delta, omega, net):
        E = E_mag * np.exp(1j * delta)
        V = net.Z @ E
        I = (E - V[mbus]) * y_mach
        Pe = (E * np.conj(I)).real
        return OMEGA_S * omega, (Pm - Pe - D * omega) / (2 * H), V

    nt = len(times)
    nm = len(machines)
    ang = np.empty((nt, nm))
    spd = np.empty((nt, nm))
    vmag = np.empty((nt, n))
    delta = delta0.copy()
    omega = np.zeros(nm)
    for i in range(nt):
        net = seg_at(times[i])
        fd, fw, V = rhs(delta, omega, net)
        ang[i], spd[i], vmag[i] = delta, omega, np.abs(V)
        if i == nt - 1:
            break
        h = times[i + 1] - times[i]
        # trapezoidal step solved by fixed-point iteration
        d_new = delta + h * fd
        w_new = omega + h * fw
        for _ in range(p.fixed_point_max):
            gd, gw, _ = rhs(d_new, w_new, net)
            d_next = delta + 0.5 * h * (fd + gd)
            w_next = omega + 0.5 * h * (fw + gw)
            change = max(np.max(np.abs(d_next - d_new)), np.max(np.abs(w_next - w_new)))
            d_new, w_new = d_next, w_next
            if change < p.fixed_point_tol:
                break
        if not (np.all(np.isfinite(d_new)) and np.all(np.isfinite(w_new))):
            raise TransientSimError("non-finite machine state", i + 1)
        delta, omega = d_new, w_new

    M = 2 * H
    coi = (ang @ M) / M.sum()
    rel = ang - coi[:, None]
    stable = bool(np.max(np.ptp(rel, axis=1)) <= p.instability_angle) if nm > 1 else True
    return TransientTrace(times, vmag, ang, spd, stable, machines, fault, islanded)


# ---------------------------------------------------------------------------
# dataset audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeparabilityReport:
    accuracy: float
    chance: float
    n_traces: int
    n_labels: int
    flagged: bool   # accuracy not clearly above chance

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "chance": self.chance, "n_traces": self.n_traces,
                "n_labels": self.n_labels, "flagged": self.flagged}


def fault_signature_separability(traces: Sequence[TransientTrace], labels: Sequence | None = None,
                                 margin: float = 0.1) -> SeparabilityReport:
    """Leave-one-out 1-nearest-neighbour accuracy of voltage traces against their labels.

    Labels default to (fault type, element, location). Equidistant neighbours
    share the credit, so indistinguishable traces score at chance.
    """
    if len(traces) < 2:
        raise ValueError("separability needs at least two traces")
    if labels is None:
        labels = [(t.fault.fault_type.value, t.fault.element, t.fault.location) if t.fault else None
                  for t in traces]
    labels = list(labels)
    if len(labels) != len(traces):
        raise ValueError("one label per trace required")
    types = {lab[0] if isinstance(lab, tuple) else lab for lab in labels}
    if len(types) < 2:
        raise ValueError("separability needs at least two fault types")
    X = np.stack([t.v_mag.ravel() for t in traces])
    sq = np.sum(X * X, axis=1)
    dist = sq[:, None] + sq[None, :] - 2 * X @ X.T
    np.fill_diagonal(dist, np.inf)
    score = 0.0
    for i in range(len(traces)):
        row = dist[i]
        near = np.flatnonzero(row <= row.min() + 1e-12 * max(1.0, abs(row.min())))
        score += np.mean([labels[j] == labels[i] for j in near])
    acc = score / len(traces)
    counts = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    # chance for leave-one-out with a uniformly random neighbour
    n = len(labels)
    chance = sum(c * (c - 1) for c in counts.values()) / (n * (n - 1))
    return SeparabilityReport(float(acc), float(chance), n, len(counts), bool(acc <= chance + margin))
