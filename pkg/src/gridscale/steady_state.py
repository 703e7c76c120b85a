"""Polar Newton-Raphson AC power flow."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid_model import NetworkCase


class PFStatus(str, Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"        # iteration budget exhausted
    DIVERGED = "diverged"        # mismatch blew up or went non-finite
    SINGULAR = "singular"        # Jacobian could not be factorized


class UnconvergedSolutionError(ValueError):
    pass


@dataclass(frozen=True)
class PowerFlowOptions:
    tolerance: float = 1e-8      # max abs mismatch, per unit
    max_iter: int = 10
    enforce_q_limits: bool = False
    divergence_threshold: float = 1e10


@dataclass(frozen=True)
class SteadyStateSolution:
    v_mag: np.ndarray            # pu, per bus
    v_ang: np.ndarray            # rad, per bus
    gen_p: np.ndarray            # MW, per generator (0 when off)
    gen_q: np.ndarray            # MVAr, per generator
    branch_flow_mva: np.ndarray  # max(|S_from|, |S_to|), 0 for out-of-service
    branch_loading: np.ndarray   # flow / rate_mva, 0 for out-of-service
    losses: float                # MW, series + shunt
    converged: bool
    iterations: int
    status: PFStatus = PFStatus.CONVERGED
    mismatch: float = 0.0
    p_inj: np.ndarray = field(default=None, repr=False)  # MW, per bus
    q_inj: np.ndarray = field(default=None, repr=False)  # MVAr, per bus

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


def make_ybus(case: NetworkCase, branch_status: np.ndarray | None = None):
    """Bus admittance matrix plus from/to branch admittance matrices (pu)."""
    n = case.n_bus
    idx = case.bus_index
    nl = case.n_branch
    status = np.array([br.status for br in case.branches], dtype=bool) if branch_status is None else branch_status
    f = np.array([idx[br.from_bus] for br in case.branches], dtype=int)
    t = np.array([idx[br.to_bus] for br in case.branches], dtype=int)
    r = np.array([br.r for br in case.branches])
    x = np.array([br.x for br in case.branches])
    b = np.array([br.b for br in case.branches])
    tap = np.array([br.tap for br in case.branches]) * np.exp(1j * np.deg2rad([br.shift for br in case.branches]))
    with np.errstate(divide="ignore", invalid="ignore"):
        ys = np.where(status, 1.0 / (r + 1j * x), 0.0)
    bc = np.where(status, b, 0.0)
    ytt = ys + 0.5j * bc
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap
    ysh = np.array([(bus.gs + 1j * bus.bs) for bus in case.buses]) / case.base_mva
    rows = np.arange(nl)
    cf = sp.csr_matrix((np.ones(nl), (rows, f)), shape=(nl, n))
    ct = sp.csr_matrix((np.ones(nl), (rows, t)), shape=(nl, n))
    yf = sp.csr_matrix((np.r_[yff, yft], (np.r_[rows, rows], np.r_[f, t])), shape=(nl, n))
    yt = sp.csr_matrix((np.r_[ytf, ytt], (np.r_[rows, rows], np.r_[f, t])), shape=(nl, n))
    ybus = (cf.T @ yf + ct.T @ yt + sp.diags(ysh)).tocsr()
    return ybus, yf, yt


class PowerFlowSolver:
    """Reusable solver for one case; caches the admittance matrices.

    One solve at a time per instance.
    """

    def __init__(self, case: NetworkCase, options: PowerFlowOptions | None = None):
        self.case = case
        self.options = options or PowerFlowOptions()
        self.ybus, self.yf, self.yt = make_ybus(case)
        n = case.n_bus
        coo = (self.ybus + sp.diags(np.full(n, 1e-300))).tocoo()  # keep every diagonal in the pattern
        self._yi, self._yj = coo.row.astype(int), coo.col.astype(int)
        self._yv = self.ybus[self._yi, self._yj].A1
        self._ydiag = np.flatnonzero(self._yi == self._yj)
        self._ydiag_bus = self._yi[self._ydiag]
        idx = case.bus_index
        self._gen_bus = np.array([idx[g.bus] for g in case.generators], dtype=int)
        self._from = np.array([idx[br.from_bus] for br in case.branches], dtype=int)
        self._to = np.array([idx[br.to_bus] for br in case.branches], dtype=int)
        self._branch_on = np.array([br.status for br in case.branches], dtype=bool)
        self._rate = np.array([br.rate_mva for br in case.branches])
        self._pd = np.array([b.load_p for b in case.buses])
        self._qd = np.array([b.load_q for b in case.buses])
        self._gs = np.array([b.gs for b in case.buses])
        self._plans: dict[bytes, tuple] = {}

    def _regulating(self, gen_on: np.ndarray) -> np.ndarray:
        """Mask of in-service generators that regulate voltage (non-renewable)."""
        return gen_on & np.array([not g.kind.renewable for g in self.case.generators])

    def solve(self, setpoints: Mapping[int, float] | None = None,
              voltages: Mapping[int, float] | None = None) -> SteadyStateSolution:
        """Solve with optional per-generator active-power (MW) and voltage (pu) overrides.

        Setpoints for the balancing generator are ignored; it absorbs the residual.
        """
        case, opt = self.case, self.options
        n_gen = len(case.generators)
        for k in list(setpoints or {}) + list(voltages or {}):
            if not 0 <= k < n_gen:
                raise IndexError(f"setpoint references unknown generator {k}")
        gen_on = np.array([g.status for g in case.generators], dtype=bool)
        pg = np.array([g.p_set for g in case.generators], dtype=float)
        vg = np.array([g.v_set for g in case.generators], dtype=float)
        for k, p in (setpoints or {}).items():
            pg[k] = float(p)
        for k, v in (voltages or {}).items():
            vg[k] = float(v)
        pg[~gen_on] = 0.0
        bal = case.balancing_gen
        pg[bal] = 0.0

        regulating = self._regulating(gen_on)
        fixed_q = np.zeros(n_gen)  # Q of gens forced to a limit (or non-regulating ones)
        q_clamped = np.zeros(n_gen, dtype=bool)

        total_iter = 0
        while True:
            sol = self._newton(pg, vg, gen_on, regulating & ~q_clamped, fixed_q, bal)
            total_iter += sol.iterations
            if not (sol.converged and opt.enforce_q_limits):
                break
            q = sol.gen_q
            lim_hi = regulating & ~q_clamped & (q > np.array([g.q_max for g in case.generators]) + 1e-9)
            lim_lo = regulating & ~q_clamped & (q < np.array([g.q_min for g in case.generators]) - 1e-9)
            lim_hi[bal] = lim_lo[bal] = False
            if not (lim_hi.any() or lim_lo.any()):
                break
            for k in np.flatnonzero(lim_hi):
                fixed_q[k] = case.generators[k].q_max
            for k in np.flatnonzero(lim_lo):
                fixed_q[k] = case.generators[k].q_min
            q_clamped |= lim_hi | lim_lo
        return _with_iterations(sol, total_iter)

    def _newton(self, pg, vg, gen_on, regulating, fixed_q, bal) -> SteadyStateSolution:
        case, opt = self.case, self.options
        n = case.n_bus
        ybus = self.ybus
        gbus = self._gen_bus
        ref = case.slack_bus

        pv_mask = np.zeros(n, dtype=bool)
        pv_mask[gbus[regulating]] = True
        pv_mask[ref] = False
        pv = np.flatnonzero(pv_mask)
        pq = np.flatnonzero(~pv_mask & (np.arange(n) != ref))
        pvpq = np.r_[pv, pq]

        # injections from gens not regulating voltage (renewables, Q-clamped units)
        free_q = np.where(regulating, 0.0, np.where(gen_on, fixed_q, 0.0))
        sg = np.zeros(n, dtype=complex)
        np.add.at(sg, gbus, pg + 1j * free_q)
        sbus = (sg - (self._pd + 1j * self._qd)) / case.base_mva

        vm = np.ones(n)
        # first regulating gen at each bus sets the voltage target
        for k in np.flatnonzero(regulating)[::-1]:
            vm[gbus[k]] = vg[k]
        va = np.zeros(n)
        V = vm * np.exp(1j * va)

        def mismatch(V):
            mis = V * np.conj(ybus @ V) - sbus
            return np.r_[mis[pvpq].real, mis[pq].imag]

        plan = self._plan(pv_mask, pvpq, pq)
        F = mismatch(V)
        norm = np.max(np.abs(F)) if F.size else 0.0
        it = 0
        status = PFStatus.CONVERGED if norm < opt.tolerance else PFStatus.MAX_ITER
        npvpq = len(pvpq)
        while status is PFStatus.MAX_ITER and it < opt.max_iter:
            it += 1
            J = self._jacobian(V, plan)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    dx = -splu(J).solve(F)
            except RuntimeError:
                status = PFStatus.SINGULAR
                break
            if not np.all(np.isfinite(dx)):
                status = PFStatus.SINGULAR
                break
            va[pvpq] += dx[:npvpq]
            vm[pq] += dx[npvpq:]
            V = vm * np.exp(1j * va)
            F = mismatch(V)
            norm = np.max(np.abs(F)) if F.size else 0.0
            if not np.isfinite(norm) or norm > opt.divergence_threshold:
                status = PFStatus.DIVERGED
                break
            if norm < opt.tolerance:
                status = PFStatus.CONVERGED
        # tiny negative magnitudes are possible on blown-up iterates; keep polar form consistent
        vm = np.abs(V)
        va = np.angle(V) if status is not PFStatus.CONVERGED else va
        return self._finish(V, vm, va, pg, gen_on, regulating, free_q, bal, status, it, norm)

    def _plan(self, pv_mask, pvpq, pq):
        """Sparsity layout of the Jacobian for one PV/PQ split, cached across solves."""
        key = pv_mask.tobytes()
        plan = self._plans.get(key)
        if plan is not None:
            return plan
        n = self.case.n_bus
        # position of each bus in the unknown vector (-1 when absent)
        pos_pvpq = np.full(n, -1)
        pos_pvpq[pvpq] = np.arange(len(pvpq))
        pos_pq = np.full(n, -1)
        pos_pq[pq] = len(pvpq) + np.arange(len(pq))
        rows, cols, keeps = [], [], []
        for rpos, cpos in ((pos_pvpq, pos_pvpq), (pos_pvpq, pos_pq), (pos_pq, pos_pvpq), (pos_pq, pos_pq)):
            rr, cc = rpos[self._yi], cpos[self._yj]
            keep = (rr >= 0) & (cc >= 0)
            rows.append(rr[keep]); cols.append(cc[keep]); keeps.append(keep)
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        dim = len(pvpq) + len(pq)
        order = np.lexsort((rows, cols))
        indptr = np.zeros(dim + 1, dtype=np.int32)
        np.cumsum(np.bincount(cols, minlength=dim), out=indptr[1:])
        plan = (keeps, order, rows[order].astype(np.int32), indptr, dim)
        self._plans[key] = plan
        return plan

    def _jacobian(self, V, plan):
        """Polar Jacobian assembled on the admittance sparsity pattern."""
        yi, yj, yv, d, db = self._yi, self._yj, self._yv, self._ydiag, self._ydiag_bus
        keeps, order, indices, indptr, dim = plan
        ibus = self.ybus @ V
        vn = V / np.abs(V)
        vi = V[yi]
        ds_dvm = vi * np.conj(yv * vn[yj])
        ds_dvm[d] += np.conj(ibus[db]) * vn[db]
        ds_dva = -1j * vi * np.conj(yv * V[yj])
        ds_dva[d] += 1j * V[db] * np.conj(ibus[db])
        vals = np.concatenate((ds_dva.real[keeps[0]], ds_dvm.real[keeps[1]],
                               ds_dva.imag[keeps[2]], ds_dvm.imag[keeps[3]]))
        return sp.csc_matrix((vals[order], indices, indptr), shape=(dim, dim))

    def _finish(self, V, vm, va, pg, gen_on, regulating, free_q, bal, status, it, norm):
        case = self.case
        base = case.base_mva
        gbus = self._gen_bus
        with np.errstate(all="ignore"):
            s_inj = V * np.conj(self.ybus @ V) * base
            p_inj, q_inj = s_inj.real, s_inj.imag

            gen_p = pg.copy()
            ref = case.slack_bus
            at_ref = [k for k in range(len(pg)) if gbus[k] == ref and gen_on[k] and k != bal]
            gen_p[bal] = p_inj[ref] + self._pd[ref] - pg[at_ref].sum()

            gen_q = np.where(gen_on, free_q, 0.0)
            reg_idx = np.flatnonzero(regulating)
            for bus in np.unique(gbus[reg_idx]):
                ks = [k for k in reg_idx if gbus[k] == bus]
                others = [k for k in range(len(pg)) if gbus[k] == bus and k not in ks and gen_on[k]]
                q_total = q_inj[bus] + self._qd[bus] - gen_q[others].sum()
                if len(ks) == 1:
                    gen_q[ks[0]] = q_total
                else:
                    qmin = np.array([case.generators[k].q_min for k in ks])
                    qmax = np.array([case.generators[k].q_max for k in ks])
                    span = qmax - qmin
                    gen_q[ks] = qmin + (q_total - qmin.sum()) * span / span.sum()

            sf = V[self._from] * np.conj(self.yf @ V) * base
            st = V[self._to] * np.conj(self.yt @ V) * base
            flow = np.where(self._branch_on, np.maximum(np.abs(sf), np.abs(st)), 0.0)
            loading = np.where(self._branch_on, flow / self._rate, 0.0)
            losses = float(np.sum((sf + st).real[self._branch_on]) + np.sum(self._gs * vm**2))
        return SteadyStateSolution(
            v_mag=vm, v_ang=va, gen_p=gen_p, gen_q=gen_q,
            branch_flow_mva=flow, branch_loading=loading, losses=losses,
            converged=status is PFStatus.CONVERGED, iterations=it, status=status,
            mismatch=float(norm), p_inj=p_inj, q_inj=q_inj,
        )


def _with_iterations(sol: SteadyStateSolution, iterations: int) -> SteadyStateSolution:
    from dataclasses import replace
    return replace(sol, iterations=iterations)


def solve_power_flow(case: NetworkCase, setpoints: Mapping[int, float] | None = None,
                     options: PowerFlowOptions | None = None,
                     voltages: Mapping[int, float] | None = None) -> SteadyStateSolution:
    return PowerFlowSolver(case, options).solve(setpoints, voltages)


def branch_loadings(solution: SteadyStateSolution, case: NetworkCase) -> np.ndarray:
    """Loading ratio (MVA flow / rating) of each in-service branch."""
    if not solution.converged:
        raise UnconvergedSolutionError("branch loadings need a converged solution")
    on = np.array([br.status for br in case.branches], dtype=bool)
    return solution.branch_loading[on]


def rating_from_flows(case: NetworkCase, solution: SteadyStateSolution,
                      factor: float = 1.5, floor_mva: float = 10.0) -> list[float]:
    """Branch ratings scaled from a base-case flow, rounded up to whole MVA."""
    if not solution.converged:
        raise UnconvergedSolutionError("ratings need a converged base case")
    return [float(max(floor_mva, np.ceil(factor * f))) for f in solution.branch_flow_mva]


def power_balance_residual(case: NetworkCase, solution: SteadyStateSolution) -> float:
    """Generation minus load minus losses, MW. Zero up to solver tolerance."""
    load = sum(b.load_p for b in case.buses)
    return float(solution.gen_p.sum() - load - solution.losses)
