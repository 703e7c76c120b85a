"""Score-maximizing dispatch search and a brute-force grid oracle.

The objective is the composite OPF score from ``eval_metrics``. It has kinks
(min/max terms, line-limit saturation), so the search is derivative-free:
lattice seeding, then a pattern search with step halving from the best seeds.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .eval_metrics import OpfScoreBreakdown, OpfScorer, decision_units
from .grid_model import NetworkCase

log = logging.getLogger(__name__)


class OpfError(RuntimeError):
    pass


class OpfDivergenceError(OpfError):
    """No candidate dispatch gave a converged power flow."""


class BruteForceGuardError(OpfError):
    pass


@dataclass(frozen=True)
class OpfOptions:
    weights: Mapping[str, float] | None = None
    floor: float = -1.0
    lattice_points: int = 5          # per free dimension, when the lattice is small enough
    max_lattice: int = 243
    random_seeds: int = 8            # extra seeds when the lattice is too large
    starts: int = 3                  # pattern searches launched from the best seeds
    initial_step: float = 0.25       # fraction of each unit's range
    min_step_mw: float = 1e-3
    max_evals: int = 4000
    full_poll_max_dim: int = 3       # poll all 3^d - 1 neighbours up to this dimension
    random_directions: int = 4       # extra poll directions in higher dimensions
    seed: int = 0


@dataclass(frozen=True)
class DispatchDecision:
    gen_p: tuple[float, ...]         # MW per decision unit (all generators except balancing)
    units: tuple[int, ...]           # generator indices matching gen_p
    feasible: bool
    score: float
    breakdown: OpfScoreBreakdown | None = None
    history: tuple[float, ...] = field(default=(), repr=False)  # best score after each iteration
    n_evals: int = 0
    violation: str | None = None

    def as_setpoints(self) -> dict[int, float]:
        return dict(zip(self.units, self.gen_p))


def _violation(b: OpfScoreBreakdown) -> str | None:
    if not b.converged:
        return "power flow diverged"
    if b.r_balance is not None and b.r_balance < 0:
        return f"balancing generator outside its limits (r_balance={b.r_balance:.4g})"
    return None


def _decision(scorer: OpfScorer, x: np.ndarray, b: OpfScoreBreakdown, history, n_evals) -> DispatchDecision:
    viol = _violation(b)
    return DispatchDecision(tuple(float(v) for v in x), scorer.units, viol is None, b.composite, b,
                            tuple(history), n_evals, viol)


def _scorer_for(case: NetworkCase, scenario, options: OpfOptions) -> OpfScorer:
    prev = None
    if scenario is not None:
        from .scenario_engine import apply_scenario
        case = apply_scenario(case, scenario)
        prev = scenario.prev_unit_status
    return OpfScorer(case, prev, options.weights, options.floor)


def _warm_start(scorer: OpfScorer) -> np.ndarray:
    gens = scorer.case.generators
    x = np.array([gens[k].p_set if gens[k].status else 0.0 for k in scorer.units], dtype=float)
    return np.clip(x, scorer.lower, scorer.upper)


class _Search:
    """Memoized scoring with a key on the rounded vector, so revisits are free."""

    def __init__(self, scorer: OpfScorer, max_evals: int):
        self.scorer = scorer
        self.cache: dict[tuple, OpfScoreBreakdown] = {}
        self.max_evals = max_evals

    def __call__(self, x: np.ndarray) -> OpfScoreBreakdown:
        key = tuple(np.round(x, 9).tolist())
        hit = self.cache.get(key)
        if hit is None:
            hit = self.cache[key] = self.scorer.score(x)
        return hit

    @property
    def exhausted(self) -> bool:
        return len(self.cache) >= self.max_evals


def _poll_directions(dim: int, options: OpfOptions, rng: np.random.Generator) -> np.ndarray:
    if dim <= options.full_poll_max_dim:
        dirs = [d for d in itertools.product((-1, 0, 1), repeat=dim) if any(d)]
        return np.array(dirs, dtype=float)
    eye = np.eye(dim)
    extra = rng.choice([-1.0, 1.0], size=(options.random_directions, dim))
    return np.vstack([eye, -eye, extra])


def solve_opf(case: NetworkCase, scenario=None, options: OpfOptions | None = None) -> DispatchDecision:
    """Best composite-score dispatch for the scenario's operating point.

    Unit statuses come from the scenario. The returned score history is the
    best-so-far after each search iteration and never decreases.
    """
    opt = options or OpfOptions()
    scorer = _scorer_for(case, scenario, opt)
    lo, hi = scorer.lower, scorer.upper
    free = np.flatnonzero(hi > lo)
    search = _Search(scorer, opt.max_evals)
    history: list[float] = []

    x0 = _warm_start(scorer)
    if free.size == 0:
        b = search(x0)
        if not b.converged:
            raise OpfDivergenceError("the only admissible dispatch diverges")
        return _decision(scorer, x0, b, [b.composite], len(search.cache))

    rng = np.random.default_rng(opt.seed)
    span = hi[free] - lo[free]
    seeds = [x0]
    n_lat = opt.lattice_points ** free.size
    if n_lat <= opt.max_lattice:
        axes = [np.linspace(lo[i], hi[i], opt.lattice_points) for i in free]
        for pt in itertools.product(*axes):
            x = x0.copy()
            x[free] = pt
            seeds.append(x)
    else:
        for _ in range(opt.random_seeds):
            x = x0.copy()
            x[free] = lo[free] + rng.random(free.size) * span
            seeds.append(x)
        for corner in (lo, hi):
            seeds.append(np.where(hi > lo, corner, x0))

    scored = [(search(x).composite, i, x) for i, x in enumerate(seeds)]
    scored.sort(key=lambda t: (-t[0], t[1]))
    best_x, best_b = scored[0][2], search(scored[0][2])
    history.append(best_b.composite)
    if not any(search(x).converged for _, _, x in scored):
        log.debug("all %d seeds diverged", len(seeds))

    dirs = _poll_directions(free.size, opt, rng)
    for _, _, start in scored[: opt.starts]:
        x = start.copy()
        fx = search(x).composite
        step = opt.initial_step * span
        while np.max(step) > opt.min_step_mw and not search.exhausted:
            cands = []
            for d in dirs:
                y = x.copy()
                y[free] = np.clip(x[free] + d * step, lo[free], hi[free])
                cands.append(y)
            vals = [search(y).composite for y in cands]
            j = int(np.argmax(vals))
            if vals[j] > fx:
                x, fx = cands[j], vals[j]
            else:
                step = step / 2.0
            if fx > best_b.composite:
                best_x, best_b = x, search(x)
            history.append(best_b.composite)

    if not best_b.converged:
        raise OpfDivergenceError(f"power flow diverged at all {len(search.cache)} candidate dispatches")
    log.debug("opf: %d evaluations, score %.6f", len(search.cache), best_b.composite)
    return _decision(scorer, best_x, best_b, history, len(search.cache))


def brute_force_opf(case: NetworkCase, scenario=None, resolution: float = 1.0,
                    options: OpfOptions | None = None, max_dispatchable: int = 3) -> DispatchDecision:
    """Score every grid point of the setpoint box and return the best one.

    Grid points per unit are ``p_min + j * resolution`` up to ``p_max``. Ties
    go to the first point in lexicographic order.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    opt = options or OpfOptions()
    scorer = _scorer_for(case, scenario, opt)
    lo, hi = scorer.lower, scorer.upper
    free = np.flatnonzero(hi > lo)
    if free.size > max_dispatchable:
        raise BruteForceGuardError(f"{free.size} dispatchable generators exceed the guard of {max_dispatchable}")
    axes = [lo[i] + resolution * np.arange(int(np.floor((hi[i] - lo[i]) / resolution + 1e-9)) + 1)
            for i in free]
    base = lo.copy()
    best_x, best_b = None, None
    n = 0
    for pt in itertools.product(*axes):
        x = base.copy()
        x[free] = pt
        b = scorer.score(x)
        n += 1
        if best_b is None or b.composite > best_b.composite:
            best_x, best_b = x, b
    if not best_b.converged:
        raise OpfDivergenceError("power flow diverged at every grid point")
    return _decision(scorer, best_x, best_b, [best_b.composite], n)


def proportional_dispatch(case: NetworkCase, scenario=None) -> np.ndarray:
    """Warm-start dispatch over ``decision_units``: scaled setpoints, renewables at availability."""
    if scenario is not None:
        from .scenario_engine import apply_scenario
        case = apply_scenario(case, scenario)
    gens = case.generators
    return np.array([gens[k].p_set if gens[k].status else 0.0 for k in decision_units(case)])
