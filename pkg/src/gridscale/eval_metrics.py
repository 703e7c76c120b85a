"""Answer scoring: the six-part OPF score, error rates and MSEs."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .grid_model import NetworkCase
from .steady_state import PowerFlowOptions, PowerFlowSolver

log = logging.getLogger(__name__)

Z_COST = 1e5
COMPONENTS = ("r_overflow", "r_renewable", "r_balance", "r_cost", "r_reactive", "r_voltage")
DEFAULT_WEIGHTS = {c: 1.0 for c in COMPONENTS}
DEFAULT_FLOOR = -1.0


# ---------------------------------------------------------------------------
# components
# ---------------------------------------------------------------------------


def r_overflow(rho) -> float:
    rho = np.asarray(rho, dtype=float)
    if rho.size == 0:
        raise ValueError("r_overflow needs at least one line")
    if np.any(rho < 0):
        raise ValueError("line loadings must be non-negative")
    return float(1.0 - np.minimum(rho, 1.0).sum() / rho.size)


def r_renewable(p, p_max) -> float | None:
    """Share of available renewable power used; None when nothing is available."""
    p = np.asarray(p, dtype=float)
    p_max = np.asarray(p_max, dtype=float)
    if p.shape != p_max.shape:
        raise ValueError("p and p_max differ in length")
    total = p_max.sum()
    if p.size == 0 or total <= 0:
        return None
    return float(np.clip(p.sum() / total, 0.0, 1.0))


def r_balance(p_bal: float, lower: float, upper: float) -> float:
    if not (np.isfinite(lower) and np.isfinite(upper)) or upper <= lower:
        raise ValueError("balancing bounds must be finite with upper > lower")
    span = upper - lower
    return -(max(p_bal - upper, 0.0) / span + max(lower - p_bal, 0.0) / span)


def r_cost(p, status, prev_status, curves, Z: float = Z_COST) -> float:
    """Negative normalized cost. Units that are off produce nothing and pay no fixed cost."""
    p = np.asarray(p, dtype=float)
    s = np.asarray(status, dtype=bool)
    s_prev = np.asarray(prev_status, dtype=bool)
    if not (len(p) == len(s) == len(s_prev) == len(curves)):
        raise ValueError("cost inputs differ in length")
    total = 0.0
    for pi, on, was_on, c in zip(p, s, s_prev, curves):
        if on:
            total += c.c2 * pi * pi + c.c1 * pi + c.c0
        if on != was_on:
            total += c.c_on_off
    return -total / Z


def _band_violation(x, lower, upper) -> float:
    x, lower, upper = (np.asarray(a, dtype=float) for a in (x, lower, upper))
    span = upper - lower
    if np.any(span <= 0):
        raise ValueError("bounds must satisfy upper > lower")
    return float(np.sum(np.maximum(x - upper, 0.0) / span + np.maximum(lower - x, 0.0) / span))


def r_reactive(q, q_min, q_max) -> float:
    return math.exp(-_band_violation(q, q_min, q_max)) - 1.0


def r_voltage(v, v_min, v_max) -> float:
    return math.exp(-_band_violation(v, v_min, v_max)) - 1.0


def composite(components: Mapping[str, float | None], weights: Mapping[str, float] | None = None) -> float:
    """Weighted mean over the components that are present (None means excluded)."""
    w = DEFAULT_WEIGHTS if weights is None else weights
    num = den = 0.0
    for name in COMPONENTS:
        val = components.get(name)
        wi = float(w.get(name, 0.0))
        if val is None or wi == 0.0:
            continue
        if wi < 0:
            raise ValueError(f"negative weight for {name}")
        num += wi * val
        den += wi
    if den == 0:
        raise ValueError("all score components have zero weight")
    return num / den


# ---------------------------------------------------------------------------
# OPF score
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OpfScoreBreakdown:
    r_overflow: float | None
    r_renewable: float | None
    r_balance: float | None
    r_cost: float | None
    r_reactive: float | None
    r_voltage: float | None
    weights: dict[str, float]
    composite: float
    converged: bool
    clipped: bool = False

    def components(self) -> dict[str, float | None]:
        return {c: getattr(self, c) for c in COMPONENTS}

    def to_dict(self) -> dict:
        return asdict(self)


def decision_units(case: NetworkCase) -> tuple[int, ...]:
    """Generators whose setpoint forms the OPF answer: all but the balancing unit."""
    bal = case.balancing_gen
    return tuple(k for k in range(len(case.generators)) if k != bal)


def decision_bounds(case: NetworkCase) -> tuple[np.ndarray, np.ndarray]:
    """Setpoint box per decision unit; units that are off are pinned at 0."""
    lo, hi = [], []
    for k in decision_units(case):
        g = case.generators[k]
        if g.status:
            lo.append(g.p_min)
            hi.append(g.p_max)
        else:
            lo.append(0.0)
            hi.append(0.0)
    return np.array(lo, dtype=float), np.array(hi, dtype=float)


class OpfScorer:
    """Scores dispatch vectors for one operating point, reusing one power-flow solver.

    ``case`` must already carry the scenario's loads, statuses and renewable
    availability (see ``scenario_engine.apply_scenario``).
    """

    def __init__(self, case: NetworkCase, prev_status: Sequence[bool] | None = None,
                 weights: Mapping[str, float] | None = None, floor: float = DEFAULT_FLOOR,
                 options: PowerFlowOptions | None = None):
        self.case = case
        self.units = decision_units(case)
        self.lower, self.upper = decision_bounds(case)
        self.weights = dict(DEFAULT_WEIGHTS if weights is None else weights)
        self.floor = float(floor)
        self.solver = PowerFlowSolver(case, options)
        self.status = np.array([g.status for g in case.generators], dtype=bool)
        self.prev_status = self.status.copy() if prev_status is None else np.asarray(prev_status, dtype=bool)
        self.renewable = np.array([g.kind.renewable and g.status for g in case.generators], dtype=bool)
        self.branch_on = np.array([br.status for br in case.branches], dtype=bool)
        self.n_evals = 0

    def clip(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float).ravel()
        if x.shape != self.lower.shape:
            raise ValueError(f"dispatch has {x.size} entries, expected {self.lower.size}")
        if not np.all(np.isfinite(x)):
            raise ValueError("dispatch contains non-finite values")
        y = np.clip(x, self.lower, self.upper)
        return y, bool(np.any(y != x))

    def score(self, x) -> OpfScoreBreakdown:
        self.n_evals += 1
        y, clipped = self.clip(x)
        sol = self.solver.solve(dict(zip(self.units, y.tolist())))
        if not sol.converged:
            return OpfScoreBreakdown(None, None, None, None, None, None, self.weights, self.floor,
                                     converged=False, clipped=clipped)
        case = self.case
        gens = case.generators
        bal = case.balancing_gen
        g_bal = gens[bal]
        on = self.status
        comps = {
            "r_overflow": r_overflow(sol.branch_loading[self.branch_on]),
            "r_renewable": r_renewable(sol.gen_p[self.renewable],
                                       np.array([g.p_max for g in gens])[self.renewable]),
            "r_balance": r_balance(float(sol.gen_p[bal]), g_bal.p_min, g_bal.p_max),
            "r_cost": r_cost(sol.gen_p, on, self.prev_status, [g.cost for g in gens]),
            "r_reactive": r_reactive(sol.gen_q[on], np.array([g.q_min for g in gens])[on],
                                     np.array([g.q_max for g in gens])[on]),
            "r_voltage": r_voltage(sol.v_mag, np.array([b.v_min for b in case.buses]),
                                   np.array([b.v_max for b in case.buses])),
        }
        return OpfScoreBreakdown(**comps, weights=self.weights, composite=composite(comps, self.weights),
                                 converged=True, clipped=clipped)


def opf_score(answer, case: NetworkCase, scenario=None, weights: Mapping[str, float] | None = None,
              floor: float = DEFAULT_FLOOR, options: PowerFlowOptions | None = None) -> OpfScoreBreakdown:
    """Score a dispatch answer (``DispatchDecision`` or plain vector over ``decision_units``).

    With a scenario, the case is first set to the scenario's operating point.
    """
    prev = None
    if scenario is not None:
        from .scenario_engine import apply_scenario
        case = apply_scenario(case, scenario)
        prev = scenario.prev_unit_status
    x = getattr(answer, "gen_p", answer)
    return OpfScorer(case, prev, weights, floor, options).score(x)


# ---------------------------------------------------------------------------
# dataset evaluation
# ---------------------------------------------------------------------------

MSE_GROUPS = {
    "transient_prediction": ("output",),
    "renewable_prediction": ("wind_predictions", "solar_predictions"),
    "state_estimation": ("voltage_mag", "voltage_angle"),
}

FAULT_ANSWER = re.compile(
    r"^The fault type is (?P<type>[a-z_]+), occurred at bus (?P<bus>\d+)"
    r"(?: \(between bus (?P<b1>\d+) and (?P<b2>\d+)\))?\.$"
)


@dataclass
class TaskReport:
    task: str
    n_evaluated: int
    parse_failures: int
    metrics: dict[str, float]
    direction: dict[str, str]
    diagnostics: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def parse_fault_answer(text: str) -> dict | None:
    m = FAULT_ANSWER.match(text.strip())
    if not m:
        return None
    out = {"fault_type": m["type"], "bus": int(m["bus"])}
    if m["b1"] is not None:
        out["between"] = (int(m["b1"]), int(m["b2"]))
    return out


def _answer_groups(answer) -> dict[str, np.ndarray] | None:
    if answer is None:
        return None
    groups = getattr(answer, "float_groups", None)
    if groups is None and isinstance(answer, Mapping):
        groups = answer.get("float_groups")
    return None if groups is None else {k: np.asarray(v, dtype=float) for k, v in groups.items()}


def _answer_text(answer) -> str | None:
    if answer is None:
        return None
    text = getattr(answer, "text", None)
    if text is None and isinstance(answer, Mapping):
        text = answer.get("text")
    return text


def evaluate_dataset(task: str, answers: Mapping[str, Any], ground_truth: Sequence, case: NetworkCase, *,
                     scenarios: Mapping[int, Any] | None = None, weights: Mapping[str, float] | None = None,
                     floor: float = DEFAULT_FLOOR, B: int = 1024) -> TaskReport:
    """Score decoded answers against their records.

    ``answers`` maps record id to a decoded answer (``float_groups`` + ``text``)
    or None for a parse failure or timeout. The id sets must agree exactly.
    Results do not depend on record order.
    """
    records = sorted((r for r in ground_truth if r.task == task), key=lambda r: r.record_id)
    ids = {r.record_id for r in records}
    if set(answers) != ids:
        missing = sorted(ids - set(answers))[:5]
        extra = sorted(set(answers) - ids)[:5]
        raise ValueError(f"answer ids do not match records (missing {missing}, unexpected {extra})")
    if task == "opf":
        return _evaluate_opf(records, answers, case, scenarios, weights, floor, B)
    if task == "fault_detection":
        return _evaluate_fault(records, answers, case)
    if task in MSE_GROUPS:
        return _evaluate_mse(task, records, answers, B)
    raise ValueError(f"unknown task {task!r}")


def _evaluate_opf(records, answers, case, scenarios, weights, floor, B) -> TaskReport:
    from .float_codec import quantize
    from .scenario_engine import apply_scenario

    if scenarios is None:
        raise ValueError("OPF evaluation needs the scenarios behind the records")
    diags, gaps, norm_gaps = [], [], []
    converged = failures = 0
    for rec in records:
        sc = scenarios[rec.scenario_id]
        scorer = OpfScorer(apply_scenario(case, sc), sc.prev_unit_status, weights, floor)
        gt = np.asarray(rec.answer_float_groups["gen_settings"], dtype=float)
        scale = rec.norm_constants["gen_settings"]
        ref = scorer.score(quantize(gt, B, scale) if gt.size else gt).composite
        groups = _answer_groups(answers[rec.record_id])
        ans = None if groups is None else groups.get("gen_settings")
        if ans is None or ans.shape != gt.shape:
            failures += 1
            got, ok = floor, False
        else:
            s = scorer.score(ans)
            got, ok = s.composite, s.converged
        converged += ok
        gap = ref - got
        gaps.append(gap)
        norm_gaps.append(abs(gap) / abs(ref) if ref != 0 else (0.0 if gap == 0 else math.inf))
        diags.append({"id": rec.record_id, "reference_score": ref, "score": got, "gap": gap,
                      "converged": bool(ok), "parsed": ans is not None and ans.shape == gt.shape})
    n = len(records)
    metrics = {
        "convergence_rate": converged / n if n else float("nan"),
        "optimality_gap": float(np.mean(gaps)) if n else float("nan"),
        "optimality_gap_normalized": float(np.mean(norm_gaps)) if n else float("nan"),
    }
    return TaskReport("opf", n, failures, metrics,
                      {"convergence_rate": "up", "optimality_gap": "down", "optimality_gap_normalized": "down"},
                      diags)


def _evaluate_fault(records, answers, case) -> TaskReport:
    diags = []
    wrong_type = wrong_loc = failures = 0
    for rec in records:
        parsed = parse_fault_answer(_answer_text(answers[rec.record_id]) or "")
        labels = rec.labels
        if parsed is None:
            failures += 1
            ok_type = ok_loc = False
        else:
            ok_type = parsed["fault_type"] == labels["fault_type"]
            want_between = tuple(labels["between"]) if labels.get("between") else None
            ok_loc = parsed["bus"] == labels["fault_bus"] and parsed.get("between") == want_between
        wrong_type += not ok_type
        wrong_loc += not ok_loc
        diags.append({"id": rec.record_id, "parsed": parsed is not None,
                      "type_correct": ok_type, "location_correct": ok_loc})
    n = len(records)
    metrics = {"classification_error_rate": wrong_type / n if n else float("nan"),
               "localization_error_rate": wrong_loc / n if n else float("nan")}
    return TaskReport("fault_detection", n, failures, metrics,
                      {"classification_error_rate": "down", "localization_error_rate": "down"}, diags)


def _evaluate_mse(task, records, answers, B) -> TaskReport:
    names = MSE_GROUPS[task]
    sq = {g: 0.0 for g in names}
    cnt = {g: 0 for g in names}
    ceiling = 0.0
    diags = []
    failures = 0
    for rec in records:
        groups = _answer_groups(answers[rec.record_id])
        ok = groups is not None and all(
            g in groups and groups[g].shape == np.shape(rec.answer_float_groups[g]) for g in names)
        failures += not ok
        rec_sq = 0.0
        rec_n = 0
        for g in names:
            truth = np.asarray(rec.answer_float_groups[g], dtype=float)
            scale = float(rec.norm_constants[g])
            if ok:
                err = np.sum((groups[g] - truth) ** 2)
            else:
                err = np.sum((np.abs(truth) + scale) ** 2)
            sq[g] += float(err)
            cnt[g] += truth.size
            rec_sq += float(err)
            rec_n += truth.size
            ceiling += truth.size * (2.0 * scale / B) ** 2
        diags.append({"id": rec.record_id, "parsed": ok, "mse": rec_sq / rec_n if rec_n else 0.0})
    n_el = sum(cnt.values())
    metrics = {"mse": sum(sq.values()) / n_el if n_el else float("nan"),
               "quantization_ceiling": ceiling / n_el if n_el else float("nan")}
    for g in names:
        metrics[f"mse_{g}"] = sq[g] / cnt[g] if cnt[g] else float("nan")
    direction = {k: "down" for k in metrics}
    return TaskReport(task, len(records), failures, metrics, direction, diags)
