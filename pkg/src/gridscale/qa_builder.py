"""Question-answer records built from simulation outputs.

Records keep text templates and float groups apart: ``question_text`` and
``answer_text`` hold ``{slot}`` placeholders, filled either by scalars (short
labels and counts) or by named float vectors. The flat prompt string is derived
on demand by ``render_text``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import re
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .grid_model import GenKind, NetworkCase
from .scenario_engine import FaultType, Scenario, Split

log = logging.getLogger(__name__)

QA_SCHEMA = "gridqa/1"


class Task(str, Enum):
    OPF = "opf"
    FAULT_DETECTION = "fault_detection"
    TRANSIENT_PREDICTION = "transient_prediction"
    RENEWABLE_PREDICTION = "renewable_prediction"
    STATE_ESTIMATION = "state_estimation"


class MissingArtifactError(KeyError):
    pass


TEMPLATES: dict[Task, tuple[str, str]] = {
    Task.OPF: (
        "We are solving an optimal power flow problem. The objective is to minimize the operational cost "
        "while meeting the power balancing and other constraints. I will provide you the input states of "
        "buses {bus_states}, states of generators {gen_states}. What are the best power setpoints?",
        "The best active power setpoints of generators are {gen_settings}",
    ),
    Task.FAULT_DETECTION: (
        "The power network has {n_bus} buses:{bus_info}. A fault of {fault_type} occurred at bus {bus_fault}. "
        "Given the time series of dynamic voltages across all buses: {input}, please tell me the fault type "
        "and location.",
        "The fault type is {fault_type}, occurred at bus {fault_bus} (between bus {fault_bus1} and {fault_bus2}).",
    ),
    Task.TRANSIENT_PREDICTION: (
        "The power network has {n_bus} buses:{bus_info}. A fault of {fault_type} occurred at bus {bus_fault}. "
        "Given the first {input_len} time steps of dynamic voltages across all buses: {input}, please predict "
        "the next {output_len} time steps.",
        "The next {output_len} time steps across {n_bus} buses are: {output}",
    ),
    Task.RENEWABLE_PREDICTION: (
        "The following is a renewable generation power prediction task. You need to predict future "
        "{future_hours} hours generation curve according to the weather prediction data. Solar Zenith Angle: "
        "{angle_data}, Wind Speed: {wind_data}, Relative Humidity:{humidity_data}, "
        "Temperature:{temperature_data}. Please predict the following {X} points wind power and solar power.",
        "The expected wind power is {wind_predictions}. The expected solar power is {solar_predictions}.",
    ),
    Task.STATE_ESTIMATION: (
        "We are solving a power system state estimation problem. The power network has {n_bus} buses and "
        "{n_branch} branches. We will provide you with the measurements of voltage magnitude, active power "
        "injections and reactive power injections at each bus. Measurements of voltage magnitude: "
        "{voltage_mea}. Measurements of active power injection: {active_mea}. Measurements of reactive power "
        "injection: {reactive_mea}. What are the best estimates for the voltage magnitude and voltage angle "
        "of each bus?",
        "Given above measurements, the best estimates for voltage magnitude are: {voltage_mag}. Best "
        "estimates for voltage angle are: {voltage_angle}.",
    ),
}

# The detection question would otherwise state the label it asks for.
_FAULT_LEAK = " A fault of {fault_type} occurred at bus {bus_fault}."
_BUS_FAULT_ANSWER = "The fault type is {fault_type}, occurred at bus {fault_bus}."

_SLOT = re.compile(r"\{(\w+)\}")


@dataclass(frozen=True)
class QAConfig:
    fault_input_len: int | None = None  # samples of the trace shown for detection; None = all
    input_len: int = 20                 # transient prediction, in sampled steps
    output_len: int = 20
    renewable_horizon_points: int = 60  # minutes
    answer_margin: float = 1.25         # answer scale = margin * largest related question value
    leak_fault_label: bool = False      # keep the fault sentence in the detection question
    test_records: int | None = None     # cap on test records per task

    def __post_init__(self):
        if self.input_len < 1 or self.output_len < 1:
            raise ValueError("prediction lengths must be positive")
        if self.renewable_horizon_points < 1:
            raise ValueError("renewable_horizon_points must be positive")
        if self.answer_margin < 1:
            raise ValueError("answer_margin must be at least 1")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> "QAConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown qa config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class QARecord:
    task: Task
    scenario_id: int
    split: Split
    question_text: str
    float_groups: dict[str, tuple[float, ...]]
    norm_constants: dict[str, float]
    answer_text: str
    answer_float_groups: dict[str, tuple[float, ...]]
    scalars: dict[str, str] = field(default_factory=dict)
    labels: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "split", Split(self.split))
        fg = {k: tuple(float(x) for x in v) for k, v in self.float_groups.items()}
        ag = {k: tuple(float(x) for x in v) for k, v in self.answer_float_groups.items()}
        object.__setattr__(self, "float_groups", fg)
        object.__setattr__(self, "answer_float_groups", ag)
        object.__setattr__(self, "scalars", {k: str(v) for k, v in self.scalars.items()})
        for text, groups, where in ((self.question_text, fg, "question"), (self.answer_text, ag, "answer")):
            for slot in _SLOT.findall(text):
                hits = (slot in groups) + (slot in self.scalars)
                if hits != 1:
                    raise ValueError(f"{where} slot {slot!r} resolves to {hits} values")
        missing = (set(fg) | set(ag)) - set(self.norm_constants)
        if missing:
            raise ValueError(f"no normalization constant for {sorted(missing)}")

    @property
    def record_id(self) -> str:
        return f"{self.task.value}/{self.scenario_id:08d}"

    def to_dict(self) -> dict:
        return {"schema": QA_SCHEMA, "task": self.task.value, "scenario_id": self.scenario_id,
                "split": self.split.value, "question_text": self.question_text,
                "float_groups": {k: list(v) for k, v in self.float_groups.items()},
                "norm_constants": dict(self.norm_constants), "answer_text": self.answer_text,
                "answer_float_groups": {k: list(v) for k, v in self.answer_float_groups.items()},
                "scalars": dict(self.scalars), "labels": _jsonable(self.labels)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "QARecord":
        if d.get("schema") != QA_SCHEMA:
            raise ValueError(f"unsupported record schema {d.get('schema')!r}")
        labels = dict(d.get("labels", {}))
        if labels.get("between") is not None:
            labels["between"] = tuple(labels["between"])
        return cls(Task(d["task"]), d["scenario_id"], Split(d["split"]), d["question_text"],
                   d["float_groups"], d["norm_constants"], d["answer_text"], d["answer_float_groups"],
                   d.get("scalars", {}), labels)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def template_segments(text: str, scalars: Mapping[str, str], groups: Mapping[str, Sequence[float]]):
    """Split a template into literal text (scalars filled in) and ``(name, values)`` float groups."""
    out: list = []
    buf = []
    pos = 0
    for m in _SLOT.finditer(text):
        buf.append(text[pos:m.start()])
        name = m.group(1)
        if name in scalars:
            buf.append(scalars[name])
        else:
            if buf:
                out.append("".join(buf))
                buf = []
            out.append((name, groups[name]))
        pos = m.end()
    buf.append(text[pos:])
    tail = "".join(buf)
    if tail:
        out.append(tail)
    return out


def format_floats(values: Sequence[float]) -> str:
    return "[" + ", ".join(repr(float(v)) for v in values) + "]"


def render_text(record: QARecord, part: str = "question") -> str:
    if part == "question":
        text, groups = record.question_text, record.float_groups
    elif part == "answer":
        text, groups = record.answer_text, record.answer_float_groups
    else:
        raise ValueError("part must be 'question' or 'answer'")
    return "".join(s if isinstance(s, str) else format_floats(s[1])
                   for s in template_segments(text, record.scalars, groups))


def parse_rendered(template: str, text: str, scalars: Mapping[str, str]) -> dict[str, tuple[float, ...]]:
    """Recover the float groups of a rendered template (exact, since floats are written with repr)."""
    pattern = []
    names = []
    pos = 0
    for m in _SLOT.finditer(template):
        pattern.append(re.escape(template[pos:m.start()]))
        name = m.group(1)
        if name in scalars:
            pattern.append(re.escape(scalars[name]))
        else:
            pattern.append(r"\[([^\]]*)\]")
            names.append(name)
        pos = m.end()
    pattern.append(re.escape(template[pos:]))
    m = re.fullmatch("".join(pattern), text, flags=re.S)
    if m is None:
        raise ValueError("text does not match the template")
    out = {}
    for name, body in zip(names, m.groups()):
        out[name] = tuple(float(x) for x in body.split(",")) if body.strip() else ()
    return out


# ---------------------------------------------------------------------------
# record construction
# ---------------------------------------------------------------------------


@dataclass
class ScenarioArtifacts:
    """Simulation outputs for one scenario; fields a task does not need may stay None."""

    scenario: Scenario
    case: NetworkCase | None = None          # case at the scenario's operating point
    solution: Any = None                     # SteadyStateSolution
    dispatch: Any = None                     # DispatchDecision
    trace: Any = None                        # TransientTrace, already at dataset sampling rate
    measurement: Any = None                  # Measurement
    weather: Any = None                      # WeatherSeries over the renewable horizon
    renewable_series: dict[str, np.ndarray] | None = None  # "wind"/"solar" available MW per minute
    error: str | None = None                 # set when the scenario could not be simulated
    task_errors: dict[str, str] = field(default_factory=dict)  # failures confined to one task


def _scale(values, margin: float = 1.0) -> float:
    v = np.asarray(values, dtype=float)
    return float(margin * np.max(np.abs(v))) if v.size else 0.0


def _fault_scalars(case: NetworkCase, fault) -> tuple[dict, dict]:
    if fault.element == "bus":
        bus = fault.location
        between = None
    else:
        br = case.branches[fault.location]
        bus, between = br.from_bus, (br.from_bus, br.to_bus)
    scalars = {"fault_type": fault.fault_type.value, "bus_fault": str(bus), "fault_bus": str(bus)}
    if between:
        scalars.update(fault_bus1=str(between[0]), fault_bus2=str(between[1]))
    labels = {"fault_type": fault.fault_type.value, "fault_bus": bus, "between": between,
              "element": fault.element, "location": fault.location}
    return scalars, labels


def _record_opf(art: ScenarioArtifacts, cfg: QAConfig) -> QARecord:
    from .eval_metrics import decision_bounds
    case = art.case
    d = art.dispatch
    if d is None:
        raise MissingArtifactError(f"scenario {art.scenario.scenario_id}: no OPF decision")
    lo, hi = decision_bounds(case)
    bus_states = np.ravel([[b.load_p, b.load_q] for b in case.buses])
    gen_states = np.ravel(np.column_stack([lo, hi])) if lo.size else np.zeros(0)
    q, a = TEMPLATES[Task.OPF]
    return QARecord(Task.OPF, art.scenario.scenario_id, art.scenario.split, q,
                    {"bus_states": bus_states, "gen_states": gen_states},
                    {"bus_states": _scale(bus_states), "gen_states": _scale(gen_states),
                     "gen_settings": _scale(hi)},
                    a, {"gen_settings": d.gen_p},
                    labels={"oracle_score": d.score, "feasible": d.feasible})


def _sampled_trace(art: ScenarioArtifacts, cfg: QAConfig):
    if art.trace is None:
        raise MissingArtifactError(f"scenario {art.scenario.scenario_id}: no transient trace")
    if art.scenario.fault is None:
        raise MissingArtifactError(f"scenario {art.scenario.scenario_id}: no fault assigned")
    return art.trace.v_mag


def _record_fault(art: ScenarioArtifacts, cfg: QAConfig) -> QARecord:
    case = art.case
    v = _sampled_trace(art, cfg)
    if cfg.fault_input_len is not None:
        v = v[: cfg.fault_input_len]
    scalars, labels = _fault_scalars(case, art.scenario.fault)
    scalars["n_bus"] = str(case.n_bus)
    q, a = TEMPLATES[Task.FAULT_DETECTION]
    if not cfg.leak_fault_label:
        q = q.replace(_FAULT_LEAK, "")
        for k in ("bus_fault",):
            scalars.pop(k)
    if labels["between"] is None:
        a = _BUS_FAULT_ANSWER
    bus_info = np.array([b.load_p for b in case.buses])
    flat = v.ravel()
    return QARecord(Task.FAULT_DETECTION, art.scenario.scenario_id, art.scenario.split, q,
                    {"bus_info": bus_info, "input": flat},
                    {"bus_info": _scale(bus_info), "input": _scale(flat)}, a, {}, scalars, labels)


def _record_transient(art: ScenarioArtifacts, cfg: QAConfig) -> QARecord:
    case = art.case
    v = _sampled_trace(art, cfg)
    need = cfg.input_len + cfg.output_len
    if v.shape[0] < need:
        raise ValueError(f"trace has {v.shape[0]} samples, need {need}")
    x = v[: cfg.input_len].ravel()
    y = v[cfg.input_len:need].ravel()
    scalars, labels = _fault_scalars(case, art.scenario.fault)
    for k in ("fault_bus", "fault_bus1", "fault_bus2"):
        scalars.pop(k, None)
    scalars.update(n_bus=str(case.n_bus), input_len=str(cfg.input_len), output_len=str(cfg.output_len))
    bus_info = np.array([b.load_p for b in case.buses])
    q, a = TEMPLATES[Task.TRANSIENT_PREDICTION]
    return QARecord(Task.TRANSIENT_PREDICTION, art.scenario.scenario_id, art.scenario.split, q,
                    {"bus_info": bus_info, "input": x},
                    {"bus_info": _scale(bus_info), "input": _scale(x), "output": _scale(x, cfg.answer_margin)},
                    a, {"output": y}, scalars, labels)


def _hours(points: int) -> str:
    h = points / 60
    return str(int(h)) if float(h).is_integer() else repr(h)


def _record_renewable(art: ScenarioArtifacts, cfg: QAConfig) -> QARecord:
    w, series = art.weather, art.renewable_series
    if w is None or series is None:
        raise MissingArtifactError(f"scenario {art.scenario.scenario_id}: no weather/renewable series")
    X = cfg.renewable_horizon_points
    if w.horizon < X:
        raise ValueError(f"weather horizon {w.horizon} shorter than {X} points")
    case = art.case
    cap = {kind: sum(g.p_max for g in case.generators if g.kind is kind) for kind in (GenKind.WIND, GenKind.SOLAR)}
    groups = {"angle_data": w.solar_zenith_angle[:X], "wind_data": w.wind_speed[:X],
              "humidity_data": w.humidity[:X], "temperature_data": w.temperature[:X]}
    norms = {k: _scale(v) for k, v in groups.items()}
    norms["wind_predictions"] = float(series["wind_capacity"]) if "wind_capacity" in series else cap[GenKind.WIND]
    norms["solar_predictions"] = float(series["solar_capacity"]) if "solar_capacity" in series else cap[GenKind.SOLAR]
    q, a = TEMPLATES[Task.RENEWABLE_PREDICTION]
    return QARecord(Task.RENEWABLE_PREDICTION, art.scenario.scenario_id, art.scenario.split, q, groups, norms,
                    a, {"wind_predictions": series["wind"][:X], "solar_predictions": series["solar"][:X]},
                    {"future_hours": _hours(X), "X": str(X)})


def _record_se(art: ScenarioArtifacts, cfg: QAConfig) -> QARecord:
    m, sol, case = art.measurement, art.solution, art.case
    if m is None or sol is None:
        raise MissingArtifactError(f"scenario {art.scenario.scenario_id}: no measurements")
    groups = {"voltage_mea": m.v_mag_meas, "active_mea": m.p_inj_meas, "reactive_mea": m.q_inj_meas}
    norms = {k: _scale(v) for k, v in groups.items()}
    norms["voltage_mag"] = _scale(m.v_mag_meas, cfg.answer_margin)
    norms["voltage_angle"] = math.pi
    q, a = TEMPLATES[Task.STATE_ESTIMATION]
    return QARecord(Task.STATE_ESTIMATION, art.scenario.scenario_id, art.scenario.split, q, groups, norms, a,
                    {"voltage_mag": sol.v_mag, "voltage_angle": sol.v_ang},
                    {"n_bus": str(case.n_bus), "n_branch": str(case.n_branch)})


_BUILDERS = {
    Task.OPF: _record_opf,
    Task.FAULT_DETECTION: _record_fault,
    Task.TRANSIENT_PREDICTION: _record_transient,
    Task.RENEWABLE_PREDICTION: _record_renewable,
    Task.STATE_ESTIMATION: _record_se,
}


@dataclass(frozen=True)
class DatasetManifest:
    task_counts: dict[str, int]
    split_counts: dict[str, int]
    config_hash: str
    schema: str = QA_SCHEMA
    skipped: dict[str, str] = field(default_factory=dict)   # record id -> reason

    @property
    def total(self) -> int:
        return sum(self.task_counts.values())

    def to_dict(self) -> dict:
        return {"schema": self.schema, "config_hash": self.config_hash, "task_counts": dict(self.task_counts),
                "split_counts": dict(self.split_counts), "total": self.total, "skipped": dict(self.skipped)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DatasetManifest":
        return cls(dict(d["task_counts"]), dict(d["split_counts"]), d["config_hash"], d.get("schema", QA_SCHEMA),
                   dict(d.get("skipped", {})))


def config_hash(config: Any) -> str:
    """sha256 over canonical JSON; identical configs give identical hashes."""
    blob = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def manifest_for(records: Sequence[QARecord], cfg_hash: str, skipped: Mapping[str, str] | None = None,
                 tasks: Iterable[str] = ()) -> DatasetManifest:
    tc = {t: 0 for t in tasks}
    sc = {s.value: 0 for s in Split}
    for r in records:
        tc[r.task.value] = tc.get(r.task.value, 0) + 1
        sc[r.split.value] += 1
    return DatasetManifest(dict(sorted(tc.items())), sc, cfg_hash, skipped=dict(skipped or {}))


def build_task_dataset(task: Task | str, scenarios: Iterable[Scenario], sims: Mapping[int, ScenarioArtifacts],
                       config: QAConfig | Mapping | None = None,
                       cfg_hash: str | None = None) -> tuple[list[QARecord], DatasetManifest]:
    """One record per scenario, ordered by scenario id.

    Scenarios whose simulation failed (``error`` set) are skipped with a logged
    reason. Missing artifacts raise ``MissingArtifactError`` naming the scenario.
    """
    task = Task(task)
    cfg = config if isinstance(config, QAConfig) else QAConfig.from_dict(config)
    h = cfg_hash or config_hash(dataclasses.asdict(cfg))
    build = _BUILDERS[task]
    records, skipped = [], {}
    for sc in sorted(scenarios, key=lambda s: s.scenario_id):
        art = sims.get(sc.scenario_id)
        if art is None:
            raise MissingArtifactError(f"scenario {sc.scenario_id}: no simulation output")
        reason = art.error or art.task_errors.get(task.value)
        if reason:
            skipped[f"{task.value}/{sc.scenario_id:08d}"] = reason
            log.info("skipping scenario %d for %s: %s", sc.scenario_id, task.value, reason)
            continue
        records.append(build(art, cfg))
    if cfg.test_records is not None:
        kept, n_test = [], 0
        for r in records:
            if r.split is Split.TEST:
                n_test += 1
                if n_test > cfg.test_records:
                    continue
            kept.append(r)
        records = kept
    return records, manifest_for(records, h, skipped, [task.value])


def build_hybrid_dataset(task_datasets: Sequence[Sequence[QARecord]], seed: int = 0,
                         cfg_hash: str = "") -> tuple[list[QARecord], DatasetManifest]:
    """Union of single-task datasets in a seeded random order."""
    pool: list[QARecord] = []
    seen = set()
    for ds in task_datasets:
        for r in ds:
            key = (r.task, r.scenario_id)
            if key in seen:
                raise ValueError(f"duplicate record {r.record_id}")
            seen.add(key)
            pool.append(r)
    pool.sort(key=lambda r: r.record_id)
    order = np.random.default_rng(seed).permutation(len(pool))
    mixed = [pool[i] for i in order]
    return mixed, manifest_for(mixed, cfg_hash, tasks=sorted({r.task.value for r in mixed}))


def subsample_fractions(records: Sequence[QARecord], fractions: Sequence[float],
                        seed: int = 0) -> dict[float, list[QARecord]]:
    """Nested training subsets, drawn from train-split records only.

    Each task's train records are put in one seeded order and every fraction
    takes a prefix of it, so smaller subsets are contained in larger ones and a
    task's subset is the same whether or not other tasks are mixed in.
    """
    fr = sorted(float(f) for f in fractions)
    if any(not 0 < f <= 1 for f in fr):
        raise ValueError("fractions must lie in (0, 1]")
    by_task: dict[str, list[QARecord]] = {}
    for r in records:
        if r.split is Split.TRAIN:
            by_task.setdefault(r.task.value, []).append(r)
    orders = {}
    for task, recs in by_task.items():
        recs.sort(key=lambda r: r.scenario_id)
        rng = np.random.default_rng([seed, zlib.crc32(task.encode())])
        orders[task] = [recs[i] for i in rng.permutation(len(recs))]
    out = {}
    for f in fr:
        subset = []
        for task in sorted(orders):
            take = int(math.floor(f * len(orders[task]) + 1e-9))
            subset.extend(orders[task][:take])
        if not subset:
            raise ValueError(f"fraction {f} selects no records")
        out[f] = sorted(subset, key=lambda r: r.record_id)
    return out


def audit_family(family: Mapping[float, Sequence[QARecord]], test_records: Sequence[QARecord]) -> dict:
    """Check split disjointness and nesting of a subsample family; returns findings."""
    test_ids = {r.scenario_id for r in test_records}
    keys = sorted(family)
    leaks = {f: sorted({r.scenario_id for r in family[f]} & test_ids) for f in keys}
    nested = all({r.record_id for r in family[a]} <= {r.record_id for r in family[b]}
                 for a, b in zip(keys, keys[1:]))
    ok = nested and not any(leaks.values()) and all(r.split is Split.TEST for r in test_records)
    return {"nested": nested, "leaks": {str(k): v for k, v in leaks.items() if v}, "ok": ok,
            "sizes": {str(k): len(family[k]) for k in keys}}


def write_records_jsonl(records: Iterable[QARecord], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), separators=(",", ":"), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_records_jsonl(path) -> list[QARecord]:
    with open(path, encoding="utf-8") as fh:
        return [QARecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def template_corpus() -> list[str]:
    """Every fixed text the builder can emit, for vocabulary frequency counts."""
    out = []
    for q, a in TEMPLATES.values():
        out += [q, a]
    out += [_BUS_FAULT_ANSWER] + [f.value for f in FaultType] + ["0123456789-., []"]
    return out
