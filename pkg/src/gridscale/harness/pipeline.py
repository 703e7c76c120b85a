"""End-to-end pipeline stages, each reading and writing artifacts under one directory.

Layout under ``out_dir``::

    manifest.json            config hash and per-stage status
    config.json              resolved configuration
    case.json                prepared network case
    scenarios.jsonl          operating scenarios
    simulations.jsonl        per-scenario simulation outputs
    datasets/                one JSONL per task, manifest.json, hybrid_order.json
    subsets/                 nested training subsets and the leakage audit
    encoded/                 remap.json, tokenized records, answer_key.jsonl
    responses/f<frac>/       raw responder output per task (multi/f<frac>/ for the mixed family)
    decoded/f<frac>/         decoded answers per task
    reports/f<frac>/         task reports (JSON, CSV) and per-record diagnostics
    fits/                    power-law fits per task metric
    report.json              summary

Every artifact is written as canonical JSON, so reruns with the same
configuration are byte-identical regardless of the worker count.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import shlex
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from types import SimpleNamespace
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from ..eval_metrics import evaluate_dataset
from ..float_codec import (ByteTokenizer, CodecError, TokenParseError, VocabularyRemap,
                           decode_answer, default_remap, encode_segments)
from ..grid_model import (BusKind, NetworkCase, case_from_dict, case_to_dict, load_case,
                          place_renewables, rerate_branches)
from ..opf_solver import OpfError, OpfOptions, solve_opf
from ..qa_builder import (QAConfig, QARecord, ScenarioArtifacts, audit_family, build_hybrid_dataset,
                          build_task_dataset, read_records_jsonl, subsample_fractions, template_corpus, template_segments,
                          write_records_jsonl)
from ..scaling_law import ScalingFitError, ScalingSeries, compare_single_vs_multi, fit_csv, fit_power_law
from ..scenario_engine import (Measurement, ScenarioConfig, Split, WeatherSeries, apply_scenario,
                               generate_scenarios, make_measurements, measurement_seed,
                               read_scenarios_jsonl, renewable_from_weather, synthesize_weather,
                               write_scenarios_jsonl)
from ..steady_state import PowerFlowOptions, rating_from_flows, solve_power_flow
from ..transient_sim import DynamicParams, TransientSimError, simulate_fault
from .config import dump_json, hash_config
from .protocol import Request, ResponderCrashError, query_responder
from .responder import FAMILY_ENV, TRAIN_SIZE_ENV, build_command

log = logging.getLogger(__name__)

STAGES = ("gen-scenarios", "simulate", "build-qa", "subsample", "encode", "respond", "decode", "evaluate",
          "fit-scaling", "report")

HEADLINE_METRICS = {
    "opf": ("optimality_gap", "convergence_rate"),
    "fault_detection": ("classification_error_rate", "localization_error_rate"),
    "transient_prediction": ("mse",),
    "renewable_prediction": ("mse",),
    "state_estimation": ("mse",),
}
FAULT_TASKS = ("fault_detection", "transient_prediction")


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, message: str, scenario_ids: Sequence[int] = ()):
        ids = f" (scenarios {list(scenario_ids)[:10]})" if scenario_ids else ""
        super().__init__(f"stage {stage} failed: {message}{ids}")
        self.stage = stage
        self.scenario_ids = list(scenario_ids)


def frac_dir(f: float) -> str:
    return "f" + format(f, ".6g")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _write_jsonl(path: Path, rows) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n")
            n += 1
    return n


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


class Pipeline:
    def __init__(self, cfg: Mapping[str, Any], out_dir: str | Path, jobs: int | None = None):
        self.cfg = dict(cfg)
        self.out = Path(out_dir)
        self.jobs = int(jobs if jobs is not None else cfg.get("jobs", 1))
        self.hash = hash_config(self.cfg)
        self.tasks = list(self.cfg["tasks"])
        self.qa_cfg = QAConfig.from_dict(self.cfg.get("qa"))

    # -- bookkeeping --------------------------------------------------------

    def _manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def _load_manifest(self) -> dict:
        p = self._manifest_path()
        if p.exists():
            m = json.loads(p.read_text(encoding="utf-8"))
            if m.get("config_hash") == self.hash:
                return m
        return {"config_hash": self.hash, "stages": {}}

    def _mark(self, stage: str, status: str, error: str | None = None) -> None:
        m = self._load_manifest()
        m["stages"][stage] = status if error is None else {"status": status, "error": error}
        _write(self._manifest_path(), dump_json(m))

    def run_stage(self, stage: str) -> None:
        fn: Callable[[], None] = getattr(self, "stage_" + stage.replace("-", "_"))
        self.out.mkdir(parents=True, exist_ok=True)
        i = STAGES.index(stage)
        if i > 0 and self._load_manifest()["stages"].get(STAGES[i - 1]) != "complete":
            raise PipelineStageError(stage, f"stage {STAGES[i - 1]} has not completed for this configuration "
                                            f"(config hash {self.hash[:12]})")
        self._mark(stage, "incomplete")
        try:
            fn()
        except PipelineStageError as exc:
            self._mark(stage, "incomplete", str(exc))
            raise
        except Exception as exc:
            self._mark(stage, "incomplete", f"{type(exc).__name__}: {exc}")
            raise PipelineStageError(stage, f"{type(exc).__name__}: {exc}") from exc
        self._mark(stage, "complete")
        log.info("stage %s complete", stage)

    def run(self) -> dict:
        for s in STAGES:
            self.run_stage(s)
        return json.loads((self.out / "report.json").read_text(encoding="utf-8"))

    # -- shared loaders -----------------------------------------------------

    def prepare_case(self) -> NetworkCase:
        case = load_case(self.cfg["case"])
        ren = self.cfg.get("renewables", "auto")
        if ren == "auto":
            ren = auto_renewables(case)
        if ren:
            case = place_renewables(case, ren)
        rating = self.cfg.get("line_rating")
        if rating:
            base = solve_power_flow(case)
            case = rerate_branches(case, rating_from_flows(case, base, rating.get("factor", 1.5),
                                                           rating.get("floor_mva", 10.0)))
        return case

    def scenario_config(self) -> ScenarioConfig:
        d = dict(self.cfg["scenarios"])
        d.pop("count", None)
        d.setdefault("master_seed", int(self.cfg["seed"]))
        d.setdefault("weather_horizon", self.qa_cfg.renewable_horizon_points)
        if any(t in self.tasks for t in FAULT_TASKS):
            d["assign_faults"] = True
        return ScenarioConfig.from_dict(d)

    def case(self) -> NetworkCase:
        return case_from_dict(json.loads((self.out / "case.json").read_text(encoding="utf-8")))

    def scenarios(self):
        return read_scenarios_jsonl(self.out / "scenarios.jsonl")

    def datasets(self) -> dict[str, list[QARecord]]:
        return {t: read_records_jsonl(self.out / "datasets" / f"{t}.jsonl") for t in self.tasks}

    # -- stages -------------------------------------------------------------

    def stage_gen_scenarios(self) -> None:
        case = self.prepare_case()
        _write(self.out / "config.json", dump_json({"config": {k: v for k, v in self.cfg.items() if k != "jobs"},
                                                            "config_hash": self.hash}))
        _write(self.out / "case.json", dump_json(case_to_dict(case)))
        scfg = self.scenario_config()
        write_scenarios_jsonl(generate_scenarios(case, scfg, int(self.cfg["scenarios"]["count"])),
                              self.out / "scenarios.jsonl")

    def stage_simulate(self) -> None:
        case = self.case()
        scen = self.scenarios()
        settings = {"tasks": self.tasks, "scenario_config": dataclasses.asdict(self.scenario_config()),
                    "simulation": self.cfg["simulation"]}
        payloads = [(case, [s.to_dict() for s in scen[i::self.jobs]], settings) for i in range(self.jobs)] \
            if self.jobs > 1 else [(case, [s.to_dict() for s in scen], settings)]
        if self.jobs > 1:
            with ProcessPoolExecutor(max_workers=self.jobs) as ex:
                parts = list(ex.map(_simulate_batch, payloads))
        else:
            parts = [_simulate_batch(p) for p in payloads]
        rows = sorted((r for part in parts for r in part), key=lambda r: r["scenario_id"])
        _write_jsonl(self.out / "simulations.jsonl", rows)

    def _artifacts(self, case: NetworkCase) -> tuple[list, dict[int, ScenarioArtifacts]]:
        scen = self.scenarios()
        sims = {r["scenario_id"]: r for r in _read_jsonl(self.out / "simulations.jsonl")}
        missing = [s.scenario_id for s in scen if s.scenario_id not in sims]
        if missing:
            raise PipelineStageError("build-qa", "simulation output missing", missing)
        arts = {s.scenario_id: artifacts_from_json(case, s, sims[s.scenario_id]) for s in scen}
        return scen, arts

    def stage_build_qa(self) -> None:
        case = self.case()
        scen, arts = self._artifacts(case)
        per_task = []
        manifests = {}
        (self.out / "datasets").mkdir(parents=True, exist_ok=True)
        for t in self.tasks:
            recs, man = build_task_dataset(t, scen, arts, self.qa_cfg, self.hash)
            write_records_jsonl(recs, self.out / "datasets" / f"{t}.jsonl")
            per_task.append(recs)
            manifests[t] = man.to_dict()
        hybrid, hman = build_hybrid_dataset(per_task, int(self.cfg["seed"]), self.hash)
        _write(self.out / "datasets" / "hybrid_order.json", dump_json([r.record_id for r in hybrid]))
        _write(self.out / "datasets" / "manifest.json",
               dump_json({"config_hash": self.hash, "tasks": manifests, "hybrid": hman.to_dict()}))

    def stage_subsample(self) -> None:
        ds = self.datasets()
        fr = self.cfg["fractions"]
        seed = int(self.cfg["seed"])
        family: dict[str, dict[str, list[str]]] = {}
        audits = {}
        for t, recs in ds.items():
            fam = subsample_fractions(recs, fr, seed) if any(r.split is Split.TRAIN for r in recs) else {}
            audits[t] = audit_family(fam, [r for r in recs if r.split is Split.TEST]) if fam else \
                {"ok": False, "reason": "no training records"}
            for f, subset in fam.items():
                family.setdefault(frac_dir(f), {})[t] = [r.record_id for r in subset]
        # hybrid family drawn from the interleaved dataset must match task by task
        order = json.loads((self.out / "datasets" / "hybrid_order.json").read_text(encoding="utf-8"))
        by_id = {r.record_id: r for recs in ds.values() for r in recs}
        hybrid = [by_id[i] for i in order]
        hfam = subsample_fractions(hybrid, fr, seed) if any(r.split is Split.TRAIN for r in hybrid) else {}
        hybrid_counts, equal = {}, True
        for f, subset in hfam.items():
            counts = {}
            for r in subset:
                counts[r.task.value] = counts.get(r.task.value, 0) + 1
            hybrid_counts[frac_dir(f)] = counts
            single = {t: len(v) for t, v in family.get(frac_dir(f), {}).items() if v}
            equal &= counts == single
        test_all = [r for recs in ds.values() for r in recs if r.split is Split.TEST]
        haudit = audit_family(hfam, test_all) if hfam else {"ok": False, "reason": "no training records"}
        _write(self.out / "subsets" / "family.json", dump_json({"config_hash": self.hash, "family": family,
                                                                "hybrid_counts": hybrid_counts}))
        _write(self.out / "subsets" / "audit.json",
               dump_json({"config_hash": self.hash, "tasks": audits, "hybrid": haudit,
                          "hybrid_counts_equal_single": equal,
                          "ok": equal and haudit.get("ok", False) and all(a.get("ok") for a in audits.values())}))

    def stage_encode(self) -> None:
        B = int(self.cfg["codec"]["B"])
        tok = ByteTokenizer(int(self.cfg["codec"]["vocab_size"]))
        remap = default_remap(tok, template_corpus(), B)
        _write(self.out / "encoded" / "remap.json", remap.to_json() + "\n")
        keys = []
        for t, recs in self.datasets().items():
            rows = []
            for r in recs:
                row = encode_record(r, remap, tok)
                rows.append(row)
                if r.split is Split.TEST:
                    keys.append({"id": r.record_id, "task": t, "answer_token_ids": row["answer_token_ids"],
                                 "slots": row["answer_slots"]})
            _write_jsonl(self.out / "encoded" / f"{t}.jsonl", rows)
        _write_jsonl(self.out / "encoded" / "answer_key.jsonl", keys)

    def _train_sizes(self, family: str = "single") -> dict[str, dict[str, int]]:
        fam = json.loads((self.out / "subsets" / "family.json").read_text(encoding="utf-8"))
        if family == "multi":
            return {f: dict(c) for f, c in fam["hybrid_counts"].items()}
        return {f: {t: len(ids) for t, ids in tasks.items()} for f, tasks in fam["family"].items()}

    def _runs(self) -> list[tuple[str, str, dict[str, int]]]:
        """(relative directory, fraction label, per-task training sizes) for every responder session.

        The single-task family is always queried. With ``scaling.compare_multi`` the hybrid family
        is queried as well, standing in for one model trained on the mixed dataset.
        """
        runs = [(f, f, sizes) for f, sizes in sorted(self._train_sizes().items())]
        if self.cfg.get("scaling", {}).get("compare_multi"):
            runs += [(f"multi/{f}", f, sizes) for f, sizes in sorted(self._train_sizes("multi").items())]
        return runs

    def _responder_cmd(self, family: str = "single") -> list[str]:
        rc = self.cfg["responder"]
        if rc.get("cmd"):
            return shlex.split(rc["cmd"]) if isinstance(rc["cmd"], str) else list(rc["cmd"])
        # the mixed-family stand-in draws independent noise from the same schedule
        seed = int(self.cfg["seed"]) + (1 if family == "multi" else 0)
        return build_command(self.out / "encoded" / "answer_key.jsonl", self.out / "encoded" / "remap.json",
                             rc["mode"], seed, rc["sigma"], rc["text_error_rate"], rc["alpha"],
                             rc["k"], rc["text_alpha"])

    def stage_respond(self) -> None:
        requests = []
        for t in self.tasks:
            for row in _read_jsonl(self.out / "encoded" / f"{t}.jsonl"):
                if row["split"] == Split.TEST.value:
                    requests.append(Request(row["id"], t, tuple(row["prompt_token_ids"]), row["norm_constants"]))
        timeout = float(self.cfg["responder"].get("timeout", 120.0))
        for rel, _, sizes in self._runs():
            family = "multi" if rel.startswith("multi/") else "single"
            env = {TRAIN_SIZE_ENV: json.dumps(sizes, sort_keys=True), FAMILY_ENV: family}
            try:
                res = query_responder(requests, self._responder_cmd(family), timeout, env)
            except ResponderCrashError as exc:
                raise PipelineStageError("respond", str(exc)) from exc
            for t in self.tasks:
                rows = [{"id": r.id, "answer_token_ids": None if res.answers[r.id] is None
                         else list(res.answers[r.id]), "timed_out": res.answers[r.id] is None}
                        for r in requests if r.task == t]
                _write_jsonl(self.out / "responses" / rel / f"{t}.jsonl", rows)

    def stage_decode(self) -> None:
        remap = VocabularyRemap.from_json((self.out / "encoded" / "remap.json").read_text(encoding="utf-8"))
        tok = ByteTokenizer(int(self.cfg["codec"]["vocab_size"]))
        enc = {t: {r["id"]: r for r in _read_jsonl(self.out / "encoded" / f"{t}.jsonl")} for t in self.tasks}
        for rel, _, _ in self._runs():
            for t in self.tasks:
                rows = [decode_response(resp, enc[t][resp["id"]], remap, tok)
                        for resp in _read_jsonl(self.out / "responses" / rel / f"{t}.jsonl")]
                _write_jsonl(self.out / "decoded" / rel / f"{t}.jsonl", rows)

    def stage_evaluate(self) -> None:
        case = self.case()
        scen = {s.scenario_id: s for s in self.scenarios()}
        ds = self.datasets()
        ev = self.cfg.get("evaluation", {})
        B = int(self.cfg["codec"]["B"])
        for rel, _, _ in self._runs():
            for t in self.tasks:
                test = [r for r in ds[t] if r.split is Split.TEST]
                answers = {row["id"]: row["answer"] for row in _read_jsonl(self.out / "decoded" / rel / f"{t}.jsonl")}
                rep = evaluate_dataset(t, answers, test, case, scenarios=scen, weights=ev.get("weights"),
                                       floor=float(ev.get("floor", -1.0)), B=B)
                d = rep.to_dict()
                diags = d.pop("diagnostics")
                d["config_hash"] = self.hash
                base = self.out / "reports" / rel
                _write(base / f"{t}.json", dump_json(d))
                _write(base / f"{t}.csv", _metrics_csv(rep.metrics, rep.direction))
                _write_jsonl(base / f"{t}.diagnostics.jsonl", diags)

    def _series(self, rel_prefix: str, family: str, task: str, metric: str):
        sizes = self._train_sizes(family)
        xs, ys = [], []
        for f in sorted(sizes, key=lambda f: float(f[1:])):
            rep = json.loads((self.out / "reports" / (rel_prefix + f) / f"{task}.json").read_text(encoding="utf-8"))
            xs.append(sizes[f].get(task, 0))
            ys.append(rep["metrics"][metric])
        return xs, ys

    def stage_fit_scaling(self) -> None:
        thr = float(self.cfg.get("scaling", {}).get("divergence_threshold", 0.1))
        multi = bool(self.cfg.get("scaling", {}).get("compare_multi"))
        out = {}
        for t in self.tasks:
            for metric in HEADLINE_METRICS[t]:
                xs, ys = self._series("", "single", t, metric)
                key = f"{t}.{metric}"
                entry: dict[str, Any] = {"x": xs, "y": ys}
                try:
                    series = ScalingSeries.from_arrays(xs, ys, metric=key)
                    fit = fit_power_law(series)
                    entry["fit"] = fit.to_dict()
                    _write(self.out / "fits" / f"{key}.csv", fit_csv(series, fit))
                    if multi:
                        mx, my = self._series("multi/", "multi", t, metric)
                        entry["multi_y"] = my
                        entry["single_vs_multi"] = compare_single_vs_multi(
                            series, ScalingSeries.from_arrays(mx, my, metric=key), thr).to_dict()
                except ScalingFitError as exc:
                    entry["skipped"] = str(exc)
                out[key] = entry
        _write(self.out / "fits" / "fits.json", dump_json({"config_hash": self.hash, "fits": out}))

    def stage_report(self) -> None:
        sizes = self._train_sizes()
        metrics = {}
        for f in sorted(sizes):
            metrics[f] = {}
            for t in self.tasks:
                rep = json.loads((self.out / "reports" / f / f"{t}.json").read_text(encoding="utf-8"))
                metrics[f][t] = {"metrics": rep["metrics"], "n_evaluated": rep["n_evaluated"],
                                 "parse_failures": rep["parse_failures"]}
        fits = json.loads((self.out / "fits" / "fits.json").read_text(encoding="utf-8"))["fits"]
        audit = json.loads((self.out / "subsets" / "audit.json").read_text(encoding="utf-8"))
        dman = json.loads((self.out / "datasets" / "manifest.json").read_text(encoding="utf-8"))
        report = {"config_hash": self.hash, "train_sizes": sizes, "metrics": metrics,
                  "fits": {k: v.get("fit") for k, v in fits.items()}, "audit_ok": audit["ok"],
                  "single_vs_multi": {k: v["single_vs_multi"] for k, v in fits.items() if "single_vs_multi" in v},
                  "datasets": {t: m["task_counts"] | {"split": m["split_counts"]} for t, m in dman["tasks"].items()}}
        _write(self.out / "report.json", dump_json(report))


# ---------------------------------------------------------------------------
# helpers used across stages (module level so worker processes can import them)
# ---------------------------------------------------------------------------


def auto_renewables(case: NetworkCase) -> list[dict]:
    """Wind at the most loaded PQ bus and solar at the next, sized from total load."""
    pq = sorted((b for b in case.buses if b.kind is BusKind.PQ), key=lambda b: (-b.load_p, b.id))
    if len(pq) < 2:
        return []
    total = sum(b.load_p for b in case.buses)
    return [{"bus": pq[0].id, "kind": "wind", "p_max": round(0.10 * total, 1)},
            {"bus": pq[1].id, "kind": "solar", "p_max": round(0.07 * total, 1)}]


def _simulate_batch(payload) -> list[dict]:
    case, scen_dicts, settings = payload
    from ..scenario_engine import Scenario
    scfg = ScenarioConfig.from_dict(settings["scenario_config"])
    return [simulate_scenario(case, Scenario.from_dict(d), settings["tasks"], scfg, settings["simulation"])
            for d in scen_dicts]


def simulate_scenario(case: NetworkCase, scenario, tasks: Sequence[str], scfg: ScenarioConfig,
                      sim: Mapping[str, Any]) -> dict:
    """Everything the requested tasks need for one scenario, as plain JSON data."""
    row: dict[str, Any] = {"scenario_id": scenario.scenario_id, "error": None, "task_errors": {}}
    applied = apply_scenario(case, scenario)
    pf_opts = PowerFlowOptions(**sim.get("power_flow", {}))
    sol = solve_power_flow(applied, options=pf_opts)
    if not sol.converged:
        row["error"] = f"base power flow {sol.status.value} after {sol.iterations} iterations"
        return row
    row["solution"] = {"v_mag": sol.v_mag.tolist(), "v_ang": sol.v_ang.tolist()}
    if "opf" in tasks:
        try:
            d = solve_opf(case, scenario, OpfOptions(**sim.get("opf", {})))
            row["dispatch"] = {"gen_p": list(d.gen_p), "units": list(d.units), "score": d.score,
                               "feasible": d.feasible}
        except OpfError as exc:
            row["task_errors"]["opf"] = str(exc)
    if "state_estimation" in tasks:
        m = make_measurements(sol, scfg.measurement_sigma, measurement_seed(scfg, scenario.scenario_id))
        row["measurement"] = {"v_mag_meas": m.v_mag_meas.tolist(), "p_inj_meas": m.p_inj_meas.tolist(),
                              "q_inj_meas": m.q_inj_meas.tolist(), "noise_sigma": m.noise_sigma}
    if "renewable_prediction" in tasks:
        w = scenario.weather or synthesize_weather(scenario.scenario_id, scfg.weather_horizon, scfg,
                                                   timestamp=scenario.timestamp)
        series = {"wind": np.zeros(w.horizon), "solar": np.zeros(w.horizon)}
        cap = {"wind": 0.0, "solar": 0.0}
        for k in case.renewable_gens:
            g = case.generators[k]
            series[g.kind.value] = series[g.kind.value] + renewable_from_weather(w, g, scfg)
            cap[g.kind.value] += g.p_max
        row["weather"] = w.to_dict()
        row["renewable"] = {"wind": series["wind"].tolist(), "solar": series["solar"].tolist(),
                            "wind_capacity": cap["wind"], "solar_capacity": cap["solar"]}
    if any(t in tasks for t in FAULT_TASKS):
        if scenario.fault is None:
            for t in FAULT_TASKS:
                row["task_errors"][t] = "no fault assigned"
        else:
            dyn = dict(sim.get("dynamics", {}))
            try:
                tr = simulate_fault(applied, sol, scenario.fault, DynamicParams(**dyn))
                tr = tr.sampled(int(sim.get("trace_stride", 10)))
                row["trace"] = {"times": tr.times.tolist(), "v_mag": tr.v_mag.tolist(), "stable": tr.stable}
            except TransientSimError as exc:
                for t in FAULT_TASKS:
                    row["task_errors"][t] = str(exc)
    return row


def artifacts_from_json(case: NetworkCase, scenario, row: Mapping[str, Any]) -> ScenarioArtifacts:
    art = ScenarioArtifacts(scenario=scenario, case=apply_scenario(case, scenario), error=row.get("error"),
                            task_errors=dict(row.get("task_errors", {})))
    if art.error:
        return art
    s = row["solution"]
    art.solution = SimpleNamespace(v_mag=np.array(s["v_mag"]), v_ang=np.array(s["v_ang"]))
    if "dispatch" in row:
        d = row["dispatch"]
        art.dispatch = SimpleNamespace(gen_p=tuple(d["gen_p"]), units=tuple(d["units"]), score=d["score"],
                                       feasible=d["feasible"])
    if "measurement" in row:
        m = row["measurement"]
        art.measurement = Measurement(np.array(m["v_mag_meas"]), np.array(m["p_inj_meas"]),
                                      np.array(m["q_inj_meas"]), m["noise_sigma"])
    if "weather" in row:
        art.weather = WeatherSeries.from_dict(row["weather"])
        r = row["renewable"]
        art.renewable_series = {"wind": np.array(r["wind"]), "solar": np.array(r["solar"]),
                                "wind_capacity": r["wind_capacity"], "solar_capacity": r["solar_capacity"]}
    if "trace" in row:
        t = row["trace"]
        art.trace = SimpleNamespace(times=np.array(t["times"]), v_mag=np.array(t["v_mag"]), stable=t["stable"])
    return art


def encode_record(r: QARecord, remap: VocabularyRemap, tok: ByteTokenizer) -> dict:
    q = encode_segments(template_segments(r.question_text, r.scalars, r.float_groups), remap, tok,
                        r.norm_constants)
    a_segments = template_segments(r.answer_text, r.scalars, r.answer_float_groups)
    a = encode_segments(a_segments, remap, tok, r.norm_constants)
    slots = [[s[0], len(s[1])] for s in a_segments if not isinstance(s, str)]
    norms = dict(q.norm_constants)
    norms.update(a.norm_constants)
    return {"id": r.record_id, "task": r.task.value, "split": r.split.value,
            "prompt_token_ids": list(q.token_ids), "answer_token_ids": list(a.token_ids),
            "norm_constants": norms, "answer_slots": slots,
            "n_float_tokens": q.n_float_tokens + a.n_float_tokens}


def decode_response(resp: Mapping[str, Any], enc: Mapping[str, Any], remap: VocabularyRemap,
                    tok: ByteTokenizer) -> dict:
    if resp.get("answer_token_ids") is None:
        return {"id": resp["id"], "answer": None, "error": "timeout"}
    try:
        ans = decode_answer(resp["answer_token_ids"], remap, enc["norm_constants"],
                            [tuple(s) for s in enc["answer_slots"]], tok)
    except (TokenParseError, CodecError) as exc:
        return {"id": resp["id"], "answer": None, "error": str(exc)}
    return {"id": resp["id"], "error": None,
            "answer": {"text": ans.text, "float_groups": {k: v.tolist() for k, v in ans.float_groups.items()},
                       "n_float_tokens": ans.n_float_tokens}}


def _metrics_csv(metrics: Mapping[str, float], direction: Mapping[str, str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value", "direction"])
    for k in sorted(metrics):
        w.writerow([k, repr(float(metrics[k])), direction.get(k, "")])
    return buf.getvalue()


def run_pipeline(cfg: Mapping[str, Any], out_dir: str | Path, jobs: int | None = None) -> dict:
    return Pipeline(cfg, out_dir, jobs).run()
