"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from gridscale.eval_metrics import (composite, r_balance, r_cost, r_overflow, r_reactive, r_renewable,
                                    r_voltage)
from gridscale.float_codec import discretize, undiscretize
from gridscale.grid_model import CostCurve, load_case
from gridscale.harness.config import load_config
from gridscale.harness.pipeline import Pipeline
from gridscale.opf_solver import brute_force_opf, solve_opf
from gridscale.qa_builder import read_records_jsonl
from gridscale.scaling_law import ScalingSeries, fit_power_law
from gridscale.scenario_engine import FaultDescriptor, FaultType, ScenarioConfig, Split, apply_scenario, \
    generate_scenarios
from gridscale.steady_state import solve_power_flow
from gridscale.transient_sim import DynamicParams, fault_signature_separability, simulate_fault

from test_transient_sim import equal_area_cct, smib_params
from toys import random_toy, smib

pytestmark = pytest.mark.slow


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return emit


def run_pipeline_in(path, **overrides):
    p = Pipeline(load_config(overrides=overrides), path, jobs=overrides.get("jobs"))
    return p, p.run()


# 1 ---------------------------------------------------------------------------

def test_codec_bound(verdict):
    t0 = time.perf_counter()
    B = 1024
    rng = np.random.default_rng(2024)
    bad, edge_eq, n = 0, 0, 0
    ends_ok = True
    for g in range(1000):
        scale = 10.0 ** rng.uniform(-30, 30)
        v = rng.uniform(-1, 1, 1000) * scale
        bins, m = discretize(v, B)
        vt = undiscretize(bins, m, B)
        d = v - vt
        w = 2 * m / B
        n += v.size
        ends_ok &= bins[np.argmax(v)] == B - 1 if v.max() == m else bins[np.argmin(v)] == 0
        for i in np.flatnonzero((d < 0) | (d >= w)):
            exact = Fraction(float(v[i])) - Fraction(float(vt[i]))
            if not 0 <= exact < 2 * Fraction(m) / B:
                bad += 1
                edge_eq += v[i] == m and bins[i] == B - 1
    b, mm = discretize([-2.0, 2.0, 0.5], B)
    ends_ok &= b[0] == 0 and b[1] == B - 1
    dt = time.perf_counter() - t0
    verdict(1, bad == 0 and ends_ok and dt < 10,
            f"{n} floats, {bad} bound violations ({edge_eq} of them at v = +|v|max clamped to bin B-1), "
            f"endpoints ok={bool(ends_ok)}, {dt:.1f}s")


# 2 ---------------------------------------------------------------------------

def test_power_flow_reference(verdict):
    api = pytest.importorskip("pypower.api")
    t0 = time.perf_counter()
    rows, ok = [], True
    sols = {}
    for name in ("case14", "case30", "case118"):
        c = load_case(name)
        s = solve_power_flow(c)
        sols[name] = (c, s)
    dt = time.perf_counter() - t0
    for name, (c, s) in sols.items():
        r, conv = api.runpf(getattr(api, name)(), api.ppoption(VERBOSE=0, OUT_ALL=0, PF_TOL=1e-11))
        vm, va = r["bus"][:, 7], np.deg2rad(r["bus"][:, 8])
        dv = np.abs(s.v_mag - vm).max()
        da = np.abs((s.v_ang - s.v_ang[c.slack_bus]) - (va - va[c.slack_bus])).max()
        good = conv and s.converged and s.iterations <= 10 and s.mismatch <= 1e-8 and max(dv, da) <= 1e-6
        ok &= good
        rows.append(f"{name} it={s.iterations} mis={s.mismatch:.1e} dV={dv:.1e} dA={da:.1e}")
    verdict(2, ok and dt < 5, "; ".join(rows) + f"; {dt:.2f}s")


# 3 ---------------------------------------------------------------------------

def test_opf_certified(verdict):
    t0 = time.perf_counter()
    gaps = []
    for seed in range(24):
        c = random_toy(seed)
        gaps.append(solve_opf(c).score - brute_force_opf(c, resolution=5.0).score)
    dt = time.perf_counter() - t0
    verdict(3, min(gaps) >= -1e-3 and dt < 300,
            f"24 toys, min(solve - brute force) = {min(gaps):.2e}, {dt:.0f}s")


# 4 ---------------------------------------------------------------------------

def test_metric_values(verdict):
    hand = [
        (r_overflow([0.5, 1.5]), 0.25),
        (r_overflow([0.0, 0.0]), 1.0),
        (r_renewable([10.0, 20.0], [20.0, 20.0]), 0.75),
        (r_balance(200.0, 0.0, 100.0), -1.0),
        (r_balance(-50.0, 0.0, 100.0), -0.5),
        (r_cost([100.0], [True], [True], [CostCurve(0.01, 1.0, 0.0)]), -0.002),
        (r_cost([0.0], [True], [False], [CostCurve(0.0, 0.0, 0.0, 5000.0)]), -0.05),
        (r_voltage([1.05 + math.log(2) * 0.1], [0.95], [1.05]), -0.5),
        (r_reactive([-10.0 - math.log(2) * 20.0], [-10.0], [10.0]), -0.5),
        (composite(dict(r_overflow=0.6, r_renewable=None, r_balance=-0.2, r_cost=-0.01, r_reactive=0.0,
                        r_voltage=-0.1)), 0.29 / 5),
    ]
    hand_err = max(abs(a - b) for a, b in hand)
    rng = np.random.default_rng(7)
    out_of_range = 0
    n = 100_000
    for _ in range(n):
        k = int(rng.integers(1, 4))
        pmax = rng.uniform(0.0, 100.0, k)
        vals = [r_overflow(rng.exponential(0.8, k)), r_renewable(pmax * rng.uniform(0, 1, k), pmax),
                r_balance(rng.uniform(-500, 500), -50.0, 50.0),
                r_reactive(rng.normal(0, 50, k), np.full(k, -20.0), np.full(k, 20.0)),
                r_voltage(rng.uniform(0.5, 1.5, k), np.full(k, 0.95), np.full(k, 1.05))]
        lo = [0.0, 0.0, -math.inf, -1.0, -1.0]
        hi = [1.0, 1.0, 0.0, 0.0, 0.0]
        out_of_range += sum(v is not None and not lo[i] <= v <= hi[i] for i, v in enumerate(vals))
    verdict(4, hand_err <= 1e-12 and out_of_range == 0,
            f"max hand-case error {hand_err:.1e}, {out_of_range} out-of-range values over {n} fuzz inputs")


# 5 ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def oracle_run(tmp_path_factory):
    t0 = time.perf_counter()
    p, rep = run_pipeline_in(tmp_path_factory.mktemp("oracle"), scenarios={"count": 200}, jobs=4)
    return p, rep, time.perf_counter() - t0


def test_oracle_round_trip(oracle_run, verdict):
    _, rep, dt = oracle_run
    m = rep["metrics"]["f1"]
    gap = m["opf"]["metrics"]["optimality_gap"]
    fd = m["fault_detection"]["metrics"]
    mse_ok = {t: m[t]["metrics"]["mse"] <= m[t]["metrics"]["quantization_ceiling"]
              for t in ("transient_prediction", "renewable_prediction", "state_estimation")}
    n_eval = {t: v["n_evaluated"] for t, v in m.items()}
    ok = (gap == 0 and fd["classification_error_rate"] == 0 and fd["localization_error_rate"] == 0
          and all(mse_ok.values()) and min(n_eval.values()) > 0 and dt < 900)
    verdict(5, ok, f"gap={gap}, fault errors={fd['classification_error_rate']}/{fd['localization_error_rate']}, "
                   f"MSE under ceiling={mse_ok}, evaluated={n_eval}, {dt:.0f}s")


# 6 ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def emulator_run(tmp_path_factory):
    t0 = time.perf_counter()
    p, rep = run_pipeline_in(tmp_path_factory.mktemp("emu"), scenarios={"count": 2000},
                             tasks="renewable_prediction,state_estimation", fractions="1/8,1/4,1/2,1",
                             responder={"mode": "scaling_emulator", "k": -0.4},
                             scaling={"compare_multi": True}, jobs=4)
    return p, rep, time.perf_counter() - t0


def test_scaling_law_recovery(emulator_run, verdict):
    p, rep, dt = emulator_run
    exact_err = 0.0
    for k, a in ((-0.4, 0.01), (-0.07, 3.0), (-1.3, 250.0)):
        x = np.array([500.0, 1000.0, 2000.0, 4000.0])
        f = fit_power_law(ScalingSeries.from_arrays(x, a * x ** k))
        exact_err = max(exact_err, abs(f.k - k), abs(f.alpha - a) / a)
    n_records = sum(sum(v for k, v in d.items() if k != "split") for d in rep["datasets"].values())
    fits = {k: (v["k"], v["r"]) for k, v in rep["fits"].items()}
    fit_ok = all(abs(k + 0.4) <= 0.05 and abs(r) > 0.99 for k, r in fits.values())
    verdict(6, exact_err <= 1e-12 and fit_ok and n_records >= 4000 and dt < 1200,
            f"exact-law error {exact_err:.1e}; {n_records} records; fits (k, r) = "
            + ", ".join(f"{k}: ({a:.3f}, {r:.4f})" for k, (a, r) in fits.items()) + f"; {dt:.0f}s")


# 7 ---------------------------------------------------------------------------

def test_leakage_audit(emulator_run, verdict):
    p, rep, _ = emulator_run
    out = p.out
    ds = {t: read_records_jsonl(out / "datasets" / f"{t}.jsonl") for t in p.tasks}
    fam = json.loads((out / "subsets" / "family.json").read_text())
    disjoint = True
    for t, recs in ds.items():
        test_ids = {r.record_id for r in recs if r.split is Split.TEST}
        train_ids = {r.record_id for r in recs if r.split is Split.TRAIN}
        disjoint &= not test_ids & train_ids
        for f in fam["family"].values():
            disjoint &= not set(f[t]) & test_ids
    fdirs = sorted(fam["family"], key=lambda f: float(f[1:]))
    nested = all(set(fam["family"][a][t]) <= set(fam["family"][b][t])
                 for a, b in zip(fdirs, fdirs[1:]) for t in p.tasks)
    counts_equal = all(fam["hybrid_counts"][f] == {t: len(ids) for t, ids in fam["family"][f].items()}
                       for f in fdirs)
    audit = json.loads((out / "subsets" / "audit.json").read_text())
    verdict(7, disjoint and nested and counts_equal and audit["ok"],
            f"disjoint={disjoint}, nested={nested}, hybrid counts equal single={counts_equal}, "
            f"pipeline audit ok={audit['ok']}")


# 8 ---------------------------------------------------------------------------

def test_transient_checks(verdict):
    c = smib()
    sol = solve_power_flow(c)
    tc, _, _ = equal_area_cct(c, sol)
    p = smib_params(T=2.0, dt=0.001)

    def stable(t):
        return simulate_fault(c, sol, FaultDescriptor(FaultType.THREE_PHASE_GROUND, "bus", 2, 0.1, 0.1 + t), p).stable

    lo, hi = 0.5 * tc, 1.5 * tc
    assert stable(lo) and not stable(hi)
    while hi - lo > 1e-3 * tc:
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if stable(mid) else (lo, mid)
    cct = 0.5 * (lo + hi)
    cct_err = abs(cct - tc) / tc

    case = load_case("case14")
    s14 = solve_power_flow(case)
    f = FaultDescriptor(FaultType.THREE_PHASE_GROUND, "bus", 4, 0.1, 0.2)
    a = simulate_fault(case, s14, f, DynamicParams(dt=0.005))
    b = simulate_fault(case, s14, f, DynamicParams(dt=0.0025))
    dt_change = np.abs(a.rotor_angles[-1] - b.rotor_angles[-1]).max() / np.abs(b.rotor_angles[-1]).max()

    traces = []
    for sc in generate_scenarios(case, ScenarioConfig(master_seed=1, timestamp_stride=37), 3):
        ac = apply_scenario(case, sc)
        so = solve_power_flow(ac)
        for ft in FaultType:
            locs = [("branch", k) for k in (2, 9, 15)] if ft is FaultType.BRANCH_TRIP else \
                [("bus", k) for k in (4, 9, 13)]
            for el, loc in locs:
                traces.append(simulate_fault(ac, so, FaultDescriptor(ft, el, loc, 0.1, 0.2)).sampled(10))
    sep = fault_signature_separability(traces).accuracy
    verdict(8, cct_err < 0.05 and dt_change < 0.01 and sep > 0.9,
            f"SMIB CCT {cct:.4f}s vs equal-area {tc:.4f}s ({100 * cct_err:.2f}%), dt-halving change "
            f"{100 * dt_change:.3f}%, 1-NN separability {sep:.3f} over {len(traces)} traces")


# 9 ---------------------------------------------------------------------------

def test_determinism(tmp_path, verdict):
    cfg = dict(scenarios={"count": 24}, fractions="1/2,1", responder={"mode": "noisy_oracle"})
    run_pipeline_in(tmp_path / "a", jobs=1, **cfg)
    run_pipeline_in(tmp_path / "b", jobs=3, **cfg)
    diffs = _diff_deep(tmp_path / "a", tmp_path / "b")
    n_files = sum(1 for f in (tmp_path / "a").rglob("*") if f.is_file())
    verdict(9, not diffs, f"{n_files} files compared between --jobs 1 and --jobs 3, {len(diffs)} differ "
                          + (str(diffs[:3]) if diffs else ""))


def _diff_deep(a, b):
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    if fa != fb:
        return sorted(set(map(str, fa)) ^ set(map(str, fb)))
    return [str(f) for f in fa if (a / f).read_bytes() != (b / f).read_bytes()]
