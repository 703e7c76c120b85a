import json
import math
import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridscale.harness.config import load_config
from gridscale.harness.pipeline import Pipeline
from gridscale.qa_builder import (TEMPLATES, MissingArtifactError, QAConfig, QARecord, ScenarioArtifacts, Task,
                                  audit_family, build_hybrid_dataset, build_task_dataset, config_hash,
                                  parse_rendered, read_records_jsonl, render_text, subsample_fractions,
                                  template_corpus, write_records_jsonl)
from gridscale.scenario_engine import Scenario, Split

N_SCEN = 20


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    out = tmp_path_factory.mktemp("qa")
    cfg = load_config(overrides={"scenarios": {"count": N_SCEN, "test_fraction": 0.25}})
    p = Pipeline(cfg, out)
    for s in ("gen-scenarios", "simulate", "build-qa"):
        p.run_stage(s)
    return p, p.datasets()


def toy_record(split="train", sid=0, values=(0.5, -1.25)):
    q = "Values {xs} for {name}."
    return QARecord(Task.STATE_ESTIMATION, sid, split, q, {"xs": values}, {"xs": 2.0, "ys": 1.0},
                    "Answer {ys}.", {"ys": (1.0,)}, {"name": "bus 3"})


def test_one_record_per_scenario_in_id_order(built):
    p, ds = built
    for task, recs in ds.items():
        ids = [r.scenario_id for r in recs]
        assert ids == sorted(ids) and len(ids) == N_SCEN, task
        assert all(r.task.value == task for r in recs)


def test_records_use_task_templates(built):
    _, ds = built
    for task, recs in ds.items():
        q, a = TEMPLATES[Task(task)]
        r = recs[0]
        if task == "fault_detection":
            # the question must not state the label being asked for
            assert "occurred at bus" not in r.question_text
            assert r.scalars["fault_type"] not in render_text(r)
        else:
            assert r.question_text == q and r.answer_text == a


def test_slots_and_norm_constants_resolve(built):
    _, ds = built
    for recs in ds.values():
        for r in recs:
            for text, groups in ((r.question_text, r.float_groups), (r.answer_text, r.answer_float_groups)):
                for slot in re.findall(r"\{(\w+)\}", text):
                    assert (slot in groups) != (slot in r.scalars)
            for k in list(r.float_groups) + list(r.answer_float_groups):
                assert r.norm_constants[k] >= 0


def test_answer_values_within_scale(built):
    _, ds = built
    for task in ("transient_prediction", "state_estimation", "opf"):
        for r in ds[task]:
            for k, v in r.answer_float_groups.items():
                assert np.all(np.abs(v) <= r.norm_constants[k] + 1e-9), (task, k)


def test_render_parse_roundtrip(built):
    _, ds = built
    for recs in ds.values():
        r = recs[-1]
        for part, text, groups in (("question", r.question_text, r.float_groups),
                                   ("answer", r.answer_text, r.answer_float_groups)):
            back = parse_rendered(text, render_text(r, part), r.scalars)
            assert back == {k: tuple(v) for k, v in groups.items() if k in back}
            assert set(back) == set(groups)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), max_size=12))
def test_render_parse_exact_for_any_floats(xs):
    r = toy_record(values=tuple(xs))
    assert parse_rendered(r.question_text, render_text(r), r.scalars)["xs"] == tuple(float(x) for x in xs)


def test_record_validation():
    with pytest.raises(ValueError):   # slot filled twice
        QARecord(Task.OPF, 0, "train", "{a}", {"a": (1.0,)}, {"a": 1.0}, "", {}, {"a": "x"})
    with pytest.raises(ValueError):   # slot never filled
        QARecord(Task.OPF, 0, "train", "{a}", {}, {}, "", {})
    with pytest.raises(ValueError):   # group without a normalization constant
        QARecord(Task.OPF, 0, "train", "{a}", {"a": (1.0,)}, {}, "", {})
    with pytest.raises(ValueError):
        QAConfig(input_len=0)
    with pytest.raises(ValueError):
        QAConfig.from_dict({"bogus": 1})


def test_jsonl_roundtrip(tmp_path, built):
    _, ds = built
    recs = ds["fault_detection"] + ds["opf"]
    path = tmp_path / "r.jsonl"
    assert write_records_jsonl(recs, path) == len(recs)
    back = read_records_jsonl(path)
    assert [b.to_dict() for b in back] == [r.to_dict() for r in recs]
    bad = dict(recs[0].to_dict(), schema="other/9")
    with pytest.raises(ValueError):
        QARecord.from_dict(bad)


def test_missing_and_failed_artifacts():
    sc = Scenario(3, 0, (1.0,), {}, (True,), (True,), Split.TRAIN, 0)
    with pytest.raises(MissingArtifactError, match="3"):
        build_task_dataset("opf", [sc], {})
    with pytest.raises(MissingArtifactError, match="3"):
        build_task_dataset("opf", [sc], {3: ScenarioArtifacts(sc)})
    recs, man = build_task_dataset("opf", [sc], {3: ScenarioArtifacts(sc, error="diverged")})
    assert recs == [] and man.skipped == {"opf/00000003": "diverged"}


def test_config_hash_stable():
    a = {"x": [1, 2], "y": {"z": 1.5}}
    assert config_hash(a) == config_hash(json.loads(json.dumps(a))) != config_hash({"x": [1, 2]})


def test_hybrid_is_permutation_of_union(built):
    _, ds = built
    per_task = list(ds.values())
    hyb, man = build_hybrid_dataset(per_task, seed=5)
    assert sorted(r.record_id for r in hyb) == sorted(r.record_id for recs in per_task for r in recs)
    assert man.task_counts == {t: len(v) for t, v in sorted(ds.items())}
    assert [r.record_id for r in build_hybrid_dataset(per_task, seed=5)[0]] == [r.record_id for r in hyb]
    with pytest.raises(ValueError):
        build_hybrid_dataset([per_task[0], per_task[0]])


def test_subsample_nested_disjoint_and_hybrid_consistent(built):
    _, ds = built
    fr = [0.125, 0.25, 0.5, 1.0]
    hyb, _ = build_hybrid_dataset(list(ds.values()), seed=2)
    hfam = subsample_fractions(hyb, fr, seed=9)
    for task, recs in ds.items():
        fam = subsample_fractions(recs, fr, seed=9)
        rep = audit_family(fam, [r for r in recs if r.split is Split.TEST])
        assert rep["ok"] and rep["nested"] and not rep["leaks"]
        n_train = sum(r.split is Split.TRAIN for r in recs)
        for f in fr:
            assert len(fam[f]) == math.floor(f * n_train)
            assert [r.record_id for r in hfam[f] if r.task.value == task] == [r.record_id for r in fam[f]]


def test_audit_detects_leak_and_broken_nesting():
    a, b, t = toy_record(sid=1), toy_record(sid=2), toy_record("test", sid=2)
    rep = audit_family({0.5: [a, b], 1.0: [a]}, [t])
    assert not rep["nested"] and rep["leaks"] == {"0.5": [2]} and not rep["ok"]
    with pytest.raises(ValueError):
        subsample_fractions([a], [1.5])


def test_template_corpus_covers_templates():
    corpus = template_corpus()
    for q, a in TEMPLATES.values():
        assert q in corpus and a in corpus
