import json
import random
import sys
import textwrap

import numpy as np
import pytest

from gridscale.eval_metrics import parse_fault_answer
from gridscale.float_codec import ByteTokenizer, decode_answer, default_remap, encode_segments
from gridscale.harness import cli
from gridscale.harness.config import hash_config, load_config, parse_fractions
from gridscale.harness.pipeline import Pipeline, PipelineStageError, frac_dir
from gridscale.harness.protocol import Request, ResponderCrashError, Response, query_responder
from gridscale.harness.responder import AnswerKeyEntry, ReferenceResponder, parse_train_size


def script(tmp_path, body, name="resp.py"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(body))
    return [sys.executable, str(p)]


ECHO_SHUFFLED = """
    import json, random, sys
    reqs = [json.loads(l) for l in sys.stdin if l.strip()]
    random.Random(7).shuffle(reqs)
    for r in reqs:
        print(json.dumps({"id": r["id"], "answer_token_ids": r["prompt_token_ids"][::-1]}), flush=True)
"""


def requests(n):
    rng = random.Random(1)
    return [Request(f"r{i:05d}", "opf", tuple(rng.randrange(4096) for _ in range(rng.randrange(1, 30))),
                    {"x": 1.0}) for i in range(n)]


def test_request_response_lines_roundtrip():
    r = Request("a", "opf", (1, 2, 3), {"g": 2.5})
    assert Request.from_line(r.to_line()) == r
    s = Response("a", (4, 5))
    assert Response.from_line(s.to_line()) == s
    with pytest.raises(ValueError):
        Response.from_line('{"id": "a", "answer_token_ids": [1.5]}')


def test_out_of_order_answers_matched_by_id(tmp_path):
    reqs = requests(1000)
    res = query_responder(reqs, script(tmp_path, ECHO_SHUFFLED), timeout=30)
    assert not res.timeouts and res.malformed == 0 and res.duplicates == 0
    assert all(res.answers[r.id] == r.prompt_token_ids[::-1] for r in reqs)


def test_duplicate_request_ids_rejected(tmp_path):
    r = requests(1)[0]
    with pytest.raises(ValueError):
        query_responder([r, r], script(tmp_path, ECHO_SHUFFLED))


def test_malformed_and_duplicate_lines_counted(tmp_path):
    cmd = script(tmp_path, """
        import json, sys
        for l in sys.stdin:
            r = json.loads(l)
            print("not json", flush=True)
            print(json.dumps({"id": r["id"], "answer_token_ids": "oops"}), flush=True)
            print(json.dumps({"id": r["id"], "answer_token_ids": [1]}), flush=True)
            print(json.dumps({"id": r["id"], "answer_token_ids": [2]}), flush=True)
    """)
    res = query_responder(requests(3), cmd, timeout=10)
    # the session closes once every id is answered, so the last request's repeat is never read
    assert res.malformed == 6 and res.duplicates == 2
    assert set(res.answers.values()) == {(1,)}


def test_silent_requests_time_out(tmp_path):
    cmd = script(tmp_path, """
        import json, sys, time
        for l in sys.stdin:
            r = json.loads(l)
            if not r["id"].endswith("1"):
                print(json.dumps({"id": r["id"], "answer_token_ids": []}), flush=True)
        time.sleep(30)
    """)
    res = query_responder(requests(12), cmd, timeout=0.5)
    assert res.timeouts == ["r00001", "r00011"]
    assert res.answers["r00001"] is None and res.answers["r00000"] == ()


def test_crash_lists_unanswered(tmp_path):
    cmd = script(tmp_path, """
        import json, sys
        for i, l in enumerate(sys.stdin):
            if i == 2:
                raise SystemExit("boom")
            print(json.dumps({"id": json.loads(l)["id"], "answer_token_ids": []}), flush=True)
    """)
    with pytest.raises(ResponderCrashError) as ei:
        query_responder(requests(5), cmd, timeout=10)
    assert ei.value.unanswered == ["r00002", "r00003", "r00004"]
    assert "boom" in str(ei.value)


# -- reference responder ------------------------------------------------------

@pytest.fixture(scope="module")
def codec():
    tok = ByteTokenizer()
    remap = default_remap(tok, ["The values are ."], 256)
    return tok, remap


def entry_for(tok, remap, values, scale):
    enc = encode_segments(["The values are ", ("v", values), "."], remap, tok, scales={"v": scale})
    return AnswerKeyEntry("state_estimation", enc.token_ids, (("v", len(values)),))


def test_oracle_returns_key_and_unknown_is_empty(codec):
    tok, remap = codec
    e = entry_for(tok, remap, [0.5, -0.25], 1.0)
    r = ReferenceResponder({"a": e}, remap)
    assert r(Request("a", "state_estimation", (), {"v": 1.0})) == e.answer_token_ids
    assert r(Request("zzz", "state_estimation", (), {"v": 1.0})) == ()


def test_emulator_noise_follows_power_law(codec):
    tok, remap = codec
    vals = np.zeros(200)
    e = entry_for(tok, remap, vals, 1.0)
    key = {f"q{i}": e for i in range(40)}
    mses = []
    for n in (100, 1600):
        r = ReferenceResponder(key, remap, "scaling_emulator", alpha=0.01, k=-0.5, train_size=n, seed=3)
        errs = [decode_answer(r(Request(i, "state_estimation", (), {"v": 1.0})), remap, {"v": 1.0}, e.slots,
                              tok).float_groups["v"] for i in key]
        mses.append(float(np.mean(np.square(errs))))
    # quantization adds about w^2/3 with w = 2/B; both levels sit well above it
    expected = [0.01 * 100 ** -0.5, 0.01 * 1600 ** -0.5]
    for m, x in zip(mses, expected):
        assert abs(m - x) / x < 0.15
    with pytest.raises(ValueError):
        ReferenceResponder(key, remap, "scaling_emulator")
    with pytest.raises(ValueError):
        ReferenceResponder(key, remap, "nope")


def test_noise_independent_of_request_order(codec):
    tok, remap = codec
    e = entry_for(tok, remap, [0.1, 0.2, 0.3], 1.0)
    r = ReferenceResponder({"a": e, "b": e}, remap, "noisy_oracle", sigma=0.1, seed=4)
    ra, rb = Request("a", "state_estimation", (), {"v": 1.0}), Request("b", "state_estimation", (), {"v": 1.0})
    first = (r(ra), r(rb))
    assert (r(rb), r(ra)) == first[::-1] and first[0] != first[1]


def test_noisy_oracle_swaps_fault_type(codec):
    tok, remap = codec
    text = "The fault type is line_to_line, occurred at bus 4."
    e = AnswerKeyEntry("fault_detection", tuple(tok.encode(text)), ())
    key = {f"f{i}": e for i in range(400)}
    r = ReferenceResponder(key, remap, "noisy_oracle", text_error_rate=0.25, seed=1)
    outs = [parse_fault_answer(tok.decode(r(Request(i, "fault_detection", (), {})))) for i in key]
    wrong = sum(o["fault_type"] != "line_to_line" for o in outs)
    assert all(o["bus"] == 4 for o in outs)
    assert 60 < wrong < 140


def test_parse_train_size():
    assert parse_train_size(None) is None and parse_train_size("12") == 12
    assert parse_train_size('{"opf": 3}') == {"opf": 3}


# -- configuration and pipeline ---------------------------------------------

def test_config_loading(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("case: case30\nscenarios: {count: 7}\n")
    cfg = load_config(p, {"tasks": "fault_classification,opf", "seed": None})
    assert cfg["case"] == "case30" and cfg["scenarios"] == {"count": 7, "test_fraction": 0.2}
    assert cfg["tasks"] == ["opf", "fault_detection"] and cfg["seed"] == 0
    p.write_text("bogus: 1\n")
    with pytest.raises(ValueError, match="bogus"):
        load_config(p)
    with pytest.raises(ValueError):
        load_config(overrides={"tasks": "weather"})
    assert parse_fractions("1/8, 0.5,1") == [0.125, 0.5, 1.0]
    with pytest.raises(ValueError):
        parse_fractions("0")
    assert hash_config(dict(cfg, jobs=8)) == hash_config(cfg)
    assert frac_dir(0.125) == "f0.125"


def test_stage_requires_previous(tmp_path):
    p = Pipeline(load_config(overrides={"scenarios": {"count": 4}}), tmp_path)
    with pytest.raises(PipelineStageError, match="gen-scenarios"):
        p.run_stage("simulate")


def test_cli_pipeline_smoke(tmp_path, capsys):
    out = tmp_path / "run"
    args = ["--out-dir", str(out), "--scenarios", "10", "--tasks", "state_estimation,renewable_prediction",
            "--fractions", "1/2,1"]
    assert cli.main(["pipeline"] + args) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert set(metrics) == {"f0.5", "f1"}
    se = metrics["f1"]["state_estimation"]["metrics"]
    assert se["mse"] <= se["quantization_ceiling"]
    report = json.loads((out / "report.json").read_text())
    assert report["audit_ok"]
    assert cli.main(["show-config"] + args) == 0
    assert json.loads(capsys.readouterr().out)["scenarios"]["count"] == 10
    assert cli.main(["pipeline", "--out-dir", str(out), "--tasks", "nonsense"]) == 2
    assert cli.main(["respond", "--out-dir", str(tmp_path / "empty")]) == 1
