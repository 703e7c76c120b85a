from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from gridscale.float_codec import (ByteTokenizer, CodecConfig, CodecError, TokenParseError, VocabularyRemap,
                                   build_remap, decode_answer, default_remap, discretize, encode_segments,
                                   quantize, undiscretize)

B = 1024
reals = st.floats(-1e12, 1e12, allow_nan=False, allow_infinity=False)


def check_bound(v, vt, bins, m):
    """Lower bound everywhere; strict upper bound except the clamped +max edge, where it is an equality.

    Elements that fail in floating point are rechecked exactly, since v - vt itself can round up to w.
    """
    d = v - vt
    w = 2 * m / B
    top = (bins == B - 1) & (v == m)
    suspect = (d < 0) | ((d >= w) & ~top)
    for i in np.flatnonzero(suspect):
        exact = Fraction(float(v[i])) - Fraction(float(vt[i]))
        assert 0 <= exact < 2 * Fraction(m) / B, (v[i], vt[i], m)
    assert np.all(d[top] <= w * (1 + 1e-12))


@settings(max_examples=300)
@given(st.lists(reals, min_size=1, max_size=40))
def test_bound_holds(vals):
    v = np.array(vals)
    assume(np.max(np.abs(v)) > 0)
    bins, m = discretize(v, B)
    check_bound(v, undiscretize(bins, m, B), bins, m)


def test_bound_on_tiny_and_huge_scales():
    rng = np.random.default_rng(4)
    for e in (-300, -30, 0, 30, 300):
        v = rng.uniform(-1, 1, 5000) * 10.0 ** e
        bins, m = discretize(v, B)
        check_bound(v, undiscretize(bins, m, B), bins, m)


def test_endpoints():
    bins, m = discretize([-3.0, 3.0, 0.0], B)
    assert bins.tolist() == [0, B - 1, B // 2] and m == 3.0


def test_all_zero_group():
    bins, m = discretize([0.0, 0.0, -0.0], B)
    assert np.all(bins == B // 2)
    assert np.all(undiscretize(bins, m, B) == 0.0)


def test_explicit_scale_clips():
    bins, m = discretize([5.0, -5.0, 0.5], B, scale=1.0)
    assert m == 1.0 and bins[0] == B - 1 and bins[1] == 0


@given(st.lists(reals, min_size=1, max_size=20))
def test_quantize_idempotent(vals):
    v = np.array(vals)
    assume(np.max(np.abs(v)) > 0)
    m = float(np.max(np.abs(v)))
    q = quantize(v, B, m)
    assert np.array_equal(quantize(q, B, m), q)


def test_invalid_inputs():
    with pytest.raises(CodecError):
        discretize([], B)
    with pytest.raises(CodecError):
        discretize([np.nan], B)
    with pytest.raises(CodecError):
        undiscretize([B], 1.0, B)
    with pytest.raises(CodecError):
        CodecConfig(B=7)


# -- vocabulary remap ----------------------------------------------------------

def remap_oracle(freq, B, reserved):
    """Repeated minimum selection, no sorting."""
    pool = {t: c for t, c in freq.items() if t not in reserved}
    out = []
    for _ in range(B):
        best = None
        for t, c in pool.items():
            if best is None or (c, t) < (pool[best], best):
                best = t
        out.append(best)
        del pool[best]
    return out


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.integers(0, 300), st.integers(0, 5), min_size=20, max_size=120),
       st.integers(1, 16), st.sets(st.integers(0, 300), max_size=10))
def test_remap_matches_selection_oracle(freq, b, reserved):
    assume(len([t for t in freq if t not in reserved]) >= b)
    got = build_remap(freq, b, reserved)
    assert list(got.token_ids) == remap_oracle(freq, b, reserved)


def test_default_remap_avoids_text_ids():
    tok = ByteTokenizer(4096)
    r = default_remap(tok, ["hello world"], B)
    assert r.B == B and min(r.token_ids) >= 256
    assert list(r.token_ids) == list(range(256, 256 + B))
    assert VocabularyRemap.from_json(r.to_json()) == r
    with pytest.raises(CodecError):
        default_remap(ByteTokenizer(512), ["x"], B)


# -- mixed streams -----------------------------------------------------------

def test_encode_decode_round_trip():
    tok = ByteTokenizer()
    remap = default_remap(tok, ["abc"], B)
    vals = np.array([0.3, -1.2, 2.5])
    enc = encode_segments(["Pred: ", ("output", vals), ". Done"], remap, tok)
    ans = decode_answer(enc.token_ids, remap, enc.norm_constants, [("output", 3)], tok)
    assert ans.text == "Pred: {output}. Done"
    assert np.array_equal(ans.float_groups["output"], quantize(vals, B))
    assert ans.n_float_tokens == 3 == enc.n_float_tokens


def test_decode_errors():
    tok = ByteTokenizer()
    remap = default_remap(tok, ["abc"], B)
    enc = encode_segments(["x ", ("a", [1.0, 2.0])], remap, tok)
    with pytest.raises(TokenParseError):
        decode_answer(enc.token_ids, remap, enc.norm_constants, [("a", 3)], tok)
    with pytest.raises(TokenParseError):
        decode_answer(list(enc.token_ids) + [4000], remap, enc.norm_constants, [("a", 2)], tok)
    with pytest.raises(TokenParseError):
        decode_answer(enc.token_ids, remap, enc.norm_constants, [("a", 2), ("b", 1)], tok)


def test_empty_group_has_no_tokens():
    tok = ByteTokenizer()
    remap = default_remap(tok, ["abc"], B)
    enc = encode_segments(["none: ", ("g", [])], remap, tok, scales={"g": 5.0})
    ans = decode_answer(enc.token_ids, remap, enc.norm_constants, [("g", 0)], tok)
    assert ans.float_groups["g"].size == 0 and ans.text == "none: "
