"""Uniform bin discretization of float groups and mapping onto a host vocabulary.

A group ``v`` with scale ``m = max|v|`` maps to bins ``floor((v/m + 1) * B/2)``,
clamped to ``[0, B-1]``, and back to ``(2*bin/B - 1) * m``. Decoded values never
exceed the original and sit less than one bin width (``2m/B``) below it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

ZERO_SENTINEL = 0.0


class CodecError(ValueError):
    pass


class TokenParseError(CodecError):
    """Raised when a token stream cannot be read back into text and float groups."""

    def __init__(self, message: str, position: int | None = None):
        super().__init__(message if position is None else f"{message} (token {position})")
        self.position = position


@dataclass(frozen=True)
class CodecConfig:
    B: int = 1024
    clamp_top: bool = True   # v = +max maps to B-1 instead of B
    zero_policy: str = "midpoint"  # all-zero groups -> bins B/2, scale 0

    def __post_init__(self):
        if self.B < 2 or self.B % 2:
            raise CodecError(f"bin count must be even and >= 2, got {self.B}")
        if not self.clamp_top:
            raise CodecError("only the clamp edge policy is supported")
        if self.zero_policy != "midpoint":
            raise CodecError(f"unknown zero policy {self.zero_policy!r}")

    @property
    def bin_width(self) -> float:
        return 2.0 / self.B


def discretize(values, B: int = 1024, scale: float | None = None) -> tuple[np.ndarray, float]:
    """Return ``(bins, scale)``.

    ``scale`` defaults to the group's max absolute value. An explicit scale
    smaller than the data clips out-of-range values to the end bins.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise CodecError("cannot discretize an empty group")
    if not np.all(np.isfinite(v)):
        raise CodecError("non-finite value in float group")
    m = float(np.max(np.abs(v))) if scale is None else float(scale)
    if not np.isfinite(m) or m < 0:
        raise CodecError(f"invalid scale {m!r}")
    half = B // 2
    if m == 0.0:
        return np.full(v.shape, half, dtype=np.int64), ZERO_SENTINEL
    if scale is not None:
        v = np.clip(v, -m, m)
    bins = np.floor((v / m + 1.0) * half).astype(np.int64)
    np.clip(bins, 0, B - 1, out=bins)
    # Division rounding can put a value one bin off; keep decode(bin) <= v < decode(bin+1).
    lo = (2.0 * bins / B - 1.0) * m
    bins = np.where(lo > v, bins - 1, bins)
    nxt = (2.0 * (bins + 1) / B - 1.0) * m
    bins = np.where((nxt <= v) & (bins < B - 1), bins + 1, bins)
    return bins, m


def undiscretize(bins, scale: float, B: int = 1024) -> np.ndarray:
    b = np.asarray(bins)
    if b.size and (not np.issubdtype(b.dtype, np.integer)):
        if not np.all(b == np.floor(b)):
            raise CodecError("bins must be integers")
        b = b.astype(np.int64)
    if b.size and (b.min() < 0 or b.max() > B - 1):
        raise CodecError(f"bin outside [0, {B - 1}]")
    if scale == ZERO_SENTINEL:
        return np.zeros(b.shape)
    return (2.0 * b / B - 1.0) * float(scale)


def quantize(values, B: int = 1024, scale: float | None = None) -> np.ndarray:
    """discretize followed by undiscretize."""
    bins, m = discretize(values, B, scale)
    return undiscretize(bins, m, B)


# ---------------------------------------------------------------------------
# host vocabulary
# ---------------------------------------------------------------------------


class ByteTokenizer:
    """Byte-level host tokenizer: ids 0..255 are UTF-8 bytes, the rest are spare slots.

    Stands in for an LLM tokenizer whose vocabulary has rarely used entries that
    can be overwritten with float bins.
    """

    n_bytes = 256

    def __init__(self, vocab_size: int = 4096):
        if vocab_size <= self.n_bytes:
            raise CodecError("vocabulary must be larger than the byte range")
        self.vocab_size = vocab_size

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: Sequence[int]) -> str:
        if any(not 0 <= i < self.n_bytes for i in ids):
            raise TokenParseError("non-text token inside a text span")
        try:
            return bytes(ids).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TokenParseError(f"invalid UTF-8 in text span: {exc.reason}") from None

    def frequency_table(self, corpus: Sequence[str]) -> dict[int, int]:
        counts = np.zeros(self.vocab_size, dtype=np.int64)
        for text in corpus:
            ids = np.frombuffer(text.encode("utf-8"), dtype=np.uint8)
            counts[: self.n_bytes] += np.bincount(ids, minlength=self.n_bytes)
        return {i: int(c) for i, c in enumerate(counts)}


@dataclass(frozen=True)
class VocabularyRemap:
    token_ids: tuple[int, ...]           # token_ids[b] carries float bin b
    frequency_source: str = "unspecified"
    _lookup: dict[int, int] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        ids = tuple(int(i) for i in self.token_ids)
        if len(set(ids)) != len(ids):
            raise CodecError("remap ids are not unique")
        object.__setattr__(self, "token_ids", ids)
        object.__setattr__(self, "_lookup", {t: b for b, t in enumerate(ids)})

    @property
    def B(self) -> int:
        return len(self.token_ids)

    def bin_of(self, token: int) -> int | None:
        return self._lookup.get(int(token))

    def to_json(self) -> str:
        return json.dumps({"B": self.B, "token_ids": list(self.token_ids),
                           "frequency_source": self.frequency_source})

    @classmethod
    def from_json(cls, text: str) -> "VocabularyRemap":
        d = json.loads(text)
        remap = cls(tuple(d["token_ids"]), d.get("frequency_source", "unspecified"))
        if remap.B != d["B"]:
            raise CodecError("remap length does not match B")
        return remap


def build_remap(frequency_table: Mapping[int, int], B: int, reserved: Sequence[int] = (),
                source: str = "unspecified") -> VocabularyRemap:
    """Pick the B least frequent ids not in ``reserved``; ties go to the lower id."""
    banned = set(int(r) for r in reserved)
    eligible = sorted((int(c), int(t)) for t, c in frequency_table.items() if int(t) not in banned)
    if len(eligible) < B:
        raise CodecError(f"only {len(eligible)} eligible ids for {B} float bins")
    return VocabularyRemap(tuple(t for _, t in eligible[:B]), source)


def default_remap(tokenizer: ByteTokenizer, corpus: Sequence[str], B: int = 1024) -> VocabularyRemap:
    """Remap over the spare ids of ``tokenizer``, excluding every id the corpus uses."""
    table = tokenizer.frequency_table(corpus)
    used = [t for t, c in table.items() if c > 0]
    # byte ids are always reserved for text, used or not
    return build_remap(table, B, reserved=sorted(set(used) | set(range(tokenizer.n_bytes))),
                       source=f"byte tokenizer, {len(corpus)} template texts")


# ---------------------------------------------------------------------------
# mixed text / float token streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenizedPrompt:
    token_ids: tuple[int, ...]
    norm_constants: dict[str, float]
    groups: tuple[tuple[str, int, int], ...]   # (name, start, end) in token_ids

    @property
    def n_float_tokens(self) -> int:
        return sum(e - s for _, s, e in self.groups)

    def to_dict(self) -> dict:
        return {"token_ids": list(self.token_ids), "norm_constants": self.norm_constants,
                "groups": [list(g) for g in self.groups]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TokenizedPrompt":
        return cls(tuple(d["token_ids"]), dict(d["norm_constants"]), tuple(tuple(g) for g in d["groups"]))


def encode_segments(segments: Sequence[str | tuple[str, Sequence[float]]], remap: VocabularyRemap,
                    tokenizer: ByteTokenizer, scales: Mapping[str, float] | None = None) -> TokenizedPrompt:
    """Encode a sequence of text pieces and ``(name, values)`` float groups.

    ``scales`` fixes the normalization constant of named groups; other groups
    use their own max absolute value.
    """
    ids: list[int] = []
    norms: dict[str, float] = {}
    groups = []
    band = np.asarray(remap.token_ids)
    for seg in segments:
        if isinstance(seg, str):
            ids.extend(tokenizer.encode(seg))
            continue
        name, values = seg
        if name in norms:
            raise CodecError(f"float group {name!r} appears twice")
        values = np.asarray(values, dtype=float).ravel()
        start = len(ids)
        if values.size:
            bins, m = discretize(values, remap.B, None if scales is None else scales.get(name))
            ids.extend(band[bins].tolist())
        else:
            m = ZERO_SENTINEL if scales is None else float(scales.get(name, ZERO_SENTINEL))
        norms[name] = m
        groups.append((name, start, len(ids)))
    return TokenizedPrompt(tuple(ids), norms, tuple(groups))


@dataclass(frozen=True)
class DecodedAnswer:
    text: str                         # float runs replaced by "{name}" placeholders
    float_groups: dict[str, np.ndarray]
    n_float_tokens: int


def split_runs(token_ids: Sequence[int], remap: VocabularyRemap,
               tokenizer: ByteTokenizer) -> list[str | list[int]]:
    """Split a stream into text pieces and runs of float bins."""
    out: list[str | list[int]] = []
    text: list[int] = []
    run: list[int] = []
    for pos, t in enumerate(token_ids):
        b = remap.bin_of(t)
        if b is not None:
            if text:
                out.append(tokenizer.decode(text))
                text = []
            run.append(b)
        elif 0 <= t < tokenizer.n_bytes:
            if run:
                out.append(run)
                run = []
            text.append(int(t))
        else:
            raise TokenParseError(f"token id {t} is neither text nor a float bin", pos)
    if text:
        out.append(tokenizer.decode(text))
    if run:
        out.append(run)
    return out


def decode_answer(token_ids: Sequence[int], remap: VocabularyRemap, norm_constants: Mapping[str, float],
                  slots: Sequence[tuple[str, int]], tokenizer: ByteTokenizer | None = None) -> DecodedAnswer:
    """Read an answer stream back into text and float groups.

    ``slots`` lists the expected float groups as ``(name, length)`` in order of
    appearance. Zero-length slots carry no tokens and decode to empty arrays.
    Any mismatch in run count or length is a parse error.
    """
    tokenizer = tokenizer or ByteTokenizer()
    pieces = split_runs(token_ids, remap, tokenizer)
    wanted = [(n, k) for n, k in slots if k > 0]
    runs = [p for p in pieces if not isinstance(p, str)]
    if len(runs) != len(wanted):
        raise TokenParseError(f"expected {len(wanted)} float groups, found {len(runs)}")
    groups: dict[str, np.ndarray] = {n: np.zeros(0) for n, k in slots if k == 0}
    text = []
    it = iter(wanted)
    for p in pieces:
        if isinstance(p, str):
            text.append(p)
            continue
        name, length = next(it)
        if len(p) != length:
            raise TokenParseError(f"group {name!r} has {len(p)} values, expected {length}")
        if name not in norm_constants:
            raise TokenParseError(f"no normalization constant for group {name!r}")
        groups[name] = undiscretize(np.asarray(p, dtype=np.int64), norm_constants[name], remap.B)
        text.append("{" + name + "}")
    return DecodedAnswer("".join(text), groups, sum(len(r) for r in runs))
