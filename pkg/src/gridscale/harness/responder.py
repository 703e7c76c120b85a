"""Reference responder that stands in for a fine-tuned model.

Modes:

* ``oracle`` returns the stored ground-truth answer tokens.
* ``noisy_oracle`` adds Gaussian noise of ``sigma`` times each group's scale to
  the answer floats and swaps text answers with probability ``text_error_rate``.
* ``scaling_emulator`` adds noise with variance ``alpha * N**k`` in normalized
  units (times each group's scale squared), where N is the training-set size,
  so the measured MSE follows a power law with exponent k. Text answers are
  swapped with probability ``text_alpha * N**k``.

Noise is seeded per request id, so answers do not depend on request order.
This is an emulator for exercising the evaluation stack, not a model.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import zlib
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..eval_metrics import parse_fault_answer
from ..float_codec import ByteTokenizer, VocabularyRemap, decode_answer, encode_segments, split_runs
from ..scenario_engine import FaultType
from .protocol import Request, serve

MODES = ("oracle", "noisy_oracle", "scaling_emulator")
TRAIN_SIZE_ENV = "GRIDSCALE_TRAIN_SIZE"
FAMILY_ENV = "GRIDSCALE_FAMILY"          # "single" or "multi"; informational for external responders


@dataclass(frozen=True)
class AnswerKeyEntry:
    task: str
    answer_token_ids: tuple[int, ...]
    slots: tuple[tuple[str, int], ...]


def load_answer_key(path) -> dict[str, AnswerKeyEntry]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out[d["id"]] = AnswerKeyEntry(d["task"], tuple(d["answer_token_ids"]),
                                              tuple((n, int(k)) for n, k in d["slots"]))
    return out


def parse_train_size(value: str | None) -> int | dict[str, int] | None:
    if value is None or value == "":
        return None
    value = value.strip()
    if value.startswith("{"):
        return {k: int(v) for k, v in json.loads(value).items()}
    return int(value)


class ReferenceResponder:
    def __init__(self, key: Mapping[str, AnswerKeyEntry], remap: VocabularyRemap, mode: str = "oracle",
                 sigma: float = 0.05, text_error_rate: float = 0.2, alpha: float = 0.01, k: float = -0.4,
                 text_alpha: float = 1.0, train_size: int | Mapping[str, int] | None = None, seed: int = 0):
        if mode not in MODES:
            raise ValueError(f"unknown responder mode {mode!r}")
        if mode == "scaling_emulator" and train_size is None:
            raise ValueError(f"scaling_emulator needs a training-set size (--train-size or {TRAIN_SIZE_ENV})")
        self.key, self.remap, self.mode = key, remap, mode
        self.sigma, self.text_error_rate = sigma, text_error_rate
        self.alpha, self.k, self.text_alpha = alpha, k, text_alpha
        self.train_size = train_size
        self.seed = seed
        self.tok = ByteTokenizer()

    def _n(self, task: str) -> int:
        n = self.train_size[task] if isinstance(self.train_size, Mapping) else self.train_size
        if not n or n <= 0:
            raise ValueError(f"no positive training-set size for task {task}")
        return int(n)

    def _noise(self, task: str, scale: float) -> tuple[float, float]:
        """(float noise std in physical units, text swap probability)."""
        if self.mode == "noisy_oracle":
            return self.sigma * scale, self.text_error_rate
        level = self.alpha * self._n(task) ** self.k
        return float(np.sqrt(level)) * scale, float(min(1.0, self.text_alpha * self._n(task) ** self.k))

    def __call__(self, req: Request) -> tuple[int, ...]:
        entry = self.key.get(req.id)
        if entry is None:
            return ()
        if self.mode == "oracle":
            return entry.answer_token_ids
        rng = np.random.default_rng([self.seed, zlib.crc32(req.id.encode())])
        if not any(k for _, k in entry.slots):
            return self._corrupt_text(entry, req, rng)
        ans = decode_answer(entry.answer_token_ids, self.remap, req.norm_constants, entry.slots, self.tok)
        segments = []
        pieces = split_runs(entry.answer_token_ids, self.remap, self.tok)
        groups = iter([(n, k) for n, k in entry.slots if k > 0])
        for p in pieces:
            if isinstance(p, str):
                segments.append(p)
                continue
            name, _ = next(groups)
            scale = req.norm_constants[name]
            std, _ = self._noise(entry.task, scale)
            vals = ans.float_groups[name] + rng.normal(0.0, std, len(p))
            segments.append((name, vals))
        enc = encode_segments(segments, self.remap, self.tok, scales=req.norm_constants)
        return enc.token_ids

    def _corrupt_text(self, entry: AnswerKeyEntry, req: Request, rng) -> tuple[int, ...]:
        _, p = self._noise(entry.task, 1.0)
        if rng.random() >= p:
            return entry.answer_token_ids
        text = self.tok.decode(entry.answer_token_ids)
        parsed = parse_fault_answer(text)
        if parsed is None:
            return entry.answer_token_ids
        others = [f.value for f in FaultType if f.value != parsed["fault_type"]]
        swap = others[int(rng.integers(len(others)))]
        return tuple(self.tok.encode(text.replace(parsed["fault_type"], swap, 1)))


def build_command(answer_key: str, remap: str, mode: str, seed: int = 0, sigma: float = 0.05,
                  text_error_rate: float = 0.2, alpha: float = 0.01, k: float = -0.4,
                  text_alpha: float = 1.0) -> list[str]:
    return [sys.executable, "-m", "gridscale.harness.responder", "--answer-key", str(answer_key),
            "--remap", str(remap), "--mode", mode, "--seed", str(seed), "--sigma", repr(sigma),
            "--text-error-rate", repr(text_error_rate), "--alpha", repr(alpha), "--k", repr(k),
            "--text-alpha", repr(text_alpha)]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="gridscale-responder", description=__doc__.splitlines()[0])
    ap.add_argument("--answer-key", required=True)
    ap.add_argument("--remap", required=True)
    ap.add_argument("--mode", choices=MODES, default="oracle")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sigma", type=float, default=0.05)
    ap.add_argument("--text-error-rate", type=float, default=0.2)
    ap.add_argument("--alpha", type=float, default=0.01)
    ap.add_argument("--k", type=float, default=-0.4)
    ap.add_argument("--text-alpha", type=float, default=1.0)
    ap.add_argument("--train-size", default=None, help=f"int or JSON task->int; overrides ${TRAIN_SIZE_ENV}")
    args = ap.parse_args(argv)
    with open(args.remap, encoding="utf-8") as fh:
        remap = VocabularyRemap.from_json(fh.read())
    train = parse_train_size(args.train_size if args.train_size is not None else os.environ.get(TRAIN_SIZE_ENV))
    responder = ReferenceResponder(load_answer_key(args.answer_key), remap, args.mode, args.sigma,
                                   args.text_error_rate, args.alpha, args.k, args.text_alpha, train, args.seed)
    serve(responder, sys.stdin, sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
