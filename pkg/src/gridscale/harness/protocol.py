"""Newline-delimited JSON exchange with an external responder process.

Each request line is ``{"id", "task", "prompt_token_ids", "norm_constants"}``;
each response line is ``{"id", "answer_token_ids"}``. Responses may come back
in any order and are matched by id.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import subprocess
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

log = logging.getLogger(__name__)


class ResponderError(RuntimeError):
    pass


class ResponderCrashError(ResponderError):
    def __init__(self, message: str, unanswered: Sequence[str]):
        super().__init__(f"{message}; {len(unanswered)} requests unanswered")
        self.unanswered = list(unanswered)


@dataclass(frozen=True)
class Request:
    id: str
    task: str
    prompt_token_ids: tuple[int, ...]
    norm_constants: dict[str, float]

    def to_line(self) -> str:
        return json.dumps({"id": self.id, "task": self.task, "prompt_token_ids": list(self.prompt_token_ids),
                           "norm_constants": self.norm_constants}, separators=(",", ":")) + "\n"

    @classmethod
    def from_line(cls, line: str) -> "Request":
        d = json.loads(line)
        return cls(str(d["id"]), d["task"], tuple(int(t) for t in d["prompt_token_ids"]),
                   {k: float(v) for k, v in d["norm_constants"].items()})


@dataclass(frozen=True)
class Response:
    id: str
    answer_token_ids: tuple[int, ...]

    def to_line(self) -> str:
        return json.dumps({"id": self.id, "answer_token_ids": list(self.answer_token_ids)},
                          separators=(",", ":")) + "\n"

    @classmethod
    def from_line(cls, line: str) -> "Response":
        d = json.loads(line)
        ids = d["answer_token_ids"]
        if not isinstance(ids, list) or not all(isinstance(t, int) for t in ids):
            raise ValueError("answer_token_ids must be a list of integers")
        return cls(str(d["id"]), tuple(ids))


@dataclass
class SessionResult:
    answers: dict[str, tuple[int, ...] | None]        # None = timed out
    timeouts: list[str] = field(default_factory=list)
    malformed: int = 0
    duplicates: int = 0


def query_responder(requests: Sequence[Request], cmd: Sequence[str], timeout: float = 60.0,
                    env: Mapping[str, str] | None = None) -> SessionResult:
    """Send every request to a fresh responder process and collect the answers.

    ``timeout`` bounds the wait after the last request is written. Requests
    still unanswered then are reported as timeouts. If the process exits while
    requests are outstanding, ``ResponderCrashError`` lists them.
    """
    ids = [r.id for r in requests]
    if len(set(ids)) != len(ids):
        raise ValueError("request ids must be unique within a session")
    full_env = dict(os.environ)
    full_env.update(env or {})
    proc = subprocess.Popen(list(cmd), stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                            text=True, encoding="utf-8", env=full_env, bufsize=1)
    lines: queue.Queue = queue.Queue()

    def reader():
        for line in proc.stdout:
            lines.put(line)
        lines.put(None)

    def writer():
        try:
            for r in requests:
                proc.stdin.write(r.to_line())
            proc.stdin.close()
        except (BrokenPipeError, OSError):
            pass

    stderr_chunks: list[str] = []
    threading.Thread(target=reader, daemon=True).start()
    threading.Thread(target=lambda: stderr_chunks.append(proc.stderr.read()), daemon=True).start()
    wt = threading.Thread(target=writer, daemon=True)
    wt.start()

    pending = set(ids)
    answers: dict[str, tuple[int, ...] | None] = {}
    result = SessionResult(answers)
    deadline = None
    eof = False
    try:
        while pending:
            if deadline is None and not wt.is_alive():
                deadline = time.monotonic() + timeout
            wait = 0.05 if deadline is None else max(0.0, deadline - time.monotonic())
            if deadline is not None and wait == 0.0:
                break
            try:
                line = lines.get(timeout=min(wait, 0.5) if deadline is not None else wait)
            except queue.Empty:
                continue
            if line is None:
                eof = True
                break
            if not line.strip():
                continue
            try:
                resp = Response.from_line(line)
            except (ValueError, KeyError, TypeError):
                result.malformed += 1
                continue
            if resp.id not in pending:
                result.duplicates += 1
                continue
            pending.discard(resp.id)
            answers[resp.id] = resp.answer_token_ids
    finally:
        if proc.poll() is None:
            proc.kill()
        proc.wait()
    if pending and eof:
        code = proc.returncode
        err = "".join(stderr_chunks).strip().splitlines()[-3:]
        if code not in (0, None) or err:
            raise ResponderCrashError(f"responder exited with code {code}: {' | '.join(err)}", sorted(pending))
        # clean exit without answering everything: treat the rest as timeouts
    for rid in sorted(pending):
        answers[rid] = None
        result.timeouts.append(rid)
    if result.timeouts:
        log.warning("%d of %d requests timed out", len(result.timeouts), len(ids))
    return result


def serve(handler, stdin: Iterable[str], stdout) -> int:
    """Responder-side loop: one response line per request line."""
    n = 0
    for line in stdin:
        if not line.strip():
            continue
        req = Request.from_line(line)
        stdout.write(Response(req.id, tuple(handler(req))).to_line())
        stdout.flush()
        n += 1
    return n
