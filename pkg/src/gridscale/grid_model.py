"""Network data model, invariant checks, and case-file I/O.

Two on-disk formats are supported:

* ``native_json`` -- the ``gridcase/1`` JSON schema written by
  :func:`serialize_case`. Floats are written with ``repr`` so a round trip is
  bit-identical.
* ``matpower`` -- the bus/branch/gen/gencost tables of a MATPOWER ``.m`` case.
"""

from __future__ import annotations

import dataclasses
import json
import re
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

SCHEMA = "gridcase/1"


class CaseSyntaxError(ValueError):
    """Malformed case text. Carries a 1-based line and column."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class CaseValidationError(ValueError):
    """A NetworkCase violates one or more invariants."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


class BusKind(str, Enum):
    SLACK = "slack"
    PV = "PV"
    PQ = "PQ"


class GenKind(str, Enum):
    THERMAL = "thermal"
    WIND = "wind"
    SOLAR = "solar"
    BALANCING = "balancing"

    @property
    def renewable(self) -> bool:
        return self in (GenKind.WIND, GenKind.SOLAR)


@dataclass(frozen=True)
class CostCurve:
    c2: float = 0.0
    c1: float = 0.0
    c0: float = 0.0
    c_on_off: float = 0.0

    def __call__(self, p):
        return self.c2 * p * p + self.c1 * p + self.c0


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    base_kv: float
    v_min: float
    v_max: float
    load_p: float = 0.0
    load_q: float = 0.0
    gs: float = 0.0  # shunt conductance, MW at 1 pu
    bs: float = 0.0  # shunt susceptance, MVAr at 1 pu


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float
    rate_mva: float
    status: bool = True
    tap: float = 1.0
    shift: float = 0.0  # degrees


@dataclass(frozen=True)
class Generator:
    bus: int
    kind: GenKind
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    v_set: float = 1.0
    status: bool = True
    cost: CostCurve = field(default_factory=CostCurve)
    p_set: float = 0.0  # operating point carried by the case file, MW


@dataclass(frozen=True)
class NetworkCase:
    """Immutable grid description. All invariants are checked on construction."""

    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]

    def __post_init__(self):
        for attr in ("buses", "branches", "generators"):
            value = getattr(self, attr)
            if not isinstance(value, tuple):
                object.__setattr__(self, attr, tuple(value))
        violations = check_invariants(self)
        if violations:
            raise CaseValidationError(violations)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def slack_bus(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind is BusKind.SLACK)

    @cached_property
    def balancing_gen(self) -> int:
        return next(i for i, g in enumerate(self.generators) if g.kind is GenKind.BALANCING)

    @cached_property
    def dispatchable_gens(self) -> tuple[int, ...]:
        """Indices of in-service generators other than the balancing unit."""
        return tuple(
            i for i, g in enumerate(self.generators)
            if g.status and g.kind is not GenKind.BALANCING
        )

    @cached_property
    def renewable_gens(self) -> tuple[int, ...]:
        return tuple(i for i, g in enumerate(self.generators) if g.kind.renewable)

    def replace(self, **changes) -> "NetworkCase":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------


def check_invariants(case: NetworkCase) -> list[str]:
    """Return every violated invariant as a human-readable string (empty if valid)."""
    out: list[str] = []
    if not case.base_mva > 0:
        out.append(f"base_mva must be positive, got {case.base_mva}")
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        out.append("duplicate bus ids")
    known = set(ids)
    n_slack = sum(b.kind is BusKind.SLACK for b in case.buses)
    if n_slack != 1:
        out.append("no slack bus" if n_slack == 0 else f"{n_slack} slack buses (exactly one required)")
    for b in case.buses:
        if not b.v_min < b.v_max:
            out.append(f"bus {b.id}: v_min {b.v_min} >= v_max {b.v_max}")
        if not b.base_kv > 0:
            out.append(f"bus {b.id}: base_kv must be positive")
    for k, br in enumerate(case.branches):
        if br.from_bus not in known or br.to_bus not in known:
            out.append(f"branch {k}: unknown bus reference {br.from_bus}->{br.to_bus}")
        if br.from_bus == br.to_bus:
            out.append(f"branch {k}: from_bus equals to_bus ({br.from_bus})")
        if br.status and br.x == 0:
            out.append(f"branch {k}: zero reactance on in-service branch")
        if not br.rate_mva > 0:
            out.append(f"branch {k}: rate_mva must be positive")
        if not br.tap > 0:
            out.append(f"branch {k}: tap ratio must be positive")

    n_bal = 0
    for i, g in enumerate(case.generators):
        if g.bus not in known:
            out.append(f"generator {i}: unknown bus {g.bus}")
            continue
        if g.p_min > g.p_max:
            out.append(f"generator {i}: p_min {g.p_min} > p_max {g.p_max}")
        if not g.q_min < g.q_max:
            out.append(f"generator {i}: q_min {g.q_min} >= q_max {g.q_max}")
        if g.cost.c2 < 0:
            out.append(f"generator {i}: negative quadratic cost")
        if g.kind is GenKind.BALANCING:
            n_bal += 1
            bus = case.buses[ids.index(g.bus)]
            if bus.kind is not BusKind.SLACK:
                out.append(f"generator {i}: balancing generator not on the slack bus")
            if not g.status:
                out.append(f"generator {i}: balancing generator out of service")
        elif not g.kind.renewable:
            bus = case.buses[ids.index(g.bus)]
            if bus.kind is BusKind.PQ:
                out.append(f"generator {i}: thermal generator on PQ bus {g.bus}")
    if n_bal != 1:
        out.append(f"{n_bal} balancing generators (exactly one required)")

    thermal = [g.cost for g in case.generators if not g.kind.renewable]
    renew = [(i, g.cost) for i, g in enumerate(case.generators) if g.kind.renewable]
    if thermal and renew:
        c1_floor = min(c.c1 for c in thermal)
        c2_floor = min(c.c2 for c in thermal)
        c0_floor = min(c.c0 for c in thermal)
        for i, c in renew:
            if not (c.c1 < c1_floor and c.c2 <= c2_floor and c.c0 <= c0_floor):
                out.append(f"generator {i}: renewable cost coefficients not below thermal units'")

    if not out and not is_connected(case):
        out.append("network graph over in-service branches is not connected")
    return out


def is_connected(case: NetworkCase) -> bool:
    n = len(case.buses)
    if n <= 1:
        return True
    idx = {b.id: i for i, b in enumerate(case.buses)}
    live = [br for br in case.branches if br.status]
    if not live:
        return False
    rows = [idx[br.from_bus] for br in live]
    cols = [idx[br.to_bus] for br in live]
    adj = coo_matrix((np.ones(len(live)), (rows, cols)), shape=(n, n))
    n_comp, _ = connected_components(adj, directed=False)
    return n_comp == 1


def reachable_buses(case: NetworkCase, start: int) -> set[int]:
    """Bus ids reachable from ``start`` over in-service branches (plain BFS)."""
    nbrs: dict[int, list[int]] = {b.id: [] for b in case.buses}
    for br in case.branches:
        if br.status:
            nbrs[br.from_bus].append(br.to_bus)
            nbrs[br.to_bus].append(br.from_bus)
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in nbrs[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return seen


# ---------------------------------------------------------------------------
# native JSON
# ---------------------------------------------------------------------------


def _cost_to_dict(c: CostCurve) -> dict:
    return {"c2": c.c2, "c1": c.c1, "c0": c.c0, "c_on_off": c.c_on_off}


def case_to_dict(case: NetworkCase) -> dict:
    buses = []
    for b in case.buses:
        d = dataclasses.asdict(b)
        d["kind"] = b.kind.value
        buses.append(d)
    gens = []
    for g in case.generators:
        d = dataclasses.asdict(g)
        d["kind"] = g.kind.value
        d["cost"] = _cost_to_dict(g.cost)
        gens.append(d)
    return {
        "schema": SCHEMA,
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": buses,
        "branches": [dataclasses.asdict(br) for br in case.branches],
        "generators": gens,
    }


def case_from_dict(data: Mapping[str, Any]) -> NetworkCase:
    if data.get("schema") != SCHEMA:
        raise CaseValidationError([f"unsupported schema {data.get('schema')!r}, expected {SCHEMA!r}"])
    try:
        buses = [Bus(**{**b, "kind": BusKind(b["kind"])}) for b in data["buses"]]
        branches = [Branch(**br) for br in data["branches"]]
        gens = [
            Generator(**{**g, "kind": GenKind(g["kind"]), "cost": CostCurve(**g["cost"])})
            for g in data["generators"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseValidationError([f"malformed record: {exc}"]) from exc
    return NetworkCase(
        name=data["name"], base_mva=data["base_mva"],
        buses=tuple(buses), branches=tuple(branches), generators=tuple(gens),
    )


def serialize_case(case: NetworkCase) -> str:
    return json.dumps(case_to_dict(case), indent=1)


def _parse_native(text: str) -> NetworkCase:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(exc.msg, exc.lineno, exc.colno) from exc
    return case_from_dict(data)


# ---------------------------------------------------------------------------
# MATPOWER subset
# ---------------------------------------------------------------------------

_NUMBER = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?(?:Inf|inf|NaN|nan)")
_ASSIGN = re.compile(r"mpc\.(\w+)\s*=\s*")


class _Scanner:
    def __init__(self, text: str):
        # drop comments but keep line/column positions intact
        lines = []
        for line in text.splitlines():
            cut = _comment_start(line)
            lines.append(line if cut < 0 else line[:cut] + " " * (len(line) - cut))
        self.text = "\n".join(lines)

    def position(self, offset: int) -> tuple[int, int]:
        line = self.text.count("\n", 0, offset) + 1
        col = offset - (self.text.rfind("\n", 0, offset) + 1) + 1
        return line, col

    def error(self, message: str, offset: int) -> CaseSyntaxError:
        return CaseSyntaxError(message, *self.position(offset))


def _comment_start(line: str) -> int:
    in_str = False
    for i, ch in enumerate(line):
        if ch == "'":
            in_str = not in_str
        elif ch == "%" and not in_str:
            return i
    return -1


def _read_matrix(sc: _Scanner, pos: int) -> tuple[list[list[float]], int]:
    text = sc.text
    rows: list[list[float]] = []
    row: list[float] = []
    i = pos + 1
    while True:
        if i >= len(text):
            raise sc.error("unterminated matrix (missing ']')", pos)
        ch = text[i]
        if ch == "]":
            if row:
                rows.append(row)
            return rows, i + 1
        if ch in ";\n":
            if row:
                rows.append(row)
                row = []
            i += 1
            continue
        if ch in " \t\r,":
            i += 1
            continue
        if ch == "." and text.startswith("...", i):
            nl = text.find("\n", i)
            i = len(text) if nl < 0 else nl + 1
            continue
        m = _NUMBER.match(text, i)
        if not m:
            raise sc.error(f"unexpected character {ch!r} in matrix", i)
        row.append(float(m.group()))
        i = m.end()


def _skip_value(sc: _Scanner, pos: int) -> int:
    """Skip an unsupported right-hand side (cell array, string, expression)."""
    text = sc.text
    opener = text[pos] if pos < len(text) else ""
    closer = {"{": "}", "[": "]"}.get(opener)
    if closer:
        end = text.find(closer, pos)
        if end < 0:
            raise sc.error(f"unterminated {opener!r}", pos)
        return end + 1
    end = text.find(";", pos)
    nl = text.find("\n", pos)
    cands = [e for e in (end, nl) if e >= 0]
    return min(cands) + 1 if cands else len(text)


def _parse_matpower_tables(text: str) -> dict[str, Any]:
    sc = _Scanner(text)
    tables: dict[str, Any] = {}
    pos = 0
    src = sc.text
    while True:
        m = _ASSIGN.search(src, pos)
        if not m:
            break
        key, i = m.group(1), m.end()
        if key in ("bus", "gen", "branch", "gencost"):
            if i >= len(src) or src[i] != "[":
                raise sc.error(f"expected '[' after mpc.{key} =", i)
            rows, i = _read_matrix(sc, i)
            widths = {len(r) for r in rows}
            if len(widths) > 1:
                raise sc.error(f"ragged rows in mpc.{key} (widths {sorted(widths)})", m.start())
            tables[key] = (rows, m.start())
        elif key == "baseMVA":
            num = _NUMBER.match(src, i)
            if not num:
                raise sc.error("expected number after mpc.baseMVA =", i)
            tables[key] = float(num.group())
            i = num.end()
        else:
            i = _skip_value(sc, i)
        pos = i
    for key in ("baseMVA", "bus", "gen", "branch"):
        if key not in tables:
            raise CaseSyntaxError(f"missing mpc.{key}", 1, 1)
    tables["_scanner"] = sc
    return tables


def _parse_matpower(text: str, name: str | None, default_base_kv: float) -> NetworkCase:
    t = _parse_matpower_tables(text)
    sc: _Scanner = t["_scanner"]
    base_mva = t["baseMVA"]

    def need(key, width):
        rows, at = t[key]
        if rows and len(rows[0]) < width:
            raise sc.error(f"mpc.{key} needs at least {width} columns, got {len(rows[0])}", at)
        return rows

    type_map = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}
    buses = []
    for r in need("bus", 13):
        btype = int(r[1])
        if btype not in type_map:
            raise CaseValidationError([f"bus {int(r[0])}: unsupported bus type {btype}"])
        buses.append(Bus(
            id=int(r[0]), kind=type_map[btype],
            base_kv=r[9] if r[9] > 0 else default_base_kv,
            v_min=r[12], v_max=r[11], load_p=r[2], load_q=r[3], gs=r[4], bs=r[5],
        ))

    branches = []
    for r in need("branch", 11):
        branches.append(Branch(
            from_bus=int(r[0]), to_bus=int(r[1]), r=r[2], x=r[3], b=r[4],
            rate_mva=r[5], status=bool(r[10]), tap=r[8] if r[8] != 0 else 1.0, shift=r[9],
        ))

    gen_rows = need("gen", 10)
    costs = [CostCurve()] * len(gen_rows)
    if "gencost" in t:
        rows, at = t["gencost"]
        costs = []
        for k, r in enumerate(rows[: len(gen_rows)]):
            if int(r[0]) != 2:
                raise sc.error(f"gencost row {k + 1}: only polynomial model 2 is supported", at)
            n = int(r[3])
            coeffs = list(r[4 : 4 + n])
            if len(coeffs) != n:
                raise sc.error(f"gencost row {k + 1}: expected {n} coefficients", at)
            if n > 3 and any(coeffs[: n - 3]):
                raise sc.error(f"gencost row {k + 1}: polynomial degree above 2", at)
            c2, c1, c0 = ([0.0] * 3 + coeffs)[-3:]
            costs.append(CostCurve(c2=c2, c1=c1, c0=c0, c_on_off=max(r[1], r[2])))
        if len(costs) < len(gen_rows):
            raise sc.error("mpc.gencost has fewer rows than mpc.gen", at)

    kinds = {b.id: b.kind for b in buses}
    gens = []
    have_balancing = False
    for r, cost in zip(gen_rows, costs):
        bus = int(r[0])
        on = bool(r[7])
        kind = GenKind.THERMAL
        if on and not have_balancing and kinds.get(bus) is BusKind.SLACK:
            kind = GenKind.BALANCING
            have_balancing = True
        gens.append(Generator(
            bus=bus, kind=kind, p_min=r[9], p_max=r[8], q_min=r[4], q_max=r[3],
            v_set=r[5], status=on, cost=cost, p_set=r[1],
        ))
    return NetworkCase(name=name or "matpower_case", base_mva=base_mva,
                       buses=tuple(buses), branches=tuple(branches), generators=tuple(gens))


def parse_case(source: str, format: str = "native_json", *, name: str | None = None,
               default_base_kv: float = 1.0) -> NetworkCase:
    """Parse case text.

    ``default_base_kv`` replaces a zero base voltage in MATPOWER tables (the
    published IEEE-14 data leaves it blank).
    """
    if format == "native_json":
        return _parse_native(source)
    if format == "matpower":
        if name is None:
            m = re.search(r"function\s+\w+\s*=\s*(\w+)", source)
            name = m.group(1) if m else None
        return _parse_matpower(source, name, default_base_kv)
    raise ValueError(f"unknown case format {format!r}")


BUNDLED_CASES = ("case14", "case30", "case118")


def load_case(name_or_path: str) -> NetworkCase:
    """Load a bundled IEEE case by name, or a ``.m`` / ``.json`` file from disk."""
    if name_or_path in BUNDLED_CASES:
        text = resources.files("gridscale").joinpath("cases", f"{name_or_path}.m").read_text()
        return parse_case(text, "matpower", name=name_or_path)
    path = Path(name_or_path)
    text = path.read_text()
    fmt = "matpower" if path.suffix == ".m" else "native_json"
    return parse_case(text, fmt, name=path.stem if fmt == "matpower" else None)


# ---------------------------------------------------------------------------
# case edits used by scenario configs
# ---------------------------------------------------------------------------


def place_renewables(case: NetworkCase, placements: Iterable[Mapping[str, Any]]) -> NetworkCase:
    """Append wind/solar units. Each placement gives ``bus``, ``kind``, ``p_max``
    and optionally ``q_range`` (fraction of p_max) and cost coefficients."""
    gens = list(case.generators)
    for p in placements:
        kind = GenKind(p["kind"])
        if not kind.renewable:
            raise ValueError(f"placement kind must be wind or solar, got {kind.value}")
        p_max = float(p["p_max"])
        q = float(p.get("q_range", 0.3)) * p_max
        gens.append(Generator(
            bus=int(p["bus"]), kind=kind, p_min=0.0, p_max=p_max, q_min=-q, q_max=q,
            v_set=1.0, status=True,
            cost=CostCurve(c2=float(p.get("c2", 0.0)), c1=float(p.get("c1", 0.0)),
                           c0=float(p.get("c0", 0.0)), c_on_off=0.0),
            p_set=p_max,
        ))
    return case.replace(generators=tuple(gens))


def rerate_branches(case: NetworkCase, ratings: Iterable[float]) -> NetworkCase:
    ratings = list(ratings)
    if len(ratings) != case.n_branch:
        raise ValueError("one rating per branch required")
    branches = tuple(dataclasses.replace(br, rate_mva=float(r)) for br, r in zip(case.branches, ratings))
    return case.replace(branches=branches)


def permute_buses(case: NetworkCase, order: Iterable[int]) -> NetworkCase:
    """Reorder the bus list (ids unchanged); ``order[k]`` is the old position of new bus k."""
    order = list(order)
    return case.replace(buses=tuple(case.buses[i] for i in order))
