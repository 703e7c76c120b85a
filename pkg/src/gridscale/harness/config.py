"""Pipeline configuration: defaults, file loading and the content hash."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Mapping

import yaml

from ..qa_builder import Task, config_hash

ALL_TASKS = tuple(t.value for t in Task)
# metric-level names accepted on the command line
TASK_ALIASES = {"fault_classification": "fault_detection", "fault_localization": "fault_detection"}

DEFAULTS: dict[str, Any] = {
    "case": "case14",
    "seed": 0,
    # "auto" puts a wind unit at the most loaded PQ bus and a solar unit at the next one
    "renewables": "auto",
    "line_rating": {"factor": 1.5, "floor_mva": 10.0},
    "scenarios": {"count": 200, "test_fraction": 0.2},
    "tasks": list(ALL_TASKS),
    "qa": {"test_records": 1000},
    "simulation": {
        "trace_stride": 10,
        "opf": {"starts": 2, "min_step_mw": 0.01, "max_evals": 1500},
        "dynamics": {},
        "power_flow": {},
    },
    "codec": {"B": 1024, "vocab_size": 4096},
    "fractions": [1.0],
    "responder": {
        "mode": "oracle",         # oracle | noisy_oracle | scaling_emulator
        "cmd": None,              # external command; None runs the reference responder
        "sigma": 0.05,            # noisy_oracle: noise as a fraction of each group's scale
        "text_error_rate": 0.2,   # noisy_oracle: chance a text answer is replaced
        "alpha": 0.01,            # scaling_emulator: normalized MSE = alpha * N**k
        "k": -0.4,
        "text_alpha": 1.0,        # scaling_emulator: text error rate = text_alpha * N**k
        "timeout": 120.0,
    },
    "evaluation": {"weights": None, "floor": -1.0},
    # compare_multi also queries the responder for the hybrid family
    "scaling": {"divergence_threshold": 0.1, "compare_multi": False},
    "jobs": 1,
}

# keys that do not change any artifact
_UNHASHED = ("jobs",)


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(dict(base))
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def normalize_tasks(tasks) -> list[str]:
    if isinstance(tasks, str):
        tasks = [t for t in tasks.split(",") if t.strip()]
    out = []
    for t in tasks:
        t = TASK_ALIASES.get(t.strip(), t.strip())
        if t not in ALL_TASKS:
            raise ValueError(f"unknown task {t!r}; choose from {', '.join(ALL_TASKS)}")
        if t not in out:
            out.append(t)
    return [t for t in ALL_TASKS if t in out]


def parse_fractions(text) -> list[float]:
    if isinstance(text, str):
        vals = []
        for part in text.split(","):
            part = part.strip()
            if "/" in part:
                a, b = part.split("/")
                vals.append(float(a) / float(b))
            elif part:
                vals.append(float(part))
        text = vals
    out = sorted(set(float(f) for f in text))
    if not out or any(not 0 < f <= 1 for f in out):
        raise ValueError("fractions must be a non-empty list in (0, 1]")
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> dict[str, Any]:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        data = yaml.safe_load(text) or {}
        if not isinstance(data, Mapping):
            raise ValueError(f"config file {path} must hold a mapping")
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = deep_merge(cfg, data)
    if overrides:
        cfg = deep_merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    cfg["tasks"] = normalize_tasks(cfg["tasks"])
    cfg["fractions"] = parse_fractions(cfg["fractions"])
    return cfg


def hash_config(cfg: Mapping[str, Any]) -> str:
    return config_hash({k: v for k, v in cfg.items() if k not in _UNHASHED})


def dump_json(obj: Any) -> str:
    """Canonical JSON used for every artifact (stable key order, exact floats)."""
    return json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n"
