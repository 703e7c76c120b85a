"""Seeded operating-scenario generation.

Every random draw is seeded from ``(master_seed, stream, key)`` so any scenario
can be rebuilt from its id alone, in any order and on any worker.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .grid_model import GenKind, Generator, NetworkCase
from .steady_state import (PowerFlowOptions, SteadyStateSolution, UnconvergedSolutionError,
                           solve_power_flow)

log = logging.getLogger(__name__)

SCENARIO_SCHEMA = "gridscenario/1"
STEP_MINUTES = 5
STEPS_PER_DAY = 24 * 60 // STEP_MINUTES

# stream tags for seed derivation
_LOAD, _STATUS, _WEATHER, _FAULT, _MEAS, _SPLIT = 1, 2, 3, 4, 5, 6


class ScenarioConfigError(ValueError):
    pass


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


class FaultType(str, Enum):
    THREE_PHASE_GROUND = "three_phase_ground"
    SINGLE_LINE_GROUND = "single_line_ground"
    LINE_TO_LINE = "line_to_line"
    DOUBLE_LINE_GROUND = "double_line_ground"
    BRANCH_TRIP = "branch_trip"


SHORT_CIRCUITS = (
    FaultType.THREE_PHASE_GROUND,
    FaultType.SINGLE_LINE_GROUND,
    FaultType.LINE_TO_LINE,
    FaultType.DOUBLE_LINE_GROUND,
)


@dataclass(frozen=True, order=True)
class FaultDescriptor:
    """A fault at a bus (by bus id) or on a branch (by branch index).

    Short circuits on a branch sit at its from-bus end and are cleared by
    opening the branch.
    """

    fault_type: FaultType
    element: str  # "bus" | "branch"
    location: int
    t_fault: float = 0.1
    t_clear: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "fault_type", FaultType(self.fault_type))
        if self.element not in ("bus", "branch"):
            raise ValueError(f"fault element must be 'bus' or 'branch', got {self.element!r}")
        if self.fault_type is FaultType.BRANCH_TRIP and self.element != "branch":
            raise ValueError("branch_trip faults must be located on a branch")
        if not self.t_fault < self.t_clear:
            raise ValueError("t_fault must precede t_clear")

    def check(self, case: NetworkCase) -> None:
        if self.element == "bus" and self.location not in case.bus_index:
            raise ValueError(f"fault bus {self.location} not in case")
        if self.element == "branch" and not 0 <= self.location < case.n_branch:
            raise ValueError(f"fault branch {self.location} not in case")

    def label(self, case: NetworkCase) -> str:
        if self.element == "bus":
            return str(self.location)
        br = case.branches[self.location]
        return f"{br.from_bus}-{br.to_bus}"

    def to_dict(self) -> dict:
        return {"fault_type": self.fault_type.value, "element": self.element, "location": self.location,
                "t_fault": self.t_fault, "t_clear": self.t_clear}


@dataclass(frozen=True)
class WeatherSeries:
    solar_zenith_angle: np.ndarray  # degrees
    wind_speed: np.ndarray          # m/s
    humidity: np.ndarray            # %
    temperature: np.ndarray         # deg C
    horizon: int                    # minutes

    def __post_init__(self):
        for name in ("solar_zenith_angle", "wind_speed", "humidity", "temperature"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            if arr.shape != (self.horizon,):
                raise ValueError(f"{name} has length {arr.shape}, expected {self.horizon}")
        if np.any(self.solar_zenith_angle < 0) or np.any(self.solar_zenith_angle > 180):
            raise ValueError("zenith angle outside [0, 180]")
        if np.any(self.wind_speed < 0):
            raise ValueError("negative wind speed")
        if np.any(self.humidity < 0) or np.any(self.humidity > 100):
            raise ValueError("humidity outside [0, 100]")

    def to_dict(self) -> dict:
        return {"horizon": self.horizon,
                "solar_zenith_angle": self.solar_zenith_angle.tolist(),
                "wind_speed": self.wind_speed.tolist(),
                "humidity": self.humidity.tolist(),
                "temperature": self.temperature.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "WeatherSeries":
        return cls(**{k: d[k] for k in ("solar_zenith_angle", "wind_speed", "humidity", "temperature", "horizon")})


@dataclass(frozen=True)
class Scenario:
    scenario_id: int
    timestamp: int                       # index on the 5-minute grid
    load_scale: tuple[float, ...]        # per bus
    renewable_availability: dict[int, float]  # generator index -> MW
    unit_status: tuple[bool, ...]        # per generator
    prev_unit_status: tuple[bool, ...]   # status one step earlier
    split: Split
    rng_seed: int
    fault: FaultDescriptor | None = None
    weather: WeatherSeries | None = None

    def to_dict(self) -> dict:
        return {
            "schema": SCENARIO_SCHEMA,
            "scenario_id": self.scenario_id,
            "timestamp": self.timestamp,
            "load_scale": list(self.load_scale),
            "renewable_availability": {str(k): v for k, v in sorted(self.renewable_availability.items())},
            "unit_status": list(self.unit_status),
            "prev_unit_status": list(self.prev_unit_status),
            "split": self.split.value,
            "rng_seed": self.rng_seed,
            "fault": self.fault.to_dict() if self.fault else None,
            "weather": self.weather.to_dict() if self.weather else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Scenario":
        if d.get("schema") != SCENARIO_SCHEMA:
            raise ValueError(f"unsupported scenario schema {d.get('schema')!r}")
        return cls(
            scenario_id=d["scenario_id"], timestamp=d["timestamp"],
            load_scale=tuple(d["load_scale"]),
            renewable_availability={int(k): v for k, v in d["renewable_availability"].items()},
            unit_status=tuple(d["unit_status"]), prev_unit_status=tuple(d["prev_unit_status"]),
            split=Split(d["split"]), rng_seed=d["rng_seed"],
            fault=FaultDescriptor(**d["fault"]) if d.get("fault") else None,
            weather=WeatherSeries.from_dict(d["weather"]) if d.get("weather") else None,
        )


@dataclass(frozen=True)
class Measurement:
    v_mag_meas: np.ndarray
    p_inj_meas: np.ndarray
    q_inj_meas: np.ndarray
    noise_sigma: float


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FaultRule:
    types: tuple[FaultType, ...]
    element: str                     # "bus" | "branch"
    locations: tuple[int, ...] | None = None  # None = every bus / in-service branch
    limit: int | None = None         # keep only the first `limit` locations

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FaultRule":
        locs = d.get("locations")
        return cls(types=tuple(FaultType(t) for t in d["types"]), element=d["element"],
                   locations=None if locs in (None, "all") else tuple(int(x) for x in locs),
                   limit=d.get("limit"))


DEFAULT_FAULT_RULES = (
    FaultRule(types=SHORT_CIRCUITS, element="bus"),
    FaultRule(types=(FaultType.BRANCH_TRIP,), element="branch"),
)


@dataclass(frozen=True)
class ScenarioConfig:
    master_seed: int = 0
    test_fraction: float = 0.2
    start_day: int = 172             # day of year of timestamp 0
    timestamp_stride: int = 7        # grid steps between consecutive scenario ids (35 min spreads ids over the day)
    # load profile
    load_level: float = 1.0
    diurnal_amplitude: float = 0.25
    load_ar_phi: float = 0.95        # per 5-minute step
    load_ar_sigma: float = 0.03      # stationary std of the relative deviation
    # unit commitment
    unit_outage_prob: float = 0.0
    # weather
    latitude: float = 35.0
    wind_mean: float = 8.0
    wind_std: float = 2.5
    wind_phi: float = 0.98           # per minute
    temp_mean: float = 20.0
    temp_amplitude: float = 6.0
    temp_std: float = 1.5
    humidity_mean: float = 60.0
    humidity_std: float = 8.0
    weather_horizon: int = 60
    include_weather: bool = False
    # wind turbine curve, m/s
    cut_in: float = 3.0
    rated_speed: float = 12.0
    cut_out: float = 25.0
    # faults
    assign_faults: bool = False
    fault_rules: tuple[FaultRule, ...] = DEFAULT_FAULT_RULES
    t_fault: float = 0.1
    clearing_time: float = 0.1
    # measurements
    measurement_sigma: float = 0.01
    # feasibility pre-check: run this many scenarios through the power flow
    precheck: int = 0
    precheck_min_rate: float = 0.9

    def __post_init__(self):
        if not 0 <= self.test_fraction < 1:
            raise ScenarioConfigError("test_fraction must be in [0, 1)")
        if self.load_level <= 0:
            raise ScenarioConfigError("load_level must be positive")
        if not 0 <= self.diurnal_amplitude < 1:
            raise ScenarioConfigError("diurnal_amplitude must be in [0, 1)")
        if not -1 < self.load_ar_phi < 1 or not -1 < self.wind_phi < 1:
            raise ScenarioConfigError("AR coefficients must lie in (-1, 1)")
        if not 0 <= self.unit_outage_prob < 1:
            raise ScenarioConfigError("unit_outage_prob must be in [0, 1)")
        if self.timestamp_stride < 1:
            raise ScenarioConfigError("timestamp_stride must be at least 1")
        if self.weather_horizon <= 0:
            raise ScenarioConfigError("weather_horizon must be positive")
        if not self.cut_in < self.rated_speed < self.cut_out:
            raise ScenarioConfigError("wind curve needs cut_in < rated_speed < cut_out")
        if self.measurement_sigma < 0:
            raise ScenarioConfigError("measurement_sigma must be non-negative")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> "ScenarioConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ScenarioConfigError(f"unknown scenario config keys: {sorted(unknown)}")
        if "fault_rules" in d:
            d["fault_rules"] = tuple(r if isinstance(r, FaultRule) else FaultRule.from_dict(r)
                                     for r in d["fault_rules"])
        return cls(**d)


def _rng(cfg: ScenarioConfig, stream: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([cfg.master_seed, stream, *key])


# ---------------------------------------------------------------------------
# split and seeds
# ---------------------------------------------------------------------------


def split_of(scenario_id: int, test_fraction: float) -> Split:
    """Deterministic stride split: exactly floor(N*f) of ids 0..N-1 are test."""
    f = Fraction(test_fraction).limit_denominator(10**6)
    hit = (scenario_id + 1) * f // 1 > scenario_id * f // 1
    return Split.TEST if hit else Split.TRAIN


def scenario_seed(cfg: ScenarioConfig, scenario_id: int) -> int:
    return int(np.random.SeedSequence([cfg.master_seed, scenario_id]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# load profile
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _load_noise_day(master_seed: int, day: int, n_bus: int, phi: float, sigma: float) -> np.ndarray:
    rng = np.random.default_rng([master_seed, _LOAD, day])
    out = np.empty((STEPS_PER_DAY, n_bus))
    x = rng.normal(0.0, sigma, n_bus)
    innov = sigma * np.sqrt(1 - phi * phi)
    for k in range(STEPS_PER_DAY):
        out[k] = x
        x = phi * x + rng.normal(0.0, innov, n_bus)
    out.setflags(write=False)
    return out


def diurnal_shape(timestamp: int, amplitude: float) -> float:
    """1.0 at the 18:00 peak, 1 - amplitude at 06:00."""
    hour = (timestamp % STEPS_PER_DAY) * STEP_MINUTES / 60.0
    return 1.0 - amplitude * 0.5 * (1.0 - np.cos(2 * np.pi * (hour - 18.0) / 24.0))


def load_scale_at(cfg: ScenarioConfig, timestamp: int, n_bus: int) -> np.ndarray:
    day, step = divmod(timestamp, STEPS_PER_DAY)
    noise = _load_noise_day(cfg.master_seed, day, n_bus, cfg.load_ar_phi, cfg.load_ar_sigma)[step]
    scale = cfg.load_level * diurnal_shape(timestamp, cfg.diurnal_amplitude) * (1.0 + noise)
    return np.maximum(scale, 0.05)


# ---------------------------------------------------------------------------
# weather and renewables
# ---------------------------------------------------------------------------


def solar_zenith(minute_of_year: np.ndarray, latitude: float) -> np.ndarray:
    """Solar zenith angle (degrees) from declination and hour angle, local solar time."""
    day = minute_of_year // 1440 + 1
    hour = (minute_of_year % 1440) / 60.0
    decl = np.deg2rad(23.44) * np.sin(2 * np.pi * (284 + day) / 365.0)
    hour_angle = np.deg2rad(15.0 * (hour - 12.0))
    lat = np.deg2rad(latitude)
    cosz = np.sin(lat) * np.sin(decl) + np.cos(lat) * np.cos(decl) * np.cos(hour_angle)
    return np.rad2deg(np.arccos(np.clip(cosz, -1.0, 1.0)))


def _ar1(rng: np.random.Generator, n: int, mean: float, std: float, phi: float) -> np.ndarray:
    out = np.empty(n)
    x = rng.normal(0.0, std)
    innov = std * np.sqrt(1 - phi * phi)
    for k in range(n):
        out[k] = x
        x = phi * x + rng.normal(0.0, innov)
    return mean + out


def synthesize_weather(scenario_id: int, horizon: int, config: ScenarioConfig | None = None,
                       timestamp: int | None = None) -> WeatherSeries:
    """Minute-level weather starting at the scenario's timestamp.

    Each series starts from the stationary distribution of its AR(1) process,
    so different scenario ids give independent draws.
    """
    cfg = config or ScenarioConfig()
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    ts = scenario_id if timestamp is None else timestamp
    minute0 = cfg.start_day * 1440 - 1440 + ts * STEP_MINUTES
    minutes = minute0 + np.arange(horizon)
    zen = solar_zenith(minutes, cfg.latitude)
    rng = _rng(cfg, _WEATHER, scenario_id)
    wind = np.maximum(_ar1(rng, horizon, cfg.wind_mean, cfg.wind_std, cfg.wind_phi), 0.0)
    hour = (minutes % 1440) / 60.0
    temp_daily = cfg.temp_amplitude * np.cos(2 * np.pi * (hour - 15.0) / 24.0)
    temp = _ar1(rng, horizon, cfg.temp_mean, cfg.temp_std, 0.99) + temp_daily
    hum = _ar1(rng, horizon, cfg.humidity_mean, cfg.humidity_std, 0.99) - 1.5 * temp_daily
    return WeatherSeries(solar_zenith_angle=zen, wind_speed=wind, humidity=np.clip(hum, 0.0, 100.0),
                         temperature=temp, horizon=horizon)


def wind_power_curve(speed: np.ndarray, p_max: float, cut_in: float = 3.0,
                     rated: float = 12.0, cut_out: float = 25.0) -> np.ndarray:
    speed = np.asarray(speed, dtype=float)
    ramp = (speed**3 - cut_in**3) / (rated**3 - cut_in**3)
    frac = np.where(speed < cut_in, 0.0, np.where(speed < rated, ramp, np.where(speed < cut_out, 1.0, 0.0)))
    return np.clip(frac * p_max, 0.0, p_max)


def renewable_from_weather(weather: WeatherSeries, unit: Generator,
                           config: ScenarioConfig | None = None) -> np.ndarray:
    """Available power (MW) per minute for one wind or solar unit."""
    cfg = config or ScenarioConfig()
    if unit.kind is GenKind.SOLAR:
        cosz = np.cos(np.deg2rad(weather.solar_zenith_angle))
        return np.clip(unit.p_max * cosz, 0.0, unit.p_max)
    if unit.kind is GenKind.WIND:
        return wind_power_curve(weather.wind_speed, unit.p_max, cfg.cut_in, cfg.rated_speed, cfg.cut_out)
    raise ValueError(f"generator kind {unit.kind.value} has no weather model")


# ---------------------------------------------------------------------------
# faults
# ---------------------------------------------------------------------------


def enumerate_fault_scenarios(case: NetworkCase, config: ScenarioConfig | None = None) -> list[FaultDescriptor]:
    """Duplicate-free (type x location) list produced by the configured rules, in rule order."""
    cfg = config or ScenarioConfig()
    out: list[FaultDescriptor] = []
    seen: set[tuple] = set()
    t_clear = cfg.t_fault + cfg.clearing_time
    for rule in cfg.fault_rules:
        if rule.element == "bus":
            locs = [b.id for b in case.buses] if rule.locations is None else list(rule.locations)
        else:
            locs = [k for k, br in enumerate(case.branches) if br.status] if rule.locations is None \
                else list(rule.locations)
        if rule.limit is not None:
            locs = locs[: rule.limit]
        for ft in rule.types:
            for loc in locs:
                key = (ft, rule.element, loc)
                if key in seen:
                    continue
                seen.add(key)
                d = FaultDescriptor(ft, rule.element, loc, cfg.t_fault, t_clear)
                d.check(case)
                out.append(d)
    log.debug("enumerated %d fault scenarios", len(out))
    return out


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


def _unit_status(case: NetworkCase, cfg: ScenarioConfig, scenario_id: int) -> tuple[bool, ...]:
    rng = _rng(cfg, _STATUS, scenario_id)
    draws = rng.random(len(case.generators))
    status = []
    for g, u in zip(case.generators, draws):
        if not g.status:
            status.append(False)
        elif g.kind is GenKind.THERMAL:
            status.append(bool(u >= cfg.unit_outage_prob))
        else:
            status.append(True)
    return tuple(status)


def make_scenario(case: NetworkCase, cfg: ScenarioConfig, scenario_id: int,
                  faults: Sequence[FaultDescriptor] | None = None) -> Scenario:
    if scenario_id < 0:
        raise ValueError("scenario ids are non-negative")
    ts = scenario_id * cfg.timestamp_stride
    weather = synthesize_weather(scenario_id, cfg.weather_horizon, cfg, timestamp=ts)
    avail = {}
    for k in case.renewable_gens:
        avail[k] = float(renewable_from_weather(weather, case.generators[k], cfg)[0])
    fault = None
    if cfg.assign_faults:
        faults = faults if faults is not None else enumerate_fault_scenarios(case, cfg)
        if not faults:
            raise ScenarioConfigError("fault assignment requested but the fault policy is empty")
        fault = faults[int(_rng(cfg, _FAULT, scenario_id).integers(len(faults)))]
    status = _unit_status(case, cfg, scenario_id)
    prev = _unit_status(case, cfg, scenario_id - 1) if scenario_id > 0 else status
    return Scenario(
        scenario_id=scenario_id, timestamp=ts,
        load_scale=tuple(float(x) for x in load_scale_at(cfg, ts, case.n_bus)),
        renewable_availability=avail, unit_status=status, prev_unit_status=prev,
        split=split_of(scenario_id, cfg.test_fraction), rng_seed=scenario_seed(cfg, scenario_id),
        fault=fault, weather=weather if cfg.include_weather else None,
    )


def apply_scenario(case: NetworkCase, scenario: Scenario) -> NetworkCase:
    """Case with the scenario's loads, unit statuses and renewable availability.

    Thermal units get a proportional base dispatch (case setpoint times the
    system load ratio, clipped to limits); renewables run at availability.
    """
    if len(scenario.load_scale) != case.n_bus or len(scenario.unit_status) != len(case.generators):
        raise ValueError("scenario does not match case dimensions")
    buses = tuple(dataclasses.replace(b, load_p=b.load_p * s, load_q=b.load_q * s)
                  for b, s in zip(case.buses, scenario.load_scale))
    base_load = sum(b.load_p for b in case.buses)
    ratio = sum(b.load_p for b in buses) / base_load if base_load > 0 else 1.0
    gens = []
    for k, (g, on) in enumerate(zip(case.generators, scenario.unit_status)):
        if g.kind is GenKind.BALANCING:
            on = True
        if g.kind.renewable:
            cap = float(min(scenario.renewable_availability.get(k, g.p_max), g.p_max))
            if cap < 0:
                raise ValueError(f"negative availability for generator {k}")
            gens.append(dataclasses.replace(g, p_max=cap, p_set=cap, status=on))
        else:
            p = float(np.clip(g.p_set * ratio, g.p_min, g.p_max)) if on else 0.0
            gens.append(dataclasses.replace(g, status=on, p_set=p))
    return case.replace(buses=buses, generators=tuple(gens))


def generate_scenarios(case: NetworkCase, config: ScenarioConfig | Mapping | None, count: int,
                       start_id: int = 0) -> Iterator[Scenario]:
    cfg = config if isinstance(config, ScenarioConfig) else ScenarioConfig.from_dict(config)
    if count < 0:
        raise ValueError("count must be non-negative")
    faults = enumerate_fault_scenarios(case, cfg) if cfg.assign_faults else None
    if cfg.precheck:
        audit_convergence(case, cfg, min(cfg.precheck, count), start_id, raise_below=cfg.precheck_min_rate)
    for sid in range(start_id, start_id + count):
        yield make_scenario(case, cfg, sid, faults)


def audit_convergence(case: NetworkCase, cfg: ScenarioConfig, count: int, start_id: int = 0,
                      raise_below: float | None = None) -> dict:
    """Run the base power flow of ``count`` scenarios and report the convergence rate."""
    failed = []
    for sid in range(start_id, start_id + count):
        sc = make_scenario(case, cfg, sid)
        sol = solve_power_flow(apply_scenario(case, sc), options=PowerFlowOptions(max_iter=20))
        if not sol.converged:
            failed.append((sid, sol.status.value))
    rate = 1.0 - len(failed) / count if count else 1.0
    report = {"checked": count, "converged_rate": rate, "failed": failed[:20]}
    if raise_below is not None and rate < raise_below:
        raise ScenarioConfigError(
            f"only {rate:.1%} of {count} sampled scenarios converge (need {raise_below:.0%}); "
            f"first failures: {failed[:5]}; consider lowering load_level")
    return report


def make_measurements(solution: SteadyStateSolution, sigma: float, seed: int | Sequence[int]) -> Measurement:
    """Noisy bus readings: true value times (1 + N(0, sigma))."""
    if not solution.converged:
        raise UnconvergedSolutionError("measurements need a converged solution")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    n = len(solution.v_mag)
    noise = rng.normal(0.0, 1.0, (3, n)) * sigma
    return Measurement(
        v_mag_meas=solution.v_mag * (1 + noise[0]),
        p_inj_meas=solution.p_inj * (1 + noise[1]),
        q_inj_meas=solution.q_inj * (1 + noise[2]),
        noise_sigma=sigma,
    )


def measurement_seed(cfg: ScenarioConfig, scenario_id: int) -> list[int]:
    return [cfg.master_seed, _MEAS, scenario_id]


def write_scenarios_jsonl(scenarios: Iterable[Scenario], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for sc in scenarios:
            fh.write(json.dumps(sc.to_dict(), separators=(",", ":")) + "\n")
            n += 1
    return n


def read_scenarios_jsonl(path) -> list[Scenario]:
    with open(path, encoding="utf-8") as fh:
        return [Scenario.from_dict(json.loads(line)) for line in fh if line.strip()]
