"""Experiment configuration: JSON parsing, validation, canonical round-trip.

An empty config reproduces the reference setup (4 V2I links, 4 V2V links,
4 MHz sub-bands at 2 GHz, 23 dBm V2I power, [23, 15, 5, -100] dBm V2V
levels, -114 dBm noise, 100 ms budget, payload sweep in multiples of
1060 bytes, 5 seeds).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .env import NetworkConfig
from .geochannel import LinkClass, PropagationParams, TraceSet, generate_grid_traces, load_obstacles, load_traces
from .marl import TrainSchedule


class ConfigError(ValueError):
    """Invalid configuration; carries the offending field path."""

    def __init__(self, path: str, message: str):
        self.field_path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class GridScenario:
    area_m: tuple[float, float] = (500.0, 500.0)
    n_vehicles: int = 8
    speed_mps: float = 10.0
    duration_ms: float = 13000.0
    period_ms: float = 100.0
    block_m: float = 50.0
    street_margin_m: float = 6.0
    building_fill: float = 1.0
    bs_position: tuple[float, float] | None = None

    def build(self, seed: int) -> TraceSet:
        return generate_grid_traces(
            self.area_m, self.n_vehicles, self.speed_mps, self.duration_ms, self.period_ms,
            seed, block_m=self.block_m, street_margin_m=self.street_margin_m,
            building_fill=self.building_fill, bs_position=self.bs_position,
        )


@dataclass(frozen=True)
class TraceScenario:
    trace_file: str
    obstacle_file: str | None = None
    bs_position: tuple[float, float] | None = None

    def build(self, seed: int) -> TraceSet:
        trace = load_traces(self.trace_file)
        obstacles = load_obstacles(self.obstacle_file) if self.obstacle_file else None
        return trace.with_static(obstacles=obstacles, bs_position=self.bs_position)


@dataclass(frozen=True)
class ExperimentConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    schedule: TrainSchedule = field(default_factory=lambda: TrainSchedule())
    propagation: PropagationParams = field(default_factory=PropagationParams)
    scenario: GridScenario | TraceScenario = field(default_factory=GridScenario)
    variants: tuple[str, ...] = ("random", "dqn", "ddqn")
    payload_multipliers: tuple[int, ...] = (1, 2, 3, 4)
    payload_base_bytes: float = 1060.0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    eval_episodes: int = 100
    tql_learner_episodes: int = 1800
    expert_seed: int = 99
    expert_checkpoint: str | None = None
    histogram_bin_ms: float = 5.0
    output_dir: str = "results"

    def network_for(self, payload_mult: int) -> NetworkConfig:
        fields = asdict(self.network)
        fields["payload_bytes"] = self.payload_base_bytes * payload_mult
        return NetworkConfig(**fields)

    def schedule_for(self, variant: str, episodes_override: int | None = None) -> TrainSchedule:
        fields = asdict(self.schedule)
        if variant == "ddqn_tql" and episodes_override is None:
            fields["episodes"] = self.tql_learner_episodes
        if episodes_override is not None:
            fields["episodes"] = episodes_override
        fields["hidden_sizes"] = tuple(fields["hidden_sizes"])
        return TrainSchedule(**fields)


VALID_VARIANTS = ("random", "dqn", "ddqn", "ddqn_tql")

_CLASS_KEYS = {"los": LinkClass.LOS, "nlosv": LinkClass.NLOSV, "nlosb": LinkClass.NLOSB}


def _take(section: dict, key: str, path: str, conv, default):
    if key not in section:
        return default
    try:
        return conv(section.pop(key))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}.{key}", str(exc)) from None


def _reject_unknown(section: dict, path: str):
    if section:
        raise ConfigError(f"{path}.{next(iter(section))}", "unknown field")


def _parse_dataclass(cls, section: dict, path: str):
    section = dict(section)
    defaults = cls()
    kwargs = {}
    for name, value in asdict(defaults).items():
        if name not in section:
            continue
        raw = section.pop(name)
        try:
            if isinstance(value, tuple) or (value is None and isinstance(raw, (list, tuple))):
                kwargs[name] = tuple(raw)
            elif isinstance(value, bool):
                kwargs[name] = bool(raw)
            elif isinstance(value, int):
                kwargs[name] = int(raw)
            elif isinstance(value, float):
                kwargs[name] = float(raw)
            else:
                kwargs[name] = raw
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}.{name}", str(exc)) from None
    _reject_unknown(section, path)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def _parse_propagation(section: dict) -> PropagationParams:
    section = dict(section)
    base = PropagationParams()
    per_class = {}
    for attr in ("exponent", "extra_loss_db", "shadow_sigma_db"):
        table = dict(getattr(base, attr))
        raw = section.pop(attr, None)
        if raw is not None:
            for key, val in raw.items():
                if key not in _CLASS_KEYS:
                    raise ConfigError(f"propagation.{attr}.{key}", "unknown link class")
                table[_CLASS_KEYS[key]] = float(val)
        per_class[attr] = table
    deco = _take(section, "decorrelation_m", "propagation", float, base.decorrelation_m)
    dmin = _take(section, "min_distance_m", "propagation", float, base.min_distance_m)
    _reject_unknown(section, "propagation")
    return PropagationParams(decorrelation_m=deco, min_distance_m=dmin, **per_class)


def parse_config(data: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Build a validated ExperimentConfig from a JSON-style dict."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    data = dict(data)
    base_dir = Path(base_dir) if base_dir else Path(".")

    network = _parse_dataclass(NetworkConfig, data.pop("network", {}), "network")
    schedule = _parse_dataclass(TrainSchedule, data.pop("schedule", {}), "schedule")
    propagation = _parse_propagation(data.pop("propagation", {}))

    raw_scn = dict(data.pop("scenario", {}))
    kind = raw_scn.pop("type", "grid")
    if kind == "grid":
        scenario = _parse_dataclass(GridScenario, raw_scn, "scenario")
    elif kind == "trace":
        if "trace_file" not in raw_scn:
            raise ConfigError("scenario.trace_file", "required for trace scenarios")
        scenario = _parse_dataclass_trace(raw_scn, base_dir)
    else:
        raise ConfigError("scenario.type", f"unknown scenario type {kind!r}")

    kwargs = {}
    kwargs["variants"] = tuple(data.pop("variants", ExperimentConfig().variants))
    for v in kwargs["variants"]:
        if v not in VALID_VARIANTS:
            raise ConfigError("variants", f"unknown variant {v!r}")
    mults = tuple(int(m) for m in data.pop("payload_multipliers", ExperimentConfig().payload_multipliers))
    if any(m < 1 for m in mults):
        raise ConfigError("payload_multipliers", "multipliers must be >= 1")
    kwargs["payload_multipliers"] = mults
    seeds = tuple(int(s) for s in data.pop("seeds", ExperimentConfig().seeds))
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", "seeds must be distinct")
    kwargs["seeds"] = seeds
    for name, conv in (
        ("payload_base_bytes", float),
        ("eval_episodes", int),
        ("tql_learner_episodes", int),
        ("expert_seed", int),
        ("histogram_bin_ms", float),
    ):
        kwargs[name] = _take(data, name, "<root>", conv, getattr(ExperimentConfig(), name))
    kwargs["expert_checkpoint"] = data.pop("expert_checkpoint", None)
    kwargs["output_dir"] = str(data.pop("output_dir", ExperimentConfig().output_dir))
    if kwargs["eval_episodes"] < 0:
        raise ConfigError("eval_episodes", "must be >= 0")
    _reject_unknown(data, "<root>")
    return ExperimentConfig(
        network=network, schedule=schedule, propagation=propagation, scenario=scenario, **kwargs
    )


def _parse_dataclass_trace(raw: dict, base_dir: Path) -> TraceScenario:
    scn = _parse_dataclass_with_required(raw)
    trace_path = (base_dir / scn.trace_file).resolve() if not Path(scn.trace_file).is_absolute() else Path(scn.trace_file)
    if not trace_path.exists():
        raise ConfigError("scenario.trace_file", f"file not found: {scn.trace_file}")
    obstacle = scn.obstacle_file
    if obstacle is not None:
        op = (base_dir / obstacle).resolve() if not Path(obstacle).is_absolute() else Path(obstacle)
        if not op.exists():
            raise ConfigError("scenario.obstacle_file", f"file not found: {obstacle}")
        obstacle = str(op)
    return TraceScenario(trace_file=str(trace_path), obstacle_file=obstacle,
                         bs_position=scn.bs_position)


def _parse_dataclass_with_required(raw: dict) -> TraceScenario:
    raw = dict(raw)
    trace_file = str(raw.pop("trace_file"))
    obstacle_file = raw.pop("obstacle_file", None)
    bs = raw.pop("bs_position", None)
    _reject_unknown(raw, "scenario")
    return TraceScenario(
        trace_file=trace_file,
        obstacle_file=None if obstacle_file is None else str(obstacle_file),
        bs_position=None if bs is None else tuple(float(c) for c in bs),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from None
    return parse_config(data, base_dir=path.parent)


def config_to_dict(config: ExperimentConfig) -> dict:
    """Canonical JSON-ready dict; parsing it back yields an equal config."""
    prop = config.propagation
    class_table = lambda table: {k.value: v for k, v in sorted(table.items(), key=lambda kv: kv[0].value)}
    scenario = asdict(config.scenario)
    scenario["type"] = "grid" if isinstance(config.scenario, GridScenario) else "trace"
    return {
        "network": asdict(config.network),
        "schedule": asdict(config.schedule),
        "propagation": {
            "exponent": class_table(prop.exponent),
            "extra_loss_db": class_table(prop.extra_loss_db),
            "shadow_sigma_db": class_table(prop.shadow_sigma_db),
            "decorrelation_m": prop.decorrelation_m,
            "min_distance_m": prop.min_distance_m,
        },
        "scenario": scenario,
        "variants": list(config.variants),
        "payload_multipliers": list(config.payload_multipliers),
        "payload_base_bytes": config.payload_base_bytes,
        "seeds": list(config.seeds),
        "eval_episodes": config.eval_episodes,
        "tql_learner_episodes": config.tql_learner_episodes,
        "expert_seed": config.expert_seed,
        "expert_checkpoint": config.expert_checkpoint,
        "histogram_bin_ms": config.histogram_bin_ms,
        "output_dir": config.output_dir,
    }


def cell_digest(config: ExperimentConfig, payload_mult: int, episodes: int) -> str:
    """Digest of everything that defines a cell except variant and seed."""
    payload = {
        "network": asdict(config.network_for(payload_mult)),
        "schedule": {**asdict(config.schedule), "episodes": episodes},
        "propagation": config_to_dict(config)["propagation"],
        "scenario": config_to_dict(config)["scenario"],
        "eval_episodes": config.eval_episodes,
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
