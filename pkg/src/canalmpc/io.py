"""Configuration documents, trace files, and plot-data emission.

Configs are YAML (nested key-value sections, diff-friendly); traces are
comma-delimited text with a fixed column order so any plotting tool can
consume them.  Floats are written with shortest round-trip precision, so a
write/read cycle is lossless.
"""

import dataclasses
import hashlib
import importlib.resources
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import __version__
from .canal import DEZ_REACHES, ReachParams
from .control import ControllerConfig
from .simulate import BUILTIN_SCENARIOS, PlantConfig, Scenario, SimTrace
from .topology import link_activity_matrix


class ConfigError(ValueError):
    """A configuration document failed validation; the message names the field."""


@dataclass
class RunConfig:
    """Everything one run needs: plant table, tuning, scenario, outputs."""

    reaches: tuple = DEZ_REACHES
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    scenario: Scenario | None = None
    plant: PlantConfig = field(default_factory=PlantConfig)
    t_lambda: int = 4
    c_link_sweep: tuple = (0.0, 0.15, 0.3, 0.6, 1.2, 2.4)
    output_dir: str = "out"
    seed: int = 0

    def config_hash(self) -> str:
        payload = {
            "reaches": [dataclasses.astuple(r) for r in self.reaches],
            "controller": dataclasses.asdict(self.controller),
            "scenario": None if self.scenario is None else {
                "name": self.scenario.name,
                "horizon": self.scenario.horizon,
                "schedules": {k: list(map(list, v)) for k, v in sorted(self.scenario.schedules.items())},
                "initial_regime": self.scenario.initial_regime,
            },
            "plant": dataclasses.asdict(self.plant),
            "t_lambda": self.t_lambda,
            "seed": self.seed,
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _require(mapping, key, kind, where):
    if key not in mapping:
        raise ConfigError(f"{where}: missing required field '{key}'")
    value = mapping[key]
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key}: cannot interpret {value!r}") from None


def _parse_reaches(items):
    if not isinstance(items, list) or not items:
        raise ConfigError("reaches: must be a nonempty list")
    reaches = []
    for pos, item in enumerate(items, start=1):
        where = f"reaches[{pos}]"
        idx = _require(item, "index", int, where)
        area = _require(item, "backwater_area", float, where)
        delay = _require(item, "delay_steps", int, where)
        try:
            reaches.append(
                ReachParams(
                    idx, area, delay,
                    float(item.get("length", 0.0)),
                    float(item.get("bottom_width", 0.0)),
                )
            )
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    indices = [r.index for r in reaches]
    if indices != list(range(1, len(reaches) + 1)):
        raise ConfigError("reaches: indices must be contiguous starting at 1")
    return tuple(reaches)


def _parse_controller(section):
    known = {f.name for f in dataclasses.fields(ControllerConfig)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"controller: unknown fields {sorted(unknown)}")
    try:
        return ControllerConfig(**{k: type(getattr(ControllerConfig(), k))(v)
                                   for k, v in section.items()})
    except ValueError as exc:
        raise ConfigError(f"controller: {exc}") from None


def _parse_scenario(section, n_reaches):
    name = _require(section, "name", str, "scenario")
    horizon = _require(section, "horizon", int, "scenario")
    offtakes = section.get("offtakes")
    if offtakes is None:
        raise ConfigError("scenario: missing required field 'offtakes'")
    schedules = {}
    for key, entries in offtakes.items():
        reach = int(key)
        if not 1 <= reach <= n_reaches:
            raise ConfigError(f"scenario.offtakes: reach {reach} does not exist")
        schedules[reach] = tuple((int(s), float(v)) for s, v in entries)
    missing = set(range(1, n_reaches + 1)) - set(schedules)
    if missing:
        raise ConfigError(f"scenario.offtakes: missing reaches {sorted(missing)}")
    try:
        return Scenario(name, horizon, schedules,
                        float(section.get("initial_regime", 0.36)))
    except ValueError as exc:
        raise ConfigError(f"scenario: {exc}") from None


def _parse_plant(section, n_reaches):
    factors = section.get("surface_factors", [1.0] * n_reaches)
    offsets = section.get("delay_offsets", [0] * n_reaches)
    if len(factors) != n_reaches or len(offsets) != n_reaches:
        raise ConfigError("plant: per-reach lists must match the reach count")
    try:
        return PlantConfig(
            surface_factors=tuple(float(f) for f in factors),
            delay_offsets=tuple(int(d) for d in offsets),
            process_noise=float(section.get("process_noise", 0.0)),
            measurement_noise=float(section.get("measurement_noise", 0.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"plant: {exc}") from None


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("top level: expected a mapping")
    reaches = _parse_reaches(doc["reaches"]) if "reaches" in doc else DEZ_REACHES
    controller = _parse_controller(doc.get("controller", {}))
    scenario = (
        _parse_scenario(doc["scenario"], len(reaches)) if "scenario" in doc else None
    )
    plant = _parse_plant(doc.get("plant", {}), len(reaches))
    sweep = tuple(float(c) for c in doc.get("c_link_sweep", (0.0, 0.15, 0.3, 0.6, 1.2, 2.4)))
    return RunConfig(
        reaches=reaches,
        controller=controller,
        scenario=scenario,
        plant=plant,
        t_lambda=int(doc.get("t_lambda", 4)),
        c_link_sweep=sweep,
        output_dir=str(doc.get("output_dir", "out")),
        seed=int(doc.get("seed", 0)),
    )


def load_config(path) -> RunConfig:
    """Parse and validate a YAML run configuration."""
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return parse_config(doc)


def builtin_config(scenario_name: str = "scenario1") -> RunConfig:
    """Bundled case-study configuration for one of the two scenarios."""
    resource = importlib.resources.files("canalmpc.data") / f"dez_{scenario_name}.yaml"
    with importlib.resources.as_file(resource) as path:
        return load_config(path)


def scenario_by_name(name: str) -> Scenario:
    if name not in BUILTIN_SCENARIOS:
        raise ConfigError(f"unknown scenario '{name}' (have {sorted(BUILTIN_SCENARIOS)})")
    return BUILTIN_SCENARIOS[name]()


# ---------------------------------------------------------------------------
# Trace files
# ---------------------------------------------------------------------------

_TRACE_MAGIC = "# canalmpc-trace v1"


def _fmt(x: float) -> str:
    return repr(float(x))


def trace_columns(n: int):
    cols = ["step"]
    for prefix in ("e", "q", "dq", "offtake"):
        cols += [f"{prefix}_{i}" for i in range(1, n + 1)]
    cols += ["topology", "perf_cost", "net_links", "n_coalitions", "mean_decision_vars"]
    return cols


def write_trace(trace: SimTrace, path) -> None:
    """Persist a trace as delimited text with a provenance header."""
    n = trace.levels.shape[1]
    lines = [
        _TRACE_MAGIC,
        f"# scenario={trace.scenario}",
        f"# config_hash={trace.config_hash}",
        f"# version={__version__}",
        f"# seed={trace.seed}",
        ",".join(trace_columns(n)),
    ]
    for k in range(trace.horizon):
        row = [str(k)]
        for array in (trace.levels, trace.flows, trace.inputs, trace.offtakes):
            row += [_fmt(v) for v in array[k]]
        row.append(trace.topology_bits[k])
        row.append(_fmt(trace.perf_cost[k]))
        row.append(str(int(trace.net_links[k])))
        row.append(str(int(trace.n_coalitions[k])))
        row.append(_fmt(trace.mean_decision_vars[k]))
        lines.append(",".join(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trace(path) -> SimTrace:
    """Read a trace file back; the persisted arrays round-trip losslessly."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _TRACE_MAGIC:
        raise ValueError(f"{path}: not a canalmpc trace file")
    meta = {}
    body_start = None
    for pos, line in enumerate(lines[1:], start=1):
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            meta[key] = value
        else:
            body_start = pos
            break
    header = lines[body_start].split(",")
    n = (len(header) - 6) // 4
    if trace_columns(n) != header:
        raise ValueError(f"{path}: unexpected column layout")
    rows = [ln.split(",") for ln in lines[body_start + 1:] if ln]
    horizon = len(rows)
    trace = SimTrace(
        scenario=meta.get("scenario", ""),
        levels=np.zeros((horizon, n)),
        flows=np.zeros((horizon, n)),
        inputs=np.zeros((horizon, n)),
        offtakes=np.zeros((horizon, n)),
        topology_bits=[],
        perf_cost=np.zeros(horizon),
        net_links=np.zeros(horizon, dtype=int),
        n_coalitions=np.zeros(horizon, dtype=int),
        mean_decision_vars=np.zeros(horizon),
        config_hash=meta.get("config_hash", ""),
        seed=int(meta.get("seed", 0)),
    )
    for k, row in enumerate(rows):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {k} has {len(row)} fields, expected {len(header)}")
        if int(row[0]) != k:
            raise ValueError(f"{path}: row {k} carries step {row[0]}")
        vals = row[1:]
        trace.levels[k] = [float(v) for v in vals[0:n]]
        trace.flows[k] = [float(v) for v in vals[n:2 * n]]
        trace.inputs[k] = [float(v) for v in vals[2 * n:3 * n]]
        trace.offtakes[k] = [float(v) for v in vals[3 * n:4 * n]]
        trace.topology_bits.append(vals[4 * n])
        trace.perf_cost[k] = float(vals[4 * n + 1])
        trace.net_links[k] = int(vals[4 * n + 2])
        trace.n_coalitions[k] = int(vals[4 * n + 3])
        trace.mean_decision_vars[k] = float(vals[4 * n + 4])
    return trace


def emit_plot_data(trace: SimTrace, outdir, c_link: float = 0.6) -> list:
    """Write plottable series: levels, inflows, link raster, accumulated costs.

    Returns the list of files written.  The cost file carries accumulated
    performance cost and the same plus network usage priced at c_link.
    """
    import os

    os.makedirs(outdir, exist_ok=True)
    n = trace.levels.shape[1]
    written = []

    def table(name, header, rows):
        path = os.path.join(outdir, name)
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(row) + "\n")
        written.append(path)

    steps = range(trace.horizon)
    table(
        "levels.csv",
        ["step"] + [f"e_{i}" for i in range(1, n + 1)],
        ([str(k)] + [_fmt(v) for v in trace.levels[k]] for k in steps),
    )
    table(
        "inflows.csv",
        ["step"] + [f"q_{i}" for i in range(1, n + 1)],
        ([str(k)] + [_fmt(v) for v in trace.flows[k]] for k in steps),
    )
    raster = link_activity_matrix(trace.topology_bits)
    table(
        "links.csv",
        ["step"] + [f"link_{i}" for i in range(1, raster.shape[1] + 1)],
        ([str(k)] + [str(v) for v in raster[k]] for k in steps),
    )
    perf_cum = np.cumsum(trace.perf_cost)
    combined_cum = np.cumsum(trace.perf_cost + c_link * trace.net_links)
    table(
        "costs_accumulated.csv",
        ["step", "perf_cum", "combined_cum"],
        (
            [str(k), _fmt(perf_cum[k]), _fmt(combined_cum[k])]
            for k in steps
        ),
    )
    return written
