"""YAML configuration: scenario template, traces and experiment plans.

A config is one mapping. Every section is optional and falls back to the
library defaults::

    seed: 0
    sim: {dt_s: 2.0, horizon_steps: 30, alpha: 1.0}
    players:
      - {policy: {type: LBB, alpha: 100, beta: 0}, p: 0.9, mu: 1.0,
         buffer_min_s: 0, buffer_max_s: 30, ladder: {min_kbps: 200, max_kbps: 3000}}
    initial_buffers_s: [2, 2]
    initial_bitrates_kbps: null
    allocator: nmpc            # tcp_model | baseline | nmpc | centralized
    forecast: perfect          # perfect | persistence
    tcp: {base_c: 0.5, half_sat_kappa: 1000, hill: 1}
    nmpc: {horizon: 5, starts: 8}
    centralized: {starts: 8}
    traces:                    # list; each entry is a file, a measurement log or a synthetic fixture
      - {kind: markov, params: {levels: [2400, 5600], p_switch: 0.2}, length: 30, seeds: [0, 1, 2]}
      - {file: traces/a.csv}
      - {measurements: raw.csv, filter: {n_players: 2, max_avg_kbps: 3000}}
    experiments:
      pareto: {alphas: [0, 0.5, 1, 2, 4], allocators: [baseline, nmpc, centralized], replicates: 1}
      q:      {pairs: [[0.6, 0.6], [0.9, 0.3]]}
      init:   {pairs: [[2, 2], [2, 18]]}
      noise:  {sigmas: [0, 100, 200, 400], replicates: 100}
    stability:
      W: 3000
      n: 2
      policy: {type: LRB, alpha: 0.8}
      models: [{base_c: 0.5, half_sat_kappa: 1000, hill: 1}]
      starts: 100
    validate_h: {W: 3000, grid_size: 64, n_players: 2, models: [...]}

A single ``trace`` entry may be given instead of ``traces``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from abrfair.allocators import CentralizedSettings, NmpcSettings
from abrfair.core import BitrateLadder, DomainError, PlayerSpec, QualityFunction, SimConfig
from abrfair.experiments import ExperimentPlan, ScenarioTemplate
from abrfair.policies import BB, LBB, LRB, RB
from abrfair.simulation import Scenario
from abrfair.tcp import TcpShareModel
from abrfair.traces import BandwidthTrace, filter_and_scale, ingest, read_measurements, read_trace, synthesize


class ConfigError(ValueError):
    """Raised for any malformed or inconsistent configuration."""


POLICIES = {"LRB": LRB, "LBB": LBB, "RB": RB, "BB": BB}
DEFAULT_PLAYER = {"policy": {"type": "LBB"}}


@dataclass
class Config:
    template: ScenarioTemplate
    allocator: str
    traces: list[BandwidthTrace]
    seed: int = 0
    experiments: dict[str, dict] = field(default_factory=dict)
    stability: dict = field(default_factory=dict)
    validate_h: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)
    inputs: list[Path] = field(default_factory=list)  # files read while loading

    def scenario(self, trace_index: int = 0) -> Scenario:
        if not self.traces:
            raise ConfigError("no trace configured")
        if not 0 <= trace_index < len(self.traces):
            raise ConfigError(f"trace index {trace_index} out of range")
        return self.template.build(self.allocator, self.traces[trace_index], self.seed)

    def plan(self, kind: str, seed: int | None = None) -> ExperimentPlan:
        return build_plan(self, kind, self.seed if seed is None else seed)


def _settings(cls, section: Any, where: str):
    if section is None:
        return cls()
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    extra = set(section) - known
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    try:
        return cls(**section)
    except (TypeError, DomainError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_tcp(section: Any, where: str) -> TcpShareModel:
    if section == "ideal":
        return TcpShareModel.ideal()
    if isinstance(section, dict) and section.get("half_sat_kappa") in ("inf", math.inf):
        section = {**section, "half_sat_kappa": math.inf}
    return _settings(TcpShareModel, section, where)


def parse_policy(section: Any, where: str = "policy"):
    if not isinstance(section, dict) or "type" not in section:
        raise ConfigError(f"{where} needs a 'type' key ({', '.join(POLICIES)})")
    kw = dict(section)
    kind = kw.pop("type")
    if kind not in POLICIES:
        raise ConfigError(f"{where}: unknown policy type {kind!r}")
    if kind in ("RB", "BB"):
        for k in ("xs", "ys"):
            if k in kw:
                kw[k] = tuple(kw[k])
    return _settings(POLICIES[kind], kw, where)


def parse_player(section: Any, where: str) -> PlayerSpec:
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a mapping")
    kw = dict(section)
    known = {"policy", "p", "mu", "buffer_min_s", "buffer_max_s", "ladder"}
    extra = set(kw) - known
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    spec: dict[str, Any] = {"policy": parse_policy(kw.get("policy", DEFAULT_PLAYER["policy"]), f"{where}.policy")}
    try:
        if "p" in kw:
            spec["quality"] = QualityFunction(float(kw["p"]))
        if "ladder" in kw:
            lad = dict(kw["ladder"])
            if lad.get("levels") is not None:
                lad["levels"] = tuple(lad["levels"])
            spec["ladder"] = _settings(BitrateLadder, lad, f"{where}.ladder")
        for k in ("mu", "buffer_min_s", "buffer_max_s"):
            if k in kw:
                spec[k] = float(kw[k])
        return PlayerSpec(**spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def parse_traces(entries: Any, dt_s: float, base: Path, inputs: list[Path]) -> list[BandwidthTrace]:
    if isinstance(entries, dict):
        entries = [entries]
    if not isinstance(entries, list):
        raise ConfigError("traces must be a list of mappings")
    out: list[BandwidthTrace] = []
    for i, e in enumerate(entries):
        where = f"traces[{i}]"
        if not isinstance(e, dict):
            raise ConfigError(f"{where} must be a mapping")
        try:
            if "file" in e:
                path = _resolve(base, e["file"])
                inputs.append(path)
                out.append(read_trace(path, dt_s))
            elif "measurements" in e:
                path = _resolve(base, e["measurements"])
                inputs.append(path)
                tr = ingest(read_measurements(path), dt_s)
                if "filter" in e:
                    tr = filter_and_scale(tr, **e["filter"])
                out.extend(tr)
            elif "kind" in e:
                seeds = e.get("seeds", [e.get("seed", 0)])
                for s in seeds:
                    out.append(synthesize(e["kind"], e.get("params", {}), int(e["length"]), int(s), dt_s))
            else:
                raise ConfigError(f"{where} needs one of file, measurements or kind")
        except KeyError as exc:
            raise ConfigError(f"{where}: missing key {exc}") from None
        except (OSError, DomainError, TypeError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
    return out


def _tuple_or_none(v: Any, where: str) -> tuple[float, ...] | None:
    if v is None:
        return None
    if not isinstance(v, (list, tuple)):
        raise ConfigError(f"{where} must be a list")
    return tuple(float(x) for x in v)


def parse_config(doc: Any, base: Path = Path(".")) -> Config:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    known = {
        "seed", "sim", "players", "initial_buffers_s", "initial_bitrates_kbps", "allocator", "forecast",
        "tcp", "nmpc", "centralized", "trace", "traces", "experiments", "stability", "validate_h",
    }
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"unknown top-level keys {sorted(extra)}")
    sim = _settings(SimConfig, doc.get("sim"), "sim")
    players = doc.get("players", [DEFAULT_PLAYER, DEFAULT_PLAYER])
    if not isinstance(players, list) or not players:
        raise ConfigError("players must be a nonempty list")
    specs = tuple(parse_player(p, f"players[{i}]") for i, p in enumerate(players))
    forecast = doc.get("forecast", "perfect")
    if forecast not in ("perfect", "persistence"):
        raise ConfigError(f"unknown forecast {forecast!r}")
    template = ScenarioTemplate(
        specs=specs,
        sim=sim,
        initial_buffers_s=_tuple_or_none(doc.get("initial_buffers_s"), "initial_buffers_s"),
        initial_bitrates_kbps=_tuple_or_none(doc.get("initial_bitrates_kbps"), "initial_bitrates_kbps"),
        nmpc=_settings(NmpcSettings, doc.get("nmpc"), "nmpc"),
        centralized=_settings(CentralizedSettings, doc.get("centralized"), "centralized"),
        tcp=parse_tcp(doc.get("tcp"), "tcp"),
        forecast=forecast,
    )
    inputs: list[Path] = []
    if "trace" in doc and "traces" in doc:
        raise ConfigError("give either trace or traces, not both")
    traces = parse_traces(doc.get("traces", doc.get("trace", [])), sim.dt_s, base, inputs)
    experiments = doc.get("experiments", {}) or {}
    if not isinstance(experiments, dict) or set(experiments) - {"pareto", "q", "init", "noise"}:
        raise ConfigError("experiments may only hold pareto, q, init and noise sections")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    cfg = Config(
        template=template,
        allocator=doc.get("allocator", "nmpc"),
        traces=traces,
        seed=seed,
        experiments=experiments,
        stability=doc.get("stability", {}) or {},
        validate_h=doc.get("validate_h", {}) or {},
        raw=doc,
        inputs=inputs,
    )
    if traces:
        try:
            cfg.scenario(0)  # surfaces inconsistencies (lengths, buffers, allocator) at load time
        except DomainError as exc:
            raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | Path) -> Config:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    cfg = parse_config(doc, path.parent)
    cfg.inputs.insert(0, path)
    return cfg


AXIS_KEYS = {"pareto": "alphas", "q": "pairs", "init": "pairs", "noise": "sigmas"}
DEFAULT_REPLICATES = {"pareto": 1, "q": 1, "init": 1, "noise": 100}


def build_plan(cfg: Config, kind: str, seed: int) -> ExperimentPlan:
    """Plan for one study from the ``experiments`` section."""
    if kind not in AXIS_KEYS:
        raise ConfigError(f"unknown experiment {kind!r}")
    sec = cfg.experiments.get(kind)
    if not isinstance(sec, dict):
        raise ConfigError(f"experiments.{kind} section missing")
    axis_key = AXIS_KEYS[kind]
    if axis_key not in sec:
        raise ConfigError(f"experiments.{kind} needs {axis_key}")
    raw_axis = sec[axis_key]
    if not isinstance(raw_axis, list):
        raise ConfigError(f"experiments.{kind}.{axis_key} must be a list")
    if kind in ("pareto", "noise"):
        axis = tuple(float(x) for x in raw_axis)
    else:
        axis = tuple(tuple(float(v) for v in x) for x in raw_axis)
        if any(len(x) != len(cfg.template.specs) for x in axis):
            raise ConfigError(f"experiments.{kind}.{axis_key}: one value per player")
    if not cfg.traces:
        raise ConfigError("experiments need at least one trace")
    template = cfg.template
    if kind == "noise" and sec.get("alpha") is not None:
        template = replace(template, sim=replace(template.sim, alpha=float(sec["alpha"])))
    default_allocs = ("baseline", "nmpc", "centralized") if kind == "pareto" else ("baseline", "nmpc")
    try:
        return ExperimentPlan(
            name=sec.get("name", kind),
            kind=kind,
            template=template,
            axis=axis,
            traces=tuple(cfg.traces),
            allocators=tuple(sec.get("allocators", default_allocs)),
            replicates=int(sec.get("replicates", DEFAULT_REPLICATES[kind])),
            seed=seed,
        )
    except DomainError as exc:
        raise ConfigError(f"experiments.{kind}: {exc}") from None
