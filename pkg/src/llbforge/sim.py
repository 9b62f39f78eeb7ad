"""Closed-loop single-tank process behind the controller.

One scan of the loop: the tank's level is digitized onto the level input
channel, the controller scans, the published pump and valve outputs drive
the tank for one dt.  That ordering means an output change acts on the
process starting the same scan it is published.

The tank is an explicit Euler balance.  Flows are in liters per minute,
the surface area in cm^2, the level in mm, so one step moves the level by

    net_lpm * dt_ms / (6 * area_cm2)   millimeters

(1 L/min sustained for 60 s over 1000 cm^2 raises the level 10 mm).  The
level clamps to [0, capacity]; hitting either bound is recorded as an
overflow or underflow event on the transition.

A controller major fault does not stop the scenario: the tank keeps
integrating with the pump and valve frozen at their last published values,
which is how a halted PLC lets a full tank run over.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

try:
    import tomllib
except ImportError:  # 3.10
    import tomli as tomllib

from .l5k import parse
from .llb import LlbDescriptor, inject, preset_descriptors
from .model import LadderError, Project
from .vm import (
    FaultRaised,
    ScanRecord,
    _compiled_for,
    format_value,
    probe_reader,
    scan,
)


class ScenarioError(LadderError):
    pass


@dataclass(frozen=True)
class TankModel:
    level_mm: float
    area_cm2: float
    inflow_lpm: float      # delivered while the pump output is on
    outflow_lpm: float     # drawn while the valve output is open
    capacity_mm: float
    level_hi_mm: float     # alarm setpoints, for reporting only
    level_lo_mm: float

    def __post_init__(self):
        if self.area_cm2 <= 0:
            raise ScenarioError("tank area must be positive")
        if self.capacity_mm <= 0:
            raise ScenarioError("tank capacity must be positive")
        if not 0 <= self.level_mm <= self.capacity_mm:
            raise ScenarioError("initial level outside [0, capacity]")
        if self.inflow_lpm < 0 or self.outflow_lpm < 0:
            raise ScenarioError("flow rates must be nonnegative")


def step(tank: TankModel, pump_on: bool, valve_open: bool,
         dt_ms: int) -> TankModel:
    """Advance the balance one dt; pure, clamped to [0, capacity]."""
    if dt_ms <= 0:
        raise ScenarioError("dt_ms must be positive")
    net_lpm = (tank.inflow_lpm if pump_on else 0.0) \
        - (tank.outflow_lpm if valve_open else 0.0)
    level = tank.level_mm + net_lpm * dt_ms / (6.0 * tank.area_cm2)
    level = min(max(level, 0.0), tank.capacity_mm)
    return replace(tank, level_mm=level)


@dataclass(frozen=True)
class Scenario:
    project: Project
    tank: TankModel
    level_channel: int
    pump_channel: int
    valve_channel: int
    duration_scans: int
    dt_ms: int
    attack: LlbDescriptor | None = None
    # (scan, channel, value) input overrides, applied after the level write
    trigger_schedule: tuple = ()
    watch: tuple = ()

    def __post_init__(self):
        if self.duration_scans < 1:
            raise ScenarioError("duration_scans must be at least 1")
        if self.dt_ms < 1:
            raise ScenarioError("dt_ms must be positive")
        ins = {t.io.channel for t in self.project.tags
               if t.io and t.io.direction == "IN"}
        outs = {t.io.channel for t in self.project.tags
                if t.io and t.io.direction == "OUT"}
        if self.level_channel not in ins:
            raise ScenarioError(
                f"level channel {self.level_channel} is not an input "
                f"binding of the project")
        for ch, what in ((self.pump_channel, "pump"),
                         (self.valve_channel, "valve")):
            if ch not in outs:
                raise ScenarioError(
                    f"{what} channel {ch} is not an output binding of "
                    f"the project")


@dataclass(frozen=True)
class ScenarioResult:
    records: tuple       # ScanRecord per scan, numbering continuous past a fault
    tank_levels: tuple   # post-step true level per scan
    events: tuple        # (scan, label) transitions
    report: object       # InjectionReport when an attack was planted
    final_tank: TankModel

    def trace_text(self) -> str:
        lines = []
        for rec, level in zip(self.records, self.tank_levels):
            lines.append(f"{rec.line()} tank={format_value(level)}\n")
        return "".join(lines)

    def events_text(self) -> str:
        return "".join(f"scan={n} event={label}\n"
                       for n, label in self.events)


def run_scenario(s: Scenario) -> ScenarioResult:
    project, report = s.project, None
    if s.attack is not None:
        project, report = inject(project, s.attack)
    cp = _compiled_for(project)
    state = cp.make_state()

    armed_read = None
    if report is not None and report.armed_tag is not None:
        armed_read = probe_reader(report.armed_tag)

    overrides: dict = {}
    for when, ch, value in s.trigger_schedule:
        overrides.setdefault(when, {})[ch] = value

    out_tags = sorted(name for name, _ in cp.output_binds)
    probes = [(p, probe_reader(p)) for p in s.watch if p not in out_tags]
    names = out_tags + [p for p, _ in probes]
    order = sorted(range(len(names)), key=lambda i: names[i])
    pump_tag = next(n for n, ch in cp.output_binds if ch == s.pump_channel)
    valve_tag = next(n for n, ch in cp.output_binds if ch == s.valve_channel)

    tank = s.tank
    events = []
    records = []
    levels = []
    pump = valve = 0
    was_armed = was_over = was_under = False
    tags = state.tags
    for n in range(1, s.duration_scans + 1):
        inputs = {s.level_channel: int(round(tank.level_mm))}
        inputs.update(overrides.get(n, {}))
        if state.fault is None:
            try:
                scan(state, cp, s.dt_ms, inputs)
                pump = state.outputs.get(s.pump_channel, 0)
                valve = state.outputs.get(s.valve_channel, 0)
            except FaultRaised as exc:
                events.append((n, f"fault:{exc.fault.kind}"))
        if armed_read is not None and not was_armed and armed_read(state):
            was_armed = True
            events.append((n, "armed"))
        tank = step(tank, bool(pump), bool(valve), s.dt_ms)
        over = tank.level_mm >= tank.capacity_mm
        under = tank.level_mm <= 0.0
        if over and not was_over:
            events.append((n, "overflow"))
        if under and not was_under:
            events.append((n, "underflow"))
        was_over, was_under = over, under

        vals = [tags[t] for t in out_tags]
        vals += [rd(state) for _, rd in probes]
        records.append(ScanRecord(
            scan=n,
            clock_ms=state.wall_clock_ms,
            fault=state.fault.kind if state.fault else None,
            values=tuple((names[j], vals[j]) for j in order),
        ))
        levels.append(tank.level_mm)
    return ScenarioResult(
        records=tuple(records),
        tank_levels=tuple(levels),
        events=tuple(events),
        report=report,
        final_tank=tank,
    )


# ---------------------------------------------------------------------------
# Scenario files

_TANK_FIELDS = ("level_mm", "area_cm2", "inflow_lpm", "outflow_lpm",
                "capacity_mm", "level_hi_mm", "level_lo_mm")


def load_scenario(path) -> Scenario:
    """Read a scenario description.

    Schema (all tables required unless noted)::

        project = "relative/path.l5k"   # omit to use the bundled project
        duration_scans = 10000
        dt_ms = 100
        attack = "2"                    # optional preset key: 1 2 3 4a 4b
        watch = ["LevelEng"]            # optional probe columns

        [tank]
        level_mm = 250.0
        area_cm2 = 1000.0
        inflow_lpm = 10.0
        outflow_lpm = 10.0
        capacity_mm = 1200.0
        level_hi_mm = 900.0
        level_lo_mm = 150.0

        [channels]
        level = 0
        pump = 0
        valve = 1

        [[override]]                    # optional scheduled input writes
        scan = 50
        channel = 1
        value = 3
    """
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from None

    def need(key, table=raw, where="scenario"):
        if key not in table:
            raise ScenarioError(f"{path}: missing {where} key {key!r}")
        return table[key]

    # Unknown keys are errors.  TOML scoping makes it easy to land a
    # top-level key inside the previous table by accident; silence there
    # would quietly drop a watch list or an override.
    def only(table, allowed, where):
        extra = sorted(set(table) - set(allowed))
        if extra:
            raise ScenarioError(
                f"{path}: unknown {where} key(s): {', '.join(extra)}")

    only(raw, ("project", "duration_scans", "dt_ms", "attack", "watch",
               "tank", "channels", "override"), "scenario")
    if "tank" in raw:
        only(raw["tank"], _TANK_FIELDS, "tank")
    if "channels" in raw:
        only(raw["channels"], ("level", "pump", "valve"), "channels")
    for i, row in enumerate(raw.get("override", [])):
        only(row, ("scan", "channel", "value"), f"override[{i}]")

    if "project" in raw:
        source = (path.parent / raw["project"])
        try:
            project = parse(source.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ScenarioError(f"{path}: cannot read project: {exc}") \
                from None
    else:
        from . import baseline_project
        project = baseline_project()

    tank_tbl = need("tank")
    tank = TankModel(**{f: float(need(f, tank_tbl, "tank"))
                        for f in _TANK_FIELDS})
    ch = need("channels")

    attack = None
    if "attack" in raw:
        presets = preset_descriptors()
        key = str(raw["attack"])
        if key not in presets:
            raise ScenarioError(
                f"{path}: unknown attack {key!r} (have "
                f"{', '.join(sorted(presets))})")
        attack = presets[key]

    schedule = []
    for i, row in enumerate(raw.get("override", [])):
        schedule.append((int(need("scan", row, f"override[{i}]")),
                         int(need("channel", row, f"override[{i}]")),
                         row.get("value", 0)))

    return Scenario(
        project=project,
        tank=tank,
        level_channel=int(need("level", ch, "channels")),
        pump_channel=int(need("pump", ch, "channels")),
        valve_channel=int(need("valve", ch, "channels")),
        duration_scans=int(need("duration_scans")),
        dt_ms=int(need("dt_ms")),
        attack=attack,
        trigger_schedule=tuple(schedule),
        watch=tuple(raw.get("watch", [])),
    )


__all__ = [
    "Scenario", "ScenarioError", "ScenarioResult", "TankModel",
    "load_scenario", "run_scenario", "step",
]
