"""Structural model of ladder-logic projects.

A Project is a tree of frozen dataclasses: controller header, tag
declarations, add-on instruction definitions, and programs of routines made
of rungs.  Everything here is a value; transformation functions return new
objects.

The memory model is an invented but fixed byte-cost table used for relative
comparisons only (it does not reproduce any vendor's allocator):

    BOOL = 1, DINT = 4, REAL = 4, TIMER = 12, CONTROL = 12, arrays = 4 * n
    + 12 bytes per instruction, 8 bytes per rung, 32 bytes per AOI header

``io_bytes`` sums the scalar sizes of io-bound tags only, so pure logic
insertions leave it untouched.
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field, replace

SCALAR_BYTES = {"BOOL": 1, "DINT": 4, "REAL": 4, "TIMER": 12, "CONTROL": 12}
ARRAY_ELEMENT_BYTES = 4
INSTRUCTION_BYTES = 12
RUNG_BYTES = 8
AOI_HEADER_BYTES = 32

#: Reserved tag name: a DINT view of the VM wall clock (read/write, mod 2^32).
#: User projects cannot declare it.
WALLCLOCK = "WALLCLOCK"

#: Closed instruction table: mnemonic -> operand count.
INSTRUCTION_ARITY = {
    "XIC": 1, "XIO": 1,
    "OTE": 1, "OTL": 1, "OTU": 1,
    "MOV": 2, "ADD": 3, "SUB": 3,
    "EQU": 2, "NEQ": 2, "GRT": 2, "LES": 2, "GEQ": 2, "LEQ": 2,
    "TON": 1,
    "JSR": 1, "SBR": 0, "RET": 0,
    "JMP": 1, "LBL": 1,
    "FFL": 4,
}

COMPARISONS = ("EQU", "NEQ", "GRT", "LES", "GEQ", "LEQ")


class LadderError(Exception):
    """Base class for all errors raised by this package."""


class ProjectError(LadderError):
    """A structurally invalid project."""


class DuplicateTagError(ProjectError):
    pass


class UnknownRoutineError(ProjectError):
    pass


class UnknownLabelError(ProjectError):
    pass


class EmptyProjectError(ProjectError):
    """RALOC is undefined for a project with zero data+logic bytes."""


# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class DataType:
    """A tag data type: scalar base, or a DINT/REAL array with a length."""

    base: str
    length: int | None = None

    @property
    def is_array(self) -> bool:
        return self.length is not None

    @property
    def size_bytes(self) -> int:
        if self.length is not None:
            return ARRAY_ELEMENT_BYTES * self.length
        return SCALAR_BYTES[self.base]

    def __str__(self) -> str:
        if self.length is not None:
            return f"{self.base}[{self.length}]"
        return self.base


BOOL = DataType("BOOL")
DINT = DataType("DINT")
REAL = DataType("REAL")
TIMER = DataType("TIMER")
CONTROL = DataType("CONTROL")


@dataclass(frozen=True)
class IoBinding:
    direction: str  # "IN" | "OUT"
    channel: int


@dataclass(frozen=True)
class TagDecl:
    name: str
    dtype: DataType
    initial: int | float | None = None
    io: IoBinding | None = None


@dataclass(frozen=True)
class TagPath:
    """A reference to a tag, optionally through members and array indices.

    ``parts`` is a tuple of ("member", name) and ("index", int | TagPath)
    steps applied left to right.
    """

    base: str
    parts: tuple = ()

    def member(self, name: str) -> "TagPath":
        return TagPath(self.base, self.parts + (("member", name),))

    def index(self, idx) -> "TagPath":
        return TagPath(self.base, self.parts + (("index", idx),))

    def __str__(self) -> str:
        out = [self.base]
        for kind, payload in self.parts:
            if kind == "member":
                out.append(f".{payload}")
            else:
                out.append(f"[{operand_text(payload)}]")
        return "".join(out)


@dataclass(frozen=True)
class Instr:
    mnemonic: str
    operands: tuple = ()


@dataclass(frozen=True)
class Branch:
    """Parallel paths; the rung condition is the OR of all path results."""

    paths: tuple  # tuple[tuple[element, ...], ...], at least two


@dataclass(frozen=True)
class Rung:
    elements: tuple


@dataclass(frozen=True)
class Routine:
    name: str
    rungs: tuple


@dataclass(frozen=True)
class AoiParam:
    name: str
    dtype: DataType
    usage: str  # "In" | "Out" | "InOut"


@dataclass(frozen=True)
class AoiDef:
    name: str
    params: tuple
    local_tags: tuple
    logic: Routine


@dataclass(frozen=True)
class Program:
    name: str
    main: str
    routines: tuple

    def routine(self, name: str):
        for r in self.routines:
            if r.name == name:
                return r
        return None


@dataclass(frozen=True)
class Project:
    name: str
    serial_number: int
    tags: tuple
    aois: tuple = ()
    programs: tuple = ()
    # Comments survive parse/serialize only as a count; they never take part
    # in structural equality, normalization, or diffing.
    comment_count: int = field(default=0, compare=False)

    def tag(self, name: str) -> TagDecl:
        for t in self.tags:
            if t.name == name:
                return t
        raise KeyError(name)

    def program(self, name: str) -> Program:
        for p in self.programs:
            if p.name == name:
                return p
        raise KeyError(name)

    def aoi(self, name: str) -> AoiDef:
        for a in self.aois:
            if a.name == name:
                return a
        raise KeyError(name)


# ---------------------------------------------------------------------------
# Canonical text


def format_real(v: float) -> str:
    """Shortest decimal form that round-trips; always contains a point."""
    s = repr(float(v))
    if "e" in s or "E" in s:
        s = format(float(v), ".17f").rstrip("0")
        if s.endswith("."):
            s += "0"
    return s


def operand_text(op) -> str:
    if isinstance(op, TagPath):
        return str(op)
    if isinstance(op, bool):
        return str(int(op))
    if isinstance(op, int):
        return str(op)
    if isinstance(op, float):
        return format_real(op)
    raise TypeError(f"not an operand: {op!r}")


def element_text(el) -> str:
    if isinstance(el, Instr):
        return f"{el.mnemonic}({','.join(operand_text(o) for o in el.operands)})"
    if isinstance(el, Branch):
        inner = ",".join("".join(element_text(e) for e in path) for path in el.paths)
        return f"[{inner}]"
    raise TypeError(f"not an element: {el!r}")


def rung_text(rung: Rung) -> str:
    """Canonical single-line form of a rung, used for diffing."""
    return "".join(element_text(e) for e in rung.elements)


def serial_text(serial: int) -> str:
    h = f"{serial:08X}"
    return f"16#{h[:4]}_{h[4:]}"


# ---------------------------------------------------------------------------
# Normalization


def normalize(project: Project) -> Project:
    """Canonical order: tags, AOIs, AOI locals, and routines sorted by name.

    Execution is name-addressed (main designation, JSR targets), so sorting
    never changes scan behaviour.  Rung order is semantic and is preserved.
    Idempotent; equality of normal forms is the project equivalence used by
    diff and by golden-logic validation.
    """
    aois = tuple(
        replace(a, local_tags=tuple(sorted(a.local_tags, key=lambda t: t.name)))
        for a in sorted(project.aois, key=lambda a: a.name)
    )
    programs = tuple(
        replace(p, routines=tuple(sorted(p.routines, key=lambda r: r.name)))
        for p in project.programs
    )
    return replace(
        project,
        tags=tuple(sorted(project.tags, key=lambda t: t.name)),
        aois=aois,
        programs=programs,
    )


# ---------------------------------------------------------------------------
# Memory model


@dataclass(frozen=True)
class MemoryReport:
    data_logic_bytes: int
    io_bytes: int
    breakdown: tuple  # ((section, bytes), ...) in fixed order


def _count_instructions(elements) -> int:
    n = 0
    for el in elements:
        if isinstance(el, Instr):
            n += 1
        else:
            for path in el.paths:
                n += _count_instructions(path)
    return n


def memory_report(project: Project) -> MemoryReport:
    tag_bytes = sum(t.dtype.size_bytes for t in project.tags)
    aoi_tag_bytes = sum(
        sum(p.dtype.size_bytes for p in a.params)
        + sum(t.dtype.size_bytes for t in a.local_tags)
        for a in project.aois
    )
    rung_count = 0
    instr_count = 0
    routines = [r for p in project.programs for r in p.routines]
    routines += [a.logic for a in project.aois]
    for routine in routines:
        rung_count += len(routine.rungs)
        for rung in routine.rungs:
            instr_count += _count_instructions(rung.elements)
    sections = (
        ("tags", tag_bytes),
        ("aoi_tags", aoi_tag_bytes),
        ("instructions", instr_count * INSTRUCTION_BYTES),
        ("rungs", rung_count * RUNG_BYTES),
        ("aoi_headers", len(project.aois) * AOI_HEADER_BYTES),
    )
    io_bytes = sum(
        t.dtype.size_bytes for t in project.tags if t.io is not None
    )
    return MemoryReport(
        data_logic_bytes=sum(b for _, b in sections),
        io_bytes=io_bytes,
        breakdown=sections,
    )


def raloc(before: Project, after: Project) -> float:
    """Relative added lines-of-code proxy: percent growth of data+logic bytes."""
    b = memory_report(before).data_logic_bytes
    a = memory_report(after).data_logic_bytes
    if b == 0:
        raise EmptyProjectError("RALOC undefined: baseline has no data+logic bytes")
    return 100.0 * (a - b) / b


# ---------------------------------------------------------------------------
# Structural diff


@dataclass(frozen=True)
class RoutineDiff:
    added: tuple    # rung indices in the after-project
    removed: tuple  # rung indices in the before-project
    modified: tuple  # rung indices (same position, text differs)

    @property
    def empty(self) -> bool:
        return not (self.added or self.removed or self.modified)


@dataclass(frozen=True)
class DiffReport:
    routines: tuple  # (((program, routine), RoutineDiff), ...) non-empty only
    added_tags: tuple
    removed_tags: tuple
    modified_tags: tuple
    added_aois: tuple
    removed_aois: tuple
    modified_aois: tuple
    renamed_controller: bool
    serial_changed: bool
    main_changed: tuple  # program names whose main designation changed
    program_order_changed: bool
    is_identical: bool

    def routine_diff(self, program: str, routine: str) -> RoutineDiff | None:
        for key, rd in self.routines:
            if key == (program, routine):
                return rd
        return None


def _diff_rungs(before: Routine, after: Routine) -> RoutineDiff:
    a_texts = [rung_text(r) for r in before.rungs]
    b_texts = [rung_text(r) for r in after.rungs]
    sm = difflib.SequenceMatcher(a=a_texts, b=b_texts, autojunk=False)
    added, removed, modified = [], [], []
    for op, i1, i2, j1, j2 in sm.get_opcodes():
        if op == "equal":
            continue
        if op == "insert":
            added.extend(range(j1, j2))
        elif op == "delete":
            removed.extend(range(i1, i2))
        else:  # replace: pair up positionally, remainder is added/removed
            k = min(i2 - i1, j2 - j1)
            modified.extend(range(j1, j1 + k))
            removed.extend(range(i1 + k, i2))
            added.extend(range(j1 + k, j2))
    return RoutineDiff(tuple(added), tuple(removed), tuple(modified))


def diff(before: Project, after: Project) -> DiffReport:
    """Structural rung-level diff of two projects (both normalized first).

    ``is_identical`` is exactly equality of normal forms; a report full of
    empty lists on structurally different projects cannot happen.
    """
    a = normalize(before)
    b = normalize(after)

    a_tags = {t.name: t for t in a.tags}
    b_tags = {t.name: t for t in b.tags}
    added_tags = tuple(sorted(b_tags.keys() - a_tags.keys()))
    removed_tags = tuple(sorted(a_tags.keys() - b_tags.keys()))
    modified_tags = tuple(
        sorted(n for n in a_tags.keys() & b_tags.keys() if a_tags[n] != b_tags[n])
    )

    a_aois = {x.name: x for x in a.aois}
    b_aois = {x.name: x for x in b.aois}
    added_aois = tuple(sorted(b_aois.keys() - a_aois.keys()))
    removed_aois = tuple(sorted(a_aois.keys() - b_aois.keys()))
    modified_aois = tuple(
        sorted(n for n in a_aois.keys() & b_aois.keys() if a_aois[n] != b_aois[n])
    )

    routine_diffs = []
    main_changed = []
    a_progs = {p.name: p for p in a.programs}
    b_progs = {p.name: p for p in b.programs}
    for pname in sorted(a_progs.keys() | b_progs.keys()):
        pa = a_progs.get(pname)
        pb = b_progs.get(pname)
        a_routines = {r.name: r for r in pa.routines} if pa else {}
        b_routines = {r.name: r for r in pb.routines} if pb else {}
        if pa and pb and pa.main != pb.main:
            main_changed.append(pname)
        for rname in sorted(a_routines.keys() | b_routines.keys()):
            ra = a_routines.get(rname, Routine(rname, ()))
            rb = b_routines.get(rname, Routine(rname, ()))
            rd = _diff_rungs(ra, rb)
            if not rd.empty:
                routine_diffs.append(((pname, rname), rd))

    # Program order is semantic (scan order); a pure reordering of programs
    # must not be reported identical.
    order_changed = [p.name for p in a.programs] != [p.name for p in b.programs]

    identical = not (
        routine_diffs
        or added_tags or removed_tags or modified_tags
        or added_aois or removed_aois or modified_aois
        or main_changed
        or order_changed
        or a.name != b.name
        or a.serial_number != b.serial_number
    )
    return DiffReport(
        routines=tuple(routine_diffs),
        added_tags=added_tags,
        removed_tags=removed_tags,
        modified_tags=modified_tags,
        added_aois=added_aois,
        removed_aois=removed_aois,
        modified_aois=modified_aois,
        renamed_controller=a.name != b.name,
        serial_changed=a.serial_number != b.serial_number,
        main_changed=tuple(main_changed),
        program_order_changed=order_changed,
        is_identical=identical,
    )


# ---------------------------------------------------------------------------
# Well-formedness


def _walk_instrs(elements):
    for el in elements:
        if isinstance(el, Instr):
            yield el
        else:
            for path in el.paths:
                yield from _walk_instrs(path)


def _tag_bases(instr: Instr):
    """Base names of all tag references in an instruction's operands."""
    def bases(op):
        if isinstance(op, TagPath):
            yield op.base
            for kind, payload in op.parts:
                if kind == "index" and isinstance(payload, TagPath):
                    yield from bases(payload)
    # JSR/JMP/LBL operands are routine/label symbols, not tags.
    if instr.mnemonic in ("JSR", "JMP", "LBL"):
        return
    for op in instr.operands:
        yield from bases(op)


def _validate_routine_labels(routine: Routine, where: str) -> None:
    labels = set()
    for rung in routine.rungs:
        for pos, instr in enumerate(_walk_instrs(rung.elements)):
            if instr.mnemonic == "LBL":
                first = rung.elements[0]
                if pos != 0 or not (isinstance(first, Instr) and first is instr):
                    raise ProjectError(
                        f"{where}: LBL must be the first element of its rung"
                    )
                labels.add(instr.operands[0].base)
    for rung in routine.rungs:
        for instr in _walk_instrs(rung.elements):
            if instr.mnemonic == "JMP":
                target = instr.operands[0].base
                if target not in labels:
                    raise UnknownLabelError(
                        f"{where}: JMP to undefined label {target}"
                    )


def validate_project(project: Project) -> None:
    """Structural validation; raises ProjectError subclasses.

    Type-level operand checks (e.g. XIC on a DINT) live in the VM compiler;
    this pass guards names, labels, duplicates, and declaration shape.
    """
    if not (0 <= project.serial_number < 2**32):
        raise ProjectError("serial number out of 32-bit range")

    seen = set()
    for t in project.tags:
        if t.name in seen:
            raise DuplicateTagError(f"duplicate tag {t.name}")
        seen.add(t.name)
        if t.name == WALLCLOCK:
            raise ProjectError(f"{WALLCLOCK} is a reserved name")
        _validate_tagdecl(t, io_allowed=True)

    aoi_names = set()
    for a in project.aois:
        if a.name in aoi_names or a.name in INSTRUCTION_ARITY:
            raise DuplicateTagError(f"AOI name {a.name} duplicated or reserved")
        aoi_names.add(a.name)
        local_names = set()
        for p in a.params:
            if p.dtype.is_array or p.dtype.base not in ("BOOL", "DINT", "REAL"):
                raise ProjectError(
                    f"AOI {a.name}: param {p.name} must be scalar BOOL/DINT/REAL"
                )
            if p.name in local_names:
                raise DuplicateTagError(f"AOI {a.name}: duplicate name {p.name}")
            local_names.add(p.name)
        for t in a.local_tags:
            if t.name in local_names:
                raise DuplicateTagError(f"AOI {a.name}: duplicate name {t.name}")
            local_names.add(t.name)
            _validate_tagdecl(t, io_allowed=False)
        for instr in (i for r in a.logic.rungs for i in _walk_instrs(r.elements)):
            if instr.mnemonic == "JSR":
                raise ProjectError(
                    f"AOI {a.name}: JSR is not allowed inside AOI logic"
                )
            for base in _tag_bases(instr):
                if base not in local_names and base != WALLCLOCK:
                    raise ProjectError(
                        f"AOI {a.name}: {base} is neither a param nor a local tag"
                    )
        _validate_routine_labels(a.logic, f"AOI {a.name}")

    if not project.programs:
        raise ProjectError("project has no programs")
    channels = set()
    for t in project.tags:
        if t.io is not None:
            key = (t.io.direction, t.io.channel)
            if key in channels:
                raise ProjectError(
                    f"channel {t.io.direction}:{t.io.channel} bound twice"
                )
            channels.add(key)

    prog_names = set()
    for p in project.programs:
        if p.name in prog_names:
            raise DuplicateTagError(f"duplicate program {p.name}")
        prog_names.add(p.name)
        rnames = set()
        for r in p.routines:
            if r.name in rnames:
                raise DuplicateTagError(f"duplicate routine {p.name}/{r.name}")
            rnames.add(r.name)
        if p.main not in rnames:
            raise UnknownRoutineError(
                f"program {p.name}: main routine {p.main} not defined"
            )
        for r in p.routines:
            _validate_routine_labels(r, f"{p.name}/{r.name}")
            for instr in (i for rng in r.rungs for i in _walk_instrs(rng.elements)):
                if instr.mnemonic == "JSR":
                    target = instr.operands[0]
                    if not isinstance(target, TagPath) or target.parts:
                        raise ProjectError(
                            f"{p.name}/{r.name}: JSR operand must be a routine name"
                        )
                    if target.base not in rnames:
                        raise UnknownRoutineError(
                            f"{p.name}/{r.name}: JSR to undefined routine "
                            f"{target.base}"
                        )


def _validate_tagdecl(t: TagDecl, io_allowed: bool) -> None:
    if t.dtype.is_array:
        if t.dtype.base not in ("DINT", "REAL"):
            raise ProjectError(f"tag {t.name}: only DINT/REAL arrays exist")
        if t.dtype.length < 1:
            raise ProjectError(f"tag {t.name}: array length must be >= 1")
        if t.initial is not None:
            raise ProjectError(f"tag {t.name}: arrays take no initializer")
    elif t.dtype.base not in SCALAR_BYTES:
        raise ProjectError(f"tag {t.name}: unknown type {t.dtype.base}")
    if t.initial is not None:
        if t.dtype.base == "BOOL" and t.initial not in (0, 1):
            raise ProjectError(f"tag {t.name}: BOOL initial must be 0 or 1")
        if t.dtype.base in ("TIMER", "CONTROL") and not isinstance(t.initial, int):
            raise ProjectError(f"tag {t.name}: {t.dtype.base} initial must be DINT")
    if t.io is not None:
        if not io_allowed:
            raise ProjectError(f"tag {t.name}: io binding not allowed here")
        if t.dtype.is_array or t.dtype.base not in ("BOOL", "DINT", "REAL"):
            raise ProjectError(f"tag {t.name}: io binding requires a scalar")
        if t.io.direction not in ("IN", "OUT") or t.io.channel < 0:
            raise ProjectError(f"tag {t.name}: bad io binding")
