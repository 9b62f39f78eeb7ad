"""Deterministic scan-cycle virtual machine.

Each scan latches bound input channels into their tags, executes every
program's main routine rung by rung, then publishes output-bound tags to
their channels, so outputs only change at scan boundaries.  Time is
simulated: ``dt_ms`` is credited to the wall clock and to every enabled
timer once per scan, which makes month-long timer chains testable in
milliseconds.

Semantics notes (fixed by this implementation):

* Rung evaluation is a left-to-right series; a branch evaluates all of its
  paths (side effects always run) and ORs their results.
* DINT arithmetic wraps modulo 2^32 into the signed 32-bit range; REAL is
  IEEE double.
* TON accumulates while its rung-in is true (ACC capped at PRE, DN when ACC
  reaches PRE) and fully resets while false.
* FFL loads on the rising edge of its rung-in, using control.EN as the edge
  memory; a load with POS beyond the array's physical size is an
  ArraySubscript major fault.
* JMP transfers to the rung whose first element is the matching LBL.
* JSR pushes a frame; a call that would exceed depth 64 is a StackOverflow
  major fault.  100000 instruction executions per scan is a Watchdog fault.
* AOI invocations copy In params in, run the definition's logic, copy Out
  params back.  AOI locals persist across scans per definition
  (single-instance semantics).
* ``WALLCLOCK`` is a reserved read/write DINT view of the wall clock
  (milliseconds, modulo 2^32); it is how "modify system" payloads reach the
  system clock, since the instruction table is closed.

A fault sticks: the VM refuses further scans until ``reset_fault``.
"""

from __future__ import annotations

import re
import weakref
from dataclasses import dataclass

from .model import (
    AoiDef,
    Branch,
    COMPARISONS,
    DataType,
    Instr,
    LadderError,
    Project,
    TagPath,
    WALLCLOCK,
    format_real,
    validate_project,
)

WATCHDOG_BUDGET = 100_000
MAX_CALL_DEPTH = 64
_U32 = 1 << 32
_I32_MAX = 1 << 31


class CompileError(LadderError):
    """Operand or type misuse detected when preparing a project to run."""


class PendingFaultError(LadderError):
    """scan() called while the VM is faulted."""


class NotAnArrayError(LadderError):
    pass


class CountOutOfRangeError(LadderError):
    pass


@dataclass(frozen=True)
class Fault:
    kind: str        # "ArraySubscript" | "StackOverflow" | "Watchdog"
    detail: str
    program: str
    routine: str
    rung_index: int
    scan: int


class FaultRaised(LadderError):
    def __init__(self, fault: Fault):
        self.fault = fault
        super().__init__(
            f"{fault.kind} in {fault.program}/{fault.routine} rung "
            f"{fault.rung_index} at scan {fault.scan}: {fault.detail}"
        )


class _FaultSignal(Exception):
    def __init__(self, kind: str, detail: str):
        self.kind = kind
        self.detail = detail


class _Jump(Exception):
    def __init__(self, target: int):
        self.target = target


class _Return(Exception):
    pass


def _wrap32(v: int) -> int:
    v &= 0xFFFFFFFF
    return v - _U32 if v >= _I32_MAX else v


class TimerState:
    """On-delay timer backing data: PRE, ACC (ms), EN, DN bits."""

    __slots__ = ("pre", "acc", "en", "dn")

    def __init__(self, pre: int = 0, acc: int = 0, en: int = 0, dn: int = 0):
        self.pre = pre
        self.acc = acc
        self.en = en
        self.dn = dn

    def __eq__(self, other):
        return (isinstance(other, TimerState)
                and (self.pre, self.acc, self.en, self.dn)
                == (other.pre, other.acc, other.en, other.dn))

    def __repr__(self):
        return (f"TimerState(pre={self.pre}, acc={self.acc}, "
                f"en={self.en}, dn={self.dn})")


class ControlState:
    """FIFO control backing data: LEN, POS, EN (edge memory), DN, EM."""

    __slots__ = ("len", "pos", "en", "dn", "em")

    def __init__(self, len: int = 0, pos: int = 0, en: int = 0,
                 dn: int = 0, em: int = 1):
        self.len = len
        self.pos = pos
        self.en = en
        self.dn = dn
        self.em = em

    def __eq__(self, other):
        return (isinstance(other, ControlState)
                and (self.len, self.pos, self.en, self.dn, self.em)
                == (other.len, other.pos, other.en, other.dn, other.em))

    def __repr__(self):
        return (f"ControlState(len={self.len}, pos={self.pos}, en={self.en}, "
                f"dn={self.dn}, em={self.em})")


class VmState:
    """Owned by a single execution context; never share mid-scan."""

    __slots__ = ("tags", "aoi_mem", "inputs", "outputs", "scan_count",
                 "wall_clock_ms", "fault")

    def __init__(self, tags, aoi_mem):
        self.tags = tags
        self.aoi_mem = aoi_mem
        self.inputs: dict = {}
        self.outputs: dict = {}
        self.scan_count = 0
        self.wall_clock_ms = 0
        self.fault: Fault | None = None

    def reset_fault(self) -> None:
        self.fault = None


class _Ctx:
    __slots__ = ("tags", "aoi", "state", "dt", "budget", "depth",
                 "program", "routine", "rung")

    def __init__(self, state: VmState, dt: int):
        self.tags = state.tags
        self.aoi = state.aoi_mem
        self.state = state
        self.dt = dt
        self.budget = WATCHDOG_BUDGET
        self.depth = 0
        self.program = ""
        self.routine = ""
        self.rung = 0


# ---------------------------------------------------------------------------
# Compilation

_BIT_MEMBERS = {"TIMER": ("EN", "DN"), "CONTROL": ("EN", "DN", "EM")}
_NUM_MEMBERS = {"TIMER": ("PRE", "ACC"), "CONTROL": ("LEN", "POS")}
_MEMBER_ATTR = {"PRE": "pre", "ACC": "acc", "EN": "en", "DN": "dn",
                "LEN": "len", "POS": "pos", "EM": "em"}


class _Scope:
    """Resolves tag paths to reader/writer closures for one storage root."""

    def __init__(self, types: dict, ns: str | None):
        self.types = types
        self.ns = ns  # None = controller tags, else AOI memory namespace

    def _cell_get(self, name):
        if self.ns is None:
            return lambda ctx: ctx.tags[name]
        ns = self.ns
        return lambda ctx: ctx.aoi[ns][name]

    def _cell_set(self, name):
        if self.ns is None:
            def set_(ctx, v):
                ctx.tags[name] = v
        else:
            ns = self.ns

            def set_(ctx, v):
                ctx.aoi[ns][name] = v
        return set_

    def dtype_of(self, path: TagPath, where: str) -> DataType:
        t = self.types.get(path.base)
        if t is None:
            if path.base == WALLCLOCK:
                return DataType("DINT")
            raise CompileError(f"{where}: unknown tag {path.base}")
        return t

    def _index_reader(self, idx, where: str):
        """Array index: constant or a DINT scalar path."""
        if isinstance(idx, int):
            return None, idx
        sub = self.read_number(idx, where + " (index)")
        return sub, None

    def _array_access(self, path: TagPath, where: str):
        dt = self.dtype_of(path, where)
        if not dt.is_array or len(path.parts) != 1 or path.parts[0][0] != "index":
            raise CompileError(f"{where}: {path} is not an array element")
        get = self._cell_get(path.base)
        sub, const = self._index_reader(path.parts[0][1], where)
        name = path.base
        return dt, get, sub, const, name

    def read_number(self, op, where: str):
        """Reader for a numeric value: literal, scalar, member, or element."""
        if isinstance(op, (int, float)) and not isinstance(op, bool):
            v = op
            return lambda ctx: v
        if not isinstance(op, TagPath):
            raise CompileError(f"{where}: bad operand {op!r}")
        if op.base == WALLCLOCK and not op.parts:
            return lambda ctx: _wrap32(ctx.state.wall_clock_ms)
        dt = self.dtype_of(op, where)
        if not op.parts:
            if dt.is_array:
                raise CompileError(f"{where}: {op.base} is an array, not a value")
            if dt.base in ("TIMER", "CONTROL"):
                raise CompileError(f"{where}: {op.base} needs a member access")
            return self._cell_get(op.base)
        kind, payload = op.parts[0]
        if kind == "member":
            if len(op.parts) != 1 or dt.base not in _NUM_MEMBERS:
                raise CompileError(f"{where}: bad member access {op}")
            allowed = _NUM_MEMBERS[dt.base] + _BIT_MEMBERS[dt.base]
            if payload not in allowed:
                raise CompileError(f"{where}: {dt.base} has no member {payload}")
            attr = _MEMBER_ATTR[payload]
            get = self._cell_get(op.base)
            return lambda ctx: getattr(get(ctx), attr)
        _, get, sub, const, name = self._array_access(op, where)
        if sub is None:
            i = const

            def read(ctx):
                arr = get(ctx)
                if i >= len(arr):
                    raise _FaultSignal(
                        "ArraySubscript",
                        f"{name}[{i}] beyond physical size {len(arr)}")
                return arr[i]
        else:
            def read(ctx):
                arr = get(ctx)
                i = sub(ctx)
                if not 0 <= i < len(arr):
                    raise _FaultSignal(
                        "ArraySubscript",
                        f"{name}[{i}] beyond physical size {len(arr)}")
                return arr[i]
        return read

    def read_bit(self, op, where: str):
        """Reader for a contact: BOOL tag or a status bit member."""
        if not isinstance(op, TagPath):
            raise CompileError(f"{where}: contact needs a tag, got {op!r}")
        dt = self.dtype_of(op, where)
        if not op.parts:
            if dt.base != "BOOL":
                raise CompileError(f"{where}: {op.base} is not a BOOL")
            return self._cell_get(op.base)
        kind, payload = op.parts[0]
        if (kind != "member" or len(op.parts) != 1
                or dt.base not in _BIT_MEMBERS
                or payload not in _BIT_MEMBERS[dt.base]):
            raise CompileError(f"{where}: {op} is not a status bit")
        attr = _MEMBER_ATTR[payload]
        get = self._cell_get(op.base)
        return lambda ctx: getattr(get(ctx), attr)

    def write_bool(self, op, where: str):
        if not isinstance(op, TagPath) or op.parts:
            raise CompileError(f"{where}: coil needs a BOOL tag")
        dt = self.dtype_of(op, where)
        if dt.base != "BOOL" or op.base == WALLCLOCK:
            raise CompileError(f"{where}: {op.base} is not a BOOL")
        return self._cell_set(op.base)

    def write_number(self, op, where: str):
        if not isinstance(op, TagPath):
            raise CompileError(f"{where}: destination must be a tag")
        if op.base == WALLCLOCK and not op.parts:
            def wr(ctx, v):
                ctx.state.wall_clock_ms = int(v) % _U32
            return wr
        dt = self.dtype_of(op, where)
        if not op.parts:
            set_ = self._cell_set(op.base)
            if dt.base == "DINT":
                return lambda ctx, v: set_(ctx, _wrap32(int(v)))
            if dt.base == "REAL":
                return lambda ctx, v: set_(ctx, float(v))
            raise CompileError(f"{where}: cannot store a number in {op.base}")
        kind, payload = op.parts[0]
        if kind == "member":
            if (len(op.parts) != 1 or dt.base not in _NUM_MEMBERS
                    or payload not in _NUM_MEMBERS[dt.base]):
                raise CompileError(f"{where}: {op} is not writable")
            attr = _MEMBER_ATTR[payload]
            get = self._cell_get(op.base)

            def wr(ctx, v):
                setattr(get(ctx), attr, _wrap32(int(v)))
            return wr
        adt, get, sub, const, name = self._array_access(op, where)
        coerce = (lambda v: _wrap32(int(v))) if adt.base == "DINT" else float
        if sub is None:
            i = const

            def wr(ctx, v):
                arr = get(ctx)
                if i >= len(arr):
                    raise _FaultSignal(
                        "ArraySubscript",
                        f"{name}[{i}] beyond physical size {len(arr)}")
                arr[i] = coerce(v)
        else:
            def wr(ctx, v):
                arr = get(ctx)
                i = sub(ctx)
                if not 0 <= i < len(arr):
                    raise _FaultSignal(
                        "ArraySubscript",
                        f"{name}[{i}] beyond physical size {len(arr)}")
                arr[i] = coerce(v)
        return wr

    def structured(self, op, base: str, where: str):
        """Whole-tag access to a TIMER or CONTROL."""
        if not isinstance(op, TagPath) or op.parts:
            raise CompileError(f"{where}: expected a {base} tag")
        dt = self.dtype_of(op, where)
        if dt.base != base:
            raise CompileError(f"{where}: {op.base} is not a {base}")
        return self._cell_get(op.base)

    def array(self, op, where: str):
        if not isinstance(op, TagPath) or op.parts:
            raise CompileError(f"{where}: expected an array tag")
        dt = self.dtype_of(op, where)
        if not dt.is_array:
            raise CompileError(f"{where}: {op.base} is not an array")
        return dt, self._cell_get(op.base)


def _watchdog():
    return _FaultSignal("Watchdog",
                        f"instruction budget {WATCHDOG_BUDGET} exceeded")


class _Compiler:
    def __init__(self, project: Project):
        validate_project(project)
        self.project = project
        self.aoi_defs = {a.name: a for a in project.aois}
        self.aoi_runners: dict[str, object] = {}
        self.aoi_binds: dict[str, tuple] = {}

    def compile(self) -> "CompiledProject":
        project = self.project
        tag_types = {t.name: t.dtype for t in project.tags}
        for a in project.aois:
            self._compile_aoi(a)
        program_runners = []
        for prog in project.programs:
            scope = _Scope(tag_types, None)
            runners: dict[str, object] = {}
            for routine in prog.routines:
                runners[routine.name] = self._compile_routine(
                    prog.name, routine, scope, runners)
            program_runners.append(runners[prog.main])
        input_binds = sorted(
            (t.name, t.io.channel, t.dtype.base)
            for t in project.tags if t.io and t.io.direction == "IN")
        output_binds = sorted(
            ((t.name, t.io.channel)
             for t in project.tags if t.io and t.io.direction == "OUT"),
            key=lambda pair: pair[1])
        return CompiledProject(project, program_runners,
                               input_binds, output_binds, self.aoi_defs)

    # -- routines

    def _compile_routine(self, prog_name, routine, scope, runners):
        labels = {}
        for idx, rung in enumerate(routine.rungs):
            first = rung.elements[0]
            if isinstance(first, Instr) and first.mnemonic == "LBL":
                labels[first.operands[0].base] = idx
        rung_fns = [
            self._compile_series(rung.elements, scope, labels, runners,
                                 f"{prog_name}/{routine.name} N{idx}")
            for idx, rung in enumerate(routine.rungs)
        ]
        rname = routine.name

        def run(ctx):
            prev = ctx.routine
            ctx.routine = rname
            pc = 0
            n = len(rung_fns)
            while pc < n:
                ctx.rung = pc
                try:
                    rung_fns[pc](ctx, 1)
                except _Jump as j:
                    pc = j.target
                    continue
                except _Return:
                    break
                pc += 1
            ctx.routine = prev
        return run

    def _compile_series(self, elements, scope, labels, runners, where):
        fns = [self._compile_element(e, scope, labels, runners, where)
               for e in elements]
        if len(fns) == 1:
            return fns[0]

        def run(ctx, cond):
            for f in fns:
                cond = f(ctx, cond)
            return cond
        return run

    def _compile_element(self, el, scope, labels, runners, where):
        if isinstance(el, Branch):
            paths = [self._compile_series(p, scope, labels, runners, where)
                     for p in el.paths]

            def run(ctx, cond):
                out = 0
                for p in paths:
                    if p(ctx, cond):
                        out = 1
                return out
            return run
        return self._compile_instr(el, scope, labels, runners, where)

    def _compile_instr(self, instr: Instr, scope: _Scope, labels, runners,
                       where):
        m = instr.mnemonic
        ops = instr.operands
        loc = f"{where} {m}"

        if m == "XIC" or m == "XIO":
            rd = scope.read_bit(ops[0], loc)
            want = 1 if m == "XIC" else 0

            def run(ctx, cond):
                b = ctx.budget - 1
                if b < 0:
                    raise _watchdog()
                ctx.budget = b
                if cond and (1 if rd(ctx) else 0) == want:
                    return 1
                return 0
            return run

        if m in ("OTE", "OTL", "OTU"):
            wr = scope.write_bool(ops[0], loc)
            if m == "OTE":
                def run(ctx, cond):
                    b = ctx.budget - 1
                    if b < 0:
                        raise _watchdog()
                    ctx.budget = b
                    wr(ctx, 1 if cond else 0)
                    return cond
            else:
                val = 1 if m == "OTL" else 0

                def run(ctx, cond):
                    b = ctx.budget - 1
                    if b < 0:
                        raise _watchdog()
                    ctx.budget = b
                    if cond:
                        wr(ctx, val)
                    return cond
            return run

        if m == "MOV":
            rd = scope.read_number(ops[0], loc)
            wr = scope.write_number(ops[1], loc)

            def run(ctx, cond):
                b = ctx.budget - 1
                if b < 0:
                    raise _watchdog()
                ctx.budget = b
                if cond:
                    wr(ctx, rd(ctx))
                return cond
            return run

        if m in ("ADD", "SUB"):
            ra = scope.read_number(ops[0], loc)
            rb = scope.read_number(ops[1], loc)
            wr = scope.write_number(ops[2], loc)
            sign = 1 if m == "ADD" else -1

            def run(ctx, cond):
                b = ctx.budget - 1
                if b < 0:
                    raise _watchdog()
                ctx.budget = b
                if cond:
                    wr(ctx, ra(ctx) + sign * rb(ctx))
                return cond
            return run

        if m in COMPARISONS:
            ra = scope.read_number(ops[0], loc)
            rb = scope.read_number(ops[1], loc)
            import operator
            op_fn = {"EQU": operator.eq, "NEQ": operator.ne,
                     "GRT": operator.gt, "LES": operator.lt,
                     "GEQ": operator.ge, "LEQ": operator.le}[m]

            def run(ctx, cond):
                b = ctx.budget - 1
                if b < 0:
                    raise _watchdog()
                ctx.budget = b
                if cond and op_fn(ra(ctx), rb(ctx)):
                    return 1
                return 0
            return run

        if m == "TON":
            get = scope.structured(ops[0], "TIMER", loc)

            def run(ctx, cond):
                b = ctx.budget - 1
                if b < 0:
                    raise _watchdog()
                ctx.budget = b
                t = get(ctx)
                if cond:
                    t.en = 1
                    acc = t.acc + ctx.dt
                    t.acc = acc if acc < t.pre else t.pre
                    t.dn = 1 if t.acc >= t.pre else 0
                else:
                    t.en = 0
                    t.acc = 0
                    t.dn = 0
                return cond
            return run

        if m == "FFL":
            rd = scope.read_number(ops[0], loc)
            adt, get_arr = scope.array(ops[1], loc)
            get_ctl = scope.structured(ops[2], "CONTROL", loc)
            if not isinstance(ops[3], int) or isinstance(ops[3], bool) \
                    or ops[3] < 1:
                raise CompileError(f"{loc}: FFL length must be a positive "
                                   f"integer literal")
            length = ops[3]
            coerce = (lambda v: _wrap32(int(v))) if adt.base == "DINT" \
                else float
            arr_name = ops[1].base

            def run(ctx, cond):
                b = ctx.budget - 1
                if b < 0:
                    raise _watchdog()
                ctx.budget = b
                c = get_ctl(ctx)
                rising = cond and not c.en
                c.en = 1 if cond else 0
                c.len = length
                if rising and c.pos < length:
                    arr = get_arr(ctx)
                    if c.pos >= len(arr):
                        raise _FaultSignal(
                            "ArraySubscript",
                            f"FFL into {arr_name}[{c.pos}] beyond physical "
                            f"size {len(arr)}")
                    arr[c.pos] = coerce(rd(ctx))
                    c.pos += 1
                c.dn = 1 if c.pos >= length else 0
                c.em = 1 if c.pos == 0 else 0
                return cond
            return run

        if m == "JSR":
            target = ops[0].base

            def run(ctx, cond):
                b = ctx.budget - 1
                if b < 0:
                    raise _watchdog()
                ctx.budget = b
                if cond:
                    if ctx.depth >= MAX_CALL_DEPTH:
                        raise _FaultSignal(
                            "StackOverflow",
                            f"call depth {MAX_CALL_DEPTH} exceeded at "
                            f"JSR {target}")
                    ctx.depth += 1
                    try:
                        runners[target](ctx)
                    finally:
                        ctx.depth -= 1
                return cond
            return run

        if m == "SBR" or m == "LBL":
            def run(ctx, cond):
                b = ctx.budget - 1
                if b < 0:
                    raise _watchdog()
                ctx.budget = b
                return cond
            return run

        if m == "RET":
            def run(ctx, cond):
                b = ctx.budget - 1
                if b < 0:
                    raise _watchdog()
                ctx.budget = b
                if cond:
                    raise _Return()
                return cond
            return run

        if m == "JMP":
            label = ops[0].base
            target = labels[label]

            def run(ctx, cond):
                b = ctx.budget - 1
                if b < 0:
                    raise _watchdog()
                ctx.budget = b
                if cond:
                    raise _Jump(target)
                return cond
            return run

        # AOI invocation
        aoi = self.aoi_defs.get(m)
        if aoi is None:
            raise CompileError(f"{loc}: unknown instruction")
        return self._compile_aoi_call(aoi, ops, scope, loc)

    # -- AOIs

    def _compile_aoi(self, aoi: AoiDef):
        types = {p.name: p.dtype for p in aoi.params}
        types.update({t.name: t.dtype for t in aoi.local_tags})
        scope = _Scope(types, aoi.name)
        runner = self._compile_routine(aoi.name, aoi.logic, scope, {})
        self.aoi_runners[aoi.name] = runner

    def _compile_aoi_call(self, aoi: AoiDef, ops, scope: _Scope, loc):
        ns = aoi.name
        logic = self.aoi_runners[ns]
        copy_in = []
        copy_out = []
        for param, op in zip(aoi.params, ops):
            base = param.dtype.base
            if base == "BOOL":
                coerce = lambda v: 1 if v else 0  # noqa: E731
            elif base == "DINT":
                coerce = lambda v: _wrap32(int(v))  # noqa: E731
            else:
                coerce = float
            if param.usage in ("In", "InOut"):
                rd = (scope.read_bit(op, loc) if base == "BOOL"
                      and isinstance(op, TagPath)
                      else scope.read_number(op, loc))
                copy_in.append((param.name, rd, coerce))
            if param.usage in ("Out", "InOut"):
                wr = (scope.write_bool(op, loc) if base == "BOOL"
                      else scope.write_number(op, loc))
                copy_out.append((param.name, wr))

        def run(ctx, cond):
            b = ctx.budget - 1
            if b < 0:
                raise _watchdog()
            ctx.budget = b
            if cond:
                mem = ctx.aoi[ns]
                for name, rd, coerce in copy_in:
                    mem[name] = coerce(rd(ctx))
                prev = ctx.program
                ctx.program = f"{prev}:{ns}"
                try:
                    logic(ctx)
                finally:
                    ctx.program = prev
                for name, wr in copy_out:
                    wr(ctx, mem[name])
            return cond
        return run


def _zero_value(dtype: DataType, initial):
    if dtype.is_array:
        fill = 0 if dtype.base == "DINT" else 0.0
        return [fill] * dtype.length
    if dtype.base == "TIMER":
        return TimerState(pre=int(initial or 0))
    if dtype.base == "CONTROL":
        return ControlState(len=int(initial or 0))
    if dtype.base == "REAL":
        return float(initial or 0.0)
    if dtype.base == "BOOL":
        return 1 if initial else 0
    return _wrap32(int(initial or 0))


class CompiledProject:
    """A project lowered to closures; reusable across many fresh states."""

    def __init__(self, project, program_runners, input_binds, output_binds,
                 aoi_defs):
        self.project = project
        self._program_runners = program_runners
        self.input_binds = input_binds
        self.output_binds = output_binds
        self._aoi_defs = aoi_defs

    def make_state(self) -> VmState:
        tags = {t.name: _zero_value(t.dtype, t.initial)
                for t in self.project.tags}
        aoi_mem = {}
        for a in self._aoi_defs.values():
            mem = {p.name: _zero_value(p.dtype, None) for p in a.params}
            for t in a.local_tags:
                mem[t.name] = _zero_value(t.dtype, t.initial)
            aoi_mem[a.name] = mem
        return VmState(tags, aoi_mem)


def compile_project(project: Project) -> CompiledProject:
    return _Compiler(project).compile()


_compiled_cache: dict[int, tuple] = {}


def _compiled_for(project) -> CompiledProject:
    if isinstance(project, CompiledProject):
        return project
    entry = _compiled_cache.get(id(project))
    if entry is not None and entry[0]() is project:
        return entry[1]
    cp = compile_project(project)
    key = id(project)
    # The cache dict is bound as a default so the callback stays valid
    # during interpreter shutdown, when module globals may already be gone.
    _compiled_cache[key] = (
        weakref.ref(project,
                    lambda _, k=key, c=_compiled_cache: c.pop(k, None)),
        cp,
    )
    return cp


# ---------------------------------------------------------------------------
# Execution


def _coerce_input(base: str, v):
    if base == "BOOL":
        return 1 if v else 0
    if base == "REAL":
        return float(v)
    return _wrap32(int(v))


def scan(state: VmState, project, dt_ms: int, inputs: dict | None = None
         ) -> VmState:
    """Run one scan in place; raises FaultRaised on a major fault.

    ``inputs`` updates the latched channel map before the input scan;
    channels not present hold their previous value.
    """
    cp = _compiled_for(project)
    if state.fault is not None:
        raise PendingFaultError(
            f"VM faulted ({state.fault.kind}); reset_fault() to continue")
    state.scan_count += 1
    state.wall_clock_ms = (state.wall_clock_ms + dt_ms) % _U32
    if inputs:
        state.inputs.update(inputs)
    latched = state.inputs
    tags = state.tags
    for name, ch, base in cp.input_binds:
        if ch in latched:
            tags[name] = _coerce_input(base, latched[ch])
    ctx = _Ctx(state, dt_ms)
    try:
        for prog, runner in zip(cp.project.programs, cp._program_runners):
            ctx.program = prog.name
            ctx.depth = 1
            runner(ctx)
    except _FaultSignal as sig:
        state.fault = Fault(sig.kind, sig.detail, ctx.program, ctx.routine,
                            ctx.rung, state.scan_count)
        raise FaultRaised(state.fault) from None
    for name, ch in cp.output_binds:
        state.outputs[ch] = tags[name]
    return state


# ---------------------------------------------------------------------------
# Traces

_PROBE_RE = re.compile(
    r"^([A-Za-z_]\w*)(?:\[(\d+)\])?(?:\.([A-Za-z]+))?$")


def probe_reader(path: str):
    """Reader for a trace probe: ``Tag``, ``Arr[3]``, or ``Timer.ACC``.

    Controller tags shadow instruction-block locals; a name not found in
    the controller table is looked up in the instruction-block namespaces
    (sorted order), so probes can watch state an attack keeps out of the
    tag table.
    """
    m = _PROBE_RE.match(path)
    if not m:
        raise LadderError(f"bad probe path {path!r}")
    name, idx, member = m.group(1), m.group(2), m.group(3)

    def read(state: VmState):
        if name in state.tags:
            v = state.tags[name]
        else:
            for ns in sorted(state.aoi_mem):
                if name in state.aoi_mem[ns]:
                    v = state.aoi_mem[ns][name]
                    break
            else:
                raise LadderError(f"unknown probe tag {name!r}")
        if idx is not None:
            v = v[int(idx)]
        if member is not None:
            v = getattr(v, _MEMBER_ATTR[member])
        return v
    return read


def read_probe(state: VmState, path: str):
    return probe_reader(path)(state)


def format_value(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


@dataclass(frozen=True)
class ScanRecord:
    scan: int
    clock_ms: int
    fault: str | None
    values: tuple  # ((name, value), ...) sorted by name

    def line(self) -> str:
        head = f"scan={self.scan} clock={self.clock_ms} " \
               f"fault={self.fault or '-'}"
        tail = " ".join(f"{k}={format_value(v)}" for k, v in self.values)
        return f"{head} {tail}" if tail else head


@dataclass(frozen=True)
class ScanTrace:
    records: tuple

    def to_text(self) -> str:
        return "".join(r.line() + "\n" for r in self.records)

    @property
    def fault(self) -> str | None:
        return self.records[-1].fault if self.records else None

    def outputs_per_scan(self) -> list:
        return [r.values for r in self.records]


def run(project, input_trace=None, dt_ms: int = 100, scans: int | None = None,
        watch: tuple = (), state: VmState | None = None) -> ScanTrace:
    """Run scans over an input trace; stops at the first major fault.

    ``input_trace`` is a per-scan list of channel->value maps (missing scans
    hold the last latched values).  Every output-bound tag is recorded each
    scan, plus any ``watch`` probe paths.
    """
    cp = _compiled_for(project)
    if state is None:
        state = cp.make_state()
    if scans is None:
        if input_trace is None:
            raise LadderError("run() needs an input trace or a scan count")
        scans = len(input_trace)
    out_tags = sorted(name for name, _ in cp.output_binds)
    probes = [(p, probe_reader(p)) for p in watch if p not in out_tags]
    names = out_tags + [p for p, _ in probes]
    order = sorted(range(len(names)), key=lambda i: names[i])
    records = []
    tags = state.tags
    for i in range(scans):
        inputs = None
        if input_trace is not None and i < len(input_trace):
            inputs = input_trace[i]
        fault_kind = None
        try:
            scan(state, cp, dt_ms, inputs)
        except FaultRaised as exc:
            fault_kind = exc.fault.kind
        vals = [tags[n] for n in out_tags]
        vals += [rd(state) for _, rd in probes]
        records.append(ScanRecord(
            scan=state.scan_count,
            clock_ms=state.wall_clock_ms,
            fault=fault_kind,
            values=tuple((names[j], vals[j]) for j in order),
        ))
        if fault_kind is not None:
            break
    return ScanTrace(tuple(records))


def export_fifo_csv(state: VmState, array_tag: str, count: int) -> str:
    """First ``count`` elements of an array as ``index,value`` CSV text."""
    arr = state.tags.get(array_tag)
    if not isinstance(arr, list):
        raise NotAnArrayError(f"{array_tag} is not an array tag")
    if not 0 <= count <= len(arr):
        raise CountOutOfRangeError(
            f"count {count} outside 0..{len(arr)} for {array_tag}")
    lines = ["index,value"]
    lines.extend(f"{i},{format_value(arr[i])}" for i in range(count))
    return "\n".join(lines) + "\n"


__all__ = [
    "CompileError", "CompiledProject", "ControlState", "CountOutOfRangeError",
    "Fault", "FaultRaised", "NotAnArrayError", "PendingFaultError",
    "ScanRecord", "ScanTrace", "TimerState", "VmState", "WATCHDOG_BUDGET",
    "MAX_CALL_DEPTH", "compile_project", "export_fifo_csv", "format_value",
    "probe_reader", "read_probe", "run", "scan",
]
