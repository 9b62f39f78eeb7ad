"""Scan-cycle interpreter: instruction semantics, faults, traces.

Most tests build tiny projects from source text so the frozen format and
the VM are exercised together, the way every real caller uses them.
"""

import pytest
from hypothesis import given, settings, strategies as st

from llbforge.l5k import parse
from llbforge.model import WALLCLOCK
from llbforge.vm import (
    MAX_CALL_DEPTH,
    WATCHDOG_BUDGET,
    ControlState,
    FaultRaised,
    PendingFaultError,
    TimerState,
    compile_project,
    export_fifo_csv,
    read_probe,
    run,
    scan,
)

I32_MIN, I32_MAX = -(2**31), 2**31 - 1


def build(tags: str, rungs: str, extra_blocks: str = ""):
    body = "\n".join(f"    {ln.strip()}" for ln in tags.strip().splitlines())
    logic = "\n".join(f"    N{i}: {ln.strip()}"
                      for i, ln in enumerate(rungs.strip().splitlines()))
    text = (
        "CONTROLLER T (SerialNumber := 16#0000_0001)\n"
        f"TAG\n{body}\nEND_TAG\n"
        f"{extra_blocks}"
        "PROGRAM P (Main := Main)\n"
        f"ROUTINE Main\n{logic}\nEND_ROUTINE\n"
        "END_PROGRAM\nEND_CONTROLLER\n"
    )
    return parse(text)


def run_scans(project, n, inputs=None, dt=100):
    cp = compile_project(project)
    state = cp.make_state()
    for i in range(n):
        scan(state, cp, dt, inputs[i] if inputs else None)
    return state


class TestContactsAndCoils:
    def test_xic_xio_ote(self):
        p = build("a : BOOL @ IN : 0 ;\n q : BOOL ;\n r : BOOL ;",
                  "XIC(a)OTE(q);\nXIO(a)OTE(r);")
        st1 = run_scans(p, 1, [{0: 1}])
        assert (st1.tags["q"], st1.tags["r"]) == (1, 0)
        st0 = run_scans(p, 1, [{0: 0}])
        assert (st0.tags["q"], st0.tags["r"]) == (0, 1)

    def test_ote_clears_when_rung_false(self):
        p = build("a : BOOL @ IN : 0 ;\n q : BOOL ;", "XIC(a)OTE(q);")
        s = run_scans(p, 2, [{0: 1}, {0: 0}])
        assert s.tags["q"] == 0

    def test_latch_unlatch_persist(self):
        p = build("a : BOOL @ IN : 0 ;\n b : BOOL @ IN : 1 ;\n q : BOOL ;",
                  "XIC(a)OTL(q);\nXIC(b)OTU(q);")
        s = run_scans(p, 3, [{0: 1, 1: 0}, {0: 0, 1: 0}, {0: 0, 1: 1}])
        assert s.tags["q"] == 0
        s = run_scans(p, 2, [{0: 1, 1: 0}, {0: 0, 1: 0}])
        assert s.tags["q"] == 1

    def test_branch_is_or_of_paths(self):
        p = build("a : BOOL @ IN : 0 ;\n b : BOOL @ IN : 1 ;\n q : BOOL ;",
                  "[XIC(a),XIC(b)]OTE(q);")
        for a, b, want in ((0, 0, False), (1, 0, True), (0, 1, True),
                           (1, 1, True)):
            s = run_scans(p, 1, [{0: a, 1: b}])
            assert s.tags["q"] == want

    def test_branch_paths_all_execute_writes(self):
        p = build("a : BOOL @ IN : 0 ;\n x : DINT ;\n y : DINT ;",
                  "XIC(a)[MOV(1,x),MOV(2,y)];")
        s = run_scans(p, 1, [{0: 1}])
        assert (s.tags["x"], s.tags["y"]) == (1, 2)


class TestArithmetic:
    def test_mov_add_sub(self):
        p = build("x : DINT ;\n y : DINT := 5 ;",
                  "MOV(7,x);\nADD(x,y,y);\nSUB(y,3,x);")
        s = run_scans(p, 1)
        assert s.tags["x"] == 9   # (5+7) - 3
        assert s.tags["y"] == 12

    def test_dint_wraparound(self):
        p = build(f"x : DINT := {I32_MAX} ;", "ADD(x,1,x);")
        s = run_scans(p, 1)
        assert s.tags["x"] == I32_MIN

    def test_real_arithmetic_no_wrap(self):
        p = build("r : REAL := 0.5 ;", "ADD(r,0.25,r);")
        s = run_scans(p, 4)
        assert s.tags["r"] == pytest.approx(1.5)

    def test_comparisons(self):
        p = build(
            "x : DINT := 4 ;\n"
            + "\n".join(f"q{op} : BOOL ;" for op in
                        ("EQU", "NEQ", "GRT", "LES", "GEQ", "LEQ")),
            "\n".join(f"{op}(x,4)OTE(q{op});" for op in
                      ("EQU", "NEQ", "GRT", "LES", "GEQ", "LEQ")),
        )
        s = run_scans(p, 1)
        got = {op: s.tags[f"q{op}"] for op in
               ("EQU", "NEQ", "GRT", "LES", "GEQ", "LEQ")}
        assert got == {"EQU": True, "NEQ": False, "GRT": False,
                       "LES": False, "GEQ": True, "LEQ": True}

    @settings(max_examples=80, deadline=None)
    @given(st.integers(I32_MIN, I32_MAX), st.integers(I32_MIN, I32_MAX))
    def test_add_wraps_like_int32(self, a, b):
        p = build(f"x : DINT := {a} ;\n y : DINT := {b} ;\n z : DINT ;",
                  "ADD(x,y,z);")
        s = run_scans(p, 1)
        want = (a + b + 2**31) % 2**32 - 2**31
        assert s.tags["z"] == want


class TestTimers:
    def test_accumulates_and_completes_exactly(self):
        p = build("a : BOOL @ IN : 0 ;\n t : TIMER := 500 ;",
                  "XIC(a)TON(t);")
        cp = compile_project(p)
        s = cp.make_state()
        assert s.tags["t"] == TimerState(pre=500, acc=0, en=False, dn=False)
        for i in range(1, 6):
            scan(s, cp, 100, {0: 1})
            t = s.tags["t"]
            assert t.acc == min(i * 100, 500)
            assert bool(t.dn) is (i >= 5)
            assert t.en

    def test_resets_when_rung_false(self):
        p = build("a : BOOL @ IN : 0 ;\n t : TIMER := 300 ;",
                  "XIC(a)TON(t);")
        cp = compile_project(p)
        s = cp.make_state()
        scan(s, cp, 100, {0: 1})
        scan(s, cp, 100, {0: 1})
        assert s.tags["t"].acc == 200
        scan(s, cp, 100, {0: 0})
        t = s.tags["t"]
        assert (t.acc, t.en, t.dn) == (0, False, False)

    def test_dn_bit_readable_as_contact(self):
        p = build("t : TIMER := 200 ;\n q : BOOL ;",
                  "XIO(q)TON(t);\nXIC(t.DN)OTE(q);")
        s = run_scans(p, 2)
        assert s.tags["q"] == 1


class TestFifo:
    def test_rising_edge_loads_once(self):
        p = build(
            "a : BOOL @ IN : 0 ;\n buf : DINT[4] ;\n c : CONTROL ;\n"
            " x : DINT := 42 ;",
            "XIC(a)FFL(x,buf,c,4);",
        )
        cp = compile_project(p)
        s = cp.make_state()
        for _ in range(3):  # held true: one load only
            scan(s, cp, 100, {0: 1})
        assert s.tags["c"].pos == 1
        assert s.tags["buf"][0] == 42
        scan(s, cp, 100, {0: 0})
        scan(s, cp, 100, {0: 1})
        assert s.tags["c"].pos == 2

    def test_dn_and_em_flags(self):
        p = build(
            "a : BOOL @ IN : 0 ;\n buf : DINT[2] ;\n c : CONTROL ;\n"
            " x : DINT := 7 ;",
            "XIC(a)FFL(x,buf,c,2);",
        )
        cp = compile_project(p)
        s = cp.make_state()
        assert s.tags["c"].em
        scan(s, cp, 100, {0: 1})
        assert not s.tags["c"].dn and not s.tags["c"].em
        scan(s, cp, 100, {0: 0})
        scan(s, cp, 100, {0: 1})
        c = s.tags["c"]
        assert c.pos == 2 and c.dn

    def test_overflow_is_array_subscript_fault(self):
        p = build(
            "a : BOOL @ IN : 0 ;\n buf : DINT[2] ;\n c : CONTROL ;\n"
            " x : DINT := 1 ;",
            "XIC(a)FFL(x,buf,c,5);",  # LEN beyond the physical array
        )
        cp = compile_project(p)
        s = cp.make_state()
        pulses = 0
        with pytest.raises(FaultRaised) as exc_info:
            for i in range(40):
                scan(s, cp, 100, {0: i % 2})
                if i % 2:
                    pulses += 1
        assert pulses == 2  # loads 1 and 2 fine, third one faults
        assert exc_info.value.fault.kind == "ArraySubscript"

    def test_export_csv(self):
        p = build(
            "a : BOOL @ IN : 0 ;\n buf : DINT[4] ;\n c : CONTROL ;\n"
            " x : DINT := 9 ;",
            "XIC(a)FFL(x,buf,c,4);",
        )
        cp = compile_project(p)
        s = cp.make_state()
        scan(s, cp, 100, {0: 1})
        assert export_fifo_csv(s, "buf", 2) == "index,value\n0,9\n1,0\n"


class TestControlFlow:
    def test_jsr_runs_subroutine(self):
        text = (
            "CONTROLLER T (SerialNumber := 16#0000_0001)\n"
            "TAG\n    x : DINT ;\nEND_TAG\n"
            "PROGRAM P (Main := Main)\n"
            "ROUTINE Main\n    N0: JSR(Sub);\nEND_ROUTINE\n"
            "ROUTINE Sub\n    N0: SBR();\n    N1: ADD(x,1,x);\n"
            "    N2: RET();\nEND_ROUTINE\n"
            "END_PROGRAM\nEND_CONTROLLER\n"
        )
        s = run_scans(parse(text), 3)
        assert s.tags["x"] == 3

    def test_ret_stops_routine_early(self):
        text = (
            "CONTROLLER T (SerialNumber := 16#0000_0001)\n"
            "TAG\n    x : DINT ;\nEND_TAG\n"
            "PROGRAM P (Main := Main)\n"
            "ROUTINE Main\n    N0: JSR(Sub);\nEND_ROUTINE\n"
            "ROUTINE Sub\n    N0: RET();\n    N1: ADD(x,1,x);\n"
            "END_ROUTINE\nEND_PROGRAM\nEND_CONTROLLER\n"
        )
        s = run_scans(parse(text), 2)
        assert s.tags["x"] == 0

    def test_self_recursion_overflows_at_depth_limit(self):
        text = (
            "CONTROLLER T (SerialNumber := 16#0000_0001)\n"
            "TAG\n    x : DINT ;\nEND_TAG\n"
            "PROGRAM P (Main := Main)\n"
            "ROUTINE Main\n    N0: JSR(Main);\nEND_ROUTINE\n"
            "END_PROGRAM\nEND_CONTROLLER\n"
        )
        cp = compile_project(parse(text))
        s = cp.make_state()
        with pytest.raises(FaultRaised) as exc_info:
            scan(s, cp, 100)
        fault = exc_info.value.fault
        assert fault.kind == "StackOverflow"
        assert str(MAX_CALL_DEPTH) in fault.detail
        assert fault.scan == 1

    def test_forward_jump_skips(self):
        p = build("a : BOOL @ IN : 0 ;\n x : DINT ;\n q : BOOL ;",
                  "XIC(a)JMP(Skip);\nADD(x,1,x);\nLBL(Skip)OTE(q);")
        s = run_scans(p, 1, [{0: 1}])
        assert s.tags["x"] == 0
        s = run_scans(p, 1, [{0: 0}])
        assert s.tags["x"] == 1

    def test_backward_jump_burns_watchdog(self):
        p = build("x : DINT ;", "LBL(Top)ADD(x,1,x);\nJMP(Top);")
        cp = compile_project(p)
        s = cp.make_state()
        with pytest.raises(FaultRaised) as exc_info:
            scan(s, cp, 100)
        assert exc_info.value.fault.kind == "Watchdog"

    def test_watchdog_budget_is_instruction_count(self):
        assert WATCHDOG_BUDGET == 100_000


class TestArrays:
    def test_computed_index(self):
        p = build("i : DINT := 2 ;\n buf : DINT[4] ;\n x : DINT ;",
                  "MOV(9,buf[i]);\nMOV(buf[2],x);")
        s = run_scans(p, 1)
        assert s.tags["x"] == 9

    def test_out_of_range_index_faults(self):
        p = build("i : DINT := 4 ;\n buf : DINT[4] ;\n x : DINT ;",
                  "MOV(buf[i],x);")
        cp = compile_project(p)
        s = cp.make_state()
        with pytest.raises(FaultRaised) as exc_info:
            scan(s, cp, 100)
        f = exc_info.value.fault
        assert f.kind == "ArraySubscript"
        assert f.routine == "Main"
        assert f.rung_index == 0

    def test_negative_index_faults(self):
        p = build("i : DINT := -1 ;\n buf : DINT[4] ;\n x : DINT ;",
                  "MOV(buf[i],x);")
        cp = compile_project(p)
        s = cp.make_state()
        with pytest.raises(FaultRaised):
            scan(s, cp, 100)


class TestFaultLifecycle:
    def _faulted(self):
        p = build("i : DINT := 9 ;\n buf : DINT[2] ;\n x : DINT ;\n"
                  " q : BOOL @ OUT : 0 ;",
                  "XIO(q)OTE(q);\nMOV(buf[i],x);")
        cp = compile_project(p)
        s = cp.make_state()
        with pytest.raises(FaultRaised):
            scan(s, cp, 100)
        return cp, s

    def test_faulted_vm_refuses_scans(self):
        cp, s = self._faulted()
        with pytest.raises(PendingFaultError):
            scan(s, cp, 100)

    def test_outputs_not_published_on_fault(self):
        cp, s = self._faulted()
        # the OTE wrote the tag before the fault, but the output image
        # didn't latch it
        assert s.tags["q"] == 1
        assert not s.outputs.get(0, 0)

    def test_reset_fault_resumes(self):
        cp, s = self._faulted()
        s.reset_fault()
        assert s.fault is None
        s.tags["i"] = 0
        scan(s, cp, 100)
        assert s.scan_count == 2


class TestInputsAndClock:
    def test_inputs_latch_between_scans(self):
        p = build("x : DINT @ IN : 0 ;\n y : DINT ;", "MOV(x,y);")
        cp = compile_project(p)
        s = cp.make_state()
        scan(s, cp, 100, {0: 41})
        scan(s, cp, 100)  # no new value: held
        assert s.tags["y"] == 41

    def test_wallclock_read_and_write(self):
        p = build("x : DINT ;", f"MOV({WALLCLOCK},x);")
        cp = compile_project(p)
        s = cp.make_state()
        scan(s, cp, 250)
        assert s.tags["x"] == 250
        scan(s, cp, 250)
        assert s.tags["x"] == 500

    def test_wallclock_wraps_modulo_32bit(self):
        p = build("x : DINT ;", f"MOV({WALLCLOCK},x);")
        cp = compile_project(p)
        s = cp.make_state()
        s.wall_clock_ms = 2**32 - 100
        scan(s, cp, 250)
        assert s.wall_clock_ms == 150


class TestAoi:
    TEXT = (
        "CONTROLLER T (SerialNumber := 16#0000_0001)\n"
        "TAG\n    src : DINT @ IN : 0 ;\n    dst : DINT ;\nEND_TAG\n"
        "ADD_ON_INSTRUCTION_DEFINITION Acc ()\n"
        "PARAMETERS\n    SrcA : DINT : In ;\n    Res : DINT : Out ;\n"
        "END_PARAMETERS\n"
        "LOCAL_TAGS\n    Total : DINT := 0 ;\nEND_LOCAL_TAGS\n"
        "ROUTINE Logic\n    N0: ADD(Total,SrcA,Total);\n"
        "    N1: MOV(Total,Res);\nEND_ROUTINE\n"
        "END_ADD_ON_INSTRUCTION_DEFINITION\n"
        "PROGRAM P (Main := Main)\n"
        "ROUTINE Main\n    N0: Acc(src,dst);\nEND_ROUTINE\n"
        "END_PROGRAM\nEND_CONTROLLER\n"
    )

    def test_locals_persist_across_scans(self):
        p = parse(self.TEXT)
        cp = compile_project(p)
        s = cp.make_state()
        for v in (5, 10, 1):
            scan(s, cp, 100, {0: v})
        assert s.tags["dst"] == 16
        assert s.aoi_mem["Acc"]["Total"] == 16

    def test_probe_falls_back_to_block_locals(self):
        p = parse(self.TEXT)
        cp = compile_project(p)
        s = cp.make_state()
        scan(s, cp, 100, {0: 3})
        assert read_probe(s, "Total") == 3

    def test_unknown_probe_is_an_error(self):
        p = parse(self.TEXT)
        s = compile_project(p).make_state()
        from llbforge.model import LadderError
        with pytest.raises(LadderError):
            read_probe(s, "NoSuchTag")


class TestTraces:
    def test_record_format(self):
        p = build("a : BOOL @ IN : 0 ;\n q : BOOL @ OUT : 0 ;\n"
                  " r : REAL := 0.125 ;",
                  "XIC(a)OTE(q);")
        trace = run(p, input_trace=[{0: 1}], dt_ms=100, watch=("r",))
        assert trace.to_text() == "scan=1 clock=100 fault=- q=1 r=0.125\n"

    def test_values_sorted_by_name(self):
        p = build("z : BOOL @ OUT : 0 ;\n a : BOOL @ OUT : 1 ;", "XIO(z)OTE(a);")
        trace = run(p, scans=1)
        assert [k for k, _ in trace.records[0].values] == ["a", "z"]

    def test_stops_at_fault(self):
        p = build("i : DINT ;\n buf : DINT[3] ;\n x : DINT ;\n"
                  " q : BOOL @ OUT : 0 ;",
                  "ADD(i,1,i);\nMOV(buf[i],x);\nXIO(q)OTE(q);")
        trace = run(p, scans=10)
        assert trace.fault == "ArraySubscript"
        assert len(trace.records) == 3
        assert trace.records[-1].line().startswith(
            "scan=3 clock=300 fault=ArraySubscript")

    def test_watch_probes_members_and_indices(self):
        p = build("a : BOOL @ IN : 0 ;\n t : TIMER := 400 ;\n"
                  " buf : DINT[3] ;\n c : CONTROL ;\n x : DINT := 5 ;",
                  "XIC(a)TON(t);\nXIC(a)FFL(x,buf,c,3);")
        trace = run(p, input_trace=[{0: 1}, {0: 1}], dt_ms=100,
                    watch=("t.ACC", "buf[0]", "c.POS"))
        assert trace.records[1].values == (
            ("buf[0]", 5), ("c.POS", 1), ("t.ACC", 200))

    def test_bool_renders_as_int(self):
        p = build("q : BOOL @ OUT : 0 ;", "XIO(q)OTL(q);")
        trace = run(p, scans=1)
        assert "q=1" in trace.records[0].line()


class TestTimerInitials:
    def test_state_initials(self):
        p = build("t : TIMER := 250 ;\n c : CONTROL := 6 ;\n"
                  " buf : DINT[3] ;\n b : BOOL := 1 ;\n r : REAL ;", "SBR();")
        s = compile_project(p).make_state()
        assert s.tags["t"] == TimerState(pre=250, acc=0, en=False, dn=False)
        assert s.tags["c"] == ControlState(len=6, pos=0, en=False, dn=False,
                                           em=True)
        assert s.tags["buf"] == [0, 0, 0]
        assert s.tags["b"] == 1
        assert s.tags["r"] == 0.0
