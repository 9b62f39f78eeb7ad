"""Text format for ladder-logic projects.

The dialect is a small, case-sensitive subset of the classic controller
export format:

    CONTROLLER <name> (SerialNumber := 16#XXXX_XXXX, ...)
    TAG ... END_TAG
    ADD_ON_INSTRUCTION_DEFINITION ... END_ADD_ON_INSTRUCTION_DEFINITION*
    PROGRAM <name> (Main := <routine>) ROUTINE ... END_ROUTINE+ END_PROGRAM+
    END_CONTROLLER

Files are UTF-8 with LF line endings.  ``(* ... *)`` comments survive
parse/serialize only as a count.  ``serialize`` emits the canonical form of
the normalized project, so ``parse(serialize(p)) == normalize(p)`` for every
well-formed project ``p``.
"""

from __future__ import annotations

import re

from .model import (
    AoiDef,
    AoiParam,
    Branch,
    DataType,
    INSTRUCTION_ARITY,
    Instr,
    IoBinding,
    LadderError,
    Program,
    Project,
    Routine,
    Rung,
    TagDecl,
    TagPath,
    format_real,
    normalize,
    rung_text,
    serial_text,
    validate_project,
)


class ParseError(LadderError):
    """Rejected input text; carries position and what was expected."""

    def __init__(self, message: str, line: int = 0, col: int = 0,
                 expected: str | None = None):
        self.line = line
        self.col = col
        self.expected = expected
        suffix = f" at line {line}, column {col}" if line else ""
        super().__init__(f"{message}{suffix}")


class UnknownMnemonicError(ParseError):
    pass


class ArityError(ParseError):
    pass


class MissingSerialNumberError(ParseError):
    pass


class MalformedSerialError(ParseError):
    pass


_RUNG_LABEL = re.compile(r"^N\d+$")
_IDENT_START = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_")
_IDENT_CONT = _IDENT_START | set("0123456789")
_SCALARS = ("BOOL", "DINT", "REAL", "TIMER", "CONTROL")


class _Token:
    __slots__ = ("kind", "value", "line", "col")

    def __init__(self, kind, value, line, col):
        self.kind = kind
        self.value = value
        self.line = line
        self.col = col

    def __repr__(self):
        return f"_Token({self.kind!r}, {self.value!r})"


def _lex(text: str):
    """Token stream plus the comment count."""
    tokens = []
    comments = 0
    i, line, col = 0, 1, 1
    n = len(text)

    def err(msg, expected=None):
        return ParseError(msg, line, col, expected)

    while i < n:
        ch = text[i]
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if text.startswith("(*", i):
            end = text.find("*)", i + 2)
            if end < 0:
                raise err("unterminated comment")
            skipped = text[i:end + 2]
            comments += 1
            nl = skipped.count("\n")
            if nl:
                line += nl
                col = len(skipped) - skipped.rfind("\n")
            else:
                col += len(skipped)
            i = end + 2
            continue
        start_line, start_col = line, col
        if ch in _IDENT_START:
            j = i + 1
            while j < n and text[j] in _IDENT_CONT:
                j += 1
            tokens.append(_Token("IDENT", text[i:j], start_line, start_col))
            col += j - i
            i = j
            continue
        if ch.isdigit() or (ch == "-" and i + 1 < n and text[i + 1].isdigit()):
            j = i + 1 if ch == "-" else i
            while j < n and text[j].isdigit():
                j += 1
            if text.startswith("#", j) and text[i:j] == "16":
                j += 1
                k = j
                while j < n and (text[j] in "0123456789abcdefABCDEF_"):
                    j += 1
                raw = text[i:j]
                digits = text[k:j].replace("_", "")
                if not digits:
                    raise err("empty hex literal")
                tokens.append(_Token("HEX", (int(digits, 16), raw),
                                     start_line, start_col))
            elif j < n and text[j] == "." and j + 1 < n and text[j + 1].isdigit():
                j += 1
                while j < n and text[j].isdigit():
                    j += 1
                tokens.append(_Token("REAL", float(text[i:j]),
                                     start_line, start_col))
            else:
                tokens.append(_Token("INT", int(text[i:j]),
                                     start_line, start_col))
            col += j - i
            i = j
            continue
        if ch == '"':
            j = text.find('"', i + 1)
            if j < 0 or "\n" in text[i:j]:
                raise err("unterminated string")
            tokens.append(_Token("STRING", text[i + 1:j], start_line, start_col))
            col += j + 1 - i
            i = j + 1
            continue
        if ch == ":" and text.startswith(":=", i):
            tokens.append(_Token(":=", ":=", start_line, start_col))
            i += 2
            col += 2
            continue
        if ch in "()[],:;@.":
            tokens.append(_Token(ch, ch, start_line, start_col))
            i += 1
            col += 1
            continue
        raise err(f"unexpected character {ch!r}")
    tokens.append(_Token("EOF", None, line, col))
    return tokens, comments


class _Parser:
    def __init__(self, text: str):
        self.tokens, self.comment_count = _lex(text)
        self.pos = 0
        self.aoi_arity: dict[str, int] = {}

    # -- token plumbing

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def next(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def fail(self, expected: str) -> ParseError:
        tok = self.peek()
        got = tok.value if tok.kind != "EOF" else "end of input"
        return ParseError(f"expected {expected}, got {got!r}",
                          tok.line, tok.col, expected)

    def expect(self, kind: str) -> _Token:
        tok = self.peek()
        if tok.kind != kind:
            raise self.fail(kind)
        return self.next()

    def keyword(self, word: str) -> _Token:
        tok = self.peek()
        if tok.kind != "IDENT" or tok.value != word:
            raise self.fail(word)
        return self.next()

    def at_keyword(self, word: str) -> bool:
        tok = self.peek()
        return tok.kind == "IDENT" and tok.value == word

    # -- grammar

    def document(self) -> Project:
        self.keyword("CONTROLLER")
        name = self.expect("IDENT").value
        serial = self.header_attrs()
        tags = self.tag_block()
        aois = []
        while self.at_keyword("ADD_ON_INSTRUCTION_DEFINITION"):
            aois.append(self.aoi())
        programs = [self.program()]
        while self.at_keyword("PROGRAM"):
            programs.append(self.program())
        self.keyword("END_CONTROLLER")
        self.expect("EOF")
        project = Project(
            name=name,
            serial_number=serial,
            tags=tuple(tags),
            aois=tuple(aois),
            programs=tuple(programs),
            comment_count=self.comment_count,
        )
        validate_project(project)
        return project

    def header_attrs(self) -> int:
        self.expect("(")
        serial = None
        while True:
            key_tok = self.expect("IDENT")
            self.expect(":=")
            val = self.peek()
            if val.kind not in ("HEX", "INT", "REAL", "IDENT", "STRING"):
                raise self.fail("attribute value")
            self.next()
            if key_tok.value == "SerialNumber":
                if val.kind != "HEX":
                    raise MalformedSerialError(
                        f"SerialNumber must be a 16# literal, got {val.value!r}",
                        val.line, val.col)
                value, raw = val.value
                digits = raw.split("#", 1)[1].replace("_", "")
                if len(digits) != 8:
                    raise MalformedSerialError(
                        f"SerialNumber must have 8 hex digits: {raw}",
                        val.line, val.col)
                serial = value
            if self.peek().kind == ",":
                self.next()
                continue
            break
        self.expect(")")
        if serial is None:
            raise MissingSerialNumberError(
                "controller header has no SerialNumber attribute",
                self.peek().line, self.peek().col)
        return serial

    def tag_block(self) -> list:
        self.keyword("TAG")
        decls = []
        while not self.at_keyword("END_TAG"):
            decls.append(self.tag_decl(io_allowed=True))
        self.keyword("END_TAG")
        return decls

    def tag_decl(self, io_allowed: bool) -> TagDecl:
        name = self.expect("IDENT").value
        self.expect(":")
        dtype = self.dtype()
        initial = None
        io = None
        if self.peek().kind == ":=":
            self.next()
            initial = self.literal()
        if self.peek().kind == "@":
            at_tok = self.next()
            if not io_allowed:
                raise ParseError("io binding not allowed in this block",
                                 at_tok.line, at_tok.col)
            direction = self.expect("IDENT").value
            if direction not in ("IN", "OUT"):
                raise ParseError(f"io direction must be IN or OUT, "
                                 f"got {direction!r}", at_tok.line, at_tok.col)
            self.expect(":")
            channel = self.uint()
            io = IoBinding(direction, channel)
        self.expect(";")
        return TagDecl(name, dtype, initial, io)

    def dtype(self) -> DataType:
        tok = self.expect("IDENT")
        if tok.value not in _SCALARS:
            raise ParseError(f"unknown type {tok.value!r}", tok.line, tok.col,
                             expected="|".join(_SCALARS))
        length = None
        if self.peek().kind == "[":
            if tok.value not in ("DINT", "REAL"):
                raise ParseError(f"{tok.value} cannot be an array",
                                 tok.line, tok.col)
            self.next()
            length = self.uint()
            self.expect("]")
        return DataType(tok.value, length)

    def literal(self):
        tok = self.peek()
        if tok.kind == "INT":
            return self.next().value
        if tok.kind == "REAL":
            return self.next().value
        if tok.kind == "HEX":
            return self.next().value[0]
        raise self.fail("literal")

    def uint(self) -> int:
        tok = self.expect("INT")
        if tok.value < 0:
            raise ParseError("expected unsigned integer", tok.line, tok.col)
        return tok.value

    def aoi(self) -> AoiDef:
        self.keyword("ADD_ON_INSTRUCTION_DEFINITION")
        name = self.expect("IDENT").value
        self.expect("(")
        self.expect(")")
        self.keyword("PARAMETERS")
        params = []
        while not self.at_keyword("END_PARAMETERS"):
            pname = self.expect("IDENT").value
            self.expect(":")
            pdtype = self.dtype()
            self.expect(":")
            usage_tok = self.expect("IDENT")
            if usage_tok.value not in ("In", "Out", "InOut"):
                raise ParseError(f"param usage must be In/Out/InOut, "
                                 f"got {usage_tok.value!r}",
                                 usage_tok.line, usage_tok.col)
            self.expect(";")
            params.append(AoiParam(pname, pdtype, usage_tok.value))
        self.keyword("END_PARAMETERS")
        self.keyword("LOCAL_TAGS")
        locals_ = []
        while not self.at_keyword("END_LOCAL_TAGS"):
            locals_.append(self.tag_decl(io_allowed=False))
        self.keyword("END_LOCAL_TAGS")
        self.keyword("ROUTINE")
        self.keyword("Logic")
        rungs = self.rungs(aoi_calls_allowed=False)
        self.keyword("END_ROUTINE")
        self.keyword("END_ADD_ON_INSTRUCTION_DEFINITION")
        self.aoi_arity[name] = len(params)
        return AoiDef(name, tuple(params), tuple(locals_),
                      Routine("Logic", rungs))

    def program(self) -> Program:
        self.keyword("PROGRAM")
        name = self.expect("IDENT").value
        self.expect("(")
        self.keyword("Main")
        self.expect(":=")
        main = self.expect("IDENT").value
        self.expect(")")
        routines = [self.routine()]
        while self.at_keyword("ROUTINE"):
            routines.append(self.routine())
        self.keyword("END_PROGRAM")
        return Program(name, main, tuple(routines))

    def routine(self) -> Routine:
        self.keyword("ROUTINE")
        name = self.expect("IDENT").value
        rungs = self.rungs(aoi_calls_allowed=True)
        self.keyword("END_ROUTINE")
        return Routine(name, rungs)

    def rungs(self, aoi_calls_allowed: bool) -> tuple:
        out = []
        while True:
            tok = self.peek()
            if tok.kind != "IDENT" or not _RUNG_LABEL.match(tok.value):
                break
            self.next()
            self.expect(":")
            elements = [self.element(aoi_calls_allowed)]
            while self.peek().kind in ("IDENT", "["):
                # A rung label would start the next rung, not an element.
                nxt = self.peek()
                if (nxt.kind == "IDENT" and _RUNG_LABEL.match(nxt.value)
                        and self.tokens[self.pos + 1].kind == ":"):
                    break
                elements.append(self.element(aoi_calls_allowed))
            self.expect(";")
            out.append(Rung(tuple(elements)))
        return tuple(out)

    def element(self, aoi_calls_allowed: bool):
        tok = self.peek()
        if tok.kind == "[":
            self.next()
            paths = [self.elemseq(aoi_calls_allowed)]
            while self.peek().kind == ",":
                self.next()
                paths.append(self.elemseq(aoi_calls_allowed))
            self.expect("]")
            if len(paths) < 2:
                raise ParseError("a branch needs at least two paths",
                                 tok.line, tok.col)
            return Branch(tuple(paths))
        mnemonic_tok = self.expect("IDENT")
        mnemonic = mnemonic_tok.value
        if mnemonic in INSTRUCTION_ARITY:
            want = INSTRUCTION_ARITY[mnemonic]
        elif aoi_calls_allowed and mnemonic in self.aoi_arity:
            want = self.aoi_arity[mnemonic]
        else:
            raise UnknownMnemonicError(f"unknown instruction {mnemonic!r}",
                                       mnemonic_tok.line, mnemonic_tok.col)
        self.expect("(")
        operands = []
        if self.peek().kind != ")":
            operands.append(self.operand())
            while self.peek().kind == ",":
                self.next()
                operands.append(self.operand())
        self.expect(")")
        if len(operands) != want:
            raise ArityError(
                f"{mnemonic} takes {want} operand(s), got {len(operands)}",
                mnemonic_tok.line, mnemonic_tok.col)
        return Instr(mnemonic, tuple(operands))

    def elemseq(self, aoi_calls_allowed: bool) -> tuple:
        elements = [self.element(aoi_calls_allowed)]
        while self.peek().kind in ("IDENT", "["):
            elements.append(self.element(aoi_calls_allowed))
        return tuple(elements)

    def operand(self):
        tok = self.peek()
        if tok.kind in ("INT", "REAL"):
            return self.next().value
        if tok.kind == "HEX":
            return self.next().value[0]
        if tok.kind == "IDENT":
            return self.tagpath()
        raise self.fail("operand")

    def tagpath(self) -> TagPath:
        base = self.expect("IDENT").value
        parts = []
        while True:
            tok = self.peek()
            if tok.kind == ".":
                self.next()
                parts.append(("member", self.expect("IDENT").value))
            elif tok.kind == "[":
                self.next()
                idx_tok = self.peek()
                if idx_tok.kind == "INT":
                    idx = self.uint()
                elif idx_tok.kind == "IDENT":
                    idx = self.tagpath()
                else:
                    raise self.fail("array index")
                self.expect("]")
                parts.append(("index", idx))
            else:
                break
        return TagPath(base, tuple(parts))


def parse(text: str) -> Project:
    """Parse project text; raises ParseError/ProjectError on rejection."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not valid UTF-8: {exc}") from None
    return _Parser(text).document()


def extract_serial(text: str) -> int:
    """Read the controller serial from the header without a full parse."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not valid UTF-8: {exc}") from None
    parser = _Parser(text)
    parser.keyword("CONTROLLER")
    parser.expect("IDENT")
    return parser.header_attrs()


# ---------------------------------------------------------------------------
# Serialization


def _literal_text(value) -> str:
    if isinstance(value, float):
        return format_real(value)
    return str(value)


def _tagdecl_text(t: TagDecl) -> str:
    parts = [f"{t.name} : {t.dtype}"]
    if t.initial is not None:
        parts.append(f":= {_literal_text(t.initial)}")
    if t.io is not None:
        parts.append(f"@ {t.io.direction} : {t.io.channel}")
    return " ".join(parts) + " ;"


def _routine_lines(routine: Routine, out: list) -> None:
    out.append(f"ROUTINE {routine.name}")
    for i, rung in enumerate(routine.rungs):
        out.append(f"    N{i}: {rung_text(rung)};")
    out.append("END_ROUTINE")


def serialize(project: Project) -> str:
    """Canonical text of the normalized project (LF endings, final newline)."""
    p = normalize(project)
    out = [f"CONTROLLER {p.name} (SerialNumber := {serial_text(p.serial_number)})"]
    out.extend("(* *)" for _ in range(p.comment_count))
    out.append("TAG")
    for t in p.tags:
        out.append(f"    {_tagdecl_text(t)}")
    out.append("END_TAG")
    for a in p.aois:
        out.append(f"ADD_ON_INSTRUCTION_DEFINITION {a.name} ()")
        out.append("PARAMETERS")
        for prm in a.params:
            out.append(f"    {prm.name} : {prm.dtype} : {prm.usage} ;")
        out.append("END_PARAMETERS")
        out.append("LOCAL_TAGS")
        for t in a.local_tags:
            out.append(f"    {_tagdecl_text(t)}")
        out.append("END_LOCAL_TAGS")
        _routine_lines(a.logic, out)
        out.append("END_ADD_ON_INSTRUCTION_DEFINITION")
    for prog in p.programs:
        out.append(f"PROGRAM {prog.name} (Main := {prog.main})")
        for routine in prog.routines:
            _routine_lines(routine, out)
        out.append("END_PROGRAM")
    out.append("END_CONTROLLER")
    return "\n".join(out) + "\n"
