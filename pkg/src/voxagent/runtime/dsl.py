"""Parser for the instruction language.

Grammar::

    program := stmt*
    stmt    := [ident "="] ident "(" [arg ("," arg)*] ")"
    arg     := ident | number | string | "<MOD>"

Statements are separated by whitespace or newlines. Arity and types are
checked when the program runs, not here.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

IDENT = r"[a-z][a-z0-9_]*"


class DslSyntaxError(SyntaxError):
    def __init__(self, msg, line, col):
        super().__init__(f"{msg} at line {line}, column {col}")
        self.msg_text = msg
        self.line = line
        self.col = col


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Str:
    value: str


@dataclass(frozen=True)
class ModSlot:
    ordinal: int


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


@dataclass(frozen=True)
class Stmt:
    call: Call
    target: str | None = None
    line: int = 1


@dataclass(frozen=True)
class Program:
    statements: tuple

    @property
    def mod_count(self) -> int:
        return sum(isinstance(a, ModSlot) for s in self.statements for a in s.call.args)

    def __len__(self):
        return len(self.statements)


_TOKEN_SPEC = [
    ("MOD", r"<MOD>"),
    ("NUMBER", r"-?\d+(?:\.\d+)?"),
    ("STRING", r'"(?:[^"\\\n]|\\.)*"'),
    ("IDENT", r"[A-Za-z_][A-Za-z0-9_]*"),
    ("EQ", r"="),
    ("LPAREN", r"\("),
    ("RPAREN", r"\)"),
    ("COMMA", r","),
    ("NEWLINE", r"\n"),
    ("SKIP", r"[ \t\r]+"),
    ("COMMENT", r"#[^\n]*"),
    ("BAD", r"."),
]
_LEXER = re.compile("|".join(f"(?P<{n}>{p})" for n, p in _TOKEN_SPEC))
_IDENT_RE = re.compile(IDENT + r"\Z")
_ESCAPES = {"n": "\n", "t": "\t", '"': '"', "\\": "\\"}


def _unescape(body: str) -> str:
    return re.sub(r"\\(.)", lambda m: _ESCAPES.get(m.group(1), m.group(1)), body)


def _lex(text):
    line, line_start = 1, 0
    toks = []
    for m in _LEXER.finditer(text):
        kind, val = m.lastgroup, m.group()
        col = m.start() - line_start + 1
        if kind == "NEWLINE":
            line, line_start = line + 1, m.end()
            continue
        if kind in ("SKIP", "COMMENT"):
            continue
        if kind == "BAD":
            raise DslSyntaxError(f"unexpected character {val!r}", line, col)
        toks.append((kind, val, line, col))
    toks.append(("EOF", "", line, len(text) - line_start + 1))
    return toks


class _Parser:
    def __init__(self, text):
        self.toks = _lex(text)
        self.i = 0
        self.mods = 0

    def peek(self, k=0):
        return self.toks[self.i + k]

    def take(self, kind, what=None):
        tok = self.peek()
        if tok[0] != kind:
            found = "end of input" if tok[0] == "EOF" else repr(tok[1])
            raise DslSyntaxError(f"expected {what or kind.lower()}, found {found}", tok[2], tok[3])
        self.i += 1
        return tok

    def ident(self, what):
        tok = self.take("IDENT", what)
        if not _IDENT_RE.match(tok[1]):
            raise DslSyntaxError(f"invalid identifier {tok[1]!r}", tok[2], tok[3])
        return tok[1]

    def program(self):
        stmts = []
        while self.peek()[0] != "EOF":
            stmts.append(self.stmt())
        return Program(tuple(stmts))

    def stmt(self):
        line = self.peek()[2]
        target = None
        if self.peek()[0] == "IDENT" and self.peek(1)[0] == "EQ":
            target = self.ident("assignment target")
            self.take("EQ")
        func = self.ident("function name")
        self.take("LPAREN", "'('")
        args = []
        if self.peek()[0] != "RPAREN":
            args.append(self.arg())
            while self.peek()[0] == "COMMA":
                self.take("COMMA")
                args.append(self.arg())
        self.take("RPAREN", "')'")
        return Stmt(Call(func, tuple(args)), target, line)

    def arg(self):
        kind, val, line, col = self.peek()
        if kind == "MOD":
            self.i += 1
            slot = ModSlot(self.mods)
            self.mods += 1
            return slot
        if kind == "NUMBER":
            self.i += 1
            return Num(float(val))
        if kind == "STRING":
            self.i += 1
            return Str(_unescape(val[1:-1]))
        if kind == "IDENT":
            return Var(self.ident("argument"))
        found = "end of input" if kind == "EOF" else repr(val)
        raise DslSyntaxError(f"expected an argument, found {found}", line, col)


def parse(text: str) -> Program:
    return _Parser(text).program()


def _fmt_arg(a) -> str:
    if isinstance(a, Var):
        return a.name
    if isinstance(a, ModSlot):
        return "<MOD>"
    if isinstance(a, Str):
        return '"' + a.value.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'
    v = a.value
    return str(int(v)) if float(v).is_integer() else repr(v)


def format_program(p: Program) -> str:
    lines = []
    for s in p.statements:
        call = f"{s.call.func}({', '.join(_fmt_arg(a) for a in s.call.args)})"
        lines.append(f"{s.target} = {call}" if s.target else call)
    return "\n".join(lines)
