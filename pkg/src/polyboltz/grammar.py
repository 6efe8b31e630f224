"""Parsing and validation of recursive species specifications.

The concrete syntax has one equation per line (or semicolon-separated),
`root`, `pair` and `terminal` directives, `#` comments, and the operators
`+`, `*` (plain product), `star` (pointed product), `o` (substitution into a
basic or terminal core) and `osub` (pointed substitution).  `SEQ(E)` is sugar
for `SEQ o E`, and `point(B)` / `sympoint(B)` are the two pointed variants of
a basic species B.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Protocol, Union

from . import zindex as zx
from .errors import AdmissibilityError, InternalConsistencyError, UsageError

PROBE_DEGREE = 20

_BASIC_TOKENS = {"SEQ": "Seq", "SET": "Set", "CYC": "Cyc"}
_ATOM_TOKENS = {"X": "X", "ONE": "One", "ZERO": "Zero"}
_KEYWORDS = (
    set(_BASIC_TOKENS)
    | set(_ATOM_TOKENS)
    | {"point", "sympoint", "star", "o", "osub", "root", "pair", "terminal", "pointed"}
)


@dataclass(frozen=True)
class Diagnostic:
    category: str
    message: str
    line: int = 0
    col: int = 0

    def as_dict(self) -> dict:
        return {
            "category": self.category,
            "message": self.message,
            "line": self.line,
            "col": self.col,
        }


def _fail(exc_type, category: str, message: str, line: int = 0, col: int = 0):
    diag = Diagnostic(category, message, line, col)
    exc = exc_type(f"{category}: {message}" + (f" (line {line})" if line else ""))
    exc.diagnostics = [diag]
    raise exc


# ------------------------------------------------------------------------ AST


@dataclass(frozen=True)
class Expr:
    pass


@dataclass(frozen=True)
class Ref(Expr):
    name: str
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Basic(Expr):
    kind: str
    size: int | None = None
    pointing: str = "none"
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Terminal(Expr):
    name: str
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Sum(Expr):
    a: Expr
    b: Expr


@dataclass(frozen=True)
class Prod(Expr):
    a: Expr
    b: Expr


@dataclass(frozen=True)
class PProd(Expr):
    a: Expr
    b: Expr


@dataclass(frozen=True)
class Subst(Expr):
    core: Expr
    arg: Expr


@dataclass(frozen=True)
class PSubst(Expr):
    core: Expr
    arg: Expr


@dataclass(frozen=True)
class UnpointQuery:
    """Report a pointed variable with the marked cycle dropped.

    Counting divides the coefficient at size n by n (exactly); sampling
    discards the mark.
    """

    var: str


class TerminalSeries(Protocol):
    """Externally supplied species plugged into a grammar as a terminal."""

    name: str
    pointed: bool

    def cis(self, trunc: int):
        """Truncated (pointed) cycle index sum of the terminal."""
        ...


class SpeciesGrammar:
    """Parsed system of equations, directives, and attached terminal series."""

    def __init__(
        self,
        equations: dict[str, Expr],
        root: str | None = None,
        pairs: dict[str, str] | None = None,
        terminals: dict[str, bool] | None = None,
        terminal_series: dict[str, TerminalSeries] | None = None,
        spans: dict[str, tuple[int, int]] | None = None,
    ):
        self.equations = dict(equations)
        self.root = root if root is not None else next(iter(equations), None)
        self.pairs = dict(pairs or {})
        self.terminals = dict(terminals or {})
        self.terminal_series = dict(terminal_series or {})
        self.spans = dict(spans or {})

    def attach_terminals(self, series: Iterable[TerminalSeries]) -> "SpeciesGrammar":
        attached = dict(self.terminal_series)
        for ts in series:
            if ts.name not in self.terminals:
                _fail(UsageError, "terminal", f"terminal {ts.name!r} is not declared")
            if ts.pointed != self.terminals[ts.name]:
                _fail(
                    UsageError,
                    "terminal",
                    f"terminal {ts.name!r} pointedness does not match its declaration",
                )
            attached[ts.name] = ts
        return SpeciesGrammar(
            self.equations, self.root, self.pairs, self.terminals, attached, self.spans
        )

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SpeciesGrammar)
            and self.equations == other.equations
            and self.root == other.root
            and self.pairs == other.pairs
            and self.terminals == other.terminals
        )

    __hash__ = None

    def __repr__(self) -> str:
        return (
            f"SpeciesGrammar(vars={list(self.equations)}, root={self.root!r}, "
            f"terminals={list(self.terminals)})"
        )


# ------------------------------------------------------------------ tokenizer


@dataclass(frozen=True)
class _Token:
    kind: str
    value: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        i = 0
        while i < len(line):
            ch = line[i]
            if ch.isspace():
                i += 1
                continue
            col = i + 1
            if ch.isalpha() or ch == "_":
                j = i
                while j < len(line) and (line[j].isalnum() or line[j] == "_"):
                    j += 1
                tokens.append(_Token("name", line[i:j], lineno, col))
                i = j
            elif ch.isdigit():
                j = i
                while j < len(line) and line[j].isdigit():
                    j += 1
                tokens.append(_Token("int", line[i:j], lineno, col))
                i = j
            elif ch in "+*()[]=;":
                tokens.append(_Token("sym", ch, lineno, col))
                i += 1
            else:
                _fail(UsageError, "syntax", f"unexpected character {ch!r}", lineno, col)
        tokens.append(_Token("nl", "", lineno, len(line) + 1))
    return tokens


# --------------------------------------------------------------------- parser


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> _Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self) -> _Token | None:
        tok = self.peek()
        if tok is not None:
            self.pos += 1
        return tok

    def expect_sym(self, sym: str) -> _Token:
        tok = self.next()
        if tok is None or tok.kind != "sym" or tok.value != sym:
            where = tok or _Token("eof", "", 0, 0)
            _fail(
                UsageError,
                "syntax",
                f"expected {sym!r}, found {where.value or 'end of input'!r}",
                where.line,
                where.col,
            )
        return tok

    def at_statement_end(self) -> bool:
        tok = self.peek()
        return tok is None or tok.kind == "nl" or (tok.kind == "sym" and tok.value == ";")

    def skip_separators(self) -> None:
        while True:
            tok = self.peek()
            if tok is not None and (tok.kind == "nl" or (tok.kind == "sym" and tok.value == ";")):
                self.pos += 1
            else:
                return

    # expression grammar: sum > product > substitution > primary
    def parse_expr(self) -> Expr:
        e = self.parse_term()
        while True:
            tok = self.peek()
            if tok is not None and tok.kind == "sym" and tok.value == "+":
                self.next()
                e = Sum(e, self.parse_term())
            else:
                return e

    def parse_term(self) -> Expr:
        e = self.parse_factor()
        while True:
            tok = self.peek()
            if tok is not None and tok.kind == "sym" and tok.value == "*":
                self.next()
                e = Prod(e, self.parse_factor())
            elif tok is not None and tok.kind == "name" and tok.value == "star":
                self.next()
                e = PProd(e, self.parse_factor())
            else:
                return e

    def parse_factor(self) -> Expr:
        e = self.parse_primary()
        while True:
            tok = self.peek()
            if tok is not None and tok.kind == "name" and tok.value in ("o", "osub"):
                self.next()
                arg = self.parse_primary()
                e = Subst(e, arg) if tok.value == "o" else PSubst(e, arg)
            else:
                return e

    def parse_primary(self) -> Expr:
        tok = self.next()
        if tok is None or tok.kind == "nl":
            where = tok or _Token("eof", "", 0, 0)
            _fail(UsageError, "syntax", "expected an expression", where.line, where.col)
        if tok.kind == "sym" and tok.value == "(":
            e = self.parse_expr()
            self.expect_sym(")")
            return e
        if tok.kind != "name":
            _fail(UsageError, "syntax", f"unexpected token {tok.value!r}", tok.line, tok.col)
        name = tok.value
        if name in _ATOM_TOKENS:
            return Basic(_ATOM_TOKENS[name], None, "none", tok.line, tok.col)
        if name in _BASIC_TOKENS:
            return self.finish_basic(_BASIC_TOKENS[name], tok)
        if name in ("point", "sympoint"):
            self.expect_sym("(")
            inner = self.next()
            if inner is None or inner.kind != "name" or (
                inner.value not in _BASIC_TOKENS and inner.value not in _ATOM_TOKENS
            ):
                where = inner or tok
                _fail(
                    UsageError,
                    "syntax",
                    f"{name}(...) applies to a basic species",
                    where.line,
                    where.col,
                )
            pointing = "circle" if name == "point" else "symm"
            if inner.value in _ATOM_TOKENS:
                basic = Basic(_ATOM_TOKENS[inner.value], None, pointing, tok.line, tok.col)
                self.expect_sym(")")
                return basic
            kind = _BASIC_TOKENS[inner.value]
            size = self.maybe_size()
            self.expect_sym(")")
            return Basic(kind, size, pointing, tok.line, tok.col)
        if name in _KEYWORDS:
            _fail(UsageError, "syntax", f"misplaced keyword {name!r}", tok.line, tok.col)
        return Ref(name, tok.line, tok.col)

    def maybe_size(self) -> int | None:
        tok = self.peek()
        if tok is not None and tok.kind == "sym" and tok.value == "[":
            self.next()
            num = self.next()
            if num is None or num.kind != "int":
                where = num or tok
                _fail(UsageError, "syntax", "expected a size inside [ ]", where.line, where.col)
            self.expect_sym("]")
            return int(num.value)
        return None

    def finish_basic(self, kind: str, tok: _Token) -> Expr:
        size = self.maybe_size()
        basic = Basic(kind, size, "none", tok.line, tok.col)
        nxt = self.peek()
        if nxt is not None and nxt.kind == "sym" and nxt.value == "(":
            self.next()
            arg = self.parse_expr()
            self.expect_sym(")")
            return Subst(basic, arg)
        return basic


def parse(text: str) -> SpeciesGrammar:
    """Parse specification text into an unvalidated grammar."""
    parser = _Parser(_tokenize(text))
    equations: dict[str, Expr] = {}
    spans: dict[str, tuple[int, int]] = {}
    root: str | None = None
    pairs: dict[str, str] = {}
    terminals: dict[str, bool] = {}
    while True:
        parser.skip_separators()
        tok = parser.peek()
        if tok is None:
            break
        if tok.kind != "name":
            _fail(UsageError, "syntax", f"unexpected token {tok.value!r}", tok.line, tok.col)
        if tok.value == "root":
            parser.next()
            name = parser.next()
            if name is None or name.kind != "name":
                _fail(UsageError, "syntax", "root needs a variable name", tok.line, tok.col)
            if root is not None:
                _fail(UsageError, "syntax", "duplicate root directive", tok.line, tok.col)
            root = name.value
        elif tok.value == "pair":
            parser.next()
            a = parser.next()
            b = parser.next()
            if a is None or b is None or a.kind != "name" or b.kind != "name":
                _fail(UsageError, "syntax", "pair needs two variable names", tok.line, tok.col)
            pairs[a.value] = b.value
        elif tok.value == "terminal":
            parser.next()
            name = parser.next()
            if name is None or name.kind != "name" or name.value in _KEYWORDS:
                _fail(UsageError, "syntax", "terminal needs a fresh name", tok.line, tok.col)
            pointed = False
            nxt = parser.peek()
            if nxt is not None and nxt.kind == "name" and nxt.value == "pointed":
                parser.next()
                pointed = True
            if name.value in terminals:
                _fail(UsageError, "syntax", f"duplicate terminal {name.value!r}", tok.line, tok.col)
            terminals[name.value] = pointed
        else:
            lhs = parser.next()
            if lhs.value in _KEYWORDS:
                _fail(UsageError, "syntax", f"reserved name {lhs.value!r}", lhs.line, lhs.col)
            parser.expect_sym("=")
            rhs = parser.parse_expr()
            if not parser.at_statement_end():
                bad = parser.peek()
                _fail(UsageError, "syntax", f"unexpected token {bad.value!r}", bad.line, bad.col)
            if lhs.value in equations:
                _fail(
                    UsageError,
                    "syntax",
                    f"variable {lhs.value!r} has more than one equation",
                    lhs.line,
                    lhs.col,
                )
            equations[lhs.value] = rhs
            spans[lhs.value] = (lhs.line, lhs.col)
        if not parser.at_statement_end():
            bad = parser.peek()
            _fail(UsageError, "syntax", f"unexpected token {bad.value!r}", bad.line, bad.col)
    grammar = SpeciesGrammar(equations, root, pairs, terminals, None, spans)
    return _resolve_terminal_refs(grammar)


def _resolve_terminal_refs(g: SpeciesGrammar) -> SpeciesGrammar:
    def walk(e: Expr) -> Expr:
        if isinstance(e, Ref) and e.name in g.terminals:
            return Terminal(e.name, e.line, e.col)
        if isinstance(e, Sum):
            return Sum(walk(e.a), walk(e.b))
        if isinstance(e, Prod):
            return Prod(walk(e.a), walk(e.b))
        if isinstance(e, PProd):
            return PProd(walk(e.a), walk(e.b))
        if isinstance(e, Subst):
            return Subst(walk(e.core), walk(e.arg))
        if isinstance(e, PSubst):
            return PSubst(walk(e.core), walk(e.arg))
        return e

    return SpeciesGrammar(
        {v: walk(rhs) for v, rhs in g.equations.items()},
        g.root,
        g.pairs,
        g.terminals,
        g.terminal_series,
        g.spans,
    )


# -------------------------------------------------------------------- printer


def _print_basic(e: Basic) -> str:
    if e.kind in ("X", "One", "Zero"):
        body = {"X": "X", "One": "ONE", "Zero": "ZERO"}[e.kind]
    else:
        body = e.kind.upper() + (f"[{e.size}]" if e.size is not None else "")
    if e.pointing == "circle":
        return f"point({body})"
    if e.pointing == "symm":
        return f"sympoint({body})"
    return body


def _print_expr(e: Expr, prec: int) -> str:
    if isinstance(e, Ref):
        return e.name
    if isinstance(e, Terminal):
        return e.name
    if isinstance(e, Basic):
        return _print_basic(e)
    if isinstance(e, Sum):
        text = f"{_print_expr(e.a, 1)} + {_print_expr(e.b, 2)}"
        level = 1
    elif isinstance(e, Prod):
        text = f"{_print_expr(e.a, 2)} * {_print_expr(e.b, 3)}"
        level = 2
    elif isinstance(e, PProd):
        text = f"{_print_expr(e.a, 2)} star {_print_expr(e.b, 3)}"
        level = 2
    elif (
        isinstance(e, Subst)
        and isinstance(e.core, Basic)
        and e.core.pointing == "none"
        and e.core.kind in ("Seq", "Set", "Cyc")
    ):
        return f"{_print_basic(e.core)}({_print_expr(e.arg, 1)})"
    elif isinstance(e, Subst):
        text = f"{_print_expr(e.core, 4)} o {_print_expr(e.arg, 4)}"
        level = 3
    elif isinstance(e, PSubst):
        text = f"{_print_expr(e.core, 4)} osub {_print_expr(e.arg, 4)}"
        level = 3
    else:
        raise InternalConsistencyError(f"unknown expression node {e!r}")
    return f"({text})" if level < prec else text


def to_text(g: SpeciesGrammar) -> str:
    """Print a grammar as specification text that reparses to the same AST."""
    lines = []
    for name, pointed in g.terminals.items():
        lines.append(f"terminal {name} pointed" if pointed else f"terminal {name}")
    for var, rhs in g.equations.items():
        lines.append(f"{var} = {_print_expr(rhs, 1)}")
    for a, b in g.pairs.items():
        lines.append(f"pair {a} {b}")
    if g.root is not None:
        lines.append(f"root {g.root}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------- validation


@dataclass
class ValidatedGrammar:
    """Sort-checked, admissible, well-founded grammar with probe tables."""

    grammar: SpeciesGrammar
    sorts: dict[str, str]
    pointed_sides: dict[Expr, str]
    const_terms: dict[str, Fraction]
    probe_degree: int
    probe_ogs: dict[str, tuple[int, ...]]

    @property
    def root(self) -> str:
        return self.grammar.root


def _expr_sort(e: Expr, sorts: dict[str, str], g: SpeciesGrammar) -> str | None:
    if isinstance(e, Ref):
        return sorts.get(e.name)
    if isinstance(e, Terminal):
        return "pointed" if g.terminals[e.name] else "unpointed"
    if isinstance(e, Basic):
        return "pointed" if e.pointing != "none" else "unpointed"
    if isinstance(e, Sum):
        a = _expr_sort(e.a, sorts, g)
        b = _expr_sort(e.b, sorts, g)
        return a if a is not None else b
    if isinstance(e, Prod):
        return "unpointed"
    if isinstance(e, (PProd, PSubst)):
        return "pointed"
    if isinstance(e, Subst):
        return "unpointed"
    raise InternalConsistencyError(f"unknown expression node {e!r}")


def _check_structure(
    g: SpeciesGrammar, sorts: dict[str, str]
) -> tuple[list[Diagnostic], dict[Expr, str]]:
    diags: list[Diagnostic] = []
    pointed_sides: dict[Expr, str] = {}

    def sort_of(e: Expr) -> str:
        return _expr_sort(e, sorts, g) or "unpointed"

    def walk(e: Expr, var: str, as_core: bool = False) -> None:
        line, col = g.spans.get(var, (0, 0))
        if isinstance(e, Ref):
            if e.name not in g.equations:
                diags.append(
                    Diagnostic("reference", f"unknown variable {e.name!r}", e.line, e.col)
                )
            return
        if isinstance(e, Terminal):
            if not as_core:
                diags.append(
                    Diagnostic(
                        "terminal",
                        f"terminal {e.name!r} may only appear as a substitution core",
                        e.line,
                        e.col,
                    )
                )
            return
        if isinstance(e, Basic):
            return
        if isinstance(e, Sum):
            if sort_of(e.a) != sort_of(e.b):
                diags.append(
                    Diagnostic("sort", f"mixed-sort sum in equation for {var!r}", line, col)
                )
            walk(e.a, var)
            walk(e.b, var)
            return
        if isinstance(e, Prod):
            for side in (e.a, e.b):
                if sort_of(side) == "pointed":
                    diags.append(
                        Diagnostic(
                            "sort",
                            f"'*' needs unpointed operands in equation for {var!r};"
                            " use 'star' for the pointed product",
                            line,
                            col,
                        )
                    )
            walk(e.a, var)
            walk(e.b, var)
            return
        if isinstance(e, PProd):
            sa, sb = sort_of(e.a), sort_of(e.b)
            if (sa == "pointed") == (sb == "pointed"):
                diags.append(
                    Diagnostic(
                        "sort",
                        f"'star' needs exactly one pointed operand in equation for {var!r}",
                        line,
                        col,
                    )
                )
            else:
                pointed_sides[e] = "left" if sa == "pointed" else "right"
            walk(e.a, var)
            walk(e.b, var)
            return
        if isinstance(e, (Subst, PSubst)):
            pointed_core = isinstance(e, PSubst)
            core_ok = (
                isinstance(e.core, Basic)
                and (e.core.pointing != "none") == pointed_core
            ) or (
                isinstance(e.core, Terminal) and g.terminals[e.core.name] == pointed_core
            )
            if not core_ok:
                op = "osub" if pointed_core else "o"
                want = "a pointed" if pointed_core else "an unpointed"
                diags.append(
                    Diagnostic(
                        "core",
                        f"'{op}' core must be {want} basic species or declared terminal"
                        f" in equation for {var!r}",
                        line,
                        col,
                    )
                )
            if not isinstance(e.arg, Ref):
                diags.append(
                    Diagnostic(
                        "argument",
                        f"substitution argument must be a variable reference"
                        f" in equation for {var!r}",
                        line,
                        col,
                    )
                )
            elif sorts.get(e.arg.name) == "pointed":
                diags.append(
                    Diagnostic(
                        "sort",
                        f"substitution argument {e.arg.name!r} must be unpointed",
                        line,
                        col,
                    )
                )
            walk(e.core, var, as_core=True)
            walk(e.arg, var)
            return
        raise InternalConsistencyError(f"unknown expression node {e!r}")

    for var, rhs in g.equations.items():
        line, col = g.spans.get(var, (0, 0))
        if isinstance(rhs, Ref):
            diags.append(
                Diagnostic(
                    "degenerate",
                    f"equation {var!r} = {rhs.name!r} is a bare alias; "
                    "the right side must use a constructor",
                    line,
                    col,
                )
            )
            continue
        if isinstance(rhs, Terminal):
            diags.append(
                Diagnostic(
                    "terminal",
                    f"terminal {rhs.name!r} may only appear as a substitution core",
                    line,
                    col,
                )
            )
            continue
        walk(rhs, var)
    return diags, pointed_sides


def _infer_sorts(g: SpeciesGrammar) -> dict[str, str]:
    sorts: dict[str, str] = {}
    for _ in range(len(g.equations) + 1):
        changed = False
        for var, rhs in g.equations.items():
            s = _expr_sort(rhs, sorts, g)
            if s is not None and sorts.get(var) != s:
                sorts[var] = s
                changed = True
        if not changed:
            break
    for var in g.equations:
        sorts.setdefault(var, "unpointed")
    return sorts


# ---------------------------------------------------------- probe evaluation


def _conv(a: list[Fraction], b: list[Fraction], n: int) -> Fraction:
    total = Fraction(0)
    for k in range(n + 1):
        if a[k] and b[n - k]:
            total += a[k] * b[n - k]
    return total


def _scale_series(a: list[Fraction], r: int, n_max: int) -> list[Fraction]:
    out = [Fraction(0)] * (n_max + 1)
    for m, c in enumerate(a):
        if m * r <= n_max:
            out[m * r] = c
    return out


class _Probe:
    """Self-contained per-degree evaluator of the grammar's OGS semantics."""

    def __init__(self, g: SpeciesGrammar, sorts: dict[str, str], degree: int):
        self.g = g
        self.sorts = sorts
        self.degree = degree
        self.tables: dict[str, list[Fraction]] = {
            v: [Fraction(0)] * (degree + 1) for v in g.equations
        }
        self._basic_ogs: dict[Expr, tuple] = {}
        self._core_cis: dict[Expr, list] = {}
        self._memo: dict = {}

    def run(self) -> None:
        m = max(len(self.g.equations), 1)
        for n in range(self.degree + 1):
            bound = 2 * m * max(n, 1) + 2
            for _ in range(bound):
                new_vals = {}
                self._memo = {}
                for var, rhs in self.g.equations.items():
                    new_vals[var] = self.coeff(rhs, n)
                if all(self.tables[v][n] == new_vals[v] for v in new_vals):
                    break
                for v, value in new_vals.items():
                    self.tables[v][n] = value
            else:
                _fail(
                    AdmissibilityError,
                    "well-foundedness",
                    f"coefficient at size {n} did not stabilize within {bound} rounds",
                )

    # -- helpers ------------------------------------------------------------

    def arg_series(self, arg: Expr, n: int) -> list[Fraction]:
        return [self.coeff(arg, k) for k in range(n + 1)]

    def basic_ogs(self, e: Basic) -> tuple:
        got = self._basic_ogs.get(e)
        if got is None:
            if e.pointing == "none":
                series = zx.basic_series(e.kind, e.size, self.degree)
            else:
                series = zx.basic_pointed_series(
                    e.kind, e.pointing, e.size, self.degree
                )
            coeffs = [Fraction(0)] * (self.degree + 1)
            for key, c in series.terms.items():
                coeffs[zx._key_weight(key)] += c
            got = tuple(coeffs)
            self._basic_ogs[e] = got
        return got

    def core_monomials(self, e: Expr) -> list:
        got = self._core_cis.get(e)
        if got is None:
            if isinstance(e, Terminal):
                series = self.g.terminal_series[e.name].cis(self.degree)
            elif e.pointing == "none":
                series = zx.basic_series(e.kind, e.size, self.degree)
            else:
                series = zx.basic_pointed_series(e.kind, e.pointing, e.size, self.degree)
            got = [(key[0], key[1], c) for key, c in series.terms.items()]
            self._core_cis[e] = got
        return got

    # -- coefficient evaluation ----------------------------------------------

    def coeff(self, e: Expr, n: int) -> Fraction:
        key = (id(e), n)
        got = self._memo.get(key)
        if got is not None:
            return got
        value = self._coeff(e, n)
        self._memo[key] = value
        return value

    def _coeff(self, e: Expr, n: int) -> Fraction:
        if isinstance(e, Ref):
            return self.tables[e.name][n]
        if isinstance(e, Basic):
            return self.basic_ogs(e)[n]
        if isinstance(e, Sum):
            return self.coeff(e.a, n) + self.coeff(e.b, n)
        if isinstance(e, (Prod, PProd)):
            return _conv(self.arg_series(e.a, n), self.arg_series(e.b, n), n)
        if isinstance(e, Subst):
            return self.subst_coeff(e, n)
        if isinstance(e, PSubst):
            return self.psubst_coeff(e, n)
        raise InternalConsistencyError(f"unknown expression node {e!r}")

    def subst_coeff(self, e: Subst, n: int) -> Fraction:
        core = e.core
        a = self.arg_series(e.arg, n)
        if isinstance(core, Basic) and core.size is None and core.pointing == "none":
            if core.kind == "Seq":
                return self.geom_value(e, a, 1, n)
            if core.kind == "Set":
                return self.exp_value(e, a, n)
            if core.kind == "Cyc":
                total = Fraction(1 if n == 0 else 0)
                for r in range(1, n + 1):
                    if n % r == 0:
                        total += Fraction(zx.phi(r), r) * self.log_value(e, a, n // r)
                return total
        return self.monomial_sum(e, core, a, None, n)

    def psubst_coeff(self, e: PSubst, n: int) -> Fraction:
        core = e.core
        a = self.arg_series(e.arg, n)
        d = [k * a[k] for k in range(n + 1)]
        if isinstance(core, Basic) and core.size is None:
            if core.kind == "Seq" and core.pointing == "circle":
                sq = [
                    _conv(
                        [self.geom_value(e, a, 1, i) for i in range(k + 1)],
                        [self.geom_value(e, a, 1, i) for i in range(k + 1)],
                        k,
                    )
                    for k in range(n + 1)
                ]
                return _conv(d, sq, n)
            if core.kind == "Seq" and core.pointing == "symm":
                return Fraction(0)
            if core.kind == "Set":
                min_len = 1 if core.pointing == "circle" else 2
                gsum = [Fraction(0)] * (n + 1)
                for t in range(1, n + 1):
                    for ell in divisors_from(t, min_len):
                        m = t // ell
                        gsum[t] += m * a[m]
                ex = [self.exp_value(e, a, k) for k in range(n + 1)]
                return _conv(gsum, ex, n)
            if core.kind == "Cyc":
                min_len = 1 if core.pointing == "circle" else 2
                total = Fraction(0)
                for ell in range(min_len, n + 1):
                    dg = _scale_series(d[: n // ell + 1], ell, n)
                    q = [self.geom_value(e, a, ell, k) for k in range(n + 1)]
                    part = _conv(dg, q, n)
                    if part:
                        total += zx.phi(ell) * part
                return total
        return self.monomial_sum(e, core, a, d, n)

    def monomial_sum(
        self, node: Expr, core: Expr, a: list, d: list | None, n: int
    ) -> Fraction:
        total = Fraction(0)
        for skey, t_index, c in self.core_monomials(core):
            arrays = []
            if t_index is not None:
                arrays.append(_scale_series(d[: n // t_index + 1], t_index, n))
            for i, exp in skey:
                scaled = _scale_series(a[: n // i + 1], i, n) if i > 1 else a[: n + 1]
                for _ in range(exp):
                    arrays.append(scaled)
            if not arrays:
                total += c if n == 0 else Fraction(0)
                continue
            acc = arrays[0][: n + 1]
            for nxt in arrays[1:]:
                acc = [_conv(acc, nxt, k) for k in range(n + 1)]
            total += c * acc[n]
        return total

    # memoized recurrences keyed by (tag, node id, extra, n)

    def geom_value(self, node: Expr, a: list, ell: int, n: int) -> Fraction:
        key = ("geom", id(node), ell, n)
        got = self._memo.get(key)
        if got is not None:
            return got
        if n == 0:
            value = Fraction(1)
        else:
            value = Fraction(0)
            for k in range(ell, n + 1, ell):
                if a[k // ell]:
                    value += a[k // ell] * self.geom_value(node, a, ell, n - k)
        self._memo[key] = value
        return value

    def exp_value(self, node: Expr, a: list, n: int) -> Fraction:
        key = ("exp", id(node), n)
        got = self._memo.get(key)
        if got is not None:
            return got
        if n == 0:
            value = Fraction(1)
        else:
            value = Fraction(0)
            for k in range(1, n + 1):
                gk = sum((dd * a[dd] for dd in zx.divisors(k)), Fraction(0))
                if gk:
                    value += gk * self.exp_value(node, a, n - k)
            value /= n
        self._memo[key] = value
        return value

    def log_value(self, node: Expr, a: list, n: int) -> Fraction:
        key = ("log", id(node), n)
        got = self._memo.get(key)
        if got is not None:
            return got
        if n == 0:
            value = Fraction(0)
        else:
            value = Fraction(n) * a[n]
            for k in range(1, n):
                if a[n - k]:
                    value += k * self.log_value(node, a, k) * a[n - k]
            value /= n
        self._memo[key] = value
        return value


def divisors_from(t: int, min_len: int):
    return [ell for ell in zx.divisors(t) if ell >= min_len]


# ------------------------------------------------------------- admissibility


def _const_terms(g: SpeciesGrammar) -> tuple[dict[str, Fraction], list[Diagnostic]]:
    consts: dict[str, Fraction] = {v: Fraction(0) for v in g.equations}
    diags: list[Diagnostic] = []

    def basic_const(e: Expr) -> Fraction:
        if isinstance(e, Terminal):
            return g.terminal_series[e.name].cis(0).constant_term()
        if e.pointing != "none":
            return Fraction(0)
        if e.kind in ("One",):
            return Fraction(1)
        if e.kind in ("X", "Zero"):
            return Fraction(0)
        if e.size is None or e.size == 0:
            return Fraction(1)
        return Fraction(0)

    def const(e: Expr) -> Fraction:
        if isinstance(e, Ref):
            return consts.get(e.name, Fraction(0))
        if isinstance(e, Basic):
            return basic_const(e)
        if isinstance(e, Terminal):
            return basic_const(e)
        if isinstance(e, Sum):
            return const(e.a) + const(e.b)
        if isinstance(e, (Prod, PProd)):
            return const(e.a) * const(e.b)
        if isinstance(e, Subst):
            return basic_const(e.core)
        if isinstance(e, PSubst):
            return Fraction(0)
        raise InternalConsistencyError(f"unknown expression node {e!r}")

    for _ in range(len(g.equations) + 1):
        changed = False
        for var, rhs in g.equations.items():
            value = const(rhs)
            if consts[var] != value:
                consts[var] = value
                changed = True
        if not changed:
            break

    def check_args(e: Expr, var: str) -> None:
        line, col = g.spans.get(var, (0, 0))
        if isinstance(e, (Subst, PSubst)):
            if isinstance(e.arg, Ref) and consts.get(e.arg.name, Fraction(0)) != 0:
                diags.append(
                    Diagnostic(
                        "admissibility",
                        f"substitution argument {e.arg.name!r} admits structures of"
                        f" size 0 (in equation for {var!r})",
                        line,
                        col,
                    )
                )
            check_args(e.arg, var)
            return
        if isinstance(e, (Sum, Prod, PProd)):
            check_args(e.a, var)
            check_args(e.b, var)

    for var, rhs in g.equations.items():
        check_args(rhs, var)
    return consts, diags


def validate(g: SpeciesGrammar, probe_degree: int = PROBE_DEGREE) -> ValidatedGrammar:
    """Sort-check; decide admissibility and (empirically) well-foundedness."""
    if not g.equations:
        _fail(AdmissibilityError, "structure", "grammar has no equations")
    diags: list[Diagnostic] = []
    missing = [name for name in g.terminals if name not in g.terminal_series]
    if missing:
        diags.append(
            Diagnostic(
                "terminal",
                "declared terminals have no attached series: " + ", ".join(missing),
            )
        )
    if g.root is not None and g.root not in g.equations:
        diags.append(Diagnostic("reference", f"root variable {g.root!r} has no equation"))
    for a, b in g.pairs.items():
        for name in (a, b):
            if name not in g.equations:
                diags.append(Diagnostic("reference", f"pair names unknown variable {name!r}"))
    sorts = _infer_sorts(g)
    structure_diags, pointed_sides = _check_structure(g, sorts)
    diags.extend(structure_diags)
    for a, b in g.pairs.items():
        if a in sorts and sorts[a] != "pointed":
            diags.append(Diagnostic("sort", f"pair first name {a!r} must be pointed"))
        if b in sorts and sorts[b] != "unpointed":
            diags.append(Diagnostic("sort", f"pair second name {b!r} must be unpointed"))
    if diags:
        _raise_diags(diags)
    consts, adm_diags = _const_terms(g)
    if adm_diags:
        _raise_diags(adm_diags)
    probe = _Probe(g, sorts, probe_degree)
    probe.run()
    probe_ogs: dict[str, tuple[int, ...]] = {}
    for var, coeffs in probe.tables.items():
        out = []
        for n, c in enumerate(coeffs):
            if c.denominator != 1:
                raise InternalConsistencyError(
                    f"probe produced a non-integral count {c} for {var!r} at size {n}"
                )
            out.append(int(c))
        probe_ogs[var] = tuple(out)
    return ValidatedGrammar(g, sorts, pointed_sides, consts, probe_degree, probe_ogs)


def _raise_diags(diags: list[Diagnostic]):
    exc = AdmissibilityError("; ".join(d.message for d in diags))
    exc.diagnostics = diags
    raise exc


def unpoint(vg: ValidatedGrammar, pointed_var: str) -> UnpointQuery:
    """Query the unpointed counts/samples behind a pointed variable."""
    if pointed_var not in vg.grammar.equations:
        _fail(UsageError, "reference", f"unknown variable {pointed_var!r}")
    if vg.sorts.get(pointed_var) != "pointed":
        _fail(UsageError, "sort", f"variable {pointed_var!r} is not pointed")
    return UnpointQuery(pointed_var)
