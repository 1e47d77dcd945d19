"""Per-pixel expression language: parser, canonical form, evaluators.

Grammar (EBNF):

    expr := cmp
    cmp  := add (("<"|"<="|">"|">="|"=="|"!=") add)?
    add  := mul (("+"|"-") mul)*
    mul  := unary (("*"|"/") unary)*
    unary:= "-" unary | atom
    atom := NUMBER | IDENT "." "b" INT | IDENT "(" args ")" | "(" expr ")" | "NODATA"

Comparisons yield 1.0/0.0.  Functions: min, max, abs, clamp(x, lo, hi),
ifelse(cond, a, b).  Arithmetic is IEEE double; NODATA propagates through
every operator except the untaken branch of ifelse; division by zero and
any NaN or infinity normalize to NODATA, so results are platform-stable.

Two evaluators exist on purpose: ``eval_pixel`` is the obvious scalar
reference, ``eval_chunk`` the vectorized one used in pipelines.  Tests hold
them equal cell for cell.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .canonical import hash_obj
from .chunk import Chunk
from .errors import GeometryError, ParseError

# Fixed output convention for evaluated chunks.
NODATA_F32 = -3.4e38

FUNCTIONS = {"min": 2, "max": 2, "abs": 1, "clamp": 3, "ifelse": 3}

_CMP_OPS = ("<=", ">=", "==", "!=", "<", ">")

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op><=|>=|==|!=|[-+*/<>().,])"
    r")"
)


@dataclass(frozen=True)
class Token:
    kind: str  # num | ident | op
    text: str
    offset: int


def _tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            at = len(text) - len(stripped)
            raise ParseError(f"unexpected character {stripped[0]!r}", at)
        if m.group("num") is not None:
            tokens.append(Token("num", m.group("num"), m.start("num")))
        elif m.group("ident") is not None:
            tokens.append(Token("ident", m.group("ident"), m.start("ident")))
        else:
            tokens.append(Token("op", m.group("op"), m.start("op")))
        pos = m.end()
    return tokens


# AST nodes are plain tuples so canonical serialization is just nesting:
#   ("num", value) ("band", alias, k) ("nodata",) ("neg", x)
#   ("add"|"sub"|"mul"|"div"|"lt"|"le"|"gt"|"ge"|"eq"|"ne", a, b)
#   ("call", name, (args...))

_BIN_NAMES = {"+": "add", "-": "sub", "*": "mul", "/": "div",
              "<": "lt", "<=": "le", ">": "gt", ">=": "ge", "==": "eq", "!=": "ne"}
_NAME_BIN = {v: k for k, v in _BIN_NAMES.items()}


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> Optional[Token]:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def take(self) -> Token:
        tok = self.peek()
        if tok is None:
            raise ParseError("unexpected end of expression", len(self.text))
        self.i += 1
        return tok

    def expect_op(self, text: str) -> Token:
        tok = self.take()
        if tok.kind != "op" or tok.text != text:
            raise ParseError(f"expected {text!r}, found {tok.text!r}", tok.offset)
        return tok

    def parse(self):
        node = self.cmp()
        tok = self.peek()
        if tok is not None:
            raise ParseError(f"trailing input {tok.text!r}", tok.offset)
        return node

    def cmp(self):
        left = self.add()
        tok = self.peek()
        if tok is not None and tok.kind == "op" and tok.text in _CMP_OPS:
            self.take()
            right = self.add()
            return (_BIN_NAMES[tok.text], left, right)
        return left

    def add(self):
        node = self.mul()
        while True:
            tok = self.peek()
            if tok is not None and tok.kind == "op" and tok.text in ("+", "-"):
                self.take()
                node = (_BIN_NAMES[tok.text], node, self.mul())
            else:
                return node

    def mul(self):
        node = self.unary()
        while True:
            tok = self.peek()
            if tok is not None and tok.kind == "op" and tok.text in ("*", "/"):
                self.take()
                node = (_BIN_NAMES[tok.text], node, self.unary())
            else:
                return node

    def unary(self):
        tok = self.peek()
        if tok is not None and tok.kind == "op" and tok.text == "-":
            self.take()
            return ("neg", self.unary())
        return self.atom()

    def atom(self):
        tok = self.take()
        if tok.kind == "num":
            return ("num", float(tok.text))
        if tok.kind == "op" and tok.text == "(":
            node = self.cmp()
            self.expect_op(")")
            return node
        if tok.kind == "ident":
            if tok.text == "NODATA":
                return ("nodata",)
            nxt = self.peek()
            if nxt is not None and nxt.kind == "op" and nxt.text == ".":
                self.take()
                band_tok = self.take()
                m = re.fullmatch(r"b([0-9]+)", band_tok.text) if band_tok.kind == "ident" else None
                if m is None:
                    raise ParseError("expected band reference like .b1", band_tok.offset)
                return ("band", tok.text, int(m.group(1)))
            if nxt is not None and nxt.kind == "op" and nxt.text == "(":
                if tok.text not in FUNCTIONS:
                    raise ParseError(f"unknown function {tok.text!r}", tok.offset)
                self.take()
                args = [self.cmp()]
                while self.peek() is not None and self.peek().text == ",":
                    self.take()
                    args.append(self.cmp())
                self.expect_op(")")
                if len(args) != FUNCTIONS[tok.text]:
                    raise ParseError(
                        f"{tok.text} takes {FUNCTIONS[tok.text]} arguments, got {len(args)}",
                        tok.offset,
                    )
                return ("call", tok.text, tuple(args))
            raise ParseError(
                f"bare identifier {tok.text!r}; band references look like {tok.text}.b1",
                tok.offset,
            )
        raise ParseError(f"unexpected token {tok.text!r}", tok.offset)


def _to_obj(node):
    kind = node[0]
    if kind == "num":
        return ["num", node[1]]
    if kind == "band":
        return ["band", node[1], node[2]]
    if kind == "nodata":
        return ["nodata"]
    if kind == "neg":
        return ["neg", _to_obj(node[1])]
    if kind == "call":
        return ["call", node[1], [_to_obj(a) for a in node[2]]]
    return [kind, _to_obj(node[1]), _to_obj(node[2])]


_PREC = {"lt": 1, "le": 1, "gt": 1, "ge": 1, "eq": 1, "ne": 1,
         "add": 2, "sub": 2, "mul": 3, "div": 3, "neg": 4}


def _print(node, min_prec: int = 0) -> str:
    """Minimal-parenthesis rendering; binary operators are left-associative."""
    kind = node[0]
    if kind == "num":
        v = node[1]
        return repr(int(v)) if float(v).is_integer() and abs(v) < 1e16 else repr(v)
    if kind == "band":
        return f"{node[1]}.b{node[2]}"
    if kind == "nodata":
        return "NODATA"
    if kind == "call":
        args = ", ".join(_print(a, 0) for a in node[2])
        return f"{node[1]}({args})"
    prec = _PREC[kind]
    if kind == "neg":
        out = f"-{_print(node[1], prec)}"
    else:
        out = f"{_print(node[1], prec)} {_NAME_BIN[kind]} {_print(node[2], prec + 1)}"
    return f"({out})" if prec < min_prec else out


@dataclass(frozen=True)
class ExprProgram:
    source: str
    ast: tuple
    canonical_hash: str

    @property
    def bands(self) -> list[tuple[str, int]]:
        """Referenced (alias, band) pairs, sorted."""
        found = set()

        def walk(node):
            if node[0] == "band":
                found.add((node[1], node[2]))
            elif node[0] == "neg":
                walk(node[1])
            elif node[0] == "call":
                for a in node[2]:
                    walk(a)
            elif node[0] not in ("num", "nodata"):
                walk(node[1])
                walk(node[2])

        walk(self.ast)
        return sorted(found)

    def canonical_text(self) -> str:
        return _print(self.ast)


def parse(text: str) -> ExprProgram:
    ast = _Parser(text).parse()
    return ExprProgram(text, ast, hash_obj(_to_obj(ast)))


def eval_pixel(prog: ExprProgram, bindings: dict[tuple[str, int], Optional[float]]):
    """Reference scalar evaluation; None plays the role of NODATA."""

    def norm(v: Optional[float]) -> Optional[float]:
        if v is None or not np.isfinite(v):
            return None
        return float(v)

    def ev(node) -> Optional[float]:
        kind = node[0]
        if kind == "num":
            return node[1]
        if kind == "nodata":
            return None
        if kind == "band":
            key = (node[1], node[2])
            if key not in bindings:
                raise ParseError(f"unbound band {node[1]}.b{node[2]}", 0)
            return norm(bindings[key])
        if kind == "neg":
            v = ev(node[1])
            return None if v is None else norm(-v)
        if kind == "call":
            name = node[1]
            if name == "ifelse":
                cond = ev(node[2][0])
                if cond is None:
                    return None
                return ev(node[2][1]) if cond != 0.0 else ev(node[2][2])
            args = [ev(a) for a in node[2]]
            if any(a is None for a in args):
                return None
            if name == "abs":
                return norm(abs(args[0]))
            if name == "min":
                return norm(min(args))
            if name == "max":
                return norm(max(args))
            if name == "clamp":
                return norm(min(max(args[0], args[1]), args[2]))
            raise AssertionError(name)
        a = ev(node[1])
        b = ev(node[2])
        if a is None or b is None:
            return None
        if kind == "add":
            return norm(a + b)
        if kind == "sub":
            return norm(a - b)
        if kind == "mul":
            return norm(a * b)
        if kind == "div":
            return None if b == 0.0 else norm(a / b)
        if kind == "lt":
            return 1.0 if a < b else 0.0
        if kind == "le":
            return 1.0 if a <= b else 0.0
        if kind == "gt":
            return 1.0 if a > b else 0.0
        if kind == "ge":
            return 1.0 if a >= b else 0.0
        if kind == "eq":
            return 1.0 if a == b else 0.0
        if kind == "ne":
            return 1.0 if a != b else 0.0
        raise AssertionError(kind)

    return ev(prog.ast)


def eval_chunk(prog: ExprProgram, inputs: dict[str, dict[int, Chunk]]) -> Chunk:
    """Vectorized evaluation over aligned chunks; output is f32.

    All referenced chunks must share width and height.  Output NODATA is the
    fixed f32 sentinel; a valid result that exceeds f32 range becomes NODATA
    too (the scalar path stays in doubles, so calibrate comparisons through
    the same cast).
    """
    shapes = set()
    arrays: dict[tuple[str, int], tuple[np.ndarray, np.ndarray]] = {}
    for alias, band in prog.bands:
        chunk = inputs.get(alias, {}).get(band)
        if chunk is None:
            raise ParseError(f"unbound band {alias}.b{band}", 0)
        shapes.add(chunk.values.shape)
        arrays[(alias, band)] = (chunk.values.astype(np.float64), chunk.valid_mask())
    if len(shapes) > 1:
        raise GeometryError(f"input chunks disagree on shape: {sorted(shapes)}")
    shape = shapes.pop() if shapes else (1, 1)

    def norm(vals: np.ndarray, valid: np.ndarray):
        return vals, valid & np.isfinite(vals)

    def ev(node) -> tuple[np.ndarray, np.ndarray]:
        kind = node[0]
        if kind == "num":
            return np.full(shape, node[1]), np.ones(shape, dtype=bool)
        if kind == "nodata":
            return np.zeros(shape), np.zeros(shape, dtype=bool)
        if kind == "band":
            return arrays[(node[1], node[2])]
        if kind == "neg":
            v, ok = ev(node[1])
            return norm(-v, ok)
        if kind == "call":
            name = node[1]
            if name == "ifelse":
                c, ck = ev(node[2][0])
                a, ak = ev(node[2][1])
                b, bk = ev(node[2][2])
                taken = c != 0.0
                return np.where(taken, a, b), ck & np.where(taken, ak, bk)
            parts = [ev(a) for a in node[2]]
            ok = parts[0][1]
            for _, k in parts[1:]:
                ok = ok & k
            if name == "abs":
                return norm(np.abs(parts[0][0]), ok)
            if name == "min":
                return norm(np.minimum(parts[0][0], parts[1][0]), ok)
            if name == "max":
                return norm(np.maximum(parts[0][0], parts[1][0]), ok)
            if name == "clamp":
                x, lo, hi = (p[0] for p in parts)
                return norm(np.minimum(np.maximum(x, lo), hi), ok)
            raise AssertionError(name)
        a, ak = ev(node[1])
        b, bk = ev(node[2])
        ok = ak & bk
        with np.errstate(all="ignore"):
            if kind == "add":
                return norm(a + b, ok)
            if kind == "sub":
                return norm(a - b, ok)
            if kind == "mul":
                return norm(a * b, ok)
            if kind == "div":
                return norm(np.divide(a, b), ok & (b != 0.0))
            if kind == "lt":
                return (a < b).astype(np.float64), ok
            if kind == "le":
                return (a <= b).astype(np.float64), ok
            if kind == "gt":
                return (a > b).astype(np.float64), ok
            if kind == "ge":
                return (a >= b).astype(np.float64), ok
            if kind == "eq":
                return (a == b).astype(np.float64), ok
            if kind == "ne":
                return (a != b).astype(np.float64), ok
        raise AssertionError(kind)

    vals, valid = ev(prog.ast)
    with np.errstate(invalid="ignore", over="ignore"):
        out = vals.astype(np.float32)
        valid = valid & np.isfinite(out)
    out = np.where(valid, out, np.float32(NODATA_F32))
    return Chunk("f32", shape[1], shape[0], NODATA_F32, out)
