"""Lexer, parser, printer and compiler for ``.tla`` scripts.

A script is a sequence of parenthesized forms::

    ; comments run to end of line
    (define x (constant 1 [2 2]))
    (dot x x)

``[a b c]`` is shorthand for ``(list a b c)``.  Compilation turns the AST
into an :class:`ExecutionTree`, a DAG of primitive invocations in which a
``define``'d expression is a single node shared by all of its uses.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from typing import Union

from .errors import CompileError, LexError, ParseError


class TokenKind(enum.Enum):
    LPAREN = "LParen"
    RPAREN = "RParen"
    IDENT = "Identifier"
    NUMBER = "Number"
    STRING = "StringLit"


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    text: str
    line: int
    col: int


_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_-]*")
_NUMBER_RE = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_DELIMS = set("()[];\"") | set(" \t\r\n")
_ESCAPES = {"n": "\n", "t": "\t", '"': '"', "\\": "\\"}


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    i, line, col = 0, 1, 1
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            i, line, col = i + 1, line + 1, 1
            continue
        if ch in " \t\r":
            i, col = i + 1, col + 1
            continue
        if ch == ";":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch in "([":
            tokens.append(Token(TokenKind.LPAREN, ch, line, col))
            i, col = i + 1, col + 1
            continue
        if ch in ")]":
            tokens.append(Token(TokenKind.RPAREN, ch, line, col))
            i, col = i + 1, col + 1
            continue
        if ch == '"':
            start_col = col
            j = i + 1
            while j < n and text[j] != '"':
                if text[j] == "\n":
                    raise LexError("unterminated string literal", line, start_col)
                j += 2 if text[j] == "\\" else 1
            if j >= n:
                raise LexError("unterminated string literal", line, start_col)
            raw = text[i : j + 1]
            tokens.append(Token(TokenKind.STRING, raw, line, start_col))
            col += j + 1 - i
            i = j + 1
            continue
        # an atom runs to the next delimiter
        j = i
        while j < n and text[j] not in _DELIMS:
            j += 1
        atom = text[i:j]
        if _NUMBER_RE.fullmatch(atom):
            if not math.isfinite(float(atom)):
                raise LexError(f"number out of range: {atom}", line, col)
            tokens.append(Token(TokenKind.NUMBER, atom, line, col))
        elif _IDENT_RE.fullmatch(atom):
            tokens.append(Token(TokenKind.IDENT, atom, line, col))
        else:
            bad = next((k for k, c in enumerate(atom) if not (c.isalnum() or c in "_-.+")), None)
            if bad is None:
                raise LexError(f"malformed atom {atom!r}", line, col)
            raise LexError(f"illegal character {atom[bad]!r}", line, col + bad)
        col += j - i
        i = j
    return tokens


def _unescape(raw: str, line: int, col: int) -> str:
    body = raw[1:-1]
    out = []
    k = 0
    while k < len(body):
        c = body[k]
        if c == "\\":
            nxt = body[k + 1] if k + 1 < len(body) else ""
            if nxt not in _ESCAPES:
                raise LexError(f"bad escape \\{nxt}", line, col + k + 1)
            out.append(_ESCAPES[nxt])
            k += 2
        else:
            out.append(c)
            k += 1
    return "".join(out)


# -- AST --------------------------------------------------------------------


@dataclass
class Literal:
    value: Union[float, str]
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass
class Ident:
    name: str
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass
class Call:
    head: str
    args: list
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass
class Define:
    name: str
    value: "ExprAst"
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass
class Block:
    forms: list
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


ExprAst = Union[Literal, Ident, Call, Define, Block]

_CLOSER = {"(": ")", "[": "]"}


def parse(tokens: list[Token]) -> ExprAst:
    """Parse a token list into an AST.

    A single top-level form is returned as-is; several become a Block.
    An empty token list parses to an empty Block.
    """
    pos = 0

    def form() -> ExprAst:
        nonlocal pos
        tok = tokens[pos]
        pos += 1
        if tok.kind is TokenKind.NUMBER:
            return Literal(float(tok.text), tok.line, tok.col)
        if tok.kind is TokenKind.STRING:
            return Literal(_unescape(tok.text, tok.line, tok.col), tok.line, tok.col)
        if tok.kind is TokenKind.IDENT:
            return Ident(tok.text, tok.line, tok.col)
        if tok.kind is TokenKind.RPAREN:
            raise ParseError(f"unexpected {tok.text!r}", tok.line, tok.col)

        closer = _CLOSER[tok.text]
        items: list[ExprAst] = []
        while True:
            if pos >= len(tokens):
                raise ParseError(f"unbalanced {tok.text!r}: missing {closer!r}", tok.line, tok.col)
            nxt = tokens[pos]
            if nxt.kind is TokenKind.RPAREN:
                if nxt.text != closer:
                    raise ParseError(f"expected {closer!r}, found {nxt.text!r}", nxt.line, nxt.col)
                pos += 1
                break
            items.append(form())

        if tok.text == "[":
            return Call("list", items, tok.line, tok.col)
        if not items:
            raise ParseError("empty call", tok.line, tok.col)
        head = items[0]
        if not isinstance(head, Ident):
            raise ParseError("call head must be an identifier", head.line or tok.line, head.col or tok.col)
        if head.name == "define":
            if len(items) != 3 or not isinstance(items[1], Ident):
                raise ParseError("define takes a name and one expression", tok.line, tok.col)
            return Define(items[1].name, items[2], tok.line, tok.col)
        return Call(head.name, items[1:], tok.line, tok.col)

    forms = []
    while pos < len(tokens):
        forms.append(form())
    if len(forms) == 1:
        return forms[0]
    return Block(forms, 1, 1)


def parse_text(text: str) -> ExprAst:
    return parse(tokenize(text))


def _format_number(v: float) -> str:
    if v.is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def _format_string(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t") + '"'


def unparse(ast: ExprAst) -> str:
    """Pretty-print an AST back to script text."""
    if isinstance(ast, Literal):
        return _format_string(ast.value) if isinstance(ast.value, str) else _format_number(ast.value)
    if isinstance(ast, Ident):
        return ast.name
    if isinstance(ast, Call):
        return "(" + " ".join([ast.head] + [unparse(a) for a in ast.args]) + ")"
    if isinstance(ast, Define):
        return f"(define {ast.name} {unparse(ast.value)})"
    if isinstance(ast, Block):
        return "\n".join(unparse(f) for f in ast.forms)
    raise TypeError(f"not an AST node: {ast!r}")


# -- compilation --------------------------------------------------------------


@dataclass(eq=False)
class Node:
    """One vertex of the execution tree.

    ``kind`` is ``"lit"`` (value in ``value``), ``"call"`` (primitive ``op``
    applied to ``children``), ``"lazy"`` (primitive ``op`` receiving its
    children unevaluated) or ``"block"`` (evaluates every child, yields the
    last).
    """

    id: int
    kind: str
    op: str = ""
    value: object = None
    children: list = field(default_factory=list)
    line: int = 0
    col: int = 0


@dataclass
class ExecutionTree:
    root: Node
    nodes: list  # topological order, children before parents

    def __len__(self) -> int:
        return len(self.nodes)

    def parents(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for c in n.children:
                out[c.id].append(n.id)
        return out


def compile_tree(ast: ExprAst, registry) -> ExecutionTree:
    """Compile an AST against a primitive registry.

    Node ids follow a deterministic post-order, so every locality compiling
    the same script obtains the same ids.
    """
    nodes: list[Node] = []

    def new(kind, **kw) -> Node:
        node = Node(id=len(nodes), kind=kind, **kw)
        nodes.append(node)
        return node

    def build(expr: ExprAst, env: dict[str, Node], top: bool) -> Node:
        if isinstance(expr, Literal):
            return new("lit", value=expr.value, line=expr.line, col=expr.col)
        if isinstance(expr, Ident):
            if expr.name in env:
                return env[expr.name]
            if expr.name in registry and registry[expr.name].min_arity == 0:
                return new("call", op=expr.name, line=expr.line, col=expr.col)
            raise CompileError(f"unbound identifier {expr.name!r}", expr.line, expr.col)
        if isinstance(expr, Define):
            if not top:
                raise CompileError("define is only allowed at top level", expr.line, expr.col)
            node = build(expr.value, env, False)
            env[expr.name] = node
            return node
        if isinstance(expr, Call):
            if expr.head not in registry:
                raise CompileError(f"unknown primitive {expr.head!r}", expr.line, expr.col)
            prim = registry[expr.head]
            if not prim.accepts(len(expr.args)):
                raise CompileError(
                    f"{expr.head} expects {prim.arity_text()} arguments, got {len(expr.args)}",
                    expr.line,
                    expr.col,
                )
            children = [build(a, env, False) for a in expr.args]
            kind = "lazy" if prim.lazy else "call"
            node = new(kind, op=expr.head, children=children, line=expr.line, col=expr.col)
            if prim.lazy:
                _check_lazy_body(node, registry)
            return node
        if isinstance(expr, Block):
            env = dict(env)
            children = [build(f, env, top) for f in expr.forms]
            return new("block", children=children, line=expr.line, col=expr.col)
        raise CompileError(f"not an expression: {expr!r}")

    root = build(ast, {}, True)
    return ExecutionTree(root=root, nodes=nodes)


def _check_lazy_body(node: Node, registry) -> None:
    seen = set()
    stack = list(node.children)
    while stack:
        n = stack.pop()
        if n.id in seen:
            continue
        seen.add(n.id)
        if n.op and registry[n.op].collective:
            raise CompileError(
                f"{node.op} body may not contain the communicating primitive {n.op!r}", n.line, n.col
            )
        stack.extend(n.children)


def compile_text(text: str, registry) -> ExecutionTree:
    return compile_tree(parse_text(text), registry)
