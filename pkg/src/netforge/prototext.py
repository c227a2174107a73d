"""Protobuf text-format documents: parse, canonical serialization,
schema-aware validation, and path-based access.

Order-preserving and comment-tolerant; unknown fields are accepted at parse
time and only reported by validation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .proto_schema import (
    INT_TYPES,
    UNSIGNED_TYPES,
    FieldDescriptor,
    SchemaCatalog,
)


class PrototextError(Exception):
    pass


class TextSyntaxError(PrototextError):
    def __init__(self, line: int, column: int, expected: str, found: str = ""):
        self.line = line
        self.column = column
        self.expected = expected
        msg = f"line {line}, column {column}: expected {expected}"
        if found:
            msg += f", found {found!r}"
        super().__init__(msg)


class UnterminatedString(TextSyntaxError):
    def __init__(self, line: int, column: int):
        super().__init__(line, column, "closing string quote")


class UnbalancedBraces(TextSyntaxError):
    def __init__(self, line: int, column: int, found: str = ""):
        super().__init__(line, column, "balanced braces", found)


class UnknownRootMessage(PrototextError):
    pass


class PathError(PrototextError):
    pass


class PathNotFound(PathError):
    pass


class PathShapeMismatch(PathError):
    pass


_INT_RE = re.compile(r"-?\d+$")
_FLOAT_RE = re.compile(r"-?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?$|-?(?:inf)$|nan$")


@dataclass(frozen=True)
class Scalar:
    lexical_form: str
    inferred_kind: str  # integer | float | boolean | string | identifier

    @staticmethod
    def of(value) -> "Scalar":
        """Build a scalar from a Python value (bool/int/float/str)."""
        if isinstance(value, bool):
            return Scalar("true" if value else "false", "boolean")
        if isinstance(value, int):
            return Scalar(str(value), "integer")
        if isinstance(value, float):
            return Scalar(repr(value), "float")
        return Scalar(str(value), "string")

    @staticmethod
    def identifier(name: str) -> "Scalar":
        return Scalar(name, "identifier")

    def as_python(self):
        if self.inferred_kind == "integer":
            return int(self.lexical_form)
        if self.inferred_kind == "float":
            return float(self.lexical_form)
        if self.inferred_kind == "boolean":
            return self.lexical_form == "true"
        return self.lexical_form


@dataclass(frozen=True)
class Block:
    entries: tuple[tuple[str, "Scalar | Block"], ...] = ()

    def values(self, name: str) -> list["Scalar | Block"]:
        return [v for k, v in self.entries if k == name]

    def first(self, name: str) -> "Scalar | Block | None":
        for k, v in self.entries:
            if k == name:
                return v
        return None

    def scalar(self, name: str, default=None):
        v = self.first(name)
        if isinstance(v, Scalar):
            return v.as_python()
        return default

    def without(self, *names: str) -> "Block":
        return Block(tuple((k, v) for k, v in self.entries if k not in names))


@dataclass(frozen=True)
class Document:
    root: Block = Block()


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # error | warning
    path: str
    message: str


# ---------------------------------------------------------------------------
# Parsing

_TOKEN_RE = re.compile(
    r"""
      (?P<ws>[\s,]+)
    | (?P<comment>\#[^\n]*)
    | (?P<string>"(?:\\.|[^"\\\n])*"|'(?:\\.|[^'\\\n])*')
    | (?P<badstring>"(?:\\.|[^"\\\n])*|'(?:\\.|[^'\\\n])*)
    | (?P<number>[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?|-inf)
    | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
    | (?P<punct>[{}:])
    """,
    re.VERBOSE,
)

_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", "\\": "\\", '"': '"', "'": "'",
            "a": "\a", "b": "\b", "f": "\f", "v": "\v", "0": "\0"}


def _unescape(body: str) -> str:
    out = []
    i = 0
    while i < len(body):
        c = body[i]
        if c == "\\" and i + 1 < len(body):
            nxt = body[i + 1]
            out.append(_ESCAPES.get(nxt, nxt))
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def _escape(text: str) -> str:
    out = []
    for c in text:
        if c == "\\":
            out.append("\\\\")
        elif c == '"':
            out.append('\\"')
        elif c == "\n":
            out.append("\\n")
        elif c == "\t":
            out.append("\\t")
        elif c == "\r":
            out.append("\\r")
        else:
            out.append(c)
    return "".join(out)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    line: int
    column: int


def _lex(text: str) -> list[_Tok]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if not m:
            raise TextSyntaxError(line, col, "a value or field name", text[pos])
        kind = m.lastgroup or ""
        value = m.group()
        if kind == "badstring":
            raise UnterminatedString(line, col)
        if kind not in ("ws", "comment"):
            tokens.append(_Tok(kind, value, line, col))
        if "\n" in value:
            line += value.count("\n")
            line_start = pos + value.rfind("\n") + 1
        pos = m.end()
    return tokens


def parse_text_format(text: str) -> Document:
    """Parse protobuf text format into an order-preserving Document."""
    tokens = _lex(text)
    pos = 0

    def parse_entries(closing: bool) -> tuple[Block, int]:
        nonlocal pos
        entries: list[tuple[str, Scalar | Block]] = []
        while pos < len(tokens):
            tok = tokens[pos]
            if tok.text == "}":
                if not closing:
                    raise UnbalancedBraces(tok.line, tok.column, "}")
                pos += 1
                return Block(tuple(entries)), pos
            if tok.kind != "ident":
                raise TextSyntaxError(tok.line, tok.column, "a field name", tok.text)
            name = tok.text
            pos += 1
            if pos >= len(tokens):
                raise TextSyntaxError(tok.line, tok.column, "':' or '{'", "end of input")
            nxt = tokens[pos]
            if nxt.text == ":":
                pos += 1
                if pos >= len(tokens):
                    raise TextSyntaxError(nxt.line, nxt.column, "a value", "end of input")
                nxt = tokens[pos]
                if nxt.text == "{":
                    pos += 1
                    block, pos2 = parse_entries(True)
                    pos = pos2
                    entries.append((name, block))
                else:
                    entries.append((name, _scalar_from_token(nxt)))
                    pos += 1
            elif nxt.text == "{":
                pos += 1
                block, pos2 = parse_entries(True)
                pos = pos2
                entries.append((name, block))
            else:
                raise TextSyntaxError(nxt.line, nxt.column, "':' or '{'", nxt.text)
        if closing:
            last = tokens[-1]
            raise UnbalancedBraces(last.line, last.column, "end of input")
        return Block(tuple(entries)), pos

    root, _ = parse_entries(False)
    return Document(root)


def _scalar_from_token(tok: _Tok) -> Scalar:
    if tok.kind == "string":
        return Scalar(_unescape(tok.text[1:-1]), "string")
    if tok.kind == "number":
        text = tok.text.lstrip("+")
        kind = "integer" if _INT_RE.match(text) else "float"
        return Scalar(text, kind)
    if tok.kind == "ident":
        if tok.text in ("true", "false"):
            return Scalar(tok.text, "boolean")
        if tok.text in ("inf", "nan"):
            return Scalar(tok.text, "float")
        return Scalar(tok.text, "identifier")
    raise TextSyntaxError(tok.line, tok.column, "a value", tok.text)


# ---------------------------------------------------------------------------
# Serialization

def serialize_text_format(doc: Document) -> str:
    """Canonical writer: two-space indents, one entry per line."""
    lines: list[str] = []

    def emit(block: Block, indent: int) -> None:
        pad = "  " * indent
        for name, value in block.entries:
            if isinstance(value, Block):
                lines.append(f"{pad}{name} {{")
                emit(value, indent + 1)
                lines.append(f"{pad}}}")
            elif value.inferred_kind == "string":
                lines.append(f'{pad}{name}: "{_escape(value.lexical_form)}"')
            else:
                lines.append(f"{pad}{name}: {value.lexical_form}")

    emit(doc.root, 0)
    return "\n".join(lines) + "\n" if lines else ""


# ---------------------------------------------------------------------------
# Validation

def validate_against(doc: Document, schema: SchemaCatalog, root_message: str) -> list[Diagnostic]:
    """Check a document against a schema message; returns diagnostics."""
    if root_message not in schema.messages:
        raise UnknownRootMessage(root_message)
    diagnostics: list[Diagnostic] = []
    _validate_block(doc.root, schema, root_message, "", diagnostics)
    return diagnostics


def _path_join(prefix: str, segment: str) -> str:
    return f"{prefix}.{segment}" if prefix else segment


def _validate_block(block: Block, schema: SchemaCatalog, message: str,
                    prefix: str, out: list[Diagnostic]) -> None:
    desc = schema.messages[message]
    counters: dict[str, int] = {}
    singular_seen: set[str] = set()
    for name, value in block.entries:
        index = counters.get(name, 0)
        counters[name] = index + 1
        f = desc.field(name)
        if f is None:
            out.append(Diagnostic("error", _path_join(prefix, name),
                                  f"unknown field {name!r} in {message}"))
            continue
        segment = f"{name}[{index}]" if f.is_repeated else name
        path = _path_join(prefix, segment)
        if not f.is_repeated:
            if name in singular_seen:
                out.append(Diagnostic("error", path,
                                      f"non-repeated field {name!r} appears more than once"))
                continue
            singular_seen.add(name)
        if f.deprecated:
            out.append(Diagnostic("warning", path, f"field {name!r} is deprecated"))
        if f.kind == "message":
            if not isinstance(value, Block):
                out.append(Diagnostic("error", path,
                                      f"field {name!r} expects a block of {f.type_name}"))
            else:
                _validate_block(value, schema, f.type_name, path, out)
        else:
            if isinstance(value, Block):
                out.append(Diagnostic("error", path,
                                      f"field {name!r} expects a scalar, got a block"))
            else:
                _validate_scalar(value, f, schema, path, out)


def _validate_scalar(value: Scalar, f: FieldDescriptor, schema: SchemaCatalog,
                     path: str, out: list[Diagnostic]) -> None:
    if f.kind == "enum":
        enum = schema.enums[f.type_name]
        names = enum.value_names()
        if value.inferred_kind == "identifier" and value.lexical_form in names:
            return
        if value.inferred_kind == "integer" and int(value.lexical_form) in dict(
                (n, v) for n, v in enum.values).values():
            return
        out.append(Diagnostic("error", path,
                              f"{value.lexical_form!r} is not a value of enum {f.type_name}"))
        return
    subtype = f.type_name
    lex = value.lexical_form
    if subtype == "bool":
        if value.inferred_kind != "boolean":
            out.append(Diagnostic("error", path, f"bool expected, got {lex!r}"))
    elif subtype in INT_TYPES:
        if value.inferred_kind != "integer":
            out.append(Diagnostic("error", path, f"{subtype} expected, got {lex!r}"))
        elif subtype in UNSIGNED_TYPES and int(lex) < 0:
            out.append(Diagnostic("error", path, f"{subtype} expected, got negative {lex}"))
        elif subtype in ("int32", "sint32", "sfixed32") and not -2**31 <= int(lex) < 2**31:
            out.append(Diagnostic("error", path, f"{subtype} out of range: {lex}"))
        elif subtype in ("uint32", "fixed32") and int(lex) >= 2**32:
            out.append(Diagnostic("error", path, f"{subtype} out of range: {lex}"))
    elif subtype in ("float", "double"):
        if value.inferred_kind not in ("float", "integer"):
            out.append(Diagnostic("error", path, f"{subtype} expected, got {lex!r}"))
    elif subtype in ("string", "bytes"):
        if value.inferred_kind != "string":
            out.append(Diagnostic("error", path, f"{subtype} expected, got {lex!r}"))


# ---------------------------------------------------------------------------
# Path access

_SEGMENT_RE = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)(?:\[(\d+|new)\])?$")


def _parse_path(path: str) -> list[tuple[str, int | str | None]]:
    segments = []
    if not path:
        raise PathError("empty path")
    for part in path.split("."):
        m = _SEGMENT_RE.match(part)
        if not m:
            raise PathError(f"bad path segment {part!r}")
        name, idx = m.group(1), m.group(2)
        if idx is None:
            segments.append((name, None))
        elif idx == "new":
            segments.append((name, "new"))
        else:
            segments.append((name, int(idx)))
    return segments


def _locate(block: Block, name: str, index: int | None) -> int:
    """Entry index in block.entries for the index-th occurrence of name."""
    want = 0 if index is None else index
    seen = 0
    for i, (k, _) in enumerate(block.entries):
        if k == name:
            if seen == want:
                return i
            seen += 1
    return -1


def get_path(doc: Document, path: str):
    """Fetch the Scalar or Block at a dotted, [i]-indexed path."""
    node: Scalar | Block = doc.root
    for name, index in _parse_path(path):
        if not isinstance(node, Block):
            raise PathShapeMismatch(f"{path}: scalar where block expected")
        if index == "new":
            raise PathError(f"{path}: [new] is only valid for set_path")
        at = _locate(node, name, index)
        if at < 0:
            raise PathNotFound(path)
        node = node.entries[at][1]
    return node


def set_path(doc: Document, path: str, value) -> Document:
    """Set a path, creating intermediate blocks; returns a new Document."""
    if not isinstance(value, (Scalar, Block)):
        value = Scalar.of(value)
    segments = _parse_path(path)

    def update(block: Block, segs) -> Block:
        (name, index), rest = segs[0], segs[1:]
        entries = list(block.entries)
        if index == "new":
            at = -1
        else:
            at = _locate(block, name, index)
        if not rest:
            if at < 0:
                entries.append((name, value))
            else:
                entries[at] = (name, value)
            return Block(tuple(entries))
        if at < 0:
            child = Block()
            entries.append((name, update(child, rest)))
            return Block(tuple(entries))
        child = entries[at][1]
        if not isinstance(child, Block):
            raise PathShapeMismatch(f"{path}: scalar where block expected")
        entries[at] = (name, update(child, rest))
        return Block(tuple(entries))

    return Document(update(doc.root, segments))


def delete_path(doc: Document, path: str) -> Document:
    """Remove the entry at a path; returns a new Document."""
    segments = _parse_path(path)

    def update(block: Block, segs) -> Block:
        (name, index), rest = segs[0], segs[1:]
        if index == "new":
            raise PathError(f"{path}: [new] is only valid for set_path")
        at = _locate(block, name, index)
        if at < 0:
            raise PathNotFound(path)
        entries = list(block.entries)
        if not rest:
            del entries[at]
            return Block(tuple(entries))
        child = entries[at][1]
        if not isinstance(child, Block):
            raise PathShapeMismatch(f"{path}: scalar where block expected")
        entries[at] = (name, update(child, rest))
        return Block(tuple(entries))

    return Document(update(doc.root, segments))
