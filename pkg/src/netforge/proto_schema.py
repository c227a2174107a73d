"""Proto2 schema parsing and layer-catalog derivation.

Parses a single self-contained ``.proto`` file (the dialect used by Caffe
schemas) into descriptor tables, then derives the palette of layer types
from the ``LayerParameter`` message.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

SCALAR_TYPES = frozenset({
    "double", "float", "int32", "int64", "uint32", "uint64",
    "sint32", "sint64", "fixed32", "fixed64", "sfixed32", "sfixed64",
    "bool", "string", "bytes",
})

INT_TYPES = frozenset({
    "int32", "int64", "uint32", "uint64", "sint32", "sint64",
    "fixed32", "fixed64", "sfixed32", "sfixed64",
})

UNSIGNED_TYPES = frozenset({"uint32", "uint64", "fixed32", "fixed64"})


class SchemaError(Exception):
    """Base class for schema parsing/derivation errors."""


class SchemaSyntaxError(SchemaError):
    def __init__(self, line: int, column: int, expected: str, found: str = ""):
        self.line = line
        self.column = column
        self.expected = expected
        self.found = found
        msg = f"line {line}, column {column}: expected {expected}"
        if found:
            msg += f", found {found!r}"
        super().__init__(msg)


class DuplicateName(SchemaError):
    def __init__(self, name: str, context: str):
        self.name = name
        self.context = context
        super().__init__(f"duplicate name {name!r} in {context}")


class UnresolvedTypeReference(SchemaError):
    def __init__(self, references: list[tuple[str, str, str]]):
        # (message, field, type name) triples, gathered after the full parse
        self.references = references
        listing = "; ".join(f"{m}.{f} -> {t}" for m, f, t in references)
        super().__init__(f"unresolved type references: {listing}")


class UnsupportedFeature(SchemaError):
    def __init__(self, feature: str, line: int):
        self.feature = feature
        self.line = line
        super().__init__(f"line {line}: {feature} is not supported")


class MissingLayerParameterMessage(SchemaError):
    pass


class UnknownMessage(SchemaError):
    pass


class UnknownField(SchemaError):
    pass


@dataclass(frozen=True)
class FieldDescriptor:
    name: str
    tag: int
    label: str                      # optional | required | repeated
    kind: str                       # scalar | enum | message
    type_name: str                  # scalar subtype, or qualified enum/message name
    default_value: str | None = None
    deprecated: bool = False

    @property
    def is_repeated(self) -> bool:
        return self.label == "repeated"


@dataclass(frozen=True)
class MessageDescriptor:
    name: str                       # fully qualified, dot-separated
    fields: tuple[FieldDescriptor, ...]

    def field(self, name: str) -> FieldDescriptor | None:
        for f in self.fields:
            if f.name == name:
                return f
        return None


@dataclass(frozen=True)
class EnumDescriptor:
    name: str
    values: tuple[tuple[str, int], ...]

    def value_names(self) -> list[str]:
        return [n for n, _ in self.values]


@dataclass(frozen=True)
class SchemaCatalog:
    source_id: str
    syntax_dialect: str             # proto2 | proto3
    messages: dict[str, MessageDescriptor]
    enums: dict[str, EnumDescriptor]

    def find_message(self, name: str) -> MessageDescriptor | None:
        found = self.messages.get(name)
        if found is not None:
            return found
        for qname, desc in self.messages.items():
            if qname.rsplit(".", 1)[-1] == name:
                return desc
        return None


@dataclass(frozen=True)
class LayerKind:
    type_name: str
    parameter_message: str | None
    category: str                   # data | vision | activation | loss | common | other
    common_fields: tuple[str, ...]


@dataclass(frozen=True)
class LayerCatalog:
    layers: tuple[LayerKind, ...]
    schema_source: str

    def find(self, type_name: str) -> LayerKind | None:
        for k in self.layers:
            if k.type_name == type_name:
                return k
        return None

    def type_names(self) -> list[str]:
        return [k.type_name for k in self.layers]


# ---------------------------------------------------------------------------
# Tokenizer

_TOKEN_RE = re.compile(
    r"""
      (?P<ws>\s+)
    | (?P<comment>//[^\n]*|/\*.*?\*/)
    | (?P<string>"(?:\\.|[^"\\])*"|'(?:\\.|[^'\\])*')
    | (?P<number>-?(?:\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?))
    | (?P<ident>[A-Za-z_][A-Za-z0-9_.]*|\.[A-Za-z_][A-Za-z0-9_.]*)
    | (?P<punct>[{}\[\]=;,<>()])
    """,
    re.VERBOSE | re.DOTALL,
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    line: int
    column: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    line = 1
    line_start = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            col = pos - line_start + 1
            raise SchemaSyntaxError(line, col, "a schema token", text[pos])
        kind = m.lastgroup or ""
        value = m.group()
        if kind not in ("ws", "comment"):
            tokens.append(_Token(kind, value, line, pos - line_start + 1))
        newlines = value.count("\n")
        if newlines:
            line += newlines
            line_start = pos + value.rfind("\n") + 1
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.package = ""
        self.syntax = "proto2"
        self.messages: dict[str, MessageDescriptor] = {}
        self.enums: dict[str, EnumDescriptor] = {}
        # (owner message, field name, written type name, scope prefix)
        self.pending_refs: list[tuple[str, str, str, str]] = []

    # -- token helpers ------------------------------------------------------

    def _peek(self) -> _Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _next(self, expected: str) -> _Token:
        tok = self._peek()
        if tok is None:
            last = self.tokens[-1] if self.tokens else _Token("", "", 1, 1)
            raise SchemaSyntaxError(last.line, last.column, expected, "end of input")
        self.pos += 1
        return tok

    def _expect(self, text: str) -> _Token:
        tok = self._next(repr(text))
        if tok.text != text:
            raise SchemaSyntaxError(tok.line, tok.column, repr(text), tok.text)
        return tok

    def _expect_ident(self, what: str = "identifier") -> _Token:
        tok = self._next(what)
        if tok.kind != "ident":
            raise SchemaSyntaxError(tok.line, tok.column, what, tok.text)
        return tok

    def _skip_statement(self) -> None:
        """Consume tokens through the terminating ';' (brace-aware)."""
        depth = 0
        while True:
            tok = self._next("';'")
            if tok.text == "{":
                depth += 1
            elif tok.text == "}":
                depth -= 1
            elif tok.text == ";" and depth == 0:
                return

    # -- grammar ------------------------------------------------------------

    def parse_file(self) -> None:
        while (tok := self._peek()) is not None:
            if tok.text == "syntax":
                self._next("")
                self._expect("=")
                value = self._next("syntax string")
                self.syntax = value.text.strip("\"'")
                self._expect(";")
            elif tok.text == "package":
                self._next("")
                name = self._expect_ident("package name")
                self.package = name.text
                self._expect(";")
            elif tok.text == "option":
                self._next("")
                self._skip_statement()
            elif tok.text == "message":
                self._next("")
                self._parse_message(self.package)
            elif tok.text == "enum":
                self._next("")
                self._parse_enum(self.package)
            elif tok.text in ("import", "extend"):
                raise UnsupportedFeature(tok.text, tok.line)
            elif tok.text == ";":
                self._next("")
            else:
                raise SchemaSyntaxError(
                    tok.line, tok.column, "a top-level declaration", tok.text)

    def _qualify(self, prefix: str, name: str) -> str:
        return f"{prefix}.{name}" if prefix else name

    def _parse_message(self, prefix: str) -> None:
        name_tok = self._expect_ident("message name")
        qualified = self._qualify(prefix, name_tok.text)
        if qualified in self.messages or qualified in self.enums:
            raise DuplicateName(qualified, "schema")
        self._expect("{")
        fields: list[FieldDescriptor] = []
        seen_names: set[str] = set()
        seen_tags: set[int] = set()
        while True:
            tok = self._peek()
            if tok is None:
                raise SchemaSyntaxError(0, 0, "'}'", "end of input")
            if tok.text == "}":
                self._next("")
                break
            if tok.text == "message":
                self._next("")
                self._parse_message(qualified)
            elif tok.text == "enum":
                self._next("")
                self._parse_enum(qualified)
            elif tok.text in ("option", "extensions", "reserved"):
                self._next("")
                self._skip_statement()
            elif tok.text in ("extend", "group", "oneof"):
                raise UnsupportedFeature(tok.text, tok.line)
            elif tok.text == ";":
                self._next("")
            elif tok.text in ("optional", "required", "repeated"):
                f = self._parse_field(qualified)
                if f.name in seen_names:
                    raise DuplicateName(f.name, f"message {qualified}")
                if f.tag in seen_tags:
                    raise DuplicateName(f"tag {f.tag}", f"message {qualified}")
                seen_names.add(f.name)
                seen_tags.add(f.tag)
                fields.append(f)
            else:
                raise SchemaSyntaxError(
                    tok.line, tok.column, "a field label or nested declaration", tok.text)
        self.messages[qualified] = MessageDescriptor(qualified, tuple(fields))

    def _parse_field(self, owner: str) -> FieldDescriptor:
        label = self._next("field label").text
        type_tok = self._next("field type")
        if type_tok.text == "group":
            raise UnsupportedFeature("group", type_tok.line)
        if type_tok.kind != "ident":
            raise SchemaSyntaxError(type_tok.line, type_tok.column,
                                    "field type", type_tok.text)
        name_tok = self._expect_ident("field name")
        self._expect("=")
        tag_tok = self._next("field tag")
        if tag_tok.kind != "number" or not tag_tok.text.isdigit() or int(tag_tok.text) <= 0:
            raise SchemaSyntaxError(tag_tok.line, tag_tok.column,
                                    "a positive integer tag", tag_tok.text)
        default_value: str | None = None
        deprecated = False
        tok = self._peek()
        if tok is not None and tok.text == "[":
            self._next("")
            while True:
                opt = self._expect_ident("field option name")
                self._expect("=")
                val = self._next("field option value")
                if opt.text == "default":
                    default_value = val.text
                elif opt.text == "deprecated":
                    deprecated = val.text == "true"
                # other options (packed, ...) are consumed and ignored
                tok = self._next("',' or ']'")
                if tok.text == "]":
                    break
                if tok.text != ",":
                    raise SchemaSyntaxError(tok.line, tok.column, "',' or ']'", tok.text)
        self._expect(";")

        type_name = type_tok.text
        if type_name in SCALAR_TYPES:
            kind = "scalar"
        else:
            kind = "ref"  # message or enum; resolved after the full parse
            self.pending_refs.append((owner, name_tok.text, type_name, owner))
        if default_value is not None:
            if label == "repeated":
                raise SchemaSyntaxError(
                    tag_tok.line, tag_tok.column,
                    "no default on repeated field", default_value)
            if kind == "scalar":
                _check_scalar_default(type_name, default_value, tag_tok)
        return FieldDescriptor(name_tok.text, int(tag_tok.text), label,
                               kind, type_name, default_value, deprecated)

    def _parse_enum(self, prefix: str) -> None:
        name_tok = self._expect_ident("enum name")
        qualified = self._qualify(prefix, name_tok.text)
        if qualified in self.enums or qualified in self.messages:
            raise DuplicateName(qualified, "schema")
        self._expect("{")
        values: list[tuple[str, int]] = []
        seen: set[str] = set()
        while True:
            tok = self._next("enum value or '}'")
            if tok.text == "}":
                break
            if tok.text == "option":
                self._skip_statement()
                continue
            if tok.kind != "ident":
                raise SchemaSyntaxError(tok.line, tok.column, "enum value name", tok.text)
            if tok.text in seen:
                raise DuplicateName(tok.text, f"enum {qualified}")
            seen.add(tok.text)
            self._expect("=")
            num = self._next("enum value number")
            if num.kind != "number":
                raise SchemaSyntaxError(num.line, num.column, "an integer", num.text)
            self._expect(";")
            values.append((tok.text, int(num.text)))
        if not values:
            raise SchemaSyntaxError(name_tok.line, name_tok.column,
                                    "at least one enum value", "}")
        self.enums[qualified] = EnumDescriptor(qualified, tuple(values))

    # -- reference resolution ------------------------------------------------

    def resolve(self) -> dict[tuple[str, str], tuple[str, str]]:
        """Resolve every pending type reference, proto2 scoping rules.

        Returns {(message, field): (kind, qualified name)}; raises
        UnresolvedTypeReference listing all failures after trying everything.
        """
        resolved: dict[tuple[str, str], tuple[str, str]] = {}
        failures: list[tuple[str, str, str]] = []
        for owner, fname, tname, scope in self.pending_refs:
            target = self._lookup(tname, scope)
            if target is None:
                failures.append((owner, fname, tname))
            else:
                resolved[(owner, fname)] = target
        if failures:
            raise UnresolvedTypeReference(failures)
        return resolved

    def _lookup(self, tname: str, scope: str) -> tuple[str, str] | None:
        if tname.startswith("."):
            candidates = [tname[1:]]
        else:
            candidates = []
            parts = scope.split(".") if scope else []
            for i in range(len(parts), -1, -1):
                prefix = ".".join(parts[:i])
                candidates.append(f"{prefix}.{tname}" if prefix else tname)
        for cand in candidates:
            if cand in self.messages:
                return ("message", cand)
            if cand in self.enums:
                return ("enum", cand)
        return None


def _check_scalar_default(subtype: str, literal: str, tok: _Token) -> None:
    ok = True
    if subtype == "bool":
        ok = literal in ("true", "false")
    elif subtype in INT_TYPES:
        try:
            value = int(literal)
        except ValueError:
            ok = False
        else:
            ok = value >= 0 or subtype not in UNSIGNED_TYPES
    elif subtype in ("float", "double"):
        try:
            float(literal)
        except ValueError:
            ok = literal in ("inf", "-inf", "nan")
    elif subtype in ("string", "bytes"):
        ok = literal[:1] in "\"'"
    if not ok:
        raise SchemaSyntaxError(tok.line, tok.column,
                                f"a {subtype} default literal", literal)


def parse_proto_schema(text: str) -> SchemaCatalog:
    """Parse a self-contained proto2/proto3 schema file into a catalog."""
    parser = _Parser(text)
    parser.parse_file()
    resolved = parser.resolve()

    messages: dict[str, MessageDescriptor] = {}
    for qname, desc in parser.messages.items():
        fields = []
        for f in desc.fields:
            if f.kind == "ref":
                kind, target = resolved[(qname, f.name)]
                if f.default_value is not None:
                    if kind != "enum":
                        raise SchemaSyntaxError(
                            0, 0, "no default on message-typed field", f.default_value)
                    enum = parser.enums[target]
                    if f.default_value not in enum.value_names():
                        raise SchemaSyntaxError(
                            0, 0, f"a value of enum {target}", f.default_value)
                f = FieldDescriptor(f.name, f.tag, f.label, kind, target,
                                    f.default_value, f.deprecated)
            fields.append(f)
        messages[qname] = MessageDescriptor(qname, tuple(fields))

    source_id = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return SchemaCatalog(source_id, parser.syntax, messages, dict(parser.enums))


# ---------------------------------------------------------------------------
# Layer catalog derivation

# Irregular parameter-message -> layer-type names. Everything else strips the
# "Parameter" suffix from the unqualified message name.
TYPE_NAME_OVERRIDES = {
    "InnerProductParameter": "InnerProduct",
    "ReLUParameter": "ReLU",
    "PReLUParameter": "PReLU",
    "ELUParameter": "ELU",
    "LRNParameter": "LRN",
    "TanHParameter": "TanH",
    "MVNParameter": "MVN",
    "SPPParameter": "SPP",
    "HDF5DataParameter": "HDF5Data",
    "HDF5OutputParameter": "HDF5Output",
}

# Layer types with no dedicated parameter field in LayerParameter, or types
# that reuse another type's parameter message.
OVERRIDE_ONLY_LAYERS: list[tuple[str, str | None]] = [
    ("Split", None),
    ("Silence", None),
    ("Flatten", None),
    ("Deconvolution", "ConvolutionParameter"),
    ("SoftmaxWithLoss", "SoftmaxParameter"),
    ("EuclideanLoss", None),
    ("SigmoidCrossEntropyLoss", None),
    ("AbsVal", None),
    ("BNLL", None),
    ("LSTM", "RecurrentParameter"),
    ("RNN", "RecurrentParameter"),
]

CATEGORY_TABLE = {
    "data": {"Data", "HDF5Data", "HDF5Output", "ImageData", "MemoryData",
             "WindowData", "DummyData", "Input"},
    "vision": {"Convolution", "Deconvolution", "Pooling", "LRN", "Crop", "SPP"},
    "activation": {"ReLU", "PReLU", "ELU", "Sigmoid", "TanH", "AbsVal", "BNLL",
                   "Power", "Exp", "Log", "Threshold", "Dropout"},
    "loss": {"SoftmaxWithLoss", "EuclideanLoss", "HingeLoss", "ContrastiveLoss",
             "InfogainLoss", "SigmoidCrossEntropyLoss", "Accuracy"},
    "common": {"InnerProduct", "Split", "Silence", "Flatten", "Reshape",
               "Concat", "Slice", "Eltwise", "BatchNorm", "Scale", "Bias",
               "ArgMax", "Softmax", "MVN", "Embed", "Tile", "Reduction",
               "Parameter", "Recurrent", "LSTM", "RNN"},
}

# Parameter messages shared by every layer rather than defining a layer type.
SHARED_PARAMETER_MESSAGES = {"TransformationParameter", "LossParameter"}


def classify_layer(type_name: str) -> str:
    for category, names in CATEGORY_TABLE.items():
        if type_name in names:
            return category
    return "other"


def _unqualified(name: str) -> str:
    return name.rsplit(".", 1)[-1]


def extract_layer_catalog(schema: SchemaCatalog) -> LayerCatalog:
    """Derive the layer palette from the schema's LayerParameter message."""
    layer_param = None
    for qname, desc in schema.messages.items():
        if _unqualified(qname) == "LayerParameter":
            layer_param = desc
            break
    if layer_param is None:
        raise MissingLayerParameterMessage("schema defines no LayerParameter message")

    common_fields: list[str] = []
    kinds: list[LayerKind] = []
    param_fields: list[str] = []
    for f in layer_param.fields:
        is_param_ref = (f.kind == "message"
                        and _unqualified(f.type_name).endswith("Parameter")
                        and _unqualified(f.type_name) != "LayerParameter")
        if is_param_ref and _unqualified(f.type_name) not in SHARED_PARAMETER_MESSAGES:
            param_fields.append(f.name)
        else:
            common_fields.append(f.name)

    common = tuple(common_fields)
    for fname in param_fields:
        f = layer_param.field(fname)
        assert f is not None
        unq = _unqualified(f.type_name)
        type_name = TYPE_NAME_OVERRIDES.get(unq, unq.removesuffix("Parameter"))
        kinds.append(LayerKind(type_name, f.type_name, classify_layer(type_name), common))

    seen = {k.type_name for k in kinds}
    package = ""
    if layer_param.name.count("."):
        package = layer_param.name.rsplit(".", 1)[0]
    for type_name, param_msg in OVERRIDE_ONLY_LAYERS:
        if type_name in seen:
            continue
        qualified = None
        if param_msg is not None:
            candidate = f"{package}.{param_msg}" if package else param_msg
            if candidate in schema.messages:
                qualified = candidate
            elif param_msg in schema.messages:
                qualified = param_msg
            else:
                continue  # reuses a message this schema does not define
        kinds.append(LayerKind(type_name, qualified, classify_layer(type_name), common))
        seen.add(type_name)

    return LayerCatalog(tuple(kinds), schema.source_id)


def enumerate_field_choices(schema: SchemaCatalog, message: str, field_name: str) -> list[str]:
    """Finite value choices for a field: enum names, true/false, or none."""
    desc = schema.messages.get(message)
    if desc is None:
        raise UnknownMessage(message)
    f = desc.field(field_name)
    if f is None:
        raise UnknownField(f"{message}.{field_name}")
    if f.kind == "enum":
        return list(schema.enums[f.type_name].value_names())
    if f.kind == "scalar" and f.type_name == "bool":
        return ["true", "false"]
    return []
