"""Event-knowledge-graph substrate.

Triples over the SEM / REKGS / REKGR / DBR namespaces, a line-oriented
text serialization with parser, a conjunctive basic-graph-pattern query
engine, and offline entity canonicalization against a bundled lookup
table.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence, Union


class Namespace(str, Enum):
    SEM = "sem"
    REKGS = "rekgs"
    REKGR = "rekgr"
    DBR = "dbr"


#: Prefix -> full IRI base, emitted as @prefix header lines.
NAMESPACE_BASES = {
    Namespace.SEM: "http://semanticweb.cs.vu.nl/2009/11/sem/",
    Namespace.REKGS: "https://w3id.org/rekg/schema#",
    Namespace.REKGR: "https://w3id.org/rekg/resource#",
    Namespace.DBR: "http://dbpedia.org/resource/",
}

#: The fixed relation vocabulary (see README for the documented meaning).
SEM_PREDICATES = frozenset(
    {"hasActor", "hasPlace", "hasBeginTimeStamp", "hasEndTimeStamp"}
)
REKGS_PREDICATES = frozenset(
    {
        "hasObject",
        "hasStatus",
        "nextEvent",
        "hasConcurrentEvent",
        "isDescribedAs",
        "instanceOf",
        "sameAs",
        "category",
        "hasBehaviorTree",
        "hasConstraintKind",
        "hasFeatureValue",
    }
)

LITERAL_DATATYPES = ("string", "integer", "double", "timestamp")


class EkgError(Exception):
    pass


class SchemaViolation(EkgError):
    pass


class ParseError(EkgError):
    def __init__(self, message: str, line: int | None = None):
        loc = f"line {line}: " if line is not None else ""
        super().__init__(f"{loc}{message}")
        self.line = line


class NoUsableExperience(EkgError):
    """No retrieved graph carries both a behavior tree and a task object."""


@dataclass(frozen=True, slots=True)
class Iri:
    ns: Namespace
    name: str

    def __post_init__(self):
        object.__setattr__(self, "ns", Namespace(self.ns))
        if not self.name:
            raise ValueError("IRI local name must be non-empty")

    def __str__(self) -> str:
        return f"{self.ns.value}:{self.name}"


@dataclass(frozen=True, slots=True)
class Literal:
    value: Union[str, int, float]
    datatype: str = "string"

    def __post_init__(self):
        if self.datatype not in LITERAL_DATATYPES:
            raise ValueError(f"unknown literal datatype {self.datatype!r}")
        if self.datatype in ("integer", "timestamp") and not isinstance(
            self.value, int
        ):
            raise ValueError(f"{self.datatype} literal needs an int value")
        if self.datatype == "double" and not isinstance(self.value, float):
            raise ValueError("double literal needs a float value")
        if self.datatype == "string" and not isinstance(self.value, str):
            raise ValueError("string literal needs a str value")

    def __str__(self) -> str:
        return f'"{self.value}"^^{self.datatype}'


Term = Union[Iri, Literal]


def term_key(t: Term) -> tuple:
    """Total order over terms, used for deterministic output."""
    if isinstance(t, Iri):
        return (0, t.ns.value, t.name)
    return (1, t.datatype, str(t.value))


@dataclass(frozen=True, slots=True)
class Triple:
    subject: Iri
    predicate: Iri
    object: Term

    def __post_init__(self):
        if not isinstance(self.subject, Iri):
            raise SchemaViolation("triple subject must be an IRI")
        if not isinstance(self.predicate, Iri) or self.predicate.ns not in (
            Namespace.SEM,
            Namespace.REKGS,
        ):
            raise SchemaViolation(
                f"predicate must be a SEM or REKGS IRI, got {self.predicate}"
            )
        if not isinstance(self.object, (Iri, Literal)):
            raise SchemaViolation("triple object must be an IRI or literal")

    def key(self) -> tuple:
        return (term_key(self.subject), term_key(self.predicate), term_key(self.object))


class Graph:
    """A set of triples with an identifier.  Insertion is idempotent."""

    def __init__(self, id: str = "", triples: Iterable[Triple] = ()):
        self.id = id
        self.triples: set[Triple] = set(triples)

    def __len__(self) -> int:
        return len(self.triples)

    def __contains__(self, t: Triple) -> bool:
        return t in self.triples

    def __eq__(self, other) -> bool:
        return isinstance(other, Graph) and self.triples == other.triples

    def sorted_triples(self) -> list[Triple]:
        return sorted(self.triples, key=Triple.key)


def insert(graph: Graph, triple: Triple) -> Graph:
    """Add a triple (idempotent); returns the same graph for chaining."""
    if not isinstance(triple, Triple):
        raise SchemaViolation(f"not a triple: {triple!r}")
    graph.triples.add(triple)
    return graph


# -- canonicalization --------------------------------------------------------

#: Offline stand-in for DBpedia lookups: lower-cased entity name ->
#: (DBpedia resource name, category).  Covers the objects the experiment
#: scenes use; anything else stays unlinked.
CANONICAL_TABLE: dict[str, tuple[str, str]] = {
    "apple": ("Apple", "fruit"),
    "red_pepper": ("Bell_pepper", "vegetable"),
    "lemon": ("Lemon", "fruit"),
    "carrot": ("Carrot", "vegetable"),
    "banana": ("Banana", "fruit"),
    "tennis_ball": ("Tennis_ball", "utility"),
    "umbrella": ("Umbrella", "utility"),
    "marker_pen": ("Marker_pen", "stationery"),
    "pen": ("Pen", "stationery"),
    "scissors": ("Scissors", "stationery"),
    "cereal_box": ("Breakfast_cereal", "food"),
}


def canonicalize(entity: Term) -> set[Triple]:
    """Link a REKGR entity to its canonical identifier plus category fact.

    Unknown entities yield the empty set (they stay unlinked).
    """
    if not isinstance(entity, Iri) or entity.ns is not Namespace.REKGR:
        raise ValueError(f"canonicalize expects a REKGR instance, got {entity}")
    hit = CANONICAL_TABLE.get(entity.name.lower())
    if hit is None:
        return set()
    dbr_name, category = hit
    dbr = Iri(Namespace.DBR, dbr_name)
    return {
        Triple(entity, Iri(Namespace.REKGS, "sameAs"), dbr),
        Triple(dbr, Iri(Namespace.REKGS, "category"), Literal(category)),
    }


# -- serialization -----------------------------------------------------------


def _escape(s: str) -> str:
    return (
        s.replace("\\", "\\\\")
        .replace('"', '\\"')
        .replace("\n", "\\n")
        .replace("\r", "\\r")
    )


def _unescape(s: str, line: int) -> str:
    out = []
    i = 0
    while i < len(s):
        ch = s[i]
        if ch == "\\":
            if i + 1 >= len(s):
                raise ParseError("dangling escape in literal", line)
            nxt = s[i + 1]
            mapped = {"\\": "\\", '"': '"', "n": "\n", "r": "\r"}.get(nxt)
            if mapped is None:
                raise ParseError(f"bad escape \\{nxt}", line)
            out.append(mapped)
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def _term_text(t: Term) -> str:
    if isinstance(t, Iri):
        return f"<{t.ns.value}:{t.name}>"
    if t.datatype == "double":
        return f'"{t.value!r}"^^double'
    return f'"{_escape(str(t.value))}"^^{t.datatype}'


def serialize(graph: Graph) -> str:
    """Line-oriented text form: @prefix header then one sorted triple per line."""
    lines = [f"# graph {graph.id}"]
    for ns in Namespace:
        lines.append(f"@prefix {ns.value}: <{NAMESPACE_BASES[ns]}> .")
    for t in graph.sorted_triples():
        lines.append(
            f"{_term_text(t.subject)} {_term_text(t.predicate)} "
            f"{_term_text(t.object)} ."
        )
    return "\n".join(lines) + "\n"


def _parse_iri(token: str, line: int) -> Iri:
    if not (token.startswith("<") and token.endswith(">")):
        raise ParseError(f"expected <ns:name>, got {token!r}", line)
    body = token[1:-1]
    ns, sep, name = body.partition(":")
    if not sep or not name:
        raise ParseError(f"malformed IRI {token!r}", line)
    try:
        return Iri(Namespace(ns), name)
    except ValueError as exc:
        raise ParseError(str(exc), line) from None


def _parse_literal(token: str, line: int) -> Literal:
    body, sep, datatype = token.rpartition("^^")
    if not sep:
        body, datatype = token, "string"
    if not (body.startswith('"') and body.endswith('"') and len(body) >= 2):
        raise ParseError(f"malformed literal {token!r}", line)
    raw = _unescape(body[1:-1], line)
    if datatype in ("integer", "timestamp"):
        try:
            return Literal(int(raw), datatype)
        except ValueError:
            raise ParseError(f"bad {datatype} literal {raw!r}", line) from None
    if datatype == "double":
        try:
            return Literal(float(raw), "double")
        except ValueError:
            raise ParseError(f"bad double literal {raw!r}", line) from None
    if datatype == "string":
        return Literal(raw, "string")
    raise ParseError(f"unknown literal datatype {datatype!r}", line)


def _parse_term(token: str, line: int) -> Term:
    if token.startswith("<"):
        return _parse_iri(token, line)
    if token.startswith('"'):
        return _parse_literal(token, line)
    raise ParseError(f"expected a term, got {token!r}", line)


def _split_triple_line(text: str, line: int) -> list[str]:
    # whitespace-separated fields, but quoted literals may contain spaces
    fields = []
    i, n = 0, len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        if text[i] == '"':
            j = i + 1
            while j < n:
                if text[j] == "\\":
                    j += 2
                    continue
                if text[j] == '"':
                    break
                j += 1
            if j >= n:
                raise ParseError("unterminated literal", line)
            # include a ^^datatype tail if present
            j += 1
            while j < n and not text[j].isspace():
                j += 1
            fields.append(text[i:j])
            i = j
        else:
            j = i
            while j < n and not text[j].isspace():
                j += 1
            fields.append(text[i:j])
            i = j
    return fields


def parse(text: str) -> Graph:
    """Inverse of serialize; raises ParseError with the offending line."""
    graph = Graph()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("# graph "):
            graph.id = line[len("# graph ") :]
            continue
        if line.startswith("#"):
            continue
        if line.startswith("@prefix"):
            fields = line.split()
            if len(fields) != 4 or fields[3] != ".":
                raise ParseError(f"malformed @prefix line {line!r}", lineno)
            prefix = fields[1].rstrip(":")
            base = fields[2]
            try:
                ns = Namespace(prefix)
            except ValueError:
                raise ParseError(f"unknown prefix {prefix!r}", lineno) from None
            if base != f"<{NAMESPACE_BASES[ns]}>":
                raise ParseError(f"prefix {prefix!r} bound to {base}", lineno)
            continue
        fields = _split_triple_line(line, lineno)
        if len(fields) != 4 or fields[3] != ".":
            raise ParseError(
                f"expected '<s> <p> <o> .', got {len(fields)} fields", lineno
            )
        subject = _parse_iri(fields[0], lineno)
        predicate = _parse_iri(fields[1], lineno)
        obj = _parse_term(fields[2], lineno)
        try:
            graph.triples.add(Triple(subject, predicate, obj))
        except SchemaViolation as exc:
            raise ParseError(str(exc), lineno) from None
    return graph


# -- pattern queries ---------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Var:
    name: str

    def __str__(self) -> str:
        return f"?{self.name}"


PatternTerm = Union[Iri, Literal, Var]


@dataclass(frozen=True, slots=True)
class TriplePattern:
    subject: PatternTerm
    predicate: PatternTerm
    object: PatternTerm

    def variables(self) -> set[str]:
        return {
            t.name for t in (self.subject, self.predicate, self.object)
            if isinstance(t, Var)
        }


@dataclass(frozen=True)
class Pattern:
    patterns: tuple[TriplePattern, ...]
    projection: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "patterns", tuple(self.patterns))
        object.__setattr__(self, "projection", tuple(self.projection))
        if not self.patterns:
            raise ValueError("pattern needs at least one triple pattern")
        seen: set[str] = set()
        for tp in self.patterns:
            seen |= tp.variables()
        for v in self.projection:
            if v not in seen:
                raise ValueError(f"projected variable ?{v} occurs in no pattern")


def _match(tp: TriplePattern, t: Triple, binding: dict) -> dict | None:
    out = dict(binding)
    for pt, value in ((tp.subject, t.subject), (tp.predicate, t.predicate), (tp.object, t.object)):
        if isinstance(pt, Var):
            bound = out.get(pt.name)
            if bound is None:
                out[pt.name] = value
            elif bound != value:
                return None
        elif pt != value:
            return None
    return out


def query(
    graphs: Union[Graph, Sequence[Graph]], pattern: Pattern
) -> list[dict[str, Term]]:
    """All distinct projected bindings over the union of the input graphs.

    Results are ordered lexicographically over the projected terms so
    repeated queries print identically.
    """
    if isinstance(graphs, Graph):
        graphs = [graphs]
    union: set[Triple] = set()
    for g in graphs:
        union |= g.triples
    bindings: list[dict] = [{}]
    for tp in pattern.patterns:
        nxt: list[dict] = []
        for binding in bindings:
            for t in union:
                extended = _match(tp, t, binding)
                if extended is not None:
                    nxt.append(extended)
        bindings = nxt
        if not bindings:
            break
    projection = pattern.projection or tuple(
        sorted({v for tp in pattern.patterns for v in tp.variables()})
    )
    out = {}
    for b in bindings:
        projected = {v: b[v] for v in projection}
        key = tuple(term_key(projected[v]) for v in projection)
        out[key] = projected
    return [out[k] for k in sorted(out)]


# -- pattern text parsing (the CLI query language) ---------------------------


def parse_pattern(text: str) -> Pattern:
    """Parse ``[select ?a ?b where] { s p o . s p o }`` into a Pattern.

    Terms are prefixed names (``rekgs:hasObject``), variables (``?x``) or
    quoted literals with an optional ``^^datatype`` tail.
    """
    tokens = _tokenize_pattern(text)
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    projection: list[str] = []
    if peek() and peek().lower() == "select":
        pos += 1
        while peek() and peek().startswith("?"):
            projection.append(tokens[pos][1:])
            pos += 1
        if not projection:
            raise ParseError("select needs at least one ?variable")
        if not peek() or peek().lower() != "where":
            raise ParseError("expected 'where' after select list")
        pos += 1
    if peek() != "{":
        raise ParseError("expected '{' to open the pattern block")
    pos += 1
    patterns: list[TriplePattern] = []
    terms: list[PatternTerm] = []
    while True:
        tok = peek()
        if tok is None:
            raise ParseError("unterminated pattern block")
        if tok == "}":
            pos += 1
            break
        if tok == ".":
            pos += 1
            continue
        terms.append(_pattern_term(tok))
        pos += 1
        if len(terms) == 3:
            s, p, o = terms
            if isinstance(s, Literal) or isinstance(p, Literal):
                raise ParseError("subject/predicate cannot be literals")
            patterns.append(TriplePattern(s, p, o))
            terms = []
    if terms:
        raise ParseError(f"trailing pattern has {len(terms)} of 3 terms")
    if pos != len(tokens):
        raise ParseError(f"unexpected trailing token {tokens[pos]!r}")
    if not patterns:
        raise ParseError("pattern block is empty")
    if not projection:
        seen: list[str] = []
        for tp in patterns:
            for t in (tp.subject, tp.predicate, tp.object):
                if isinstance(t, Var) and t.name not in seen:
                    seen.append(t.name)
        projection = seen
    return Pattern(tuple(patterns), tuple(projection))


def _tokenize_pattern(text: str) -> list[str]:
    tokens = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "{}.":
            tokens.append(ch)
            i += 1
        elif ch == '"':
            j = i + 1
            while j < n and text[j] != '"':
                j += 2 if text[j] == "\\" else 1
            if j >= n:
                raise ParseError("unterminated literal in pattern")
            j += 1
            while j < n and not text[j].isspace() and text[j] not in "{}":
                j += 1
            tokens.append(text[i:j])
            i = j
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "{}":
                j += 1
            tok = text[i:j]
            if tok.endswith(".") and tok != ".":
                tokens.append(tok[:-1])
                tokens.append(".")
            else:
                tokens.append(tok)
            i = j
    return tokens


def _pattern_term(token: str) -> PatternTerm:
    if token.startswith("?"):
        if len(token) < 2:
            raise ParseError("empty variable name")
        return Var(token[1:])
    if token.startswith('"'):
        return _parse_literal(token, line=0)
    ns, sep, name = token.partition(":")
    if not sep or not name:
        raise ParseError(f"expected prefix:name, ?var or literal, got {token!r}")
    try:
        return Iri(Namespace(ns), name)
    except ValueError:
        raise ParseError(f"unknown prefix {ns!r}") from None


# -- task retrieval from graphs ----------------------------------------------


def query_task(graphs: Sequence[Graph]):
    """Extract (behavior tree, prompt) from a similarity-ordered graph list.

    Takes the first graph that carries both a deserializable tree (a
    rekgs:hasBehaviorTree string literal) and a task object bound via
    rekgs:hasObject; the object's lower-cased name becomes the prompt.
    """
    from . import btree  # deferred: btree serializes trees into graphs

    if not graphs:
        raise NoUsableExperience("empty graph list")
    has_tree = Iri(Namespace.REKGS, "hasBehaviorTree")
    has_object = Iri(Namespace.REKGS, "hasObject")
    for g in graphs:
        tree = None
        for t in sorted(
            (t for t in g.triples if t.predicate == has_tree), key=Triple.key
        ):
            if isinstance(t.object, Literal) and t.object.datatype == "string":
                try:
                    tree = btree.tree_parse(str(t.object.value))
                    break
                except btree.TreeParseError:
                    continue
        if tree is None:
            continue
        objects = sorted(
            (
                t.object
                for t in g.triples
                if t.predicate == has_object and isinstance(t.object, Iri)
            ),
            key=term_key,
        )
        if not objects:
            continue
        return tree, objects[0].name.lower()
    raise NoUsableExperience("no graph yields both a behavior tree and an object")
