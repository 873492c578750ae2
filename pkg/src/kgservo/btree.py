"""Behavior trees: tick semantics, tick-to-triple logging, serialization.

Geometric constraints ride on blocking action nodes; control nodes
(Sequence, Fallback, Parallel) compose them.  Every tick is recorded in a
trace that converts losslessly into event-knowledge-graph triples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator, Mapping

from . import ekg
from .geometry import ConstraintKind, GeometricConstraint, HomogeneousPoint

_ID_CHARS = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_.-")


class BTreeError(Exception):
    pass


class MissingLeafResult(BTreeError):
    def __init__(self, node_id: str):
        super().__init__(f"no leaf result supplied for action node {node_id!r}")
        self.node_id = node_id


class InconsistentTrace(BTreeError):
    pass


class TreeParseError(BTreeError):
    def __init__(self, message: str, pos: int | None = None):
        loc = f" (at offset {pos})" if pos is not None else ""
        super().__init__(f"{message}{loc}")
        self.pos = pos


class TickStatus(str, Enum):
    SUCCESS = "Success"
    FAILURE = "Failure"
    RUNNING = "Running"


class NodeKind(str, Enum):
    SEQUENCE = "sequence"
    FALLBACK = "fallback"
    PARALLEL = "parallel"
    ACTION = "action"


@dataclass(frozen=True)
class ActionSpec:
    """Payload of an action leaf: an optional constraint plus goal features."""

    constraint: GeometricConstraint | None = None
    goals: Mapping[str, HomogeneousPoint] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "goals", dict(self.goals))

    def __eq__(self, other):
        return (
            isinstance(other, ActionSpec)
            and self.constraint == other.constraint
            and dict(self.goals) == dict(other.goals)
        )


@dataclass(frozen=True)
class BTreeNode:
    kind: NodeKind
    id: str
    children: tuple["BTreeNode", ...] = ()
    threshold: int | None = None
    action: ActionSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", NodeKind(self.kind))
        object.__setattr__(self, "children", tuple(self.children))
        if not self.id or not set(self.id) <= _ID_CHARS:
            raise ValueError(f"bad node id {self.id!r}")
        if self.kind is NodeKind.ACTION:
            if self.children:
                raise ValueError("action nodes are leaves")
        else:
            if not self.children:
                raise ValueError(f"{self.kind.value} node needs children")
            if self.action is not None:
                raise ValueError("control nodes carry no action payload")
        if self.kind is NodeKind.PARALLEL:
            m = self.threshold if self.threshold is not None else len(self.children)
            if not 1 <= m <= len(self.children):
                raise ValueError(
                    f"parallel threshold {m} outside 1..{len(self.children)}"
                )
            object.__setattr__(self, "threshold", m)
        elif self.threshold is not None:
            raise ValueError("threshold only applies to parallel nodes")


def walk(tree: BTreeNode) -> Iterator[BTreeNode]:
    yield tree
    for child in tree.children:
        yield from walk(child)


def validate(tree: BTreeNode) -> None:
    """Check tree-wide invariants (per-node ones hold by construction)."""
    seen: set[str] = set()
    for node in walk(tree):
        if node.id in seen:
            raise ValueError(f"duplicate node id {node.id!r}")
        seen.add(node.id)


@dataclass(frozen=True, slots=True)
class TickRecord:
    node_id: str
    status: TickStatus
    index: int
    timestamp: int


TickTrace = list[TickRecord]


def tick(
    tree: BTreeNode,
    leaf_results: Mapping[str, TickStatus],
    clock: Callable[[], int] | None = None,
) -> tuple[TickStatus, TickTrace]:
    """Propagate one tick through the tree.

    Action leaves take their status from ``leaf_results`` (in live runs the
    servo loop's mapped outcome).  The trace records every ticked node in
    completion order; by default timestamps are the logical tick index so
    artifacts stay byte-deterministic.
    """
    validate(tree)
    trace: TickTrace = []

    def record(node: BTreeNode, status: TickStatus) -> TickStatus:
        ts = clock() if clock is not None else len(trace)
        trace.append(TickRecord(node.id, status, len(trace), ts))
        return status

    def visit(node: BTreeNode) -> TickStatus:
        if node.kind is NodeKind.ACTION:
            if node.id not in leaf_results:
                raise MissingLeafResult(node.id)
            return record(node, TickStatus(leaf_results[node.id]))
        if node.kind is NodeKind.SEQUENCE:
            for child in node.children:
                status = visit(child)
                if status is not TickStatus.SUCCESS:
                    return record(node, status)
            return record(node, TickStatus.SUCCESS)
        if node.kind is NodeKind.FALLBACK:
            for child in node.children:
                status = visit(child)
                if status is not TickStatus.FAILURE:
                    return record(node, status)
            return record(node, TickStatus.FAILURE)
        # parallel: every child is ticked
        statuses = [visit(child) for child in node.children]
        n_success = sum(s is TickStatus.SUCCESS for s in statuses)
        n_failure = sum(s is TickStatus.FAILURE for s in statuses)
        m = node.threshold
        if n_success >= m:
            return record(node, TickStatus.SUCCESS)
        if n_success + (len(statuses) - n_success - n_failure) < m:
            return record(node, TickStatus.FAILURE)
        return record(node, TickStatus.RUNNING)

    return visit(tree), trace


# -- frontier (which actions run next) ----------------------------------------


def status_of(
    node: BTreeNode, resolved: Mapping[str, TickStatus]
) -> TickStatus | None:
    """Node status implied by already-resolved leaves; None while pending."""
    if node.kind is NodeKind.ACTION:
        s = resolved.get(node.id)
        return TickStatus(s) if s is not None else None
    if node.kind is NodeKind.SEQUENCE:
        for child in node.children:
            s = status_of(child, resolved)
            if s is None:
                return None
            if s is not TickStatus.SUCCESS:
                return s
        return TickStatus.SUCCESS
    if node.kind is NodeKind.FALLBACK:
        for child in node.children:
            s = status_of(child, resolved)
            if s is None:
                return None
            if s is not TickStatus.FAILURE:
                return s
        return TickStatus.FAILURE
    statuses = [status_of(child, resolved) for child in node.children]
    n_success = sum(s is TickStatus.SUCCESS for s in statuses)
    n_failure = sum(s is TickStatus.FAILURE for s in statuses)
    pending = sum(s is None for s in statuses)
    if n_success >= node.threshold:
        return TickStatus.SUCCESS
    if n_success + pending + sum(s is TickStatus.RUNNING for s in statuses) < node.threshold:
        return TickStatus.FAILURE
    if pending:
        return None
    return TickStatus.RUNNING


def active_actions(
    tree: BTreeNode, resolved: Mapping[str, TickStatus]
) -> list[BTreeNode]:
    """The action leaves a runner should execute next, in tree order."""
    if status_of(tree, resolved) is not None:
        return []
    if tree.kind is NodeKind.ACTION:
        return [tree]
    if tree.kind in (NodeKind.SEQUENCE, NodeKind.FALLBACK):
        stop = (
            TickStatus.SUCCESS
            if tree.kind is NodeKind.SEQUENCE
            else TickStatus.FAILURE
        )
        for child in tree.children:
            s = status_of(child, resolved)
            if s is None:
                return active_actions(child, resolved)
            if s is not stop:
                return []
        return []
    out: list[BTreeNode] = []
    for child in tree.children:
        if status_of(child, resolved) is None:
            out.extend(active_actions(child, resolved))
    return out


# -- trace -> triples ----------------------------------------------------------

_REKGS = ekg.Namespace.REKGS
_REKGR = ekg.Namespace.REKGR


def _node_iri(node_id: str) -> ekg.Iri:
    return ekg.Iri(_REKGR, node_id)


def _goal_literal(action: ActionSpec) -> str:
    parts = []
    for slot in sorted(action.goals):
        p = action.goals[slot]
        parts.append(f"{slot}={p.x!r},{p.y!r},{p.w!r}")
    return ";".join(parts)


def trace_to_triples(tree: BTreeNode, trace: TickTrace) -> set[ekg.Triple]:
    """Convert one tick trace into event triples.

    Sequence/Fallback sections chain their ticked children with nextEvent
    and attach per-child status; Parallel sections fan out with
    hasConcurrentEvent.  Constraint-carrying actions additionally record
    their kind and goal feature values as literals, and every ticked node
    is typed via instanceOf.
    """
    nodes = {n.id: n for n in walk(tree)}
    for rec in trace:
        if rec.node_id not in nodes:
            raise InconsistentTrace(f"trace references unknown node {rec.node_id!r}")
    ticked = {rec.node_id: rec.status for rec in trace}

    next_event = ekg.Iri(_REKGS, "nextEvent")
    has_status = ekg.Iri(_REKGS, "hasStatus")
    has_concurrent = ekg.Iri(_REKGS, "hasConcurrentEvent")
    instance_of = ekg.Iri(_REKGS, "instanceOf")
    kind_pred = ekg.Iri(_REKGS, "hasConstraintKind")
    feature_pred = ekg.Iri(_REKGS, "hasFeatureValue")

    triples: set[ekg.Triple] = set()
    for node in walk(tree):
        if node.id not in ticked:
            continue
        is_constraint = (
            node.kind is NodeKind.ACTION
            and node.action is not None
            and node.action.constraint is not None
        )
        concept = "GeometricConstraint" if is_constraint else "BTreeNodeEvent"
        triples.add(
            ekg.Triple(_node_iri(node.id), instance_of, ekg.Iri(_REKGS, concept))
        )
        if node.kind in (NodeKind.SEQUENCE, NodeKind.FALLBACK):
            kids = [c for c in node.children if c.id in ticked]
            for a, b in zip(kids, kids[1:]):
                triples.add(ekg.Triple(_node_iri(a.id), next_event, _node_iri(b.id)))
            for c in kids:
                triples.add(
                    ekg.Triple(
                        _node_iri(c.id), has_status, ekg.Literal(ticked[c.id].value)
                    )
                )
        elif node.kind is NodeKind.PARALLEL:
            for c in node.children:
                triples.add(
                    ekg.Triple(_node_iri(node.id), has_concurrent, _node_iri(c.id))
                )
                triples.add(
                    ekg.Triple(
                        _node_iri(c.id), has_status, ekg.Literal(ticked[c.id].value)
                    )
                )
        elif is_constraint:
            action = node.action
            triples.add(
                ekg.Triple(
                    _node_iri(node.id),
                    kind_pred,
                    ekg.Literal(action.constraint.kind.value),
                )
            )
            if action.goals:
                triples.add(
                    ekg.Triple(
                        _node_iri(node.id), feature_pred, ekg.Literal(_goal_literal(action))
                    )
                )
    return triples


# -- serialization -------------------------------------------------------------


def tree_serialize(tree: BTreeNode, indent: int = 0) -> str:
    """Nested s-expression text; round-trips through tree_parse."""
    validate(tree)
    return _serialize_node(tree, 0)


def _serialize_node(node: BTreeNode, depth: int) -> str:
    pad = "  " * depth
    attrs = [node.kind.value, f"id={node.id}"]
    if node.kind is NodeKind.PARALLEL:
        attrs.append(f"threshold={node.threshold}")
    if node.kind is NodeKind.ACTION and node.action is not None:
        a = node.action
        if a.constraint is not None:
            attrs.append(f"constraint={a.constraint.kind.value}")
            attrs.append(f"weight={a.constraint.weight!r}")
            attrs.append("slots=" + ",".join(a.constraint.slots))
        for slot in sorted(a.goals):
            p = a.goals[slot]
            attrs.append(f"goal={slot}@{p.x!r},{p.y!r},{p.w!r}")
    head = pad + "(" + " ".join(attrs)
    if not node.children:
        return head + ")"
    body = "\n".join(_serialize_node(c, depth + 1) for c in node.children)
    return head + "\n" + body + ")"


def _tokenize_tree(text: str) -> list[tuple[str, int]]:
    tokens: list[tuple[str, int]] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            tokens.append((ch, i))
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            tokens.append((text[i:j], i))
            i = j
    return tokens


def tree_parse(text: str) -> BTreeNode:
    tokens = _tokenize_tree(text)
    if not tokens:
        raise TreeParseError("empty tree text")
    node, pos = _parse_node(tokens, 0)
    if pos != len(tokens):
        raise TreeParseError("trailing tokens after tree", tokens[pos][1])
    validate(node)
    return node


def _parse_point(spec: str, offset: int) -> HomogeneousPoint:
    try:
        x, y, w = (float(v) for v in spec.split(","))
        return HomogeneousPoint(x, y, w)
    except ValueError:
        raise TreeParseError(f"bad point spec {spec!r}", offset) from None


def _parse_node(tokens, pos: int) -> tuple[BTreeNode, int]:
    tok, offset = tokens[pos]
    if tok != "(":
        raise TreeParseError(f"expected '(', got {tok!r}", offset)
    pos += 1
    if pos >= len(tokens):
        raise TreeParseError("truncated node", offset)
    kind_tok, kind_off = tokens[pos]
    try:
        kind = NodeKind(kind_tok)
    except ValueError:
        raise TreeParseError(f"unknown node kind {kind_tok!r}", kind_off) from None
    pos += 1
    attrs: dict[str, str] = {}
    goals: dict[str, HomogeneousPoint] = {}
    children: list[BTreeNode] = []
    while True:
        if pos >= len(tokens):
            raise TreeParseError("unterminated node", offset)
        tok, toff = tokens[pos]
        if tok == ")":
            pos += 1
            break
        if tok == "(":
            child, pos = _parse_node(tokens, pos)
            children.append(child)
            continue
        key, sep, value = tok.partition("=")
        if not sep:
            raise TreeParseError(f"expected key=value, got {tok!r}", toff)
        if key == "goal":
            slot, sep, point = value.partition("@")
            if not sep:
                raise TreeParseError(f"goal needs slot@x,y,w, got {value!r}", toff)
            goals[slot] = _parse_point(point, toff)
        elif key in attrs:
            raise TreeParseError(f"duplicate attribute {key!r}", toff)
        else:
            attrs[key] = value
        pos += 1
    if "id" not in attrs:
        raise TreeParseError("node lacks an id attribute", offset)
    action = None
    if kind is NodeKind.ACTION:
        constraint = None
        if "constraint" in attrs:
            try:
                ckind = ConstraintKind(attrs["constraint"])
            except ValueError:
                raise TreeParseError(
                    f"unknown constraint kind {attrs['constraint']!r}", offset
                ) from None
            slots = tuple(s for s in attrs.get("slots", "").split(",") if s)
            try:
                constraint = GeometricConstraint(
                    ckind, slots, weight=float(attrs.get("weight", 1.0))
                )
            except ValueError as exc:
                raise TreeParseError(str(exc), offset) from None
        action = ActionSpec(constraint=constraint, goals=goals)
    elif goals:
        raise TreeParseError("goal attributes only apply to action nodes", offset)
    threshold = None
    if "threshold" in attrs:
        if kind is not NodeKind.PARALLEL:
            raise TreeParseError("threshold only applies to parallel nodes", offset)
        try:
            threshold = int(attrs["threshold"])
        except ValueError:
            raise TreeParseError(f"bad threshold {attrs['threshold']!r}", offset) from None
    try:
        node = BTreeNode(
            kind=kind,
            id=attrs["id"],
            children=tuple(children),
            threshold=threshold,
            action=action,
        )
    except ValueError as exc:
        raise TreeParseError(str(exc), offset) from None
    return node, pos
