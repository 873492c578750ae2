import itertools

import pytest

from kgservo import ekg
from kgservo.btree import (
    ActionSpec,
    BTreeNode,
    InconsistentTrace,
    MissingLeafResult,
    NodeKind,
    TickStatus,
    TreeParseError,
    active_actions,
    tick,
    trace_to_triples,
    tree_parse,
    tree_serialize,
    walk,
)
from kgservo.geometry import GeometricConstraint, HomogeneousPoint

S, F, R = TickStatus.SUCCESS, TickStatus.FAILURE, TickStatus.RUNNING


def leaf(node_id):
    return BTreeNode(kind="action", id=node_id, action=ActionSpec())


def seq(node_id, *children):
    return BTreeNode(kind="sequence", id=node_id, children=children)


def fb(node_id, *children):
    return BTreeNode(kind="fallback", id=node_id, children=children)


def par(node_id, m, *children):
    return BTreeNode(kind="parallel", id=node_id, threshold=m, children=children)


# ---------------------------------------------------------------------------
# Reference oracle: independent recursive status definition plus the
# equation-level triple construction.  Shared with the acceptance suite.


def oracle_status(tree, results):
    if tree.kind is NodeKind.ACTION:
        return results[tree.id]
    child = [oracle_status(c, results) for c in _oracle_ticked(tree, results)]
    if tree.kind is NodeKind.SEQUENCE:
        for s in child:
            if s is not S:
                return s
        return S
    if tree.kind is NodeKind.FALLBACK:
        for s in child:
            if s is not F:
                return s
        return F
    ns = child.count(S)
    nf = child.count(F)
    if ns >= tree.threshold:
        return S
    if ns + (len(child) - ns - nf) < tree.threshold:
        return F
    return R


def _oracle_ticked(tree, results):
    """Children a tick reaches, per the short-circuit rules."""
    if tree.kind is NodeKind.PARALLEL:
        return list(tree.children)
    ticked = []
    stop = S if tree.kind is NodeKind.SEQUENCE else F
    for c in tree.children:
        ticked.append(c)
        if oracle_status(c, results) is not stop:
            break
    return ticked


def oracle_triples(tree, results):
    """Triples the chain/fan-out equations prescribe for one tick."""
    rekgs = lambda n: ekg.Iri(ekg.Namespace.REKGS, n)
    rekgr = lambda n: ekg.Iri(ekg.Namespace.REKGR, n)
    out = set()

    def reached(node):
        yield node
        if node.kind is NodeKind.ACTION:
            return
        for child in _oracle_ticked(node, results):
            yield from reached(child)

    for node in reached(tree):
        constraint = (
            node.kind is NodeKind.ACTION
            and node.action is not None
            and node.action.constraint is not None
        )
        concept = "GeometricConstraint" if constraint else "BTreeNodeEvent"
        out.add(ekg.Triple(rekgr(node.id), rekgs("instanceOf"), rekgs(concept)))
        if node.kind in (NodeKind.SEQUENCE, NodeKind.FALLBACK):
            kids = _oracle_ticked(node, results)
            for a, b in zip(kids, kids[1:]):
                out.add(ekg.Triple(rekgr(a.id), rekgs("nextEvent"), rekgr(b.id)))
            for c in kids:
                out.add(
                    ekg.Triple(
                        rekgr(c.id),
                        rekgs("hasStatus"),
                        ekg.Literal(oracle_status(c, results).value),
                    )
                )
        elif node.kind is NodeKind.PARALLEL:
            for c in node.children:
                out.add(
                    ekg.Triple(rekgr(node.id), rekgs("hasConcurrentEvent"), rekgr(c.id))
                )
                out.add(
                    ekg.Triple(
                        rekgr(c.id),
                        rekgs("hasStatus"),
                        ekg.Literal(oracle_status(c, results).value),
                    )
                )
        elif constraint:
            out.add(
                ekg.Triple(
                    rekgr(node.id),
                    rekgs("hasConstraintKind"),
                    ekg.Literal(node.action.constraint.kind.value),
                )
            )
            if node.action.goals:
                parts = ";".join(
                    f"{slot}={p.x!r},{p.y!r},{p.w!r}"
                    for slot, p in sorted(node.action.goals.items())
                )
                out.add(
                    ekg.Triple(
                        rekgr(node.id), rekgs("hasFeatureValue"), ekg.Literal(parts)
                    )
                )
    return out


def enumerate_trees(max_controls=3, max_leaves=4):
    """All tree shapes within the control/leaf budget (leaf ids fixed later)."""

    def build(controls, leaves, next_id):
        # a single leaf
        yield leaf(f"L{next_id}"), controls, leaves - 1, next_id + 1
        if controls == 0 or leaves < 2:
            return
        for n_children in (2, 3, 4):
            if n_children > leaves:
                continue
            for split in _child_splits(controls - 1, leaves, n_children, next_id):
                children, c_rest, l_rest, nid = split
                base = f"C{nid}"
                yield seq(base + "s", *children), c_rest, l_rest, nid + 1
                yield fb(base + "f", *children), c_rest, l_rest, nid + 1
                for m in range(1, n_children + 1):
                    yield par(f"{base}p{m}", m, *children), c_rest, l_rest, nid + 1

    def _child_splits(controls, leaves, k, next_id):
        if k == 0:
            yield (), controls, leaves, next_id
            return
        for child, c1, l1, nid in build(controls, leaves - (k - 1), next_id):
            for rest, c2, l2, nid2 in _child_splits(c1, l1 + (k - 1), k - 1, nid):
                yield (child,) + rest, c2, l2, nid2

    seen = set()
    for tree, _c, _l, _n in build(max_controls, max_leaves, 0):
        text = tree_serialize(tree)
        if text not in seen:
            seen.add(text)
            yield tree


def all_assignments(tree):
    leaves = [n.id for n in walk(tree) if n.kind is NodeKind.ACTION]
    for combo in itertools.product((S, F, R), repeat=len(leaves)):
        yield dict(zip(leaves, combo))


def test_tick_sequence_examples():
    tree = seq("root", leaf("a"), leaf("b"))
    status, trace = tick(tree, {"a": S, "b": S})
    assert status is S
    assert {r.node_id for r in trace} == {"a", "b", "root"}


def test_tick_fallback_short_circuit():
    tree = fb("root", leaf("a"), leaf("b"), leaf("c"))
    status, trace = tick(tree, {"a": F, "b": S})  # c never ticked, no result needed
    assert status is S
    assert [r.node_id for r in trace] == ["a", "b", "root"]


def test_tick_parallel_threshold():
    tree = par("root", 2, leaf("a"), leaf("b"), leaf("c"))
    status, _ = tick(tree, {"a": S, "b": F, "c": S})
    assert status is S
    status, _ = tick(tree, {"a": S, "b": F, "c": F})
    assert status is F
    status, _ = tick(tree, {"a": S, "b": F, "c": R})
    assert status is R


def test_tick_missing_leaf_result():
    tree = seq("root", leaf("a"), leaf("b"))
    with pytest.raises(MissingLeafResult) as err:
        tick(tree, {"a": S})
    assert err.value.node_id == "b"


def test_trace_indices_strictly_increase():
    tree = seq("root", leaf("a"), fb("f", leaf("b"), leaf("c")))
    _, trace = tick(tree, {"a": S, "b": F, "c": S})
    assert [r.index for r in trace] == list(range(len(trace)))
    assert all(r.timestamp >= 0 for r in trace)


def count_preds(triples, name):
    return sum(1 for t in triples if t.predicate.name == name)


def test_triples_sequence_of_three():
    tree = seq("root", leaf("n1"), leaf("n2"), leaf("n3"))
    _, trace = tick(tree, {"n1": S, "n2": S, "n3": S})
    triples = trace_to_triples(tree, trace)
    assert count_preds(triples, "nextEvent") == 2
    assert count_preds(triples, "hasStatus") == 3


def test_triples_fallback_failure_then_success():
    tree = fb("root", leaf("n1"), leaf("n2"))
    _, trace = tick(tree, {"n1": F, "n2": S})
    triples = trace_to_triples(tree, trace)
    assert count_preds(triples, "nextEvent") == 1
    rekgs = lambda n: ekg.Iri(ekg.Namespace.REKGS, n)
    rekgr = lambda n: ekg.Iri(ekg.Namespace.REKGR, n)
    assert ekg.Triple(rekgr("n1"), rekgs("hasStatus"), ekg.Literal("Failure")) in triples
    assert ekg.Triple(rekgr("n2"), rekgs("hasStatus"), ekg.Literal("Success")) in triples


def test_triples_parallel_fan_out():
    tree = par("root", 2, leaf("n1"), leaf("n2"))
    _, trace = tick(tree, {"n1": S, "n2": S})
    triples = trace_to_triples(tree, trace)
    assert count_preds(triples, "hasConcurrentEvent") == 2
    assert count_preds(triples, "hasStatus") == 2


def test_triples_reject_unknown_trace_ids():
    tree = seq("root", leaf("a"))
    _, trace = tick(tree, {"a": S})
    other = seq("root2", leaf("z"))
    with pytest.raises(InconsistentTrace):
        trace_to_triples(other, trace)


def test_exhaustive_semantics_and_triples_small():
    # spot check here; the full <=3 controls / <=4 leaves sweep runs in the
    # acceptance suite
    trees = list(enumerate_trees(max_controls=2, max_leaves=3))
    assert len(trees) > 20
    for tree in trees:
        for results in all_assignments(tree):
            status, trace = tick(tree, results)
            assert status is oracle_status(tree, results)
            assert trace_to_triples(tree, trace) == oracle_triples(tree, results)


def test_parallel_full_threshold_matches_sequence_success():
    children = [leaf(f"x{i}") for i in range(3)]
    p = par("p", 3, *children)
    s = seq("s", *children)
    for combo in itertools.product((S, F, R), repeat=3):
        results = {f"x{i}": combo[i] for i in range(3)}
        ps, _ = tick(p, results)
        ss, _ = tick(s, results)
        assert (ps is S) == (ss is S)


def test_active_actions_walks_stages():
    stack = par("stack", 2, leaf("PP"), leaf("Par"))
    tree = seq("task", stack, leaf("grasp"))
    assert [n.id for n in active_actions(tree, {})] == ["PP", "Par"]
    assert [n.id for n in active_actions(tree, {"PP": S, "Par": S})] == ["grasp"]
    assert active_actions(tree, {"PP": S, "Par": F}) == []  # blocked: stack failed
    assert active_actions(tree, {"PP": S, "Par": S, "grasp": S}) == []


def test_active_actions_fallback_opens_next_branch():
    tree = fb("fb", leaf("first"), leaf("second"))
    assert [n.id for n in active_actions(tree, {})] == ["first"]
    assert [n.id for n in active_actions(tree, {"first": F})] == ["second"]
    assert active_actions(tree, {"first": S}) == []


def pen_tree():
    P = HomogeneousPoint
    return seq(
        "Task",
        par(
            "Stack",
            2,
            BTreeNode(
                kind="action",
                id="PP",
                action=ActionSpec(
                    constraint=GeometricConstraint("p2p", ("pen:pp", "goal:grip")),
                    goals={"goal:grip": P(320.0, 260.0, 1.0)},
                ),
            ),
            BTreeNode(
                kind="action",
                id="Par",
                action=ActionSpec(
                    constraint=GeometricConstraint(
                        "par",
                        ("pen:ax1a", "pen:ax1b", "goal:a", "goal:b"),
                        weight=100.0,
                    ),
                    goals={
                        "goal:a": P(320.0, 250.0, 1.0),
                        "goal:b": P(320.0, 270.0, 1.0),
                    },
                ),
            ),
        ),
        leaf("Grasp"),
    )


def test_serialize_round_trip_single_action():
    tree = leaf("only")
    assert tree_parse(tree_serialize(tree)) == tree


def test_serialize_round_trip_pen_grasp():
    tree = pen_tree()
    text = tree_serialize(tree)
    assert tree_parse(text) == tree


def test_parse_errors():
    with pytest.raises(TreeParseError):
        tree_parse("(sequence id=root (action id=a)")  # truncated
    with pytest.raises(TreeParseError):
        tree_parse("")
    with pytest.raises(TreeParseError):
        tree_parse("(widget id=a)")
    with pytest.raises(TreeParseError):
        tree_parse("(action id=a) (action id=b)")
    with pytest.raises(TreeParseError):
        tree_parse("(action)")
    with pytest.raises(TreeParseError):
        tree_parse("(parallel id=p threshold=9 (action id=a))")


def test_node_validation():
    with pytest.raises(ValueError):
        BTreeNode(kind="action", id="x", children=(leaf("y"),))
    with pytest.raises(ValueError):
        BTreeNode(kind="sequence", id="x")
    with pytest.raises(ValueError):
        BTreeNode(kind="action", id="bad id")
    with pytest.raises(ValueError):
        tick(seq("dup", leaf("a"), seq("a", leaf("b"))), {})


def test_trees_embed_in_graphs():
    tree = pen_tree()
    literal = ekg.Literal(tree_serialize(tree))
    g = ekg.Graph("demo")
    ekg.insert(
        g,
        ekg.Triple(
            ekg.Iri(ekg.Namespace.REKGR, "Task_pen"),
            ekg.Iri(ekg.Namespace.REKGS, "hasBehaviorTree"),
            literal,
        ),
    )
    parsed = ekg.parse(ekg.serialize(g))
    assert parsed == g
    recovered, prompt = None, None
    from kgservo.ekg import query_task

    with pytest.raises(ekg.NoUsableExperience):
        query_task([g])  # tree but no hasObject
    ekg.insert(
        g,
        ekg.Triple(
            ekg.Iri(ekg.Namespace.REKGR, "Move"),
            ekg.Iri(ekg.Namespace.REKGS, "hasObject"),
            ekg.Iri(ekg.Namespace.REKGR, "Pen"),
        ),
    )
    recovered, prompt = query_task([g])
    assert recovered == tree
    assert prompt == "pen"
