"""Trial orchestration: memory -> perception -> control -> experience graph.

Executes a behavior tree against the simulated (or sidecar-segmented)
world, one servo run per active constraint stage, then ticks the tree
with the outcomes and assembles the event knowledge graph of the trial.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import btree, ekg, memory, servo, sim
from .btree import BTreeNode, TickStatus
from .servo import ServoConfig, ServoStatus

#: servo outcome -> behavior-tree leaf status
STATUS_MAP = {
    ServoStatus.CONVERGED: TickStatus.SUCCESS,
    ServoStatus.RUNNING: TickStatus.RUNNING,
    ServoStatus.DIVERGED: TickStatus.FAILURE,
    ServoStatus.FEATURE_LOST: TickStatus.FAILURE,
}


def prompts_from_tree(tree: BTreeNode) -> list[str]:
    """Segmentation prompts referenced by the tree's constraint slots."""
    prompts: list[str] = []
    for node in btree.walk(tree):
        action = node.action
        if action is None or action.constraint is None:
            continue
        for slot in action.constraint.slots:
            if slot in action.goals:
                continue
            prompt = slot.partition(":")[0]
            if prompt and prompt not in prompts:
                prompts.append(prompt)
    return prompts


def default_grasp_tree(prompt: str, camera: sim.PinholeCamera) -> BTreeNode:
    """The stacked p2p + parallel-line grasp tree for a single prompt.

    The grip goal point sits a little below the image center and the goal
    axis is image-vertical through it, matching a top-down gripper whose
    fingers close across the image x direction.
    """
    from .geometry import GeometricConstraint, HomogeneousPoint

    gx = float(camera.cx)
    gy = float(camera.cy) + camera.height / 24.0
    span = camera.height / 24.0
    return BTreeNode(
        kind="sequence",
        id="Task",
        children=(
            BTreeNode(
                kind="parallel",
                id="Stack",
                threshold=2,
                children=(
                    BTreeNode(
                        kind="action",
                        id="PP",
                        action=btree.ActionSpec(
                            constraint=GeometricConstraint(
                                "p2p", (f"{prompt}:pp", "goal:grip")
                            ),
                            goals={"goal:grip": HomogeneousPoint(gx, gy, 1.0)},
                        ),
                    ),
                    BTreeNode(
                        kind="action",
                        id="Par",
                        action=btree.ActionSpec(
                            constraint=GeometricConstraint(
                                "par",
                                (
                                    f"{prompt}:ax1a",
                                    f"{prompt}:ax1b",
                                    "goal:grip_a",
                                    "goal:grip_b",
                                ),
                                weight=100.0,
                            ),
                            goals={
                                "goal:grip_a": HomogeneousPoint(gx, gy - span, 1.0),
                                "goal:grip_b": HomogeneousPoint(gx, gy + span, 1.0),
                            },
                        ),
                    ),
                ),
            ),
            BTreeNode(kind="action", id="Grasp", action=btree.ActionSpec()),
        ),
    )


@dataclass
class TrialResult:
    root_status: TickStatus
    iterations: int
    final_error: float
    graph: ekg.Graph
    trace: btree.TickTrace
    servo_states: list[servo.ServoState] = field(default_factory=list)
    servo_logs: list[list[servo.TrajectoryPoint]] = field(default_factory=list)
    first_frame: np.ndarray | None = None
    prompt: str = ""


def _rekgr(name: str) -> ekg.Iri:
    return ekg.Iri(ekg.Namespace.REKGR, name)


def _rekgs(name: str) -> ekg.Iri:
    return ekg.Iri(ekg.Namespace.REKGS, name)


def _sem(name: str) -> ekg.Iri:
    return ekg.Iri(ekg.Namespace.SEM, name)


def _entity_name(label: str) -> str:
    cleaned = "".join(c if c.isalnum() or c in "_-" else "_" for c in label)
    return cleaned[:1].upper() + cleaned[1:] if cleaned else "Thing"


def build_trial_graph(
    task: str,
    object_label: str,
    tree: BTreeNode,
    trace: btree.TickTrace,
    iterations: int,
    graph_id: str = "",
) -> ekg.Graph:
    """Event knowledge graph of one executed trial.

    Skeleton entities (robot, workspace, object), the moving event with
    its participants and logical timestamps (1 Hz command clock), the
    tick trace converted to triples, the serialized behavior tree and the
    canonicalization facts of the manipulated object.
    """
    g = ekg.Graph(id=graph_id or task)
    move = _rekgr("Move")
    robot = _rekgr("Robot")
    place = _rekgr("Table_top_workspace")
    obj = _rekgr(_entity_name(object_label))
    task_node = _rekgr("Task_" + _entity_name(task).lower())

    ekg.insert(g, ekg.Triple(move, _rekgs("instanceOf"), _sem("Event")))
    ekg.insert(g, ekg.Triple(robot, _rekgs("instanceOf"), _sem("Actor")))
    ekg.insert(g, ekg.Triple(place, _rekgs("instanceOf"), _sem("Place")))
    ekg.insert(g, ekg.Triple(obj, _rekgs("instanceOf"), _rekgs("Object")))
    ekg.insert(g, ekg.Triple(task_node, _rekgs("instanceOf"), _sem("Event")))
    ekg.insert(g, ekg.Triple(move, _sem("hasActor"), robot))
    ekg.insert(g, ekg.Triple(move, _sem("hasPlace"), place))
    ekg.insert(g, ekg.Triple(move, _rekgs("hasObject"), obj))
    ekg.insert(g, ekg.Triple(move, _sem("hasBeginTimeStamp"), ekg.Literal(0, "timestamp")))
    ekg.insert(
        g,
        ekg.Triple(
            move,
            _sem("hasEndTimeStamp"),
            ekg.Literal(int(iterations) * 1000, "timestamp"),
        ),
    )
    for node in btree.walk(tree):
        if node.action is not None and node.action.constraint is not None:
            ekg.insert(g, ekg.Triple(move, _rekgs("isDescribedAs"), _rekgr(node.id)))
    ekg.insert(
        g,
        ekg.Triple(
            task_node,
            _rekgs("hasBehaviorTree"),
            ekg.Literal(btree.tree_serialize(tree)),
        ),
    )
    for triple in btree.trace_to_triples(tree, trace):
        ekg.insert(g, triple)
    for triple in ekg.canonicalize(obj):
        ekg.insert(g, triple)
    return g


@dataclass
class TrialSpec:
    """Everything one servo trial needs (exactly one tree source)."""

    scene: sim.Scene
    task: str = "grasp"
    tree: BTreeNode | None = None
    store: memory.MemoryStore | None = None
    k: int = 3
    servo_config: ServoConfig = field(default_factory=ServoConfig)
    segmenter: object | None = None
    alpha: float | None = None

    def __post_init__(self):
        if (self.tree is None) == (self.store is None):
            raise ValueError("provide exactly one of tree / store (from-memory)")


def run_trial(spec: TrialSpec, on_step=None) -> TrialResult:
    scene = spec.scene
    pose0 = sim.forward_kinematics(scene.chain, scene.q0)
    first_frame = sim.render_scene_image(scene.camera, pose0, scene)

    tree = spec.tree
    prompt = ""
    if tree is None:
        ranked = spec.store.retrieve(first_frame, min(spec.k, len(spec.store)))
        graphs = [demo.graph() for demo, _ in ranked]
        tree, prompt = ekg.query_task(graphs)
    prompts = prompts_from_tree(tree)
    if not prompt:
        prompt = prompts[0] if prompts else ""

    kwargs = {}
    if spec.alpha is not None:
        kwargs["alpha"] = spec.alpha
    plant = sim.ServoPlant(
        scene.chain,
        scene.camera,
        scene,
        tree,
        prompts,
        segmenter=spec.segmenter,
        **kwargs,
    )

    resolved: dict[str, TickStatus] = {}
    states: list[servo.ServoState] = []
    logs: list[list[servo.TrajectoryPoint]] = []
    max_stages = sum(1 for n in btree.walk(tree) if n.kind is btree.NodeKind.ACTION) + 1
    for _ in range(max_stages):
        actions = btree.active_actions(tree, resolved)
        if not actions:
            break
        constraint_nodes = [
            a for a in actions if a.action is not None and a.action.constraint is not None
        ]
        for a in actions:
            if a not in constraint_nodes:
                resolved[a.id] = TickStatus.SUCCESS  # plain actions always actuate
        if constraint_nodes:
            plant.resolved = dict(resolved)
            state, log = servo.servo_loop(plant, plant.q, spec.servo_config, on_step=on_step)
            states.append(state)
            logs.append(log)
            status = STATUS_MAP[state.status]
            for a in constraint_nodes:
                resolved[a.id] = status

    root_status, trace = btree.tick(tree, resolved)
    iterations = sum(s.iteration for s in states)
    final_error = float("nan")
    for s in reversed(states):
        if s.e is not None:
            final_error = float(np.max(np.abs(s.e)))
            break
    graph = build_trial_graph(
        spec.task, prompt or "object", tree, trace, iterations
    )
    return TrialResult(
        root_status=root_status,
        iterations=iterations,
        final_error=final_error,
        graph=graph,
        trace=trace,
        servo_states=states,
        servo_logs=logs,
        first_frame=first_frame,
        prompt=prompt,
    )


def write_trial_artifacts(result: TrialResult, out_dir) -> dict:
    """Write trajectory CSV(s), the final graph and the JSON verdict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, log in enumerate(result.servo_logs):
        name = "trajectory.csv" if i == 0 else f"trajectory_{i:02d}.csv"
        servo.write_trajectory_csv(out / name, log)
    (out / "trial.ekg").write_text(ekg.serialize(result.graph))
    verdict = {
        "status": result.root_status.value,
        "iterations": result.iterations,
        "final_error": result.final_error,
    }
    (out / "verdict.json").write_text(json.dumps(verdict, indent=1) + "\n")
    return verdict
