"""Dataset generation: seeded servo trials replayed into per-frame artifacts.

Each video is one closed-loop trial at a seeded object placement.  Per
recorded frame the generator writes ground-truth part masks, the merged
whole-object mask and two noise-degraded variants, plus the ground-truth
constraint error series; per video it writes the experience graph and a
memory-compatible first frame, so a generated dataset doubles as a
demonstration store.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import btree, ekg, perception, pgm, runner, servo, sim
from .geometry import stack_errors

#: degradation levels standing in for unstable visual trackers
NOISE_LIGHT = {"jitter_px": 1.0, "dropout": 0.10}
NOISE_HEAVY = {"jitter_px": 3.0, "dropout": 0.45}

#: seeded placement spread: table offsets in meters, yaw in radians
PLACEMENT_RADIUS = 0.05
PLACEMENT_YAW = 1.0


def randomize_scene(scene: sim.Scene, seed: int, video: int) -> None:
    """Re-pose every object with the per-(seed, video, object) stream."""
    for j, obj in enumerate(scene.objects):
        rng = sim.philox(seed, video, j)
        dx, dy = rng.uniform(-PLACEMENT_RADIUS, PLACEMENT_RADIUS, 2)
        yaw = rng.uniform(-PLACEMENT_YAW, PLACEMENT_YAW)
        base = obj.pose.t
        sim.place_object(scene, obj.name, (base[0] + dx, base[1] + dy), yaw)


def _noise_seed(seed: int, video: int, frame: int, level: int) -> int:
    # distinct deterministic stream per (video, frame, level)
    return (seed * 1_000_003 + video * 7_919 + frame * 31 + level) & 0x7FFFFFFF


@dataclass
class _FrameRecorder:
    scene: sim.Scene
    obj: sim.SceneObject
    tree: btree.BTreeNode
    prompt: str
    plant: sim.ServoPlant
    out: Path
    seed: int
    video: int
    stride: int
    frames: int = 0
    rows: list = None

    def __post_init__(self):
        self.rows = []
        (self.out / "masks").mkdir(parents=True, exist_ok=True)

    def __call__(self, point: servo.TrajectoryPoint) -> None:
        if point.iteration % self.stride:
            return
        idx = self.frames
        self.frames += 1
        camera = self.scene.camera
        pose = self.plant.pose()
        part_masks = {}
        for label in sorted(self.obj.parts):
            mask = sim.render_mask(camera, pose, self.obj, label)
            part_masks[label] = mask
            pgm.write_pgm(self.out / "masks" / f"f{idx:05d}_part_{label}.pgm", mask.values)
        merged = sim.render_mask(camera, pose, self.obj, None)
        pgm.write_pgm(self.out / "masks" / f"f{idx:05d}_pca.pgm", merged.values)
        for name, level, params in (
            ("noisyl", 1, NOISE_LIGHT),
            ("noisyh", 2, NOISE_HEAVY),
        ):
            noisy = sim.degrade_mask(
                merged, seed=_noise_seed(self.seed, self.video, idx, level), **params
            )
            pgm.write_pgm(self.out / "masks" / f"f{idx:05d}_{name}.pgm", noisy.values)
        features = perception.features_from_parts(part_masks)
        pairs = perception.compose_constraints(self.tree, {self.prompt: features})
        stacked = stack_errors(pairs).values
        self.rows.append([idx] + [repr(float(v)) for v in stacked]
                         + [repr(float(np.mean(stacked)))])

    def write_errors(self) -> None:
        with open(self.out / "errors_gt.csv", "w") as fh:
            if self.rows:
                m = len(self.rows[0]) - 2
                fh.write(",".join(["frame"] + [f"e_{i+1}" for i in range(m)] + ["score"]) + "\n")
            for row in self.rows:
                fh.write(",".join(str(v) for v in row) + "\n")


def generate_dataset(
    scene_path,
    out_dir,
    n_videos: int = 19,
    seed: int = 0,
    stride: int = 1,
    tree_text: str | None = None,
    servo_config: servo.ServoConfig | None = None,
) -> Path:
    """Write n seeded trial videos under out_dir; bit-deterministic per seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = servo_config or servo.ServoConfig()
    for video in range(n_videos):
        scene = sim.scene_from_json(scene_path)
        randomize_scene(scene, seed, video)
        obj = scene.objects[0]
        if tree_text is not None:
            tree = btree.tree_parse(tree_text)
        else:
            tree = runner.default_grasp_tree(obj.name, scene.camera)
        prompt = runner.prompts_from_tree(tree)[0]
        vdir = out_dir / f"video_{video:03d}"
        vdir.mkdir(exist_ok=True)

        pose0 = sim.forward_kinematics(scene.chain, scene.q0)
        first = sim.render_scene_image(scene.camera, pose0, scene)
        pgm.write_pgm(vdir / "frame.pgm", first)

        plant = sim.ServoPlant(scene.chain, scene.camera, scene, tree, [prompt])
        recorder = _FrameRecorder(
            scene=scene, obj=obj, tree=tree, prompt=prompt, plant=plant,
            out=vdir, seed=seed, video=video, stride=stride,
        )
        state, _log = servo.servo_loop(plant, scene.q0, cfg, on_step=recorder)
        recorder.write_errors()

        resolved = {
            node.id: btree.TickStatus.SUCCESS
            if state.status is servo.ServoStatus.CONVERGED
            else btree.TickStatus.FAILURE
            for node in btree.walk(tree)
            if node.kind is btree.NodeKind.ACTION
        }
        _root, trace = btree.tick(tree, resolved)
        graph = runner.build_trial_graph(
            f"grasp_{obj.name}", obj.name, tree, trace, state.iteration,
            graph_id=f"video_{video:03d}",
        )
        (vdir / "graph.ekg").write_text(ekg.serialize(graph))
        meta = {
            "id": f"video_{video:03d}",
            "task": f"grasp_{obj.name}",
            "object": obj.name,
            "frame_w": scene.camera.width,
            "frame_h": scene.camera.height,
            "created_ms": 0,
        }
        (vdir / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    meta = {
        "n_videos": n_videos,
        "seed": seed,
        "stride": stride,
        "scene": str(scene_path),
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    return out_dir
