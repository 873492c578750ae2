"""Deterministic eye-in-hand world.

A 4-DoF revolute chain carries a pinhole camera over a table of objects
whose labeled parts are sampled point clouds.  Masks are rendered by
splatting projected part points (3x3 dilation), which is all the fidelity
PCA-level features need, and degraded variants stand in for unstable
trackers.  Everything is bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import perception
from .geometry import ErrorVector, stack_errors
from .perception import BinaryMask, UnresolvedSlot, mask_to_features
from .servo import FeatureLost

_NEAR_PLANE = 1e-3


class SimError(Exception):
    pass


class OutOfView(SimError):
    """No point of the requested object/part projects into the frame."""


def philox(seed: int, *counter: int) -> np.random.Generator:
    """Counter-based generator: one master seed, independent streams."""
    c = np.zeros(4, dtype=np.uint64)
    for i, v in enumerate(counter[:3]):
        c[i + 1] = np.uint64(v)
    key = np.array([np.uint64(seed), np.uint64(0)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=c, key=key))


# -- rigid transforms ----------------------------------------------------------


@dataclass(frozen=True)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.R.T + self.t


def rot_axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def quat_to_rot(q: Sequence[float]) -> np.ndarray:
    """xyzw quaternion to rotation matrix."""
    x, y, z, w = (float(v) for v in q)
    n = math.sqrt(x * x + y * y + z * z + w * w)
    x, y, z, w = x / n, y / n, z / n, w / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


# -- kinematics ----------------------------------------------------------------


@dataclass(frozen=True)
class Joint:
    axis: np.ndarray
    offset: np.ndarray
    type: str = "revolute"

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        object.__setattr__(self, "axis", axis / np.linalg.norm(axis))
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float))
        if self.type != "revolute":
            raise ValueError(f"unsupported joint type {self.type!r}")


@dataclass(frozen=True)
class KinematicChain:
    joints: tuple[Joint, ...]
    mount: RigidTransform = field(default_factory=RigidTransform.identity)

    @property
    def n_joints(self) -> int:
        return len(self.joints)


def forward_kinematics(chain: KinematicChain, q: Sequence[float]) -> RigidTransform:
    """Camera pose in the world frame for joint angles q."""
    qv = np.asarray(q, dtype=float)
    if qv.size != chain.n_joints:
        raise ValueError(f"expected {chain.n_joints} joint angles, got {qv.size}")
    pose = RigidTransform.identity()
    for joint, angle in zip(chain.joints, qv):
        step = RigidTransform(rot_axis_angle(joint.axis, float(angle)), joint.offset)
        pose = pose.compose(step)
    return pose.compose(chain.mount)


def default_chain() -> KinematicChain:
    """Pan / shoulder / elbow / optical-roll chain with a down-looking camera.

    The mount rotates the tool frame so the camera optical axis points at
    the table (-z world) from roughly half a meter up, which gives the
    p2p+par grasp stack full 2-D image controllability.
    """
    joints = (
        Joint(axis=(0, 0, 1), offset=(0.0, 0.0, 0.40)),
        Joint(axis=(0, 1, 0), offset=(0.10, 0.0, 0.15)),
        Joint(axis=(0, 1, 0), offset=(0.25, 0.0, 0.0)),
        Joint(axis=(0, 0, 1), offset=(0.20, 0.0, 0.0)),
    )
    # camera axes in the tool frame: x_cam=-y, y_cam=-x, z_cam=-z (look down)
    R_mount = np.array([[0.0, -1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, -1.0]]).T
    mount = RigidTransform(R_mount, np.array([0.0, 0.0, -0.05]))
    return KinematicChain(joints=joints, mount=mount)


# -- camera --------------------------------------------------------------------


@dataclass(frozen=True)
class PinholeCamera:
    fx: float = 525.0
    fy: float = 525.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def scaled(self, factor: float) -> "PinholeCamera":
        """Same field of view at a different resolution."""
        return PinholeCamera(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
        )

    def project(
        self, pose: RigidTransform, points_world: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and an in-front validity mask."""
        cam = pose.inverse().apply(points_world)
        z = cam[:, 2]
        in_front = z > _NEAR_PLANE
        zsafe = np.where(in_front, z, 1.0)
        u = self.fx * cam[:, 0] / zsafe + self.cx
        v = self.fy * cam[:, 1] / zsafe + self.cy
        return np.column_stack([u, v]), in_front


# -- scene ---------------------------------------------------------------------


def ellipsoid_cloud(
    size: Sequence[float], offset: Sequence[float], n: int = 300
) -> np.ndarray:
    """Deterministic Fibonacci-lattice sampling of an ellipsoid surface."""
    i = np.arange(n, dtype=float)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    golden = math.pi * (3.0 - math.sqrt(5.0))
    theta = golden * i
    sphere = np.column_stack([r * np.cos(theta), r * np.sin(theta), z])
    return sphere * np.asarray(size, dtype=float) + np.asarray(offset, dtype=float)


def box_cloud(size: Sequence[float], offset: Sequence[float], n: int = 300) -> np.ndarray:
    """Deterministic box-surface sampling with near-uniform point spacing.

    Points are allocated to the six faces by area and laid out on per-face
    grids whose aspect follows the face extents, so elongated boxes still
    project to solid blobs.
    """
    half = np.asarray(size, dtype=float) / 2.0
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    shares = areas / areas.sum()
    points = []
    for axis in range(3):
        o1, o2 = [i for i in range(3) if i != axis]
        count = max(4, int(round(n * shares[axis] / 2.0)))
        e1, e2 = half[o1], half[o2]
        k1 = max(2, int(round(math.sqrt(count * max(e1, 1e-9) / max(e2, 1e-9)))))
        k2 = max(2, math.ceil(count / k1))
        g1, g2 = np.meshgrid(
            np.linspace(-e1, e1, k1), np.linspace(-e2, e2, k2), indexing="ij"
        )
        for sign in (-1.0, 1.0):
            face = np.zeros((g1.size, 3))
            face[:, o1] = g1.ravel()
            face[:, o2] = g2.ravel()
            face[:, axis] = sign * half[axis]
            points.append(face)
    return np.vstack(points) + np.asarray(offset, dtype=float)


_GENERATORS = {"ellipsoid": ellipsoid_cloud, "box": box_cloud}


@dataclass
class SceneObject:
    name: str
    category: str
    pose: RigidTransform
    parts: dict[str, np.ndarray]  # part label -> (N, 3) cloud in object frame

    def cloud(self, part: str | None = None) -> np.ndarray:
        """World-frame points of one part, or of the whole object."""
        if part is None:
            local = np.vstack(list(self.parts.values()))
        elif part in self.parts:
            local = self.parts[part]
        else:
            raise KeyError(f"object {self.name!r} has no part {part!r}")
        return self.pose.apply(local)


@dataclass
class Scene:
    objects: list[SceneObject]
    camera: PinholeCamera = field(default_factory=PinholeCamera)
    chain: KinematicChain = field(default_factory=default_chain)
    q0: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        self.q0 = np.asarray(self.q0, dtype=float)
        names = [o.name for o in self.objects]
        if len(set(names)) != len(names):
            raise ValueError("scene object names must be unique")

    def object(self, name: str) -> SceneObject:
        for obj in self.objects:
            if obj.name == name:
                return obj
        raise KeyError(f"no scene object named {name!r}")

    def resolve_prompt(self, prompt: str) -> tuple[SceneObject, str | None]:
        """Map a text prompt to an object or an (object, part) pair."""
        for obj in self.objects:
            if prompt == obj.name:
                return obj, None
        for obj in self.objects:
            for part in obj.parts:
                if prompt in (f"{obj.name} {part}", f"{obj.name}:{part}"):
                    return obj, part
        hits = [
            (obj, part)
            for obj in self.objects
            for part in obj.parts
            if part == prompt
        ]
        if len(hits) == 1:
            return hits[0]
        raise KeyError(f"prompt {prompt!r} matches no unique scene object/part")


def _pose_from_json(spec: Mapping) -> RigidTransform:
    quat = spec.get("quat", [0.0, 0.0, 0.0, 1.0])
    t = spec.get("t", [0.0, 0.0, 0.0])
    return RigidTransform(quat_to_rot(quat), np.asarray(t, dtype=float))


def scene_from_json(source) -> Scene:
    """Build a scene from a JSON file path, JSON text, or parsed dict."""
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        spec = json.loads(Path(source).read_text())
    elif isinstance(source, str):
        spec = json.loads(source)
    else:
        spec = source
    objects = []
    for ospec in spec.get("objects", []):
        parts = {}
        for label, pspec in ospec.get("parts", {}).items():
            gen = _GENERATORS.get(pspec.get("type", "ellipsoid"))
            if gen is None:
                raise SimError(f"unknown part generator {pspec.get('type')!r}")
            parts[label] = gen(
                pspec["size"], pspec.get("offset", (0, 0, 0)), pspec.get("points", 300)
            )
        objects.append(
            SceneObject(
                name=ospec["name"],
                category=ospec.get("category", ""),
                pose=_pose_from_json(ospec.get("pose", {})),
                parts=parts,
            )
        )
    camera = PinholeCamera(**spec.get("camera", {}))
    if "chain" in spec:
        cspec = spec["chain"]
        joints = tuple(
            Joint(axis=j["axis"], offset=j["offset"]) for j in cspec["joints"]
        )
        mount = _pose_from_json(cspec.get("mount", {}))
        chain = KinematicChain(joints=joints, mount=mount)
    else:
        chain = default_chain()
    q0 = np.asarray(spec.get("q0", np.zeros(chain.n_joints)), dtype=float)
    return Scene(objects=objects, camera=camera, chain=chain, q0=q0)


def place_object(
    scene: Scene, name: str, xy: Sequence[float], yaw: float, z: float | None = None
) -> None:
    """Re-pose an object on the table plane (position + yaw about world z)."""
    obj = scene.object(name)
    old_z = obj.pose.t[2]
    obj.pose = RigidTransform(
        rot_axis_angle((0, 0, 1), yaw),
        np.array([xy[0], xy[1], old_z if z is None else z]),
    )


# -- rendering -----------------------------------------------------------------


def _splat(
    shape: tuple[int, int], u: np.ndarray, v: np.ndarray, value: float, out=None
) -> np.ndarray:
    """Stamp a 3x3 neighborhood around each integer pixel (clipped)."""
    h, w = shape
    mask = np.zeros(shape) if out is None else out
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            uu = u + dx
            vv = v + dy
            ok = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
            mask[vv[ok], uu[ok]] = np.maximum(mask[vv[ok], uu[ok]], value)
    return mask


def render_mask(
    camera: PinholeCamera,
    pose: RigidTransform,
    obj: SceneObject,
    part: str | None = None,
) -> BinaryMask:
    """Ground-truth segmentation of one object (or part) at a camera pose."""
    uv, in_front = camera.project(pose, obj.cloud(part))
    u = np.rint(uv[:, 0]).astype(int)
    v = np.rint(uv[:, 1]).astype(int)
    visible = in_front & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    if not np.any(visible):
        label = obj.name if part is None else f"{obj.name} {part}"
        raise OutOfView(f"{label} projects nowhere into the frame")
    values = _splat((camera.height, camera.width), u[visible], v[visible], 1.0)
    prompt = obj.name if part is None else f"{obj.name} {part}"
    return BinaryMask(values, prompt=prompt)


def render_scene_image(
    camera: PinholeCamera, pose: RigidTransform, scene: Scene
) -> np.ndarray:
    """Grayscale splat of every object (stable per-name intensity)."""
    image = np.zeros((camera.height, camera.width))
    for obj in scene.objects:
        uv, in_front = camera.project(pose, obj.cloud(None))
        u = np.rint(uv[:, 0]).astype(int)
        v = np.rint(uv[:, 1]).astype(int)
        ok = in_front & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
        if not np.any(ok):
            continue
        intensity = 0.35 + 0.6 * ((zlib.crc32(obj.name.encode()) % 997) / 996.0)
        _splat((camera.height, camera.width), u[ok], v[ok], intensity, out=image)
    return image


def _shift2d(values: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(values)
    h, w = values.shape
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    ys_src = slice(max(-dy, 0), min(h - dy, h))
    xs_src = slice(max(-dx, 0), min(w - dx, w))
    out[ys, xs] = values[ys_src, xs_src]
    return out


def degrade_mask(
    mask: BinaryMask, jitter_px: float = 0.0, dropout: float = 0.0, seed: int = 0
) -> BinaryMask:
    """Noisy-tracker stand-in: blob jitter plus pixel dropout, seeded."""
    if not 0.0 <= dropout <= 1.0:
        raise ValueError("dropout must lie in [0, 1]")
    values = mask.values.copy()
    rng = philox(seed, 0xD06)
    if jitter_px > 0.0:
        dy, dx = np.rint(rng.normal(0.0, jitter_px, size=2)).astype(int)
        values = _shift2d(values, int(dy), int(dx))
    if dropout > 0.0:
        keep = rng.random(values.shape) >= dropout
        values = values * keep
    return BinaryMask(values, prompt=mask.prompt)


# -- segmenters and the servo plant ---------------------------------------------


class SimSegmenter:
    """Ground-truth mask source: renders prompts straight from the scene."""

    def __init__(self, scene: Scene):
        self.scene = scene

    def masks(self, pose: RigidTransform, prompts: Sequence[str]) -> dict[str, BinaryMask]:
        out = {}
        for prompt in prompts:
            obj, part = self.scene.resolve_prompt(prompt)
            out[prompt] = render_mask(self.scene.camera, pose, obj, part)
        return out


class RecordingSegmenter:
    """Wraps a segmenter and writes every produced mask as a PGM file."""

    def __init__(self, inner, directory):
        from .pgm import write_pgm

        self._inner = inner
        self._dir = Path(directory)
        self._dir.mkdir(parents=True, exist_ok=True)
        self._write = write_pgm
        self._counts: dict[str, int] = {}

    def masks(self, pose, prompts):
        out = self._inner.masks(pose, prompts)
        for prompt, mask in out.items():
            idx = self._counts.get(prompt, 0)
            self._counts[prompt] = idx + 1
            safe = prompt.replace(" ", "_").replace(":", "_")
            self._write(self._dir / f"{safe}_{idx:05d}.pgm", mask.values)
        return out


class ServoPlant:
    """Binds the simulated world to the servo loop's relative-move protocol.

    Each call applies a joint delta, renders the prompts, extracts PCA
    features and returns the stacked weighted error of the tree's active
    constraints.  Mask collapse or an empty view surfaces as FeatureLost.
    """

    def __init__(
        self,
        chain: KinematicChain,
        camera: PinholeCamera,
        scene: Scene,
        tree,
        prompts: Sequence[str],
        q0: Sequence[float] | None = None,
        alpha: float = perception.DEFAULT_ALPHA,
        min_support: int = perception.MIN_SUPPORT,
        segmenter=None,
    ):
        self.chain = chain
        self.camera = camera
        self.scene = scene
        self.tree = tree
        self.prompts = list(prompts)
        self.q = np.asarray(scene.q0 if q0 is None else q0, dtype=float).copy()
        self.alpha = alpha
        self.min_support = min_support
        self.segmenter = segmenter if segmenter is not None else SimSegmenter(scene)
        self.resolved: dict = {}
        self.last_features: dict[str, perception.FeatureSet] = {}
        if isinstance(self.segmenter, SimSegmenter):
            for prompt in self.prompts:
                scene.resolve_prompt(prompt)  # fail fast on bad prompts

    def pose(self) -> RigidTransform:
        return forward_kinematics(self.chain, self.q)

    def __call__(self, dq) -> ErrorVector:
        self.q = self.q + np.asarray(dq, dtype=float)
        try:
            masks = self.segmenter.masks(self.pose(), self.prompts)
            features = {
                prompt: mask_to_features(mask, self.alpha, self.min_support)
                for prompt, mask in masks.items()
            }
        except (OutOfView, perception.EmptyMask, perception.InsufficientSupport,
                perception.DegenerateSpread) as exc:
            raise FeatureLost(str(exc)) from exc
        self.last_features = features
        pairs = perception.compose_constraints(self.tree, features, self.resolved)
        if not pairs:
            raise UnresolvedSlot("<no active constraint nodes>")
        return stack_errors(pairs)


def plant_adapter(
    chain: KinematicChain,
    camera: PinholeCamera,
    scene: Scene,
    tree,
    prompts: Sequence[str],
    **kwargs,
) -> ServoPlant:
    return ServoPlant(chain, camera, scene, tree, prompts, **kwargs)
