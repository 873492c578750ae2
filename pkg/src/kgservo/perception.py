"""Mask-to-feature extraction and constraint composition.

Turns binary segmentation masks into point/line features (threshold +
PCA over pixel coordinates) and evaluates the geometric constraints named
by a behavior tree's action nodes against those features.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import btree
from .geometry import (
    ErrorVector,
    GeometricConstraint,
    HomogeneousLine,
    HomogeneousPoint,
    evaluate_points,
    line_through,
)

#: Mask threshold used when none is configured.  The reference segmenters
#: emit soft masks, so a mid-range cut keeps thin structures alive.
DEFAULT_ALPHA = 0.4

#: Minimum pixel support before PCA features are considered stable.
MIN_SUPPORT = 16

_TIE_EPS = 1e-12


class PerceptionError(Exception):
    pass


class EmptyMask(PerceptionError):
    """No pixel survived thresholding."""


class InsufficientSupport(PerceptionError):
    """Too few pixels for stable PCA features."""


class DegenerateSpread(PerceptionError):
    """All points coincide; no principal directions exist."""


class UnresolvedSlot(PerceptionError):
    """A constraint slot names a prompt/part absent from the feature map."""

    def __init__(self, slot: str):
        super().__init__(f"cannot resolve feature slot {slot!r}")
        self.slot = slot


@dataclass
class BinaryMask:
    """A (soft) segmentation mask with its prompt label."""

    values: np.ndarray
    prompt: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("mask has non-finite values")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("mask values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class FeatureSet:
    """Principal point, two principal axes and optional part centroids."""

    principal_point: HomogeneousPoint
    principal_axes: tuple[HomogeneousLine, HomogeneousLine]
    axis_dirs: tuple[tuple[float, float], tuple[float, float]]
    pixel_count: int
    part_points: dict[str, HomogeneousPoint] = field(default_factory=dict)

    def axis_point(self, axis: int) -> HomogeneousPoint:
        """Second anchor point of an axis: principal point + unit direction."""
        dx, dy = self.axis_dirs[axis]
        pp = self.principal_point
        return HomogeneousPoint(pp.x + dx, pp.y + dy, 1.0)


def threshold_coords(mask: BinaryMask, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """(K, 2) array of (x, y) pixel coordinates with mask value >= alpha,
    in row-major scan order."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    rows, cols = np.nonzero(mask.values >= alpha)
    if rows.size == 0:
        raise EmptyMask(f"no pixel of {mask.prompt!r} reaches alpha={alpha}")
    return np.column_stack([cols, rows]).astype(float)


def threshold_points(
    mask: BinaryMask, alpha: float = DEFAULT_ALPHA
) -> list[HomogeneousPoint]:
    """Pixel coordinates passing the threshold, as homogeneous points."""
    coords = threshold_coords(mask, alpha)
    return [HomogeneousPoint(x, y, 1.0) for x, y in coords]


def _oriented(d: np.ndarray) -> tuple[float, float]:
    # Deterministic eigenvector orientation: positive x, ties to positive y.
    if d[0] < -_TIE_EPS or (abs(d[0]) <= _TIE_EPS and d[1] < 0):
        d = -d
    return (float(d[0]), float(d[1]))


def pca_features(points, min_support: int = MIN_SUPPORT) -> FeatureSet:
    """Centroid and covariance eigen-directions of a point set.

    Accepts a list of HomogeneousPoint or an (K, 2) coordinate array.
    Axes are ordered by descending eigenvalue with signs pinned by the
    positive-x / positive-y tie-break so features stay stable frame to
    frame.
    """
    if isinstance(points, np.ndarray):
        coords = np.asarray(points, dtype=float)
    else:
        coords = np.array([(p.normalized().x, p.normalized().y) for p in points])
    if coords.ndim != 2 or (coords.size and coords.shape[1] != 2):
        raise ValueError(f"expected (K, 2) coordinates, got {coords.shape}")
    if coords.shape[0] < min_support:
        raise InsufficientSupport(
            f"{coords.shape[0]} points < minimum support {min_support}"
        )
    centroid = coords.mean(axis=0)
    centered = coords - centroid
    cov = centered.T @ centered / coords.shape[0]
    evals, evecs = np.linalg.eigh(cov)  # ascending
    if evals[1] < 1e-9:
        raise DegenerateSpread("all points coincide")
    order = [1, 0]
    dirs = tuple(_oriented(evecs[:, i]) for i in order)
    pp = HomogeneousPoint(float(centroid[0]), float(centroid[1]), 1.0)
    axes = []
    for dx, dy in dirs:
        a, b = -dy, dx
        c = -(a * pp.x + b * pp.y)
        axes.append(HomogeneousLine(a, b, c).normalized())
    return FeatureSet(
        principal_point=pp,
        principal_axes=(axes[0], axes[1]),
        axis_dirs=dirs,
        pixel_count=coords.shape[0],
    )


def mask_to_features(
    mask: BinaryMask,
    alpha: float = DEFAULT_ALPHA,
    min_support: int = MIN_SUPPORT,
) -> FeatureSet:
    """Threshold a mask and run PCA in one step (strategy 1)."""
    return pca_features(threshold_coords(mask, alpha), min_support=min_support)


def features_from_parts(
    part_masks: Mapping[str, BinaryMask],
    alpha: float = DEFAULT_ALPHA,
    min_support: int = MIN_SUPPORT,
) -> FeatureSet:
    """Compose a feature set from part-of-object masks (strategy 2).

    The centroids of the part masks become part points; the first axis is
    the line through the first two part centroids (sorted by label), the
    principal point their midpoint.
    """
    if len(part_masks) < 2:
        raise ValueError("strategy 2 needs at least two part masks")
    labels = sorted(part_masks)
    centroids: dict[str, HomogeneousPoint] = {}
    count = 0
    for label in labels:
        coords = threshold_coords(part_masks[label], alpha)
        if coords.shape[0] < min_support:
            raise InsufficientSupport(
                f"part {label!r}: {coords.shape[0]} pixels < {min_support}"
            )
        c = coords.mean(axis=0)
        centroids[label] = HomogeneousPoint(float(c[0]), float(c[1]), 1.0)
        count += coords.shape[0]
    c1 = centroids[labels[0]]
    c2 = centroids[labels[1]]
    d = np.array([c2.x - c1.x, c2.y - c1.y])
    n = np.linalg.norm(d)
    if n < 1e-9:
        raise DegenerateSpread("part centroids coincide")
    dirs = (_oriented(d / n), _oriented(np.array([-d[1], d[0]]) / n))
    pp = HomogeneousPoint((c1.x + c2.x) / 2.0, (c1.y + c2.y) / 2.0, 1.0)
    axes = []
    for dx, dy in dirs:
        a, b = -dy, dx
        c = -(a * pp.x + b * pp.y)
        axes.append(HomogeneousLine(a, b, c).normalized())
    return FeatureSet(
        principal_point=pp,
        principal_axes=(axes[0], axes[1]),
        axis_dirs=dirs,
        pixel_count=count,
        part_points=centroids,
    )


_AXIS_FIELDS = {
    "ax1a": (0, "base"),
    "ax1b": (0, "tip"),
    "ax2a": (1, "base"),
    "ax2b": (1, "tip"),
}


def resolve_slot(
    slot: str,
    features: Mapping[str, FeatureSet],
    goals: Mapping[str, HomogeneousPoint] | None = None,
) -> HomogeneousPoint:
    """Resolve one feature-slot identifier to a concrete image point.

    Goal-side slots come from the action node's stored goal features;
    observation-side slots use the grammar ``prompt:pp``,
    ``prompt:ax{1,2}{a,b}`` and ``prompt:part:<label>``.
    """
    if goals and slot in goals:
        return goals[slot]
    prompt, sep, fieldspec = slot.partition(":")
    if not sep or prompt not in features:
        raise UnresolvedSlot(slot)
    fs = features[prompt]
    if fieldspec == "pp":
        return fs.principal_point
    if fieldspec in _AXIS_FIELDS:
        axis, which = _AXIS_FIELDS[fieldspec]
        return fs.principal_point if which == "base" else fs.axis_point(axis)
    part, sep, label = fieldspec.partition(":")
    if part == "part" and sep and label in fs.part_points:
        return fs.part_points[label]
    raise UnresolvedSlot(slot)


def compose_constraints(
    tree: btree.BTreeNode,
    features: Mapping[str, FeatureSet],
    resolved: Mapping[str, btree.TickStatus] | None = None,
) -> list[tuple[GeometricConstraint, ErrorVector]]:
    """Evaluate every constraint action node currently active in the tree.

    ``resolved`` carries the statuses of already-executed leaves so the
    active frontier advances through Sequence/Fallback stages; with the
    default empty map the first stage of the tree is evaluated.
    """
    pairs: list[tuple[GeometricConstraint, ErrorVector]] = []
    for node in btree.active_actions(tree, resolved or {}):
        action = node.action
        if action is None or action.constraint is None:
            continue
        constraint = action.constraint
        points = [resolve_slot(s, features, action.goals) for s in constraint.slots]
        pairs.append((constraint, evaluate_points(constraint.kind, points)))
    return pairs


class LatestValue:
    """Single-slot mailbox: writers replace, readers take the newest."""

    def __init__(self):
        self._lock = threading.Lock()
        self._value = None
        self._stamp = 0

    def publish(self, value) -> None:
        with self._lock:
            self._value = value
            self._stamp += 1

    def take(self):
        """Return (value, stamp); value is None until the first publish."""
        with self._lock:
            return self._value, self._stamp
