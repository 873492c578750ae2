"""Projective-plane primitives and geometric constraint residuals.

Points and lines live in homogeneous pixel coordinates.  Residuals are
normalized so every component is measured in pixels (or sines of image
angles): lines are scaled to a unit normal before any dot product, points
to w = 1.  That keeps the servo controller's stacked error consistently
scaled regardless of how features were produced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

# Relative tolerance for deciding two homogeneous points coincide.
_COINCIDENT_TOL = 1e-12


class GeometryError(Exception):
    """Base class for constraint-evaluation failures."""


class CoincidentPoints(GeometryError):
    """Two points that must span a line normalize to the same point."""


class PointAtInfinity(GeometryError):
    """A finite point was required but the homogeneous scale is zero."""


@dataclass(frozen=True, slots=True)
class HomogeneousPoint:
    """A point (x, y, w) on the projective image plane."""

    x: float
    y: float
    w: float = 1.0

    def __post_init__(self):
        for v in (self.x, self.y, self.w):
            if not math.isfinite(v):
                raise ValueError(f"non-finite point component {v!r}")
        if self.x == 0.0 and self.y == 0.0 and self.w == 0.0:
            raise ValueError("homogeneous point must not be the zero vector")

    @property
    def is_finite(self) -> bool:
        return self.w != 0.0

    def normalized(self) -> "HomogeneousPoint":
        """Scale to w = 1. Raises PointAtInfinity for ideal points."""
        if not self.is_finite:
            raise PointAtInfinity(f"cannot normalize ideal point {self}")
        return HomogeneousPoint(self.x / self.w, self.y / self.w, 1.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w], dtype=float)


@dataclass(frozen=True, slots=True)
class HomogeneousLine:
    """A line a*x + b*y + c*w = 0 in pixel coordinates."""

    a: float
    b: float
    c: float

    def normalized(self) -> "HomogeneousLine":
        """Scale so a^2 + b^2 = 1 with the leading nonzero of (a, b) positive.

        The sign convention makes serialization and frame-to-frame residuals
        deterministic; eigenvector- or cross-product-built lines otherwise
        carry an arbitrary sign.
        """
        norm = math.hypot(self.a, self.b)
        if norm < 1e-15:
            raise GeometryError("cannot normalize the line at infinity")
        a, b, c = self.a / norm, self.b / norm, self.c / norm
        if a < 0.0 or (a == 0.0 and b < 0.0):
            a, b, c = -a, -b, -c
        return HomogeneousLine(a, b, c)

    def dot(self, p: HomogeneousPoint) -> float:
        return self.a * p.x + self.b * p.y + self.c * p.w

    def direction(self) -> tuple[float, float]:
        """Unit direction vector of the line (perpendicular to its normal)."""
        n = self.normalized()
        return (n.b, -n.a)

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c], dtype=float)


class ConstraintKind(str, Enum):
    P2P = "p2p"
    P2L = "p2l"
    L2L = "l2l"
    PAR = "par"


#: Number of feature slots each constraint kind consumes.
SLOT_COUNTS = {
    ConstraintKind.P2P: 2,
    ConstraintKind.P2L: 3,
    ConstraintKind.L2L: 4,
    ConstraintKind.PAR: 4,
}

#: Residual dimension per constraint kind.
ERROR_DIMS = {
    ConstraintKind.P2P: 2,
    ConstraintKind.P2L: 1,
    ConstraintKind.L2L: 2,
    ConstraintKind.PAR: 1,
}


@dataclass(frozen=True)
class GeometricConstraint:
    """A typed constraint over named feature slots with a stacking weight."""

    kind: ConstraintKind
    slots: tuple[str, ...]
    weight: float = 1.0

    def __post_init__(self):
        kind = ConstraintKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "slots", tuple(self.slots))
        expected = SLOT_COUNTS[kind]
        if len(self.slots) != expected:
            raise ValueError(
                f"{kind.value} takes {expected} slots, got {len(self.slots)}"
            )
        if not (self.weight >= 0.0):
            raise ValueError("constraint weight must be >= 0")


@dataclass(eq=False)
class ErrorVector:
    """Residual of one constraint (or of a weighted stack of them)."""

    values: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("error vector has non-finite entries")

    def __len__(self) -> int:
        return self.values.size

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values))) if len(self) else 0.0


def line_through(p1: HomogeneousPoint, p2: HomogeneousPoint) -> HomogeneousLine:
    """Line spanned by two distinct points (their cross product), normalized."""
    v1 = p1.as_array()
    v2 = p2.as_array()
    cross = np.cross(v1, v2)
    scale = np.linalg.norm(v1) * np.linalg.norm(v2)
    if np.linalg.norm(cross) <= _COINCIDENT_TOL * scale:
        raise CoincidentPoints(f"{p1} and {p2} span no line")
    return HomogeneousLine(*cross).normalized()


def eval_p2p(f1: HomogeneousPoint, f2: HomogeneousPoint) -> ErrorVector:
    """Point-to-point residual: Euclidean coordinate difference f2 - f1."""
    p1 = f1.normalized()
    p2 = f2.normalized()
    return ErrorVector(np.array([p2.x - p1.x, p2.y - p1.y]), source="p2p")


def eval_p2l(
    f1: HomogeneousPoint, f2: HomogeneousPoint, f3: HomogeneousPoint
) -> ErrorVector:
    """Point-to-line residual: signed pixel distance from f1 to line(f2, f3)."""
    line = line_through(f2, f3)
    return ErrorVector(np.array([line.dot(f1.normalized())]), source="p2l")


def eval_l2l(
    f1: HomogeneousPoint,
    f2: HomogeneousPoint,
    f3: HomogeneousPoint,
    f4: HomogeneousPoint,
) -> ErrorVector:
    """Line-to-line residual as the pair of distances from f1, f2 to line(f3, f4).

    Kept as a 2-vector: the scalar sum of the two distances cancels for
    symmetric crossing lines and so cannot witness convergence.  Use
    eval_l2l_sum for the scalar diagnostic.
    """
    line = line_through(f3, f4)
    return ErrorVector(
        np.array([line.dot(f1.normalized()), line.dot(f2.normalized())]),
        source="l2l",
    )


def eval_l2l_sum(
    f1: HomogeneousPoint,
    f2: HomogeneousPoint,
    f3: HomogeneousPoint,
    f4: HomogeneousPoint,
) -> float:
    """Scalar sum of the two l2l distances (diagnostic only)."""
    return float(np.sum(eval_l2l(f1, f2, f3, f4).values))


def eval_par(
    f1: HomogeneousPoint,
    f2: HomogeneousPoint,
    f3: HomogeneousPoint,
    f4: HomogeneousPoint,
) -> ErrorVector:
    """Parallelism residual between line(f1, f2) and line(f3, f4).

    The third homogeneous component of the cross product of the two
    unit-normal lines, i.e. the sine of the angle between them.  The first
    two components locate the vanishing point and do not vanish at
    convergence, so only the third is a usable residual.
    """
    l12 = line_through(f1, f2)
    l34 = line_through(f3, f4)
    return ErrorVector(np.array([l12.a * l34.b - l12.b * l34.a]), source="par")


_EVALUATORS = {
    ConstraintKind.P2P: eval_p2p,
    ConstraintKind.P2L: eval_p2l,
    ConstraintKind.L2L: eval_l2l,
    ConstraintKind.PAR: eval_par,
}


def evaluate_points(
    kind: ConstraintKind, points: Sequence[HomogeneousPoint]
) -> ErrorVector:
    """Evaluate a constraint kind on already-resolved slot points."""
    kind = ConstraintKind(kind)
    expected = SLOT_COUNTS[kind]
    if len(points) != expected:
        raise ValueError(f"{kind.value} takes {expected} points, got {len(points)}")
    return _EVALUATORS[kind](*points)


def stack_errors(
    constraints: Sequence[tuple[GeometricConstraint, ErrorVector]],
) -> ErrorVector:
    """Concatenate weighted residuals in input order."""
    if not constraints:
        raise ValueError("cannot stack an empty constraint list")
    parts = [c.weight * e.values for c, e in constraints]
    return ErrorVector(np.concatenate(parts), source="stack")
