"""Geometric primitives and the anchor-tag ranging model.

Everything downstream (simulator, dataset builder, classical solver) works in
a single metric world frame. A range measurement between a vehicle-mounted tag
and a fixed anchor follows

    d = scale * || p + R b - a || + bias

with vehicle position p, vehicle orientation R, tag body offset b, anchor
position a, and per-anchor calibration unknowns (scale, bias).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Vec3",
    "Rotation",
    "Pose",
    "TagMount",
    "AnchorParams",
    "tag_world_position",
    "range_model",
]


@dataclass(frozen=True)
class Vec3:
    """3-D point or vector in meters."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        for name in ("x", "y", "z"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"Vec3.{name} must be finite, got {v!r}")

    @classmethod
    def from_array(cls, a) -> "Vec3":
        a = np.asarray(a, dtype=float)
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    def __add__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x + other.x, self.y + other.y, self.z + other.z)

    def __sub__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x - other.x, self.y - other.y, self.z - other.z)

    def norm(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)


@dataclass(frozen=True)
class Rotation:
    """Unit quaternion (w, x, y, z), normalized on construction."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if not math.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion norm must be finite and nonzero")
        if abs(n - 1.0) > 1e-12:
            object.__setattr__(self, "w", self.w / n)
            object.__setattr__(self, "x", self.x / n)
            object.__setattr__(self, "y", self.y / n)
            object.__setattr__(self, "z", self.z / n)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_yaw(cls, yaw: float) -> "Rotation":
        """Rotation about +z by `yaw` radians."""
        return cls(math.cos(yaw / 2.0), 0.0, 0.0, math.sin(yaw / 2.0))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Rotation":
        ax = np.asarray(axis, dtype=float)
        n = float(np.linalg.norm(ax))
        if n < 1e-12:
            raise ValueError("axis must be nonzero")
        ax = ax / n
        s = math.sin(angle / 2.0)
        return cls(math.cos(angle / 2.0), ax[0] * s, ax[1] * s, ax[2] * s)

    @classmethod
    def from_quat_array(cls, q) -> "Rotation":
        q = np.asarray(q, dtype=float)
        return cls(float(q[0]), float(q[1]), float(q[2]), float(q[3]))

    def quat_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=float)

    def matrix(self) -> np.ndarray:
        """3x3 orthonormal rotation matrix."""
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ],
            dtype=float,
        )

    def apply(self, v: Vec3) -> Vec3:
        return Vec3.from_array(self.matrix() @ v.to_array())

    def compose(self, other: "Rotation") -> "Rotation":
        """Hamilton product self * other (apply `other` first)."""
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return Rotation(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def slerp(self, other: "Rotation", t: float) -> "Rotation":
        """Spherical interpolation, shortest arc, t in [0, 1]."""
        q0 = self.quat_array()
        q1 = other.quat_array()
        dot = float(np.dot(q0, q1))
        if dot < 0.0:
            q1 = -q1
            dot = -dot
        if dot > 1.0 - 1e-10:
            q = q0 + t * (q1 - q0)
            return Rotation.from_quat_array(q / np.linalg.norm(q))
        theta = math.acos(min(1.0, dot))
        s = math.sin(theta)
        a = math.sin((1.0 - t) * theta) / s
        b = math.sin(t * theta) / s
        return Rotation.from_quat_array(a * q0 + b * q1)


@dataclass(frozen=True)
class Pose:
    """Vehicle pose at a given time."""

    position: Vec3
    orientation: Rotation
    stamp: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.stamp) or self.stamp < 0.0:
            raise ValueError(f"stamp must be finite and >= 0, got {self.stamp!r}")


@dataclass(frozen=True)
class TagMount:
    """A radio tag rigidly mounted on the vehicle body frame."""

    tag_id: int
    body_offset: Vec3 = field(default_factory=lambda: Vec3(0.0, 0.0, 0.0))


@dataclass(frozen=True)
class AnchorParams:
    """Fixed anchor with its calibration unknowns (scale and additive bias)."""

    anchor_id: int
    position: Vec3
    scale: float = 1.0
    bias: float = 0.0

    def __post_init__(self):
        if not (self.scale > 0.0):
            raise ValueError(f"anchor scale must be > 0, got {self.scale!r}")


def tag_world_position(pose: Pose, mount: TagMount) -> Vec3:
    """World position of a mounted tag: p + R * body_offset."""
    return pose.position + pose.orientation.apply(mount.body_offset)


def range_model(pose: Pose, mount: TagMount, anchor: AnchorParams) -> float:
    """Modeled range in meters: scale * ||tag_world - anchor|| + bias.

    Can be negative if `bias` is negative and the geometric distance tiny;
    the simulator clamps, callers that need positivity must do the same.
    """
    tag = tag_world_position(pose, mount)
    return anchor.scale * (tag - anchor.position).norm() + anchor.bias
