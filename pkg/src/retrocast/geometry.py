"""Rigid 2D transforms between ego frames, trajectory containers, and
constant-velocity history initialization.

Motion is modeled strictly in the ground plane; z on boxes is carried through
untouched. All values are immutable after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ValidationError(ValueError):
    """Raised when inputs violate finiteness or positivity contracts."""


def _normalize_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class SE2Transform:
    """Rotation (radians) followed by translation (meters)."""

    rotation: float
    translation: tuple[float, float]

    def __post_init__(self):
        if not (math.isfinite(self.rotation)
                and all(math.isfinite(t) for t in self.translation)):
            raise ValidationError(f"non-finite SE2 fields: {self}")
        object.__setattr__(self, "rotation", _normalize_angle(self.rotation))
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))

    @staticmethod
    def identity() -> "SE2Transform":
        return SE2Transform(0.0, (0.0, 0.0))

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.array([[c, -s], [s, c]])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Rotate then translate a (..., 2) array of points."""
        pts = np.asarray(pts, dtype=np.float64)
        if not np.all(np.isfinite(pts)):
            raise ValidationError("non-finite points passed to SE2 apply")
        return pts @ self.matrix.T + np.asarray(self.translation)

    def compose(self, other: "SE2Transform") -> "SE2Transform":
        """Transform equivalent to applying `other` first, then `self`."""
        t = self.apply(np.asarray(other.translation))
        return SE2Transform(self.rotation + other.rotation, (t[0], t[1]))

    def invert(self) -> "SE2Transform":
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        tx, ty = self.translation
        return SE2Transform(-self.rotation,
                            (-(c * tx + s * ty), -(-s * tx + c * ty)))


def se2_apply(T: SE2Transform, pts: np.ndarray) -> np.ndarray:
    return T.apply(pts)


def se2_compose(a: SE2Transform, b: SE2Transform) -> SE2Transform:
    return a.compose(b)


@dataclass(frozen=True)
class Trajectory:
    """Sequence of (x, y) positions at a fixed step duration."""

    positions: np.ndarray
    dt: float

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise ValidationError(f"trajectory positions must be (T, 2), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValidationError("non-finite trajectory positions")
        if self.dt <= 0:
            raise ValidationError(f"dt must be positive, got {self.dt}")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return self.positions.shape[0]


@dataclass(frozen=True)
class BoundingBox:
    """Upright box: center (x, y, z), size (w, l, h), yaw, planar velocity."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ValidationError(f"box sizes must be positive, got {self.size}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))

    @property
    def center_xy(self) -> np.ndarray:
        return np.array(self.center[:2])

    @property
    def diagonal_xy(self) -> float:
        return math.hypot(self.size[0], self.size[1])


def constant_velocity_past(box: BoundingBox, horizon: int, dt: float) -> Trajectory:
    """Backward linear extrapolation: step -k sits at center - k*dt*velocity.

    Returns `horizon` strictly-past positions (the t=0 anchor, equal to the
    box center, is not included).
    """
    if dt <= 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    if horizon < 1:
        raise ValidationError(f"horizon must be >= 1, got {horizon}")
    k = np.arange(1, horizon + 1)[:, None]
    pos = box.center_xy[None, :] - k * dt * np.asarray(box.velocity)[None, :]
    return Trajectory(pos, dt)
