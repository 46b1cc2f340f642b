"""Rigid-body helpers: poses, DH transforms and quaternion conversions.

Quaternions are scalar-first ``(w, x, y, z)`` throughout the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

TWO_PI = 2.0 * np.pi


def wrap_angle(angle):
    """Map angles to the half-open interval (-pi, pi]."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(angle, dtype=float), TWO_PI)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def quat_to_matrix(quat) -> np.ndarray:
    w, x, y, z = quat
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def matrix_to_quat(matrix) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(matrix).as_quat()
    q = np.array([w, x, y, z])
    # canonical hemisphere keeps serialized files stable
    return q if w >= 0 else -q


def quat_to_rotvec(quat) -> np.ndarray:
    w, x, y, z = quat
    return Rotation.from_quat([x, y, z, w]).as_rotvec()


def rotvec_to_quat(rotvec) -> np.ndarray:
    x, y, z, w = Rotation.from_rotvec(rotvec).as_quat()
    q = np.array([w, x, y, z])
    return q if w >= 0 else -q


def normalize_quat(quat, atol: float = 1e-6) -> np.ndarray:
    """Return a unit quaternion; refuse inputs that are far from unit length."""
    q = np.asarray(quat, dtype=float)
    if q.shape != (4,) or not np.all(np.isfinite(q)):
        raise ValueError(f"quaternion must be 4 finite numbers, got {quat!r}")
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > atol:
        raise ValueError(f"quaternion norm {norm:.3g} is not 1")
    return q / norm


def dh_matrix(a, d, alpha, theta) -> np.ndarray:
    """Classic DH transform Rz(theta) Tz(d) Tx(a) Rx(alpha).

    Arguments broadcast against each other; the result has shape
    ``broadcast_shape + (4, 4)``.
    """
    a, d, alpha, theta = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, d, alpha, theta)))
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(alpha), np.sin(alpha)
    T = np.zeros(theta.shape + (4, 4))
    T[..., 0, 0] = ct
    T[..., 0, 1] = -st * ca
    T[..., 0, 2] = st * sa
    T[..., 0, 3] = a * ct
    T[..., 1, 0] = st
    T[..., 1, 1] = ct * ca
    T[..., 1, 2] = -ct * sa
    T[..., 1, 3] = a * st
    T[..., 2, 1] = sa
    T[..., 2, 2] = ca
    T[..., 2, 3] = d
    T[..., 3, 3] = 1.0
    return T


def homogeneous(rotation, translation) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = rotation
    T[:3, 3] = translation
    return T


def invert_homogeneous(T: np.ndarray) -> np.ndarray:
    """Invert (a stack of) rigid 4x4 transforms."""
    R = T[..., :3, :3]
    t = T[..., :3, 3]
    out = np.zeros_like(T)
    Rt = np.swapaxes(R, -1, -2)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, t)
    out[..., 3, 3] = 1.0
    return out


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping child coordinates into parent coordinates."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3].copy(), T[:3, 3].copy())

    @classmethod
    def from_quat(cls, quat, translation) -> "Pose":
        return cls(quat_to_matrix(quat), np.asarray(translation, dtype=float))

    @property
    def matrix(self) -> np.ndarray:
        return homogeneous(self.rotation, self.translation)

    @property
    def quat(self) -> np.ndarray:
        return matrix_to_quat(self.rotation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        """Transform a point (3,) or an array of points (..., 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation
