"""Things that close a kinematic chain: cameras, markers, skin patches, planes
and external metrology devices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .geometry import Pose, quat_to_matrix
from .kinecore import (
    ANGLE,
    LENGTH,
    POSE_FIELDS,
    ModelError,
    ParameterVector,
    RobotModel,
    MountTransform,
    apply_params,
    fk,
    pose_from_params,
    pose_params,
)


class BehindCameraError(ValueError):
    """A point with z <= 0 in the camera frame cannot be projected."""


@dataclass(frozen=True)
class CameraModel:
    """Distortion-free pinhole camera; ``mount`` places the optical frame on a robot frame.

    The optical frame follows the usual convention: z along the optical axis,
    x to the right and y down in the image.
    """

    name: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    mount: MountTransform

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ModelError(f"camera {self.name}: focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ModelError(f"camera {self.name}: principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, uv) -> bool:
        u, v = uv
        return 0.0 <= u <= self.width and 0.0 <= v <= self.height

    def param_fields(self):
        return self.mount.param_fields()

    def param_values(self):
        return self.mount.param_values()

    def with_params(self, values):
        return replace(self, mount=self.mount.with_params(values))


@dataclass(frozen=True)
class MarkerPoint:
    """A named point fixed in a robot frame (fiducial marker, fingertip, ...)."""

    name: str
    parent: str
    position: tuple[float, float, float]
    calibratable: bool = False

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float)
        if p.shape != (3,) or not np.all(np.isfinite(p)):
            raise ModelError(f"marker {self.name}: position must be 3 finite numbers")
        object.__setattr__(self, "position", tuple(float(x) for x in p))

    def param_fields(self):
        return (("x", LENGTH), ("y", LENGTH), ("z", LENGTH)) if self.calibratable else ()

    def param_values(self):
        return list(self.position) if self.calibratable else []

    def with_params(self, values):
        p = list(self.position)
        for i, k in enumerate("xyz"):
            if k in values:
                p[i] = float(values[k])
        return replace(self, position=tuple(p))


@dataclass(frozen=True)
class TaxelPatch:
    """Skin patch: taxel positions in the patch frame, patch frame mounted on a link."""

    name: str
    mount: MountTransform
    taxels: tuple[tuple[float, float, float], ...]
    taxel_ids: tuple[int, ...] | None = None

    def __post_init__(self):
        pts = np.asarray(self.taxels, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ModelError(f"patch {self.name}: needs a non-empty (K, 3) taxel list")
        if not np.all(np.isfinite(pts)):
            raise ModelError(f"patch {self.name}: taxel positions must be finite")
        ids = tuple(range(len(pts))) if self.taxel_ids is None else tuple(int(i) for i in self.taxel_ids)
        if len(ids) != len(pts) or len(set(ids)) != len(ids):
            raise ModelError(f"patch {self.name}: taxel ids must be unique, one per taxel")
        object.__setattr__(self, "taxels", tuple(tuple(float(x) for x in p) for p in pts))
        object.__setattr__(self, "taxel_ids", ids)

    def taxel(self, taxel_id: int) -> np.ndarray:
        try:
            return np.array(self.taxels[self.taxel_ids.index(int(taxel_id))])
        except ValueError:
            raise ModelError(f"patch {self.name} has no taxel {taxel_id}") from None

    def param_fields(self):
        return self.mount.param_fields()

    def param_values(self):
        return self.mount.param_values()

    def with_params(self, values):
        return replace(self, mount=self.mount.with_params(values))


@dataclass(frozen=True)
class PlaneParam:
    """Plane ``{p : n . p = offset}`` with n given by azimuth/elevation (root frame)."""

    name: str
    azimuth: float
    elevation: float
    offset: float
    calibratable: bool = False

    def param_fields(self):
        if not self.calibratable:
            return ()
        return (("azimuth", ANGLE), ("elevation", ANGLE), ("offset", LENGTH))

    def param_values(self):
        return [self.azimuth, self.elevation, self.offset] if self.calibratable else []

    def with_params(self, values):
        return replace(self, **{k: float(v) for k, v in values.items()})


@dataclass(frozen=True)
class ExternalDevice:
    """External 3D metrology device; ``rotation``/``translation`` give the
    device frame expressed in the root frame."""

    name: str
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    noise_sigma: float = 0.0
    calibratable: bool = False

    def __post_init__(self):
        # reuse MountTransform validation for the quaternion
        m = MountTransform(self.name, "root", self.translation, self.rotation)
        object.__setattr__(self, "translation", m.translation)
        object.__setattr__(self, "rotation", m.rotation)

    @property
    def pose(self) -> Pose:
        return Pose(quat_to_matrix(self.rotation), np.array(self.translation))

    def param_fields(self):
        return POSE_FIELDS if self.calibratable else ()

    def param_values(self):
        return pose_params(self.translation, self.rotation) if self.calibratable else []

    def with_params(self, values: Mapping[str, float]):
        t, q = pose_from_params(values, self.translation, self.rotation)
        return replace(self, translation=t, rotation=q)


def project(camera: CameraModel, point_in_camera) -> np.ndarray:
    """Pinhole projection of a camera-frame point to pixel (u, v)."""
    x, y, z = np.asarray(point_in_camera, dtype=float)
    if not z > 0:
        raise BehindCameraError(f"point at z={z:.4g} m is not in front of camera {camera.name}")
    return np.array([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy])


def project_many(camera: CameraModel, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`project`; returns (pixels, in_front) with NaN pixels behind."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    z = P[:, 2]
    ok = z > 0
    zs = np.where(ok, z, np.nan)
    uv = np.stack([camera.fx * P[:, 0] / zs + camera.cx, camera.fy * P[:, 1] / zs + camera.cy], axis=1)
    return uv, ok


def unproject(camera: CameraModel, uv) -> np.ndarray:
    """Normalized ray (x/z, y/z) of a pixel."""
    u, v = uv
    return np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy])


def plane_normal(plane: PlaneParam) -> np.ndarray:
    ce = np.cos(plane.elevation)
    return np.array([ce * np.cos(plane.azimuth), ce * np.sin(plane.azimuth), np.sin(plane.elevation)])


def plane_distance(plane: PlaneParam, point) -> float | np.ndarray:
    """Signed distance(s) of point(s) from the plane."""
    return np.asarray(point, dtype=float) @ plane_normal(plane) - plane.offset


def plane_from_normal(name: str, normal, offset: float, calibratable: bool = False) -> PlaneParam:
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    return PlaneParam(name, float(np.arctan2(n[1], n[0])), float(np.arcsin(np.clip(n[2], -1, 1))),
                      float(offset), calibratable)


def sensor_pose(model: RobotModel, params: ParameterVector | None, q, mount: MountTransform) -> Pose:
    """Root pose of a mounted sensor frame."""
    return fk(model, params, q, mount.parent) @ mount.pose


def point_world(model: RobotModel, params: ParameterVector | None, q, marker_id: str) -> np.ndarray:
    model = apply_params(model, params)
    m = model.marker(marker_id)
    return fk(model, None, q, m.parent).apply(m.position)


def taxel_world(model: RobotModel, params: ParameterVector | None, q, patch_id: str, taxel_id: int) -> np.ndarray:
    """Root-frame position of one taxel: fk(link) then patch mount then taxel offset."""
    model = apply_params(model, params)
    patch = model.patch(patch_id)
    local = patch.taxel(taxel_id)
    return sensor_pose(model, None, q, patch.mount).apply(local)


def load_taxel_csv(path) -> dict[str, tuple[tuple[int, ...], np.ndarray]]:
    """Read ``patch_id, taxel_id, x, y, z`` rows into ``{patch: (ids, positions)}``."""
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            if lineno == 1 and row[0].strip() == "patch_id":
                continue
            if len(row) != 5:
                raise ModelError(f"{path}:{lineno}: expected 5 columns, got {len(row)}")
            pid, tid, *xyz = (c.strip() for c in row)
            rows.setdefault(pid, []).append((int(tid), [float(c) for c in xyz]))
    return {
        pid: (tuple(t for t, _ in items), np.array([p for _, p in items]))
        for pid, items in rows.items()
    }


def grid_patch(name: str, parent: str, nx: int, ny: int, pitch: float,
               mount_pose: Pose | None = None, calibratable: bool = True) -> TaxelPatch:
    """Flat ``nx`` x ``ny`` taxel grid centered on the patch origin in its x-y plane."""
    xs = (np.arange(nx) - (nx - 1) / 2) * pitch
    ys = (np.arange(ny) - (ny - 1) / 2) * pitch
    taxels = [(x, y, 0.0) for y in ys for x in xs]
    mount = MountTransform.from_pose(name, parent, mount_pose or Pose(), calibratable)
    return TaxelPatch(name, mount, tuple(taxels))
