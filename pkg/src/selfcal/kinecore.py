"""Robot structure, classic DH forward kinematics and calibration parameters.

Convention: every link transform is the classic (distal) Denavit-Hartenberg
product ``Rz(theta_offset + q) Tz(d) Tx(a) Rx(alpha)``.  Lengths are in
meters and angles in radians everywhere.

A :class:`RobotModel` is a tree of frames rooted at :data:`ROOT`.  Frames are
either :class:`DHLink` (revolute or fixed) or :class:`MountTransform` (a
constant rigid offset, optionally calibratable).  Frames must be declared
parent-before-child.  Sensors from :mod:`selfcal.sensemodel` hang off the
frames and contribute their own calibratable scalars.

Every scalar that may be calibrated is a *slot* ``kind/owner/field``; the
model's ``mask`` selects the free slots, and :func:`pack` / :func:`unpack`
move between a model and the flat :class:`ParameterVector`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .geometry import (
    Pose,
    dh_matrix,
    homogeneous,
    normalize_quat,
    quat_to_matrix,
    quat_to_rotvec,
    rotvec_to_quat,
    wrap_angle,
)

ROOT = "root"

LENGTH = "length"
ANGLE = "angle"
DEFAULT_SCALES = {LENGTH: 1.0, ANGLE: 1.0}

DH_FIELDS = (("a", LENGTH), ("d", LENGTH), ("alpha", ANGLE), ("theta", ANGLE))
POSE_FIELDS = (
    ("tx", LENGTH), ("ty", LENGTH), ("tz", LENGTH),
    ("rx", ANGLE), ("ry", ANGLE), ("rz", ANGLE),
)


class ModelError(ValueError):
    """Raised for malformed models or inputs rejected by kinematic operations."""


def _finite(values, what: str) -> None:
    if not np.all(np.isfinite(np.asarray(values, dtype=float))):
        raise ModelError(f"{what} must be finite")


def pose_params(translation, quat) -> list[float]:
    return [*map(float, translation), *map(float, quat_to_rotvec(quat))]


def pose_from_params(values: Mapping[str, float], translation, quat):
    """Apply a partial ``tx..rz`` override to a translation/quaternion pair."""
    t = [float(v) for v in translation]
    rv = quat_to_rotvec(quat)
    for i, name in enumerate(("tx", "ty", "tz")):
        if name in values:
            t[i] = float(values[name])
    if any(k in values for k in ("rx", "ry", "rz")):
        for i, name in enumerate(("rx", "ry", "rz")):
            if name in values:
                rv[i] = float(values[name])
        quat = rotvec_to_quat(rv)
    return tuple(t), tuple(float(x) for x in quat)


@dataclass(frozen=True)
class DHLink:
    """One DH link frame; its pose is ``parent @ dh(a, d, alpha, theta_offset + q)``."""

    name: str
    parent: str
    a: float = 0.0
    d: float = 0.0
    alpha: float = 0.0
    theta_offset: float = 0.0
    joint: str = "revolute"
    limits: tuple[float, float] = (-math.pi, math.pi)

    def __post_init__(self):
        if self.joint not in ("revolute", "fixed"):
            raise ModelError(f"{self.name}: joint must be 'revolute' or 'fixed', got {self.joint!r}")
        _finite([self.a, self.d, self.alpha, self.theta_offset], f"DH parameters of {self.name}")
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "d", float(self.d))
        object.__setattr__(self, "alpha", wrap_angle(self.alpha))
        object.__setattr__(self, "theta_offset", wrap_angle(self.theta_offset))
        lo, hi = (float(x) for x in self.limits)
        if lo > hi:
            raise ModelError(f"{self.name}: joint limits {self.limits} are inverted")
        object.__setattr__(self, "limits", (lo, hi))

    @property
    def is_revolute(self) -> bool:
        return self.joint == "revolute"

    def local_matrix(self, q=0.0) -> np.ndarray:
        return dh_matrix(self.a, self.d, self.alpha, self.theta_offset + np.asarray(q, dtype=float))

    def param_fields(self):
        return DH_FIELDS

    def param_values(self) -> list[float]:
        return [self.a, self.d, self.alpha, self.theta_offset]

    def with_params(self, values: Mapping[str, float]) -> "DHLink":
        renamed = {("theta_offset" if k == "theta" else k): v for k, v in values.items()}
        return replace(self, **renamed)


@dataclass(frozen=True)
class MountTransform:
    """Constant rigid offset from ``parent``; rotation is a unit quaternion (w, x, y, z)."""

    name: str
    parent: str
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    calibratable: bool = False

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float)
        if t.shape != (3,):
            raise ModelError(f"{self.name}: translation must have 3 components")
        _finite(t, f"translation of {self.name}")
        try:
            q = normalize_quat(self.rotation)
        except ValueError as exc:
            raise ModelError(f"{self.name}: {exc}") from None
        object.__setattr__(self, "translation", tuple(float(x) for x in t))
        object.__setattr__(self, "rotation", tuple(float(x) for x in q))

    @classmethod
    def from_pose(cls, name: str, parent: str, pose: Pose, calibratable: bool = False):
        return cls(name, parent, tuple(pose.translation), tuple(pose.quat), calibratable)

    @property
    def pose(self) -> Pose:
        return Pose(quat_to_matrix(self.rotation), np.array(self.translation))

    @cached_property
    def matrix(self) -> np.ndarray:
        T = homogeneous(quat_to_matrix(self.rotation), self.translation)
        T.flags.writeable = False
        return T

    def param_fields(self):
        return POSE_FIELDS if self.calibratable else ()

    def param_values(self) -> list[float]:
        return pose_params(self.translation, self.rotation) if self.calibratable else []

    def with_params(self, values: Mapping[str, float]) -> "MountTransform":
        t, q = pose_from_params(values, self.translation, self.rotation)
        return replace(self, translation=t, rotation=q)


Frame = DHLink | MountTransform


class Slot(NamedTuple):
    """One calibratable scalar of a model."""

    kind: str
    owner: str
    field: str
    unit: str

    @property
    def key(self) -> str:
        return f"{self.kind}/{self.owner}/{self.field}"


# (slot kind, RobotModel attribute) in packing order
GROUPS = (
    ("frame", "frames"),
    ("camera", "cameras"),
    ("marker", "markers"),
    ("patch", "patches"),
    ("plane", "planes"),
    ("device", "devices"),
)


@dataclass(frozen=True, eq=False)
class RobotModel:
    """Frame tree plus attached sensors and the calibration mask.

    ``mask`` is a tuple of booleans aligned with :meth:`slots`; ``None`` means
    nothing is free.
    """

    frames: tuple[Frame, ...]
    cameras: tuple = ()
    markers: tuple = ()
    patches: tuple = ()
    planes: tuple = ()
    devices: tuple = ()
    chains: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    mask: tuple[bool, ...] | None = None

    def __post_init__(self):
        for _, attr in GROUPS:
            object.__setattr__(self, attr, tuple(getattr(self, attr)))
        object.__setattr__(self, "chains", {k: tuple(v) for k, v in dict(self.chains).items()})
        seen = {ROOT}
        for f in self.frames:
            if f.name in seen:
                raise ModelError(f"duplicate frame id {f.name!r}")
            if f.parent not in seen:
                raise ModelError(
                    f"frame {f.name!r} references parent {f.parent!r} that is not declared before it"
                )
            seen.add(f.name)
        for kind, attr in GROUPS[1:]:
            names = [s.name for s in getattr(self, attr)]
            if len(set(names)) != len(names):
                raise ModelError(f"duplicate {kind} id")
        for s in (*self.cameras, *self.patches):
            if s.mount.parent not in seen:
                raise ModelError(f"{s.name!r} mounted on unknown frame {s.mount.parent!r}")
        for m in self.markers:
            if m.parent not in seen:
                raise ModelError(f"marker {m.name!r} attached to unknown frame {m.parent!r}")
        for cname, path in self.chains.items():
            if not path or tuple(self.path(path[-1])) != path:
                raise ModelError(f"chain {cname!r} is not a root-to-frame path")
        n = len(self.slots)
        mask = (False,) * n if self.mask is None else tuple(bool(b) for b in self.mask)
        if len(mask) != n:
            raise ModelError(f"mask has {len(mask)} entries, model has {n} parameter slots")
        object.__setattr__(self, "mask", mask)

    # structure -----------------------------------------------------------

    @cached_property
    def frame_index(self) -> dict[str, int]:
        """Frame id -> row in :func:`frame_poses` output (root is 0)."""
        idx = {ROOT: 0}
        for i, f in enumerate(self.frames):
            idx[f.name] = i + 1
        return idx

    def frame(self, name: str) -> Frame:
        if name == ROOT or name not in self.frame_index:
            raise ModelError(f"unknown frame id {name!r}")
        return self.frames[self.frame_index[name] - 1]

    def path(self, name: str) -> list[str]:
        """Frame ids from the first child of root down to ``name`` (empty for root)."""
        if name not in self.frame_index:
            raise ModelError(f"unknown frame id {name!r}")
        out = []
        while name != ROOT:
            out.append(name)
            name = self.frames[self.frame_index[name] - 1].parent
        return out[::-1]

    @cached_property
    def _fk_plan(self):
        """Per-frame (parent row, DH column, constant matrix) plus the DH tables."""
        plan, dh = [], []
        for f in self.frames:
            parent = self.frame_index[f.parent]
            if isinstance(f, DHLink):
                col = self.joint_index[f.name] if f.is_revolute else -1
                plan.append((parent, len(dh), None))
                dh.append((f.a, f.d, f.alpha, f.theta_offset, col))
            else:
                plan.append((parent, -1, f.matrix))
        tab = np.array(dh, dtype=float).reshape(-1, 5)
        return plan, tab[:, 0], tab[:, 1], tab[:, 2], tab[:, 3], tab[:, 4].astype(int)

    @cached_property
    def joint_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.frames if isinstance(f, DHLink) and f.is_revolute)

    @cached_property
    def joint_index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.joint_names)}

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def joint_limits(self) -> np.ndarray:
        return np.array([self.frame(n).limits for n in self.joint_names]).reshape(-1, 2)

    def sensor(self, kind: str, name: str):
        attr = dict(GROUPS)[kind]
        for s in getattr(self, attr):
            if s.name == name:
                return s
        raise ModelError(f"unknown {kind} id {name!r}")

    def camera(self, name: str):
        return self.sensor("camera", name)

    def marker(self, name: str):
        return self.sensor("marker", name)

    def patch(self, name: str):
        return self.sensor("patch", name)

    def plane(self, name: str):
        return self.sensor("plane", name)

    def device(self, name: str):
        return self.sensor("device", name)

    # parameters ----------------------------------------------------------

    @cached_property
    def slots(self) -> tuple[Slot, ...]:
        out = []
        for kind, attr in GROUPS:
            for item in getattr(self, attr):
                for fname, unit in item.param_fields():
                    out.append(Slot(kind, item.name, fname, unit))
        return tuple(out)

    @cached_property
    def slot_keys(self) -> tuple[str, ...]:
        return tuple(s.key for s in self.slots)

    def all_values(self) -> np.ndarray:
        vals = []
        for _, attr in GROUPS:
            for item in getattr(self, attr):
                vals.extend(item.param_values())
        return np.array(vals, dtype=float)

    @property
    def free_slots(self) -> tuple[Slot, ...]:
        return tuple(s for s, m in zip(self.slots, self.mask) if m)

    def with_mask(self, mask) -> "RobotModel":
        """Return a copy with a new mask.

        ``mask`` may be a boolean sequence, a predicate ``Slot -> bool``, or an
        iterable of slot keys (``fnmatch`` patterns allowed).
        """
        return replace(self, mask=resolve_mask(self, mask))

    def with_owner_params(self, updates: Mapping[tuple[str, str], Mapping[str, float]]) -> "RobotModel":
        """Return a copy with ``{(kind, owner): {field: value}}`` applied."""
        changes = {}
        for kind, attr in GROUPS:
            items = getattr(self, attr)
            if not any((kind, it.name) in updates for it in items):
                continue
            changes[attr] = tuple(
                it.with_params(updates[(kind, it.name)]) if (kind, it.name) in updates else it
                for it in items
            )
        return replace(self, **changes) if changes else self


def resolve_mask(model: RobotModel, spec) -> tuple[bool, ...]:
    from fnmatch import fnmatchcase

    slots = model.slots
    if callable(spec):
        return tuple(bool(spec(s)) for s in slots)
    spec = list(spec)
    if all(isinstance(x, (bool, np.bool_)) for x in spec) and len(spec) == len(slots):
        return tuple(bool(x) for x in spec)
    patterns = [str(p) for p in spec]
    return tuple(any(fnmatchcase(s.key, p) for p in patterns) for s in slots)


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Flat view of the free parameters of a model.

    ``values`` are in native units; the optimizer works on ``values / scales``.
    """

    values: np.ndarray
    scales: np.ndarray
    index: tuple[Slot, ...]

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        s = np.array(self.scales, dtype=float)
        if v.shape != (len(self.index),) or s.shape != v.shape:
            raise ModelError("values, scales and index must have equal length")
        if np.any(s <= 0):
            raise ModelError("scales must be strictly positive")
        v.flags.writeable = False
        s.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "scales", s)
        object.__setattr__(self, "index", tuple(self.index))

    def __len__(self) -> int:
        return len(self.index)

    @property
    def keys(self) -> list[str]:
        return [s.key for s in self.index]

    @property
    def scaled(self) -> np.ndarray:
        return self.values / self.scales

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(np.asarray(values, dtype=float), self.scales, self.index)

    def from_scaled(self, z) -> "ParameterVector":
        return self.with_values(np.asarray(z, dtype=float) * self.scales)


def pack(model: RobotModel, scales: Mapping[str, float] | None = None) -> ParameterVector:
    """Collect the masked scalars of ``model`` into a ParameterVector."""
    unit_scale = {**DEFAULT_SCALES, **(scales or {})}
    all_vals = model.all_values()
    sel = np.array(model.mask, dtype=bool)
    index = model.free_slots
    return ParameterVector(
        all_vals[sel] if sel.size else np.zeros(0),
        np.array([unit_scale[s.unit] for s in index]),
        index,
    )


def unpack(model: RobotModel, params: ParameterVector) -> RobotModel:
    """Write ``params`` back into ``model``; unmasked scalars are untouched."""
    if tuple(params.index) != model.free_slots:
        raise ModelError(
            f"parameter vector ({len(params)} entries) does not match model mask "
            f"({len(model.free_slots)} free slots)"
        )
    updates: dict[tuple[str, str], dict[str, float]] = {}
    for slot, v in zip(params.index, params.values):
        updates.setdefault((slot.kind, slot.owner), {})[slot.field] = float(v)
    return model.with_owner_params(updates)


def apply_params(model: RobotModel, params: ParameterVector | None) -> RobotModel:
    if params is None:
        return model
    if not np.all(np.isfinite(params.values)):
        raise ModelError("non-finite parameter value")
    return unpack(model, params)


# forward kinematics --------------------------------------------------------

def _full_q(model: RobotModel, q, target: str) -> np.ndarray:
    """Expand a path-local or full joint vector into the full joint vector."""
    q = np.asarray(q, dtype=float).ravel()
    _finite(q, "joint vector")
    if q.size == model.n_joints:
        return q
    path_joints = [n for n in model.path(target) if n in model.joint_index]
    if q.size != len(path_joints):
        raise ModelError(
            f"q has {q.size} entries; expected {model.n_joints} (all joints) or "
            f"{len(path_joints)} (joints on the path to {target!r})"
        )
    full = np.zeros(model.n_joints)
    for n, v in zip(path_joints, q):
        full[model.joint_index[n]] = v
    return full


def fk(model: RobotModel, params: ParameterVector | None, q, target_frame: str) -> Pose:
    """Pose of ``target_frame`` in the root frame.

    ``q`` holds either one angle per revolute joint of the whole model, or one
    per revolute joint on the root-to-target path (in path order).
    """
    model = apply_params(model, params)
    path = model.path(target_frame)
    qf = _full_q(model, q, target_frame)
    T = np.eye(4)
    for name in path:
        f = model.frame(name)
        if isinstance(f, DHLink):
            qi = qf[model.joint_index[name]] if f.is_revolute else 0.0
            _finite(f.param_values(), f"DH parameters of {name}")
            T = T @ f.local_matrix(qi)
        else:
            T = T @ f.matrix
    return Pose.from_matrix(T)


def frame_poses(model: RobotModel, Q) -> np.ndarray:
    """Batched forward kinematics for every frame.

    ``Q`` has shape (M, n_joints).  Returns an array of shape (F + 1, M, 4, 4)
    whose row ``model.frame_index[name]`` holds the root pose of ``name``.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if Q.shape[1] != model.n_joints:
        raise ModelError(f"Q must have {model.n_joints} columns, got {Q.shape[1]}")
    M = Q.shape[0]
    plan, a, d, alpha, offset, cols = model._fk_plan
    theta = offset + np.where(cols >= 0, Q[:, np.maximum(cols, 0)], 0.0)
    local = dh_matrix(a, d, alpha, theta)
    out = np.empty((len(model.frames) + 1, M, 4, 4))
    out[0] = np.eye(4)
    for i, (parent, k, const) in enumerate(plan, start=1):
        out[i] = out[parent] @ (local[:, k] if const is None else const)
    return out


def local_transform(model: RobotModel, name: str, q_full) -> Pose:
    """Transform of frame ``name`` relative to its parent at configuration ``q_full``."""
    f = model.frame(name)
    if isinstance(f, DHLink):
        qi = q_full[model.joint_index[name]] if f.is_revolute else 0.0
        return Pose.from_matrix(f.local_matrix(qi))
    return f.pose


# perturbation --------------------------------------------------------------

def perturb(model: RobotModel, magnitudes: Mapping[str, float], seed: int) -> RobotModel:
    """Offset every masked scalar by U(-mag, +mag) of its unit class."""
    mags = {LENGTH: 0.0, ANGLE: 0.0, **magnitudes}
    if any(not np.isfinite(v) or v < 0 for v in mags.values()):
        raise ModelError(f"perturbation magnitudes must be finite and >= 0, got {magnitudes}")
    params = pack(model)
    rng = np.random.default_rng(seed)
    bound = np.array([mags[s.unit] for s in params.index])
    delta = rng.uniform(-1.0, 1.0, size=len(params)) * bound
    return unpack(model, params.with_values(params.values + delta))


def parameter_difference(a: RobotModel, b: RobotModel, slots: Sequence[Slot] | None = None) -> np.ndarray:
    """Per-slot difference ``a - b`` in native units, angles wrapped to (-pi, pi]."""
    keys = a.slot_keys
    if keys != b.slot_keys:
        raise ModelError("models have different parameter slots")
    diff = a.all_values() - b.all_values()
    units = [s.unit for s in a.slots]
    diff = np.array([wrap_angle(d) if u == ANGLE else d for d, u in zip(diff, units)])
    if slots is None:
        return diff
    pos = {k: i for i, k in enumerate(keys)}
    return diff[[pos[s.key] for s in slots]]


def unit_rms(diff: np.ndarray, slots: Iterable[Slot]) -> dict[str, float | None]:
    """RMS of ``diff`` per unit class (``None`` when a class is absent)."""
    slots = list(slots)
    out = {}
    for unit in (LENGTH, ANGLE):
        sel = [i for i, s in enumerate(slots) if s.unit == unit]
        out[unit] = float(np.sqrt(np.mean(diff[sel] ** 2))) if sel else None
    return out


def parameter_error(estimate: RobotModel, truth: RobotModel, slots: Sequence[Slot] | None = None) -> dict:
    """RMS of ``estimate - truth`` over ``slots`` (default: the free slots of ``estimate``).

    Keys ``length`` and ``angle`` hold the per-class RMS; ``overall`` is the
    RMS over every slot with lengths in meters and angles in radians, the
    same units the solver works in.
    """
    slots = list(estimate.free_slots if slots is None else slots)
    diff = parameter_difference(estimate, truth, slots)
    out = unit_rms(diff, slots)
    out["overall"] = float(np.sqrt(np.mean(diff ** 2))) if slots else None
    return out
