"""Synthetic ground-truth experiments.

:func:`desk_rig` builds the default robot: two 6-DoF DH arms on a common torso,
a head camera, three markers per hand, a fingertip per arm, a 4 x 4 taxel
patch per forearm, a table plane and an external tracker.  :func:`synthesize`
perturbs a nominal robot into a "true" one and records noisy measurements of
every closure kind from the true robot.

Random draws are keyed per record (``[seed, kind, index]``), so records can
be generated in any order, or in parallel, and still give identical files.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .estimator import SolveOptions, levenberg_marquardt
from .geometry import Pose, quat_to_matrix
from .kinecore import (
    ROOT,
    DHLink,
    ModelError,
    MountTransform,
    RobotModel,
    frame_poses,
    perturb,
)
from .measurements import (
    KIND_ORDER,
    Dataset,
    ExternalPoint,
    Kind,
    PlaneContact,
    SelfContact,
    SelfObservation,
)
from .sensemodel import (
    CameraModel,
    ExternalDevice,
    MarkerPoint,
    grid_patch,
    plane_from_normal,
    plane_normal,
)
from .geometry import matrix_to_quat

HALF_PI = math.pi / 2

# nominal arm: (a, d, alpha, theta_offset); no two consecutive axes are parallel
ARM_DH = (
    (0.030, 0.120, -HALF_PI, 0.0),
    (0.020, 0.000, HALF_PI, -HALF_PI),
    (0.015, 0.250, -HALF_PI, 0.0),
    (0.010, 0.000, HALF_PI, 0.0),
    (0.010, 0.220, -HALF_PI, 0.0),
    (0.040, 0.000, HALF_PI, 0.0),
)
ARM_LIMITS = (
    (-1.6, 1.6), (-1.6, 1.6), (-1.6, 1.6), (-2.0, 2.0), (-1.6, 1.6), (-1.6, 1.6),
)

# kinds that need no free parameters beyond the arms' DH tables
DEFAULT_SIGMAS = {Kind.SELF_CONTACT: 5e-4, Kind.PLANE: 5e-4, Kind.SELF_OBSERVATION: 1.0,
                  Kind.EXTERNAL: 5e-4}


def _rot(axis: str, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose (z forward, x right, y down) looking from ``eye`` at ``target``."""
    eye, target, up = (np.asarray(v, dtype=float) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def desk_rig() -> RobotModel:
    """Default dual-arm rig with every closure kind available.

    Both shoulders hang off a fixed torso frame; the left base is tilted so
    that the two first-joint axes are neither parallel nor collinear.
    """
    frames: list = [MountTransform("torso", ROOT, (0.0, 0.0, 0.40))]
    bases = {
        "L": Pose(_rot("x", -HALF_PI) @ _rot("y", 0.35), np.array([0.0, 0.18, 0.0])),
        "R": Pose(_rot("x", HALF_PI) @ _rot("y", -0.25), np.array([0.0, -0.18, 0.0])),
    }
    chains = {}
    for side, base in bases.items():
        frames.append(MountTransform.from_pose(f"{side}0", "torso", base))
        parent = f"{side}0"
        names = [f"{side}0"]
        for i, ((a, d, alpha, th), lim) in enumerate(zip(ARM_DH, ARM_LIMITS), start=1):
            name = f"{side}{i}"
            sign = 1.0 if side == "L" else -1.0
            frames.append(DHLink(name, parent, a, d, sign * alpha, th, "revolute", lim))
            parent = name
            names.append(name)
        chains[f"{side.lower()}_arm"] = tuple(["torso", *names])

    markers = []
    for side in "LR":
        markers.append(MarkerPoint(f"{side}_tip", f"{side}6", (0.02, 0.01, 0.12)))
        markers.append(MarkerPoint(f"{side}_pad", f"{side}6", (-0.08, 0.06, 0.08)))
        markers.append(MarkerPoint(f"{side}_ref", f"{side}6", (0.10, -0.07, 0.05)))
        markers.append(MarkerPoint(f"{side}_m1", f"{side}6", (0.06, 0.09, 0.02)))
        markers.append(MarkerPoint(f"{side}_m2", f"{side}6", (-0.05, 0.04, 0.06)))
        markers.append(MarkerPoint(f"{side}_m3", f"{side}6", (0.01, -0.06, 0.08)))
        markers.append(MarkerPoint(f"{side}_elbow", f"{side}4", (0.03, -0.04, 0.08)))

    patches = []
    for side in "LR":
        # patch on the forearm surface, 4 x 4 taxels at 2 cm pitch
        mount = Pose(_rot("x", 0.3) @ _rot("y", 0.2), np.array([0.045, 0.0, 0.11]))
        patches.append(grid_patch(f"{side}_skin", f"{side}4", 4, 4, 0.02, mount, calibratable=True))

    cam_pose = _look_at((0.06, 0.0, 0.80), (0.45, 0.0, 0.25))
    camera = CameraModel("head", 500.0, 500.0, 320.0, 240.0, 640, 480,
                         MountTransform.from_pose("head", "torso", Pose(cam_pose.rotation,
                                                                        cam_pose.translation - [0, 0, 0.40]),
                                                  calibratable=True))
    table = plane_from_normal("table", (0.05, 0.02, 1.0), 0.12, calibratable=True)
    tracker_pose = _look_at((1.6, 0.4, 0.9), (0.3, 0.0, 0.3))
    tracker = ExternalDevice("tracker", tuple(tracker_pose.translation),
                             tuple(matrix_to_quat(tracker_pose.rotation)), 5e-4, calibratable=True)
    model = RobotModel(tuple(frames), (camera,), tuple(markers), tuple(patches), (table,), (tracker,), chains)
    return model.with_mask(["frame/L[1-6]/*", "frame/R[1-6]/*"])


# Default closure pairings for the desk rig.  Each kind touches the hand at a
# different point: one point per hand leaves a kind-specific combination of
# the last link's parameters unobservable, which a second kind then fixes.
DESK_CLOSURES = {
    "contact_pairs": [["L_tip", "R_skin"], ["R_tip", "L_skin"]],
    "plane_contacts": [["L_pad", "table"], ["R_pad", "table"]],
    "observations": [["head", "L_m1"], ["head", "R_m1"]],
    "external": [["L_ref", "tracker"], ["R_ref", "tracker"]],
}


class ConfigError(ValueError):
    """Scenario or run configuration is invalid; the message names the field."""


@dataclass
class ScenarioSpec:
    robot: str | None = None
    mask: list[str] | None = None
    perturbation: dict = field(default_factory=lambda: {"length": 0.005, "angle": 0.02})
    counts: dict = field(default_factory=lambda: {"sc": 200, "so": 200})
    sigmas: dict = field(default_factory=lambda: {"sc": 5e-4, "pl": 5e-4, "so": 1.0, "ext": 5e-4})
    joint_limits: list | None = None
    contact_tolerance: float = 1e-6
    seed: int = 0
    contact_pairs: list = field(default_factory=lambda: DESK_CLOSURES["contact_pairs"])
    plane_contacts: list = field(default_factory=lambda: DESK_CLOSURES["plane_contacts"])
    observations: list = field(default_factory=lambda: DESK_CLOSURES["observations"])
    external: list = field(default_factory=lambda: DESK_CLOSURES["external"])
    outlier_rate: float = 0.0
    outlier_scale: float = 20.0
    joint_noise: float = 0.0
    max_restarts: int = 20

    def __post_init__(self):
        try:
            self.counts = {Kind(k).value: int(v) for k, v in self.counts.items()}
            self.sigmas = {Kind(k).value: float(v) for k, v in self.sigmas.items()}
        except ValueError as exc:
            raise ConfigError(f"counts/sigmas: {exc}") from None
        if any(v < 0 for v in self.counts.values()):
            raise ConfigError("counts: must be >= 0")
        if any(not (v >= 0) for v in self.sigmas.values()):
            raise ConfigError("sigmas: must be >= 0")
        if not self.contact_tolerance > 0:
            raise ConfigError("contact_tolerance: must be > 0")
        if not 0 <= self.outlier_rate <= 1:
            raise ConfigError("outlier_rate: must be in [0, 1]")
        if self.joint_noise < 0:
            raise ConfigError("joint_noise: must be >= 0")
        for k, v in self.perturbation.items():
            if k not in ("length", "angle"):
                raise ConfigError(f"perturbation: unknown field class {k!r}")
            if not v >= 0:
                raise ConfigError(f"perturbation.{k}: must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown scenario field")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ScenarioSpec":
        path = Path(path)
        text = path.read_text()
        try:
            if path.suffix == ".toml":
                try:
                    import tomllib
                except ModuleNotFoundError:  # Python < 3.11
                    import tomli as tomllib
                doc = tomllib.loads(text)
            else:
                doc = json.loads(text)
        except ValueError as exc:
            raise ConfigError(f"{path}: cannot parse ({exc})") from None
        spec = cls.from_dict(doc)
        if spec.robot is not None and not Path(spec.robot).is_absolute():
            spec.robot = str(path.parent / spec.robot)
        return spec

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def nominal_model(self) -> RobotModel:
        if self.robot is None:
            model = desk_rig()
        else:
            from .robotio import load_robot
            model = load_robot(self.robot)
        if self.mask is not None:
            model = model.with_mask(self.mask)
        return model

    def limits(self, model: RobotModel) -> np.ndarray:
        if self.joint_limits is None:
            return model.joint_limits
        lim = np.asarray(self.joint_limits, dtype=float)
        if lim.shape != (model.n_joints, 2):
            raise ConfigError(f"joint_limits: expected {model.n_joints} [lo, hi] pairs")
        return lim


# configuration sampling -------------------------------------------------------

def sample_configurations(model: RobotModel, limits, n: int, seed) -> np.ndarray:
    """``n`` joint vectors drawn uniformly and independently within ``limits``."""
    lim = model.joint_limits if limits is None else np.asarray(limits, dtype=float)
    if not np.all(np.isfinite(lim)):
        raise ValueError("joint limits must be finite")
    rng = np.random.default_rng(seed)
    return rng.uniform(lim[:, 0], lim[:, 1], size=(int(n), len(lim)))


def _ref(model: RobotModel, ref) -> tuple[int, np.ndarray, str]:
    """Resolve ``"marker"`` or ``("patch", taxel_id)`` to (frame row, local point, frame id)."""
    if isinstance(ref, str):
        mk = model.marker(ref)
        return model.frame_index[mk.parent], np.array(mk.position), mk.parent
    patch_id, taxel_id = ref
    patch = model.patch(patch_id)
    return (model.frame_index[patch.mount.parent], patch.mount.pose.apply(patch.taxel(taxel_id)),
            patch.mount.parent)


def _points(model: RobotModel, Q: np.ndarray, refs) -> list[np.ndarray]:
    poses = frame_poses(model, Q)
    out = []
    for frame, local, _ in refs:
        T = poses[frame]
        out.append(T[:, :3, :3] @ local + T[:, :3, 3])
    return out


@dataclass
class ContactSolution:
    success: bool
    q: np.ndarray | None
    distance: float
    restarts: int


def _solve_closure(model, refs, closure, q_base, active, limits, eps, rng, max_restarts):
    """Shared restart loop: drive ``closure(points) -> residual`` to zero over ``active`` joints."""
    lo, hi = limits[active, 0], limits[active, 1]
    best = (math.inf, None)
    opts = SolveOptions(max_iterations=60, gradient_tol=1e-16, step_tol=1e-14, cost_tol=1e-30)

    def full(x):
        q = q_base.copy()
        q[active] = x
        return q

    def fun(x):
        return closure(*[p[0] for p in _points(model, full(x)[None], refs)])

    def jac(x, r):
        h = 1e-7
        X = np.repeat(full(x)[None], len(active) + 1, axis=0)
        X[np.arange(1, len(active) + 1), active] += h
        pts = _points(model, X, refs)
        R = np.array([closure(*[p[j] for p in pts]) for j in range(len(X))])
        return ((R[1:] - R[0]) / h).T

    for attempt in range(max_restarts):
        x0 = rng.uniform(lo, hi)
        res = levenberg_marquardt(fun, x0, opts, jac=jac, project=lambda x: np.clip(x, lo, hi),
                                  target_cost=0.5 * (1e-6 * eps) ** 2)
        dist = float(np.linalg.norm(fun(res.x)))
        if dist < best[0]:
            best = (dist, full(res.x))
        if dist <= eps:
            return ContactSolution(True, full(res.x), dist, attempt)
    return ContactSolution(False, best[1], best[0], max_restarts)


def _active_joints(model: RobotModel, frames: Sequence[str]) -> np.ndarray:
    names = []
    for f in frames:
        names.extend(n for n in model.path(f) if n in model.joint_index and n not in names)
    return np.array(sorted(model.joint_index[n] for n in names), dtype=int)


def solve_contact_configuration(model_true: RobotModel, point_a, point_b, eps: float, seed,
                                limits=None, target=None, max_restarts: int = 20) -> ContactSolution:
    """Find q (within limits) where ``point_a`` and ``point_b`` coincide to within ``eps``.

    Points are marker ids or ``(patch_id, taxel_id)`` pairs.  ``target``
    requests ``p_a - p_b = target`` instead (used to inject contact noise).
    Joints that move neither point keep a random value.
    """
    if not eps > 0:
        raise ValueError("contact tolerance must be > 0")
    lim = model_true.joint_limits if limits is None else np.asarray(limits, dtype=float)
    rng = np.random.default_rng(seed)
    refs = [_ref(model_true, point_a), _ref(model_true, point_b)]
    q_base = rng.uniform(lim[:, 0], lim[:, 1])
    tgt = np.zeros(3) if target is None else np.asarray(target, dtype=float)
    active = _active_joints(model_true, [refs[0][2], refs[1][2]])
    if active.size == 0 or refs[0][0] == refs[1][0] and np.allclose(refs[0][1], refs[1][1]):
        # rigidly attached points: the distance does not depend on q
        dist = float(np.linalg.norm(_points(model_true, q_base[None], refs)[0][0]
                                    - _points(model_true, q_base[None], refs)[1][0] - tgt))
        return ContactSolution(dist <= eps, q_base if dist <= eps else None, dist, 0)
    sol = _solve_closure(model_true, refs, lambda pa, pb: pa - pb - tgt, q_base, active, lim, eps, rng,
                         max_restarts)
    return sol


def solve_plane_configuration(model_true: RobotModel, point, plane_id: str, eps: float, seed,
                              limits=None, target: float = 0.0, max_restarts: int = 20) -> ContactSolution:
    """Find q where the signed plane distance of ``point`` equals ``target``."""
    lim = model_true.joint_limits if limits is None else np.asarray(limits, dtype=float)
    rng = np.random.default_rng(seed)
    plane = model_true.plane(plane_id)
    n = plane_normal(plane)
    refs = [_ref(model_true, point)]
    q_base = rng.uniform(lim[:, 0], lim[:, 1])
    active = _active_joints(model_true, [refs[0][2]])
    return _solve_closure(model_true, refs, lambda p: np.atleast_1d(n @ p - plane.offset - target),
                          q_base, active, lim, eps, rng, max_restarts)


# synthesis -------------------------------------------------------------------

KIND_CODE = {Kind.SELF_CONTACT: 1, Kind.PLANE: 2, Kind.SELF_OBSERVATION: 3, Kind.EXTERNAL: 4}


@dataclass
class SynthesisReport:
    requested: dict
    generated: dict
    shortfall: dict

    @property
    def partial(self) -> bool:
        return any(v > 0 for v in self.shortfall.values())


def _gross(rng, spec: ScenarioSpec, sigma: float, dim: int) -> np.ndarray:
    if spec.outlier_rate > 0 and rng.uniform() < spec.outlier_rate:
        return rng.uniform(-1.0, 1.0, size=dim) * spec.outlier_scale * sigma
    return np.zeros(dim)


def _record_q(rng, spec, q) -> tuple[float, ...]:
    q = np.asarray(q, dtype=float)
    if spec.joint_noise > 0:
        q = q + rng.normal(0.0, spec.joint_noise, size=q.shape)
    return tuple(float(x) for x in q)


def _make_record(kind: Kind, i: int, spec: ScenarioSpec, model: RobotModel, limits: np.ndarray):
    rng = np.random.default_rng([spec.seed, KIND_CODE[kind], i])
    sigma = spec.sigmas.get(kind.value, 0.0)
    if kind is Kind.SELF_CONTACT:
        for _ in range(5):
            point, patch_id = spec.contact_pairs[rng.integers(len(spec.contact_pairs))]
            taxels = model.patch(patch_id).taxel_ids
            taxel = int(taxels[rng.integers(len(taxels))])
            noise = rng.normal(0.0, sigma, 3) + _gross(rng, spec, sigma, 3)
            sol = solve_contact_configuration(model, point, (patch_id, taxel), spec.contact_tolerance,
                                              rng, limits, noise, spec.max_restarts)
            if sol.success:
                return SelfContact(_record_q(rng, spec, sol.q), point=point, patch=patch_id, taxel=taxel)
        return None
    if kind is Kind.PLANE:
        for _ in range(5):
            point, plane_id = spec.plane_contacts[rng.integers(len(spec.plane_contacts))]
            noise = float(rng.normal(0.0, sigma)) + float(_gross(rng, spec, sigma, 1)[0])
            sol = solve_plane_configuration(model, point, plane_id, spec.contact_tolerance, rng, limits,
                                            noise, spec.max_restarts)
            if sol.success:
                return PlaneContact(_record_q(rng, spec, sol.q), point=point, plane=plane_id)
        return None
    if kind is Kind.SELF_OBSERVATION:
        for _ in range(2000):
            cam_id, marker_id = spec.observations[rng.integers(len(spec.observations))]
            q = rng.uniform(limits[:, 0], limits[:, 1])
            cam = model.camera(cam_id)
            frame, local, _ = _ref(model, marker_id)
            poses = frame_poses(model, q[None])
            p = poses[frame, 0, :3, :3] @ local + poses[frame, 0, :3, 3]
            Tc = poses[model.frame_index[cam.mount.parent], 0] @ cam.mount.matrix
            pc = Tc[:3, :3].T @ (p - Tc[:3, 3])
            if pc[2] <= 0.05:
                continue
            uv = np.array([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy])
            if not cam.contains(uv):
                continue
            uv = uv + rng.normal(0.0, sigma, 2) + _gross(rng, spec, sigma, 2)
            if not cam.contains(uv):
                continue
            return SelfObservation(_record_q(rng, spec, q), camera=cam_id, marker=marker_id,
                                   pixel=tuple(float(x) for x in uv))
        return None
    # External
    point, dev_id = spec.external[rng.integers(len(spec.external))]
    q = rng.uniform(limits[:, 0], limits[:, 1])
    dev = model.device(dev_id)
    frame, local, _ = _ref(model, point)
    poses = frame_poses(model, q[None])
    p = poses[frame, 0, :3, :3] @ local + poses[frame, 0, :3, 3]
    pd = dev.pose.inverse().apply(p) + rng.normal(0.0, sigma, 3) + _gross(rng, spec, sigma, 3)
    return ExternalPoint(_record_q(rng, spec, q), point=point, device=dev_id,
                         position=tuple(float(x) for x in pd))


def generate_records(spec: ScenarioSpec, model_true: RobotModel, kind: Kind, indices: Sequence[int]):
    """Records ``indices`` of one kind; each depends only on (seed, kind, index)."""
    limits = spec.limits(model_true)
    return [_make_record(kind, i, spec, model_true, limits) for i in indices]


def synthesize(spec: ScenarioSpec, workers: int = 1) -> tuple[RobotModel, RobotModel, Dataset, SynthesisReport]:
    """Build nominal and perturbed robots and a noisy dataset measured on the latter."""
    nominal = spec.nominal_model()
    true = perturb(nominal, spec.perturbation, [spec.seed, 0])
    measurements = []
    generated, shortfall = {}, {}
    for kind in KIND_ORDER:
        n = spec.counts.get(kind.value, 0)
        if n == 0:
            continue
        if workers > 1:
            from concurrent.futures import ProcessPoolExecutor

            chunks = [list(range(i, n, workers)) for i in range(workers)]
            with ProcessPoolExecutor(workers) as pool:
                parts = list(pool.map(generate_records, [spec] * workers, [true] * workers,
                                      [kind] * workers, chunks))
            recs = [None] * n
            for chunk, part in zip(chunks, parts):
                for i, r in zip(chunk, part):
                    recs[i] = r
        else:
            recs = generate_records(spec, true, kind, range(n))
        ok = [r for r in recs if r is not None]
        generated[kind.value] = len(ok)
        shortfall[kind.value] = n - len(ok)
        measurements.extend(ok)
    sigmas = {}
    for kind in KIND_ORDER:
        if spec.counts.get(kind.value, 0):
            s = spec.sigmas.get(kind.value, 0.0)
            sigmas[kind] = s if s > 0 else DEFAULT_SIGMAS[kind]
    provenance = {
        "generator": "selfcal.simlab",
        "seed": spec.seed,
        "spec_hash": spec.digest(),
        "noise_sigmas": {k: v for k, v in spec.sigmas.items()},
        "shortfall": shortfall,
    }
    report = SynthesisReport(dict(spec.counts), generated, shortfall)
    return nominal, true, Dataset(tuple(measurements), sigmas, provenance), report
