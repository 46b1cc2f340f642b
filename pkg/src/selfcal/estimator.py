"""Residuals for the four chain closures, the stacked weighted system and a
Levenberg-Marquardt solver.

All closure kinds enter one cost ``0.5 * ||r||^2`` where each raw residual is
divided by the noise sigma of its kind, so rows are dimensionless.  The
Jacobian is taken by finite differences in the scaled parameter space.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .geometry import Pose
from .kinecore import (
    ModelError,
    ParameterVector,
    RobotModel,
    apply_params,
    frame_poses,
    pack,
    unpack,
)
from .measurements import (
    KIND_ORDER,
    RESIDUAL_DIM,
    UNITS,
    Dataset,
    ExternalPoint,
    Kind,
    Measurement,
    PlaneContact,
    SelfContact,
    SelfObservation,
    check_dataset,
)
from .sensemodel import (
    BehindCameraError,
    plane_normal,
    point_world,
    project,
    sensor_pose,
    taxel_world,
)

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """The problem cannot be solved as posed (empty system, non-finite cost)."""


# single-measurement residuals ------------------------------------------------

def _contact_target(model, q, m: SelfContact) -> np.ndarray:
    if m.patch is not None:
        return taxel_world(model, None, q, m.patch, m.taxel)
    return point_world(model, None, q, m.target_point)


def _offset_term(diff: np.ndarray, offset: float | None) -> np.ndarray:
    if not offset:
        return diff
    norm = np.linalg.norm(diff)
    if norm == 0.0:
        return diff
    return diff - offset * diff / norm


def residual_self_contact(model: RobotModel, params: ParameterVector | None, m: SelfContact) -> np.ndarray:
    """``p_A - p_B - offset * u`` in meters."""
    model = apply_params(model, params)
    pa = point_world(model, None, m.q, m.point)
    pb = _contact_target(model, m.q, m)
    return _offset_term(pa - pb, m.offset)


def residual_plane(model: RobotModel, params: ParameterVector | None, m: PlaneContact) -> float:
    """Signed distance of the effector point from the plane, in meters."""
    model = apply_params(model, params)
    plane = model.plane(m.plane)
    p = point_world(model, None, m.q, m.point)
    return float(plane_normal(plane) @ p - plane.offset)


def residual_projection(model: RobotModel, params: ParameterVector | None, m: SelfObservation) -> np.ndarray:
    """Reprojection error in pixels; raises BehindCameraError for z <= 0."""
    model = apply_params(model, params)
    cam = model.camera(m.camera)
    p = point_world(model, None, m.q, m.marker)
    p_cam = sensor_pose(model, None, m.q, cam.mount).inverse().apply(p)
    return project(cam, p_cam) - np.asarray(m.pixel)


def residual_external(model: RobotModel, params: ParameterVector | None, m: ExternalPoint) -> np.ndarray:
    """Predicted minus measured point in the device frame, in meters."""
    model = apply_params(model, params)
    dev = model.device(m.device)
    p = point_world(model, None, m.q, m.point)
    return dev.pose.inverse().apply(p) - np.asarray(m.position)


def residual(model: RobotModel, params: ParameterVector | None, m: Measurement) -> np.ndarray:
    fn = {
        Kind.SELF_CONTACT: residual_self_contact,
        Kind.PLANE: residual_plane,
        Kind.SELF_OBSERVATION: residual_projection,
        Kind.EXTERNAL: residual_external,
    }[m.kind]
    return np.atleast_1d(fn(model, params, m))


# batched evaluation ------------------------------------------------------------

class _PointRefs:
    """Interns point references (marker or taxel) so that their local
    coordinates can be recomputed once per model evaluation."""

    def __init__(self):
        self.keys: list[tuple] = []
        self._pos: dict[tuple, int] = {}

    def add(self, key: tuple) -> int:
        if key not in self._pos:
            self._pos[key] = len(self.keys)
            self.keys.append(key)
        return self._pos[key]

    def resolve(self, model: RobotModel) -> tuple[np.ndarray, np.ndarray]:
        frames = np.empty(len(self.keys), dtype=int)
        local = np.empty((len(self.keys), 3))
        for i, key in enumerate(self.keys):
            if key[0] == "marker":
                mk = model.marker(key[1])
                frames[i] = model.frame_index[mk.parent]
                local[i] = mk.position
            else:
                patch = model.patch(key[1])
                frames[i] = model.frame_index[patch.mount.parent]
                local[i] = patch.mount.pose.apply(patch.taxel(key[2]))
        return frames, local


class ResidualEvaluator:
    """Evaluates raw residuals of a whole dataset with vectorized kinematics.

    Rows follow dataset order; measurement ``i`` owns rows
    ``offsets[i]:offsets[i + 1]``.
    """

    def __init__(self, model: RobotModel, dataset: Dataset):
        self.dataset = dataset
        ms = dataset.measurements
        self.Q = np.array([m.q for m in ms], dtype=float).reshape(len(ms), -1)
        if self.Q.shape[1] != model.n_joints:
            raise ModelError(f"dataset q has {self.Q.shape[1]} joints, model has {model.n_joints}")
        dims = [RESIDUAL_DIM[m.kind] for m in ms]
        self.offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)
        self.n_rows = int(self.offsets[-1])
        self.row_kind = np.empty(self.n_rows, dtype=object)
        for m, a, b in zip(ms, self.offsets[:-1], self.offsets[1:]):
            self.row_kind[a:b] = m.kind
        self.refs = _PointRefs()
        groups: dict[Kind, list[int]] = {k: [] for k in KIND_ORDER}
        for i, m in enumerate(ms):
            groups[m.kind].append(i)
        self.groups = {k: np.array(v, dtype=int) for k, v in groups.items() if v}
        g = self.groups
        if Kind.SELF_CONTACT in g:
            sel = [ms[i] for i in g[Kind.SELF_CONTACT]]
            self.sc_a = np.array([self.refs.add(("marker", m.point)) for m in sel])
            self.sc_b = np.array([
                self.refs.add(("taxel", m.patch, int(m.taxel)) if m.patch is not None
                              else ("marker", m.target_point))
                for m in sel
            ])
            self.sc_offset = np.array([m.offset or 0.0 for m in sel])
        if Kind.PLANE in g:
            sel = [ms[i] for i in g[Kind.PLANE]]
            self.pl_pt = np.array([self.refs.add(("marker", m.point)) for m in sel])
            self.pl_plane = [m.plane for m in sel]
        if Kind.SELF_OBSERVATION in g:
            sel = [ms[i] for i in g[Kind.SELF_OBSERVATION]]
            self.so_pt = np.array([self.refs.add(("marker", m.marker)) for m in sel])
            self.so_cam = [m.camera for m in sel]
            self.so_pix = np.array([m.pixel for m in sel])
        if Kind.EXTERNAL in g:
            sel = [ms[i] for i in g[Kind.EXTERNAL]]
            self.ex_pt = np.array([self.refs.add(("marker", m.point)) for m in sel])
            self.ex_dev = [m.device for m in sel]
            self.ex_pos = np.array([m.position for m in sel])

    def rows(self, kind: Kind) -> np.ndarray:
        idx = self.groups[kind]
        d = RESIDUAL_DIM[kind]
        return (self.offsets[idx][:, None] + np.arange(d)[None, :]).ravel()

    def __call__(self, model: RobotModel) -> tuple[np.ndarray, np.ndarray]:
        """Return (raw residual rows, row validity)."""
        poses = frame_poses(model, self.Q)
        ref_frame, ref_local = self.refs.resolve(model)
        r = np.zeros(self.n_rows)
        valid = np.ones(self.n_rows, dtype=bool)

        def world(meas_idx, ref_idx):
            T = poses[ref_frame[ref_idx], meas_idx]
            return np.einsum("nij,nj->ni", T[:, :3, :3], ref_local[ref_idx]) + T[:, :3, 3]

        g = self.groups
        if Kind.SELF_CONTACT in g:
            idx = g[Kind.SELF_CONTACT]
            diff = world(idx, self.sc_a) - world(idx, self.sc_b)
            norm = np.linalg.norm(diff, axis=1)
            use = (self.sc_offset != 0) & (norm > 0)
            scale = np.where(use, self.sc_offset / np.where(norm > 0, norm, 1.0), 0.0)
            diff = diff - scale[:, None] * diff
            r[self.rows(Kind.SELF_CONTACT)] = diff.ravel()
        if Kind.PLANE in g:
            idx = g[Kind.PLANE]
            p = world(idx, self.pl_pt)
            planes = [model.plane(n) for n in self.pl_plane]
            normals = np.array([plane_normal(pl) for pl in planes])
            offs = np.array([pl.offset for pl in planes])
            r[self.rows(Kind.PLANE)] = np.einsum("ni,ni->n", normals, p) - offs
        if Kind.SELF_OBSERVATION in g:
            idx = g[Kind.SELF_OBSERVATION]
            p = world(idx, self.so_pt)
            out = np.empty((len(idx), 2))
            ok_all = np.empty(len(idx), dtype=bool)
            for cam_name in dict.fromkeys(self.so_cam):
                cam = model.camera(cam_name)
                sel = np.array([c == cam_name for c in self.so_cam])
                T = poses[model.frame_index[cam.mount.parent], idx[sel]] @ cam.mount.matrix
                R, t = T[:, :3, :3], T[:, :3, 3]
                pc = np.einsum("nji,nj->ni", R, p[sel] - t)
                z = pc[:, 2]
                ok = z > 0
                zs = np.where(ok, z, 1.0)
                uv = np.stack([cam.fx * pc[:, 0] / zs + cam.cx, cam.fy * pc[:, 1] / zs + cam.cy], axis=1)
                out[sel] = uv - self.so_pix[sel]
                ok_all[sel] = ok
            out[~ok_all] = 0.0
            rows = self.rows(Kind.SELF_OBSERVATION)
            r[rows] = out.ravel()
            valid[rows] = np.repeat(ok_all, 2)
        if Kind.EXTERNAL in g:
            idx = g[Kind.EXTERNAL]
            p = world(idx, self.ex_pt)
            out = np.empty((len(idx), 3))
            for dev_name in dict.fromkeys(self.ex_dev):
                dev = model.device(dev_name)
                sel = np.array([d == dev_name for d in self.ex_dev])
                out[sel] = dev.pose.inverse().apply(p[sel]) - self.ex_pos[sel]
            r[self.rows(Kind.EXTERNAL)] = out.ravel()
        return r, valid

    def rms_by_kind(self, raw: np.ndarray, valid: np.ndarray) -> dict[str, float]:
        out = {}
        for k in self.groups:
            rows = self.rows(k)
            rows = rows[valid[rows]]
            out[k.value] = float(np.sqrt(np.mean(raw[rows] ** 2))) if rows.size else float("nan")
        return out

    def excluded_measurements(self, valid: np.ndarray) -> int:
        return int(sum(not valid[a:b].all() for a, b in zip(self.offsets[:-1], self.offsets[1:])))


# system assembly -----------------------------------------------------------------

@dataclass(eq=False)
class ResidualSystem:
    """Stacked weighted residuals ``r`` and their Jacobian ``J`` (scaled parameters)."""

    r: np.ndarray
    J: np.ndarray
    block_index: list[tuple[int, int]]
    weights: dict[str, float]
    row_kind: np.ndarray
    valid: np.ndarray
    n_excluded: int = 0

    @property
    def cost(self) -> float:
        return 0.5 * float(self.r @ self.r)


def row_weights(evaluator: ResidualEvaluator, dataset: Dataset) -> np.ndarray:
    w = np.empty(evaluator.n_rows)
    for k in evaluator.groups:
        sigma = dataset.sigmas.get(k)
        if not sigma or sigma <= 0:
            raise SolverError(f"dataset has no positive sigma for kind {k.value!r}")
        w[evaluator.rows(k)] = 1.0 / sigma
    return w


def fd_step(x: np.ndarray) -> np.ndarray:
    return np.maximum(1e-6, 1e-7 * np.abs(x))


def finite_difference_jacobian(fun: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                               r0: np.ndarray | None = None, mode: str = "forward") -> np.ndarray:
    """Column-by-column finite-difference Jacobian with step ``max(1e-6, 1e-7|x|)``."""
    if mode not in ("forward", "central"):
        raise ValueError(f"jacobian mode must be 'forward' or 'central', got {mode!r}")
    x = np.asarray(x, dtype=float)
    if r0 is None and mode == "forward":
        r0 = fun(x)
    h = fd_step(x)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h[j]
        if mode == "forward":
            cols.append((fun(x + e) - r0) / h[j])
        else:
            cols.append((fun(x + e) - fun(x - e)) / (2.0 * h[j]))
    if not cols:
        return np.zeros((len(fun(x)) if r0 is None else len(r0), 0))
    return np.stack(cols, axis=1)


class _Problem:
    """Weighted residual function of the scaled parameter vector."""

    def __init__(self, model: RobotModel, dataset: Dataset, template: ParameterVector):
        self.model = model
        self.template = template
        self.eval = ResidualEvaluator(model, dataset)
        self.w = row_weights(self.eval, dataset)
        self.last_valid = None

    def model_at(self, z: np.ndarray) -> RobotModel:
        return unpack(self.model, self.template.from_scaled(z))

    def raw(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.eval(self.model_at(z))

    def __call__(self, z: np.ndarray) -> np.ndarray:
        raw, valid = self.raw(z)
        self.last_valid = valid
        return raw * self.w

    def jacobian(self, z: np.ndarray, r0: np.ndarray, valid0: np.ndarray, mode: str) -> np.ndarray:
        J = finite_difference_jacobian(self, z, r0, mode)
        J[~valid0] = 0.0
        J[~np.isfinite(J)] = 0.0
        return J


def build_system(model: RobotModel, params: ParameterVector | None, dataset: Dataset,
                 jacobian_mode: str = "forward") -> ResidualSystem:
    """Stack every measurement's weighted residual and differentiate w.r.t. ``params``."""
    params = pack(model) if params is None else params
    if len(dataset) == 0:
        raise SolverError("empty system: dataset has no measurements")
    prob = _Problem(model, dataset, params)
    z = params.scaled
    r = prob(z)
    valid = prob.last_valid
    if not valid.any():
        raise SolverError("empty system: every measurement is invalid at the current parameters")
    J = prob.jacobian(z, r, valid, jacobian_mode)
    ev = prob.eval
    n_excl = ev.excluded_measurements(valid)
    if n_excl:
        log.warning("%d measurement(s) excluded: marker behind camera", n_excl)
    blocks = [(int(a), int(b)) for a, b in zip(ev.offsets[:-1], ev.offsets[1:])]
    weights = {k.value: 1.0 / dataset.sigmas[k] for k in ev.groups}
    return ResidualSystem(r, J, blocks, weights, ev.row_kind, valid, n_excl)


# Levenberg-Marquardt -----------------------------------------------------------

class Termination(str, Enum):
    GRADIENT = "gradient_tol"
    STEP = "step_tol"
    COST = "cost_tol"
    MAX_ITERATIONS = "max_iterations"
    DAMPING_OVERFLOW = "damping_overflow"
    TARGET = "cost_target"


@dataclass
class SolveOptions:
    max_iterations: int = 200
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    gradient_tol: float = 1e-10
    step_tol: float = 1e-12
    cost_tol: float = 1e-12
    jacobian_mode: str = "forward"
    robust_loss: str | None = None
    huber_delta: float = 1.0
    # damping never shrinks below this, so directions the data barely sees
    # are not taken with arbitrarily long steps
    lambda_min: float = 1e-7

    def __post_init__(self):
        if self.lambda_up <= 1 or self.lambda_down <= 1:
            raise ValueError("lambda_up and lambda_down must be > 1")
        if min(self.gradient_tol, self.step_tol, self.cost_tol) <= 0:
            raise ValueError("tolerances must be > 0")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.jacobian_mode not in ("forward", "central"):
            raise ValueError(f"unknown jacobian mode {self.jacobian_mode!r}")
        if self.robust_loss not in (None, "none", "huber"):
            raise ValueError(f"unknown robust loss {self.robust_loss!r}")
        if self.robust_loss == "none":
            self.robust_loss = None
        if self.huber_delta <= 0:
            raise ValueError("huber delta must be > 0")
        if not 0 <= self.lambda_min <= self.lambda0:
            raise ValueError("lambda_min must be in [0, lambda0]")

    @classmethod
    def from_dict(cls, d: dict) -> "SolveOptions":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solve option(s): {sorted(unknown)}")
        return cls(**d)


def parse_robust(text: str | None) -> tuple[str | None, float]:
    """``"huber:0.5"`` -> ("huber", 0.5); ``None``/``"none"`` -> (None, 1.0)."""
    if text is None or text == "none":
        return None, 1.0
    name, _, arg = text.partition(":")
    if name != "huber":
        raise ValueError(f"unknown robust loss {text!r}")
    return "huber", float(arg) if arg else 1.0


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    initial_cost: float
    iterations: int
    termination: Termination
    r: np.ndarray
    J: np.ndarray
    accepted_costs: list[float] = field(default_factory=list)
    damping: float = 0.0


def _robust_weights(r: np.ndarray, groups: np.ndarray | None, delta: float) -> tuple[np.ndarray, float]:
    """Per-row IRLS weights and robust cost for the Huber loss on block norms."""
    sq = r * r
    if groups is None:
        s = sq
    else:
        s = np.bincount(groups, weights=sq)
    w_block = np.where(s <= delta * delta, 1.0, delta / np.sqrt(np.maximum(s, 1e-300)))
    rho = np.where(s <= delta * delta, s, 2.0 * delta * np.sqrt(s) - delta * delta)
    w = w_block if groups is None else w_block[groups]
    return w, 0.5 * float(rho.sum())


def levenberg_marquardt(fun: Callable[[np.ndarray], np.ndarray], x0, opts: SolveOptions | None = None,
                        jac: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
                        groups: np.ndarray | None = None,
                        project: Callable[[np.ndarray], np.ndarray] | None = None,
                        target_cost: float = 0.0) -> LMResult:
    """Minimize ``0.5 * ||fun(x)||^2`` (or its Huber counterpart).

    Steps solve ``(J^T W J + lam * diag(J^T W J)) dx = -J^T W r``; a step is
    kept only if it lowers the cost, in which case ``lam`` shrinks by
    ``lambda_down``, otherwise it grows by ``lambda_up``.  ``jac(x, r)``
    defaults to forward/central differences.  ``groups`` maps rows to
    residual blocks for the robust loss.  ``project`` (e.g. clipping to
    bounds) is applied to every trial point.  Iteration also stops once the
    cost drops to ``target_cost``.
    """
    opts = opts or SolveOptions()
    x = np.array(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise SolverError("initial parameters are not finite")
    if jac is None:
        def jac(xx, rr):
            return finite_difference_jacobian(fun, xx, rr, opts.jacobian_mode)
    huber = opts.robust_loss == "huber"

    def cost_of(r):
        if not np.all(np.isfinite(r)):
            return math.inf, None
        if huber:
            w, c = _robust_weights(r, groups, opts.huber_delta)
            return c, w
        with np.errstate(over="ignore"):
            return 0.5 * float(r @ r), None

    r = np.asarray(fun(x), dtype=float)
    cost, w = cost_of(r)
    if not math.isfinite(cost):
        raise SolverError("cost is not finite at the initial parameters")
    initial_cost = cost
    accepted = [cost]
    lam = opts.lambda0
    J = jac(x, r)
    reason = Termination.MAX_ITERATIONS
    it = 0
    while True:
        if cost <= target_cost:
            reason = Termination.TARGET
            break
        Jw = J if w is None else J * w[:, None]
        g = Jw.T @ r
        if not g.size or np.max(np.abs(g)) <= opts.gradient_tol:
            reason = Termination.GRADIENT
            break
        if it >= opts.max_iterations:
            reason = Termination.MAX_ITERATIONS
            break
        it += 1
        A = Jw.T @ J
        D = np.diag(A).copy()
        D[D <= 0] = 1e-12 * max(1.0, float(D.max(initial=0.0)))
        try:
            dx = np.linalg.solve(A + lam * np.diag(D), -g)
            if not np.all(np.isfinite(dx)):
                raise np.linalg.LinAlgError("non-finite step")
        except np.linalg.LinAlgError:
            lam *= opts.lambda_up
            if lam > 1e20:
                reason = Termination.DAMPING_OVERFLOW
                break
            continue
        if np.linalg.norm(dx) <= opts.step_tol * (np.linalg.norm(x) + opts.step_tol):
            reason = Termination.STEP
            break
        x_new = x + dx
        if project is not None:
            x_new = project(x_new)
        r_new = np.asarray(fun(x_new), dtype=float)
        cost_new, w_new = cost_of(r_new)
        if cost_new < cost:
            rel = (cost - cost_new) / cost if cost > 0 else 0.0
            x, r, cost, w = x_new, r_new, cost_new, w_new
            accepted.append(cost)
            lam = max(lam / opts.lambda_down, opts.lambda_min)
            J = jac(x, r)
            if rel <= opts.cost_tol:
                reason = Termination.COST
                break
        else:
            lam *= opts.lambda_up
            if lam > 1e20:
                reason = Termination.DAMPING_OVERFLOW
                break
    return LMResult(x, cost, initial_cost, it, reason, r, J, accepted, lam)


# calibration ---------------------------------------------------------------------

@dataclass(eq=False)
class CalibrationResult:
    params_initial: ParameterVector
    params_opt: ParameterVector
    model_opt: RobotModel
    initial_cost: float
    final_cost: float
    rms_initial: dict[str, float]
    rms_final: dict[str, float]
    iterations: int
    termination: Termination
    jacobian: np.ndarray
    covariance: np.ndarray | None
    variance_factor: float
    accepted_costs: list[float]
    n_rows: int
    n_excluded: int
    options: SolveOptions

    @property
    def std(self) -> np.ndarray | None:
        return None if self.covariance is None else np.sqrt(np.diag(self.covariance))

    def to_dict(self) -> dict:
        std = self.std
        table = []
        for i, slot in enumerate(self.params_opt.index):
            table.append({
                "name": slot.key,
                "unit": "m" if slot.unit == "length" else "rad",
                "before": float(self.params_initial.values[i]),
                "after": float(self.params_opt.values[i]),
                "std": None if std is None else float(std[i]),
            })
        return {
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "rms_initial": self.rms_initial,
            "rms_final": self.rms_final,
            "rms_units": {k.value: UNITS[k] for k in KIND_ORDER},
            "iterations": self.iterations,
            "termination": self.termination.value,
            "n_rows": self.n_rows,
            "n_parameters": len(self.params_opt),
            "n_excluded": self.n_excluded,
            "variance_factor": self.variance_factor,
            "parameters": table,
        }


def lm_solve(model: RobotModel, dataset: Dataset, x0: ParameterVector | None = None,
             opts: SolveOptions | None = None, validate: bool = True) -> CalibrationResult:
    """Calibrate the masked parameters of ``model`` against ``dataset``."""
    opts = opts or SolveOptions()
    if validate:
        check_dataset(dataset, model)
    x0 = pack(model) if x0 is None else x0
    if len(x0) == 0:
        raise SolverError("no free parameters: the calibration mask is empty")
    if not np.all(np.isfinite(x0.values)):
        raise SolverError("initial parameters are not finite")
    prob = _Problem(model, dataset, x0)
    ev = prob.eval
    raw0, valid0 = prob.raw(x0.scaled)
    if not valid0.any():
        raise SolverError("empty system: every measurement is invalid at the initial parameters")
    groups = np.repeat(np.arange(len(dataset)), np.diff(ev.offsets))

    def jac(z, r):
        return prob.jacobian(z, r, prob.last_valid if prob.last_valid is not None else valid0,
                             opts.jacobian_mode)

    def fun(z):
        return prob(z)

    res = levenberg_marquardt(fun, x0.scaled, opts, jac=jac, groups=groups)
    params_opt = x0.from_scaled(res.x)
    model_opt = unpack(model, params_opt)
    raw1, valid1 = ev(model_opt)
    n_excl = ev.excluded_measurements(valid1)
    if n_excl:
        log.warning("%d measurement(s) excluded at the solution: marker behind camera", n_excl)
    J = res.J
    m, n = J.shape
    cov = None
    dof = int(valid1.sum()) - n
    var_factor = 2.0 * res.cost / dof if dof > 0 else float("nan")
    JtJ = J.T @ J
    if n and np.linalg.cond(JtJ) < 1e12:
        S = np.diag(x0.scales)
        cov = S @ np.linalg.inv(JtJ) @ S
    return CalibrationResult(
        params_initial=x0,
        params_opt=params_opt,
        model_opt=model_opt,
        initial_cost=res.initial_cost,
        final_cost=res.cost,
        rms_initial=ev.rms_by_kind(raw0, valid0),
        rms_final=ev.rms_by_kind(raw1, valid1),
        iterations=res.iterations,
        termination=res.termination,
        jacobian=J,
        covariance=cov,
        variance_factor=var_factor,
        accepted_costs=res.accepted_costs,
        n_rows=m,
        n_excluded=n_excl,
        options=opts,
    )


def evaluate_rms(model: RobotModel, dataset: Dataset) -> dict[str, float]:
    """Per-kind RMS of raw residuals (native units) for ``model`` on ``dataset``."""
    ev = ResidualEvaluator(model, dataset)
    raw, valid = ev(model)
    return ev.rms_by_kind(raw, valid)


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation distance m, rotation angle rad) between two poses."""
    dR = a.rotation.T @ b.rotation
    ang = math.acos(max(-1.0, min(1.0, (np.trace(dR) - 1.0) / 2.0)))
    return float(np.linalg.norm(a.translation - b.translation)), ang


def workspace_key(model: RobotModel, axis: int = 0) -> Callable[[Measurement], float]:
    """Split key: root-frame coordinate ``axis`` of the measured point under ``model``.

    Used with ``split(..., mode="workspace")`` so the held-out records come
    from a spatially separate part of the workspace.
    """
    def key(m: Measurement) -> float:
        name = m.marker if isinstance(m, SelfObservation) else m.point
        return float(point_world(model, None, m.q, name)[axis])

    return key
