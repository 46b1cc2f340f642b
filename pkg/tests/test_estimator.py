import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selfcal.estimator import (
    ResidualEvaluator,
    SolveOptions,
    SolverError,
    Termination,
    build_system,
    finite_difference_jacobian,
    levenberg_marquardt,
    lm_solve,
    parse_robust,
    pose_error,
    residual,
    residual_external,
    residual_plane,
    residual_projection,
    residual_self_contact,
)
from selfcal.kinecore import ROOT, MountTransform, RobotModel, pack, parameter_error
from selfcal.measurements import (
    Dataset,
    ExternalPoint,
    Kind,
    PlaneContact,
    SelfContact,
    SelfObservation,
)
from selfcal.sensemodel import CameraModel, ExternalDevice, MarkerPoint, PlaneParam
from selfcal.simlab import ScenarioSpec, synthesize

ZERO_NOISE = {"sc": 0.0, "pl": 0.0, "so": 0.0, "ext": 0.0}


def point_model(device_t=(0.0, 0.0, 0.0)):
    """One fixed frame at (1, 2, 3) carrying marker ``p``; marker ``o`` sits at the origin."""
    frames = (MountTransform("eff", ROOT, (1.0, 2.0, 3.0)),)
    cam = CameraModel("cam", 500.0, 500.0, 320.0, 240.0, 640, 480, MountTransform("cam", ROOT))
    markers = (MarkerPoint("p", "eff", (0.0, 0.0, 0.0)), MarkerPoint("o", ROOT, (0.0, 0.0, 0.0)),
               MarkerPoint("front", ROOT, (0.1, 0.0, 1.0)), MarkerPoint("back", ROOT, (0.0, 0.0, -1.0)))
    planes = (PlaneParam("z0", 0.0, math.pi / 2, 0.0), PlaneParam("y2", math.pi / 2, 0.0, 2.0))
    devices = (ExternalDevice("dev", device_t),)
    return RobotModel(frames, (cam,), markers, (), planes, devices)


@pytest.fixture(scope="module")
def clean():
    """Zero-noise dataset generated by the true robot, with its nominal counterpart."""
    spec = ScenarioSpec(counts={"sc": 10, "pl": 5, "so": 30, "ext": 30}, sigmas=ZERO_NOISE, contact_tolerance=1e-10,
                        seed=3)
    nominal, true, ds, _ = synthesize(spec)
    return nominal, true, ds


# single residuals ----------------------------------------------------------------

def test_plane_residual_examples():
    m = point_model()
    assert residual_plane(m, None, PlaneContact((), point="p", plane="z0")) == pytest.approx(3.0)
    assert residual_plane(m, None, PlaneContact((), point="p", plane="y2")) == pytest.approx(0.0, abs=1e-15)


def test_contact_residual_examples():
    m = point_model()
    np.testing.assert_allclose(residual_self_contact(m, None, SelfContact((), point="p", target_point="o")),
                               (1.0, 2.0, 3.0))
    np.testing.assert_allclose(residual_self_contact(m, None, SelfContact((), point="p", target_point="p")), 0.0)
    # offset contacts subtract the offset along the contact direction
    r = residual_self_contact(m, None, SelfContact((), point="p", target_point="o", offset=1.0))
    np.testing.assert_allclose(np.linalg.norm(r), math.sqrt(14) - 1.0)


def test_projection_residual_examples():
    m = point_model()
    np.testing.assert_allclose(residual_projection(m, None, SelfObservation((), camera="cam", marker="front",
                                                                           pixel=(370.0, 240.0))), 0.0)
    np.testing.assert_allclose(residual_projection(m, None, SelfObservation((), camera="cam", marker="front",
                                                                           pixel=(371.0, 240.5))), (-1.0, -0.5))


def test_external_residual_examples():
    meas = ExternalPoint((), point="p", device="dev", position=(1.0, 2.0, 3.0))
    np.testing.assert_allclose(residual_external(point_model(), None, meas), 0.0)
    t = np.array([0.1, -0.2, 0.3])
    np.testing.assert_allclose(residual_external(point_model(tuple(t)), None, meas), -t, atol=1e-15)


def test_single_and_batched_residuals_agree(clean):
    nominal, _, ds = clean
    raw, valid = ResidualEvaluator(nominal, ds)(nominal)
    single = np.concatenate([residual(nominal, None, m) for m in ds])
    assert valid.all()
    np.testing.assert_allclose(raw, single, atol=1e-12)


def test_behind_camera_excluded_and_counted():
    m = point_model()
    ds = Dataset((SelfObservation((), camera="cam", marker="front", pixel=(371.0, 240.0)),
                  SelfObservation((), camera="cam", marker="back", pixel=(320.0, 240.0))),
                 {Kind.SELF_OBSERVATION: 1.0})
    sys = build_system(m, None, ds)
    assert sys.n_excluded == 1
    assert sys.valid.tolist() == [True, True, False, False]
    np.testing.assert_allclose(sys.r, (-1.0, 0.0, 0.0, 0.0))
    only_back = Dataset(ds.measurements[1:], ds.sigmas)
    with pytest.raises(SolverError):
        build_system(m, None, only_back)


# system assembly -----------------------------------------------------------------

def test_system_dimensions_and_weights(clean):
    nominal, _, ds = clean
    sc = [i for i, m in enumerate(ds) if m.kind is Kind.SELF_CONTACT][:10]
    so = [i for i, m in enumerate(ds) if m.kind is Kind.SELF_OBSERVATION][:5]
    sub = ds.subset(sc + so)
    sys = build_system(nominal, None, sub)
    assert sys.r.shape == (40,)
    assert sys.J.shape == (40, len(nominal.free_slots))
    assert sys.cost == pytest.approx(0.5 * sys.r @ sys.r)
    doubled = build_system(nominal, None, sub.with_sigmas({"so": 2 * sub.sigmas[Kind.SELF_OBSERVATION]}))
    so_rows = np.array([k is Kind.SELF_OBSERVATION for k in sys.row_kind])
    np.testing.assert_allclose(doubled.r[so_rows], sys.r[so_rows] / 2)
    np.testing.assert_array_equal(doubled.r[~so_rows], sys.r[~so_rows])


def test_forward_and_central_jacobians_agree(clean):
    nominal, _, ds = clean
    fwd = build_system(nominal, None, ds, "forward").J
    cen = build_system(nominal, None, ds, "central").J
    assert np.linalg.norm(fwd - cen) <= 1e-5 * np.linalg.norm(cen)


def test_jacobian_matches_directional_derivative(clean):
    nominal, _, ds = clean
    sys = build_system(nominal, None, ds)
    z = pack(nominal).scaled
    from selfcal.estimator import _Problem

    prob = _Problem(nominal, ds, pack(nominal))

    def cost(x):
        r = prob(x)
        return 0.5 * r @ r

    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(5):
        v = rng.normal(size=z.size)
        v /= np.linalg.norm(v)
        numeric = (cost(z + h * v) - cost(z - h * v)) / (2 * h)
        analytic = (sys.J.T @ sys.r) @ v
        assert abs(numeric - analytic) <= 1e-5 * abs(analytic)


def test_empty_parameter_jacobian():
    J = finite_difference_jacobian(lambda x: np.ones(3), np.zeros(0))
    assert J.shape == (3, 0)


# Levenberg-Marquardt ----------------------------------------------------------------

def test_linear_problem():
    res = levenberg_marquardt(lambda x: x - np.array([1.0, 2.0]), [0.0, 0.0])
    np.testing.assert_allclose(res.x, (1.0, 2.0), atol=1e-10)
    assert res.iterations <= 5


def test_rosenbrock():
    res = levenberg_marquardt(lambda x: np.array([1 - x[0], 10 * (x[1] - x[0] ** 2)]), [-1.2, 1.0])
    np.testing.assert_allclose(res.x, (1.0, 1.0), atol=1e-8)


def test_accepted_costs_strictly_decrease():
    rng = np.random.default_rng(123)
    for _ in range(100):
        t = np.linspace(0, 1, 20)
        a, b, c = rng.uniform(-2, 2, 3)
        y = a * np.exp(b * t) + c * np.sin(3 * t) + rng.normal(0, 0.01, t.size)
        with np.errstate(over="ignore", invalid="ignore"):
            res = levenberg_marquardt(lambda x: x[0] * np.exp(x[1] * t) + x[2] * np.sin(3 * t) - y,
                                      rng.uniform(-3, 3, 3))
        costs = np.array(res.accepted_costs)
        assert np.all(np.diff(costs) < 0)
        assert res.cost == costs[-1]


def test_max_iterations_zero():
    res = levenberg_marquardt(lambda x: x - 1.0, [0.0], SolveOptions(max_iterations=0))
    assert res.termination is Termination.MAX_ITERATIONS
    assert res.x.tolist() == [0.0]


def test_non_finite_start_rejected():
    with pytest.raises(SolverError):
        levenberg_marquardt(lambda x: x, [math.nan])
    with pytest.raises(SolverError):
        levenberg_marquardt(lambda x: x * math.inf, [1.0])


def test_options_validation():
    with pytest.raises(ValueError):
        SolveOptions(lambda_up=1.0)
    with pytest.raises(ValueError):
        SolveOptions.from_dict({"speed": 3})
    assert parse_robust("huber:0.5") == ("huber", 0.5)
    assert parse_robust(None) == (None, 1.0)
    with pytest.raises(ValueError):
        parse_robust("cauchy:1")


def test_empty_mask_rejected(clean):
    nominal, _, ds = clean
    with pytest.raises(SolverError):
        lm_solve(nominal.with_mask([]), ds)


# calibration ----------------------------------------------------------------------------

def test_zero_noise_fixed_point(clean):
    _, true, ds = clean
    raw, _ = ResidualEvaluator(true, ds)(true)
    assert np.max(np.abs(raw)) < 1e-9
    res = lm_solve(true, ds)
    assert res.iterations <= 1
    np.testing.assert_array_equal(res.params_opt.values, res.params_initial.values)


def test_zero_noise_recovers_truth(clean):
    nominal, true, ds = clean
    res = lm_solve(nominal, ds)
    err = parameter_error(res.model_opt, true)
    assert err["length"] < 1e-7 and err["angle"] < 1e-7


def test_common_sigma_scale_keeps_argmin(clean):
    nominal, _, ds = clean
    base = lm_solve(nominal, ds)
    scaled = lm_solve(nominal, ds.with_sigmas({k: 3.0 * s for k, s in ds.sigmas.items()}))
    assert scaled.initial_cost == pytest.approx(base.initial_cost / 9.0)
    np.testing.assert_allclose(scaled.params_opt.values, base.params_opt.values, atol=1e-8)


def test_device_pose_co_estimation():
    spec = ScenarioSpec(mask=["device/tracker/*"], counts={"ext": 30}, perturbation={"length": 0.02, "angle": 0.05},
                        seed=7)
    nominal, true, ds, _ = synthesize(spec)
    before = pose_error(nominal.device("tracker").pose, true.device("tracker").pose)
    res = lm_solve(nominal, ds)
    dt, dr = pose_error(res.model_opt.device("tracker").pose, true.device("tracker").pose)
    assert before[0] > 5e-3
    # 30 points at 0.5 mm: a few tenths of a millimetre and milliradian
    assert dt < 1e-3 and dr < 2e-3
    std = res.std
    assert std is not None and np.all(std > 0)


def test_huber_limits_outlier_damage():
    spec = ScenarioSpec(counts={"so": 150, "ext": 150}, outlier_rate=0.1, outlier_scale=50.0, seed=11)
    nominal, true, ds, _ = synthesize(spec)
    plain = lm_solve(nominal, ds)
    robust = lm_solve(nominal, ds, opts=SolveOptions(robust_loss="huber", huber_delta=3.0))
    e_plain = parameter_error(plain.model_opt, true)
    e_robust = parameter_error(robust.model_opt, true)
    assert e_robust["length"] < e_plain["length"] and e_robust["angle"] < e_plain["angle"]


def test_report_dictionary(clean):
    nominal, _, ds = clean
    rep = lm_solve(nominal, ds, opts=SolveOptions(max_iterations=2)).to_dict()
    assert rep["termination"] in {t.value for t in Termination}
    assert len(rep["parameters"]) == len(nominal.free_slots)
    assert {p["unit"] for p in rep["parameters"]} == {"m", "rad"}
    assert set(rep["rms_final"]) == {"sc", "pl", "so", "ext"}


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 10))
def test_scaled_linear_problem_argmin(a, b, c):
    # a common residual scale changes the cost but never the minimizer
    res = levenberg_marquardt(lambda x: c * (x - np.array([a, b])), [0.0, 0.0])
    np.testing.assert_allclose(res.x, (a, b), atol=1e-9)
