import math

import numpy as np
import pytest

from selfcal.estimator import ResidualEvaluator, lm_solve
from selfcal.geometry import Pose
from selfcal.kinecore import ROOT, DHLink, MountTransform, RobotModel, fk
from selfcal.measurements import Kind
from selfcal.sensemodel import MarkerPoint, point_world, taxel_world
from selfcal.simlab import (
    ConfigError,
    ScenarioSpec,
    sample_configurations,
    solve_contact_configuration,
    synthesize,
)

from conftest import planar_arm

SPEC_NOISY = dict(counts={"sc": 60, "pl": 40, "so": 80, "ext": 80}, seed=21)


def test_sample_configurations_basics(rig):
    assert sample_configurations(rig, None, 0, 1).shape == (0, 12)
    zero = np.zeros((12, 2))
    np.testing.assert_array_equal(sample_configurations(rig, zero, 5, 1), np.zeros((5, 12)))
    a = sample_configurations(rig, None, 10, 7)
    np.testing.assert_array_equal(a, sample_configurations(rig, None, 10, 7))
    lim = rig.joint_limits
    assert np.all((a >= lim[:, 0]) & (a <= lim[:, 1]))
    with pytest.raises(ValueError):
        sample_configurations(rig, np.full((12, 2), np.inf), 1, 0)


def test_sample_mean_matches_uniform(rig):
    lim = rig.joint_limits
    Q = sample_configurations(rig, lim, 10_000, 3)
    mean, sd = lim.mean(axis=1), (lim[:, 1] - lim[:, 0]) / math.sqrt(12)
    assert np.all(np.abs(Q.mean(axis=0) - mean) <= 3 * sd / math.sqrt(len(Q)))


def facing_arms(gap):
    base_b = MountTransform.from_pose("b0", ROOT, Pose(np.diag([-1.0, -1.0, 1.0]), np.array([gap, 0.0, 0.0])))
    frames = planar_arm((0.5, 0.5), prefix="a") + planar_arm((0.5, 0.5), prefix="b", base=base_b)
    markers = (MarkerPoint("tip_a", "a2", (0.0, 0.0, 0.0)), MarkerPoint("tip_b", "b2", (0.0, 0.0, 0.0)),
               MarkerPoint("mid_a", "a2", (-0.1, 0.0, 0.0)))
    return RobotModel(tuple(frames), markers=markers)


def test_contact_between_facing_arms():
    model = facing_arms(1.5)
    for seed in range(5):
        sol = solve_contact_configuration(model, "tip_a", "tip_b", 1e-6, seed)
        assert sol.success
        # independent check through the plain forward kinematics
        d = fk(model, None, sol.q, "a2").translation - fk(model, None, sol.q, "b2").translation
        assert np.linalg.norm(d) <= 1e-6
        lim = model.joint_limits
        assert np.all((sol.q >= lim[:, 0]) & (sol.q <= lim[:, 1]))


def test_contact_unreachable():
    sol = solve_contact_configuration(facing_arms(10.0), "tip_a", "tip_b", 1e-6, 0, max_restarts=3)
    assert not sol.success
    assert sol.distance >= 10.0 - 2.0 - 1e-9


def test_contact_same_frame_points():
    sol = solve_contact_configuration(facing_arms(1.5), "tip_a", "tip_a", 1e-6, 0)
    assert sol.success and sol.restarts == 0


def test_contact_rejects_bad_tolerance():
    with pytest.raises(ValueError):
        solve_contact_configuration(facing_arms(1.5), "tip_a", "tip_b", 0.0, 0)


def test_zero_perturbation_zero_noise_is_fixed_point():
    spec = ScenarioSpec(counts={"sc": 5, "pl": 5, "so": 5, "ext": 5}, perturbation={"length": 0.0, "angle": 0.0},
                        sigmas={"sc": 0, "pl": 0, "so": 0, "ext": 0}, contact_tolerance=1e-10, seed=2)
    nominal, true, ds, report = synthesize(spec)
    np.testing.assert_array_equal(nominal.all_values(), true.all_values())
    assert not report.partial
    res = lm_solve(nominal, ds)
    assert res.initial_cost < 1e-12


@pytest.fixture(scope="module")
def noisy():
    return synthesize(ScenarioSpec(**SPEC_NOISY))


def test_contact_validity_without_noise():
    spec = ScenarioSpec(counts={"sc": 30}, sigmas={"sc": 0.0}, seed=4)
    _, true, ds, _ = synthesize(spec)
    for m in ds:
        d = point_world(true, None, m.q, m.point) - taxel_world(true, None, m.q, m.patch, m.taxel)
        assert np.linalg.norm(d) <= spec.contact_tolerance


def test_residual_rms_matches_noise_after_calibration(noisy):
    nominal, _, ds, _ = noisy
    res = lm_solve(nominal, ds)
    for kind, sigma in ds.sigmas.items():
        assert res.rms_final[kind.value] == pytest.approx(sigma, rel=0.2)


def test_noise_honesty_at_2000():
    spec = ScenarioSpec(counts={"sc": 2000, "pl": 2000, "so": 2000, "ext": 2000}, seed=8)
    _, true, ds, report = synthesize(spec)
    assert not report.partial
    ev = ResidualEvaluator(true, ds)
    raw, valid = ev(true)
    assert valid.all()
    for kind in ds.kinds():
        sigma = spec.sigmas[kind.value]
        std = np.std(raw[ev.rows(kind)])
        assert std == pytest.approx(sigma, rel=0.05), kind


def test_determinism_and_parallel_generation():
    spec = ScenarioSpec(counts={"sc": 6, "pl": 4, "so": 6, "ext": 6}, seed=13)
    a = synthesize(spec)[2]
    b = synthesize(spec)[2]
    c = synthesize(spec, workers=2)[2]
    assert a == b == c
    other = synthesize(ScenarioSpec(counts=spec.counts, seed=14))[2]
    assert other != a


def test_provenance_records_seed_and_hash():
    spec = ScenarioSpec(counts={"so": 3}, seed=99)
    ds = synthesize(spec)[2]
    assert ds.provenance["seed"] == 99
    assert ds.provenance["spec_hash"] == spec.digest()


def test_unreachable_contacts_give_partial_dataset():
    spec = ScenarioSpec(counts={"sc": 2, "so": 2}, contact_pairs=[["L_tip", "L_skin"]], max_restarts=1,
                        joint_limits=[[0.0, 0.0]] * 12, seed=1)
    _, _, ds, report = synthesize(spec)
    assert report.partial and report.shortfall["sc"] == 2
    assert ds.counts().get(Kind.SELF_CONTACT, 0) == 0


@pytest.mark.parametrize("doc, field", [
    ({"countz": {}}, "countz"),
    ({"contact_tolerance": 0.0}, "contact_tolerance"),
    ({"counts": {"sc": -1}}, "counts"),
    ({"sigmas": {"sc": -1.0}}, "sigmas"),
    ({"perturbation": {"mass": 1.0}}, "perturbation"),
    ({"outlier_rate": 2.0}, "outlier_rate"),
])
def test_config_errors_name_the_field(doc, field):
    with pytest.raises(ConfigError, match=field):
        ScenarioSpec.from_dict(doc)


def test_scenario_toml(tmp_path):
    path = tmp_path / "scenario.toml"
    path.write_text('seed = 5\n[counts]\nsc = 3\nso = 4\n[perturbation]\nlength = 0.001\nangle = 0.002\n')
    spec = ScenarioSpec.load(path)
    assert spec.seed == 5 and spec.counts == {"sc": 3, "so": 4}
    assert spec.perturbation == {"length": 0.001, "angle": 0.002}
    path.write_text("seed = [\n")
    with pytest.raises(ConfigError):
        ScenarioSpec.load(path)
