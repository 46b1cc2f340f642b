import math
from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from selfcal.estimator import build_system
from selfcal.kinecore import ROOT, DHLink, RobotModel
from selfcal.measurements import Dataset, ExternalPoint, Kind
from selfcal.observability import (
    compare_campaigns,
    eliminate_columns,
    find_unidentifiable,
    observability_indices,
    singular_values,
)
from selfcal.sensemodel import ExternalDevice, MarkerPoint
from selfcal.simlab import ScenarioSpec, generate_records

matrices = arrays(np.float64, st.tuples(st.integers(3, 12), st.integers(1, 3)),
                  elements=st.floats(-10, 10, allow_nan=False, allow_subnormal=False))


def test_identity_indices():
    rep = observability_indices(np.eye(3), 3)
    np.testing.assert_array_equal(rep.singular_values, (1.0, 1.0, 1.0))
    assert rep.O1 == pytest.approx(1 / math.sqrt(3), abs=1e-15)
    assert (rep.O2, rep.O3, rep.O4) == (1.0, 1.0, 1.0)
    assert rep.unidentifiable == []


def test_diagonal_indices():
    rep = observability_indices(np.diag([2.0, 1.0]), 2)
    assert rep.O1 == pytest.approx(1.0, abs=1e-15)
    assert (rep.O2, rep.O3, rep.O4) == (0.5, 1.0, 0.5)


def test_zero_matrix_is_degenerate():
    rep = observability_indices(np.zeros((4, 2)))
    assert rep.degenerate
    assert (rep.O1, rep.O2, rep.O3, rep.O4) == (0.0, 0.0, 0.0, 0.0)
    assert len(rep.unidentifiable) == 2


def test_invalid_input():
    with pytest.raises(ValueError):
        observability_indices(np.zeros((3, 0)))
    with pytest.raises(ValueError):
        observability_indices(np.array([[1.0, math.nan]]))


def test_indices_match_reference_svd():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m, n = rng.integers(5, 40), rng.integers(1, 5)
        J = rng.normal(size=(m, n)) * rng.uniform(0.1, 10, n)
        # a different LAPACK driver than the package uses
        s = scipy.linalg.svd(J, compute_uv=False, lapack_driver="gesvd")
        rep = observability_indices(J)
        np.testing.assert_allclose(rep.singular_values, s, rtol=1e-10)
        assert rep.O1 == pytest.approx(np.prod(s) ** (1 / n) / math.sqrt(m), rel=1e-10)
        assert rep.O2 == pytest.approx(s[-1] / s[0], rel=1e-10)
        assert rep.O3 == pytest.approx(s[-1], rel=1e-10)
        assert rep.O4 == pytest.approx(s[-1] ** 2 / s[0], rel=1e-10)


def test_wide_matrix_pads_zero_singular_values():
    s = singular_values(np.ones((1, 3)))
    np.testing.assert_allclose(s, (math.sqrt(3), 0.0, 0.0))


def test_full_rank_has_no_unidentifiable():
    rng = np.random.default_rng(1)
    assert find_unidentifiable(rng.normal(size=(30, 6))) == []


def test_duplicated_column_is_flagged():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = rng.integers(2, 8)
        J = rng.normal(size=(rng.integers(n + 1, 30), n))
        i, j = rng.choice(n + 1, 2, replace=False)
        src = min(i, n - 1)
        J = np.insert(J, j, J[:, src] if j <= src else J[:, src], axis=1)
        dup = (src + 1 if j <= src else src, j)
        found = find_unidentifiable(J)
        assert len(found) == 1
        idx, v = found[0]
        assert set(idx) == set(dup)
        assert abs(v[dup[0]] + v[dup[1]]) < 1e-8
        rep = observability_indices(J)
        assert rep.unidentifiable and rep.O3 <= 1e-8 * rep.singular_values[0]


def _two_slider_model():
    # parallel z axes: d1 and d2 move the marker along the same line
    frames = (DHLink("j1", ROOT, a=0.4, d=0.1), DHLink("j2", "j1", a=0.3, d=0.2))
    return RobotModel(frames, markers=(MarkerPoint("tip", "j2", (0.05, 0.0, 0.0)),),
                      devices=(ExternalDevice("dev"),)).with_mask(["frame/j*/d", "frame/j*/a"])


def test_same_axis_offsets_share_one_direction():
    model = _two_slider_model()
    rng = np.random.default_rng(3)
    ms = tuple(ExternalPoint(tuple(rng.uniform(-3, 3, 2)), point="tip", device="dev", position=(0.0, 0.0, 0.0))
               for _ in range(20))
    J = build_system(model, None, Dataset(ms, {Kind.EXTERNAL: 1e-3})).J
    keys = [s.key for s in model.free_slots]
    found = find_unidentifiable(J)
    assert len(found) == 1
    idx, v = found[0]
    assert sorted(keys[i] for i in idx) == ["frame/j1/d", "frame/j2/d"]
    assert v[keys.index("frame/j1/d")] == pytest.approx(-v[keys.index("frame/j2/d")], abs=1e-6)
    # the SVD oracle agrees about the rank deficit
    s = scipy.linalg.svd(J, compute_uv=False, lapack_driver="gesvd")
    assert s[-1] < 1e-8 * s[0] < s[-2]


def test_external_gauge_freedom_is_reported(rig):
    frames = tuple(replace(f, calibratable=True) if f.name == "torso" else f for f in rig.frames)
    model = RobotModel(frames, rig.cameras, rig.markers, rig.patches, rig.planes, rig.devices, rig.chains)
    model = model.with_mask(["frame/torso/*", "frame/L[1-6]/*", "frame/R[1-6]/*", "device/tracker/*"])
    spec = ScenarioSpec(counts={"ext": 150}, seed=5)
    recs = generate_records(spec, rig, Kind.EXTERNAL, range(150))
    J = build_system(model, None, Dataset(tuple(recs), {Kind.EXTERNAL: 5e-4}), "central").J
    # base pose and device pose trade off exactly: at least a full rigid motion
    assert len(find_unidentifiable(J)) >= 6


@settings(max_examples=100, deadline=None)
@given(matrices, st.integers(0, 2**32 - 1))
def test_row_permutation_invariance(J, seed):
    perm = np.random.default_rng(seed).permutation(J.shape[0])
    a, b = observability_indices(J), observability_indices(J[perm])
    for name in ("O1", "O2", "O3", "O4"):
        assert abs(getattr(a, name) - getattr(b, name)) <= 1e-12 * max(1.0, abs(getattr(a, name)))


@settings(max_examples=100, deadline=None)
@given(matrices, st.floats(0.01, 100))
def test_scaling_laws(J, c):
    a, b = observability_indices(J), observability_indices(c * J)
    if a.O3 <= 1e-6 * max(a.singular_values[0], 1e-300):
        return  # rank-deficient draws carry no ratio information
    assert b.O2 == pytest.approx(a.O2, rel=1e-12, abs=1e-12)
    assert b.O4 == pytest.approx(c * a.O4, rel=1e-10)
    assert b.O1 == pytest.approx(c * a.O1, rel=1e-10)
    assert b.O3 == pytest.approx(c * a.O3, rel=1e-10)


def test_o2_o4_exact_under_power_of_two_scaling():
    J = np.random.default_rng(4).normal(size=(10, 4))
    a, b = observability_indices(J), observability_indices(4.0 * J)
    assert abs(b.O2 - a.O2) <= 1e-12
    assert abs(b.O4 / 4.0 - a.O4) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(matrices, arrays(np.float64, st.integers(1, 4), elements=st.floats(-10, 10, allow_subnormal=False)))
def test_appending_rows_never_lowers_singular_values(J, extra):
    rows = np.resize(extra, (len(extra), J.shape[1]))
    before = singular_values(J)
    after = singular_values(np.vstack([J, rows]))
    assert np.all(after >= before - 1e-9 * max(1.0, before[0]))


def test_eliminate_columns_matches_schur_complement():
    rng = np.random.default_rng(5)
    J = rng.normal(size=(25, 6))
    Jr = eliminate_columns(J, [1, 4])
    A = J.T @ J
    keep, nui = [0, 2, 3, 5], [1, 4]
    schur = A[np.ix_(keep, keep)] - A[np.ix_(keep, nui)] @ np.linalg.solve(A[np.ix_(nui, nui)], A[np.ix_(nui, keep)])
    np.testing.assert_allclose(Jr.T @ Jr, schur, atol=1e-10)
    np.testing.assert_array_equal(eliminate_columns(J, []), J)


def test_campaign_ranking():
    good = observability_indices(np.diag([3.0, 2.0]))
    mid = observability_indices(np.diag([2.0, 1.0]))
    bad = observability_indices(np.diag([1.0, 0.5]))
    table = compare_campaigns({"sc": bad, "so": mid, "sc+so": good})
    assert [r.label for r in table.rows] == ["sc+so", "so", "sc"]
    assert [r.rank for r in table.rows] == [1, 2, 3]
    assert table.multi_dominates_single
    table = compare_campaigns({"sc": good, "so": mid, "sc+so": bad})
    assert not table.multi_dominates_single


def test_campaign_ties_keep_input_order():
    rep = observability_indices(np.eye(2))
    table = compare_campaigns({"so": rep, "sc": rep, "ext": rep})
    assert [r.label for r in table.rows] == ["so", "sc", "ext"]


def test_campaign_single_report_and_csv():
    table = compare_campaigns({("sc",): observability_indices(np.eye(2))}, {("sc",): {"cost": 1.5}})
    assert len(table.rows) == 1 and table.rows[0].rank == 1
    assert not table.multi_dominates_single
    lines = table.to_csv().splitlines()
    assert lines[0] == "rank,label,O1,O2,O3,O4,cost"
    assert lines[1].startswith("1,sc,") and lines[1].endswith(",1.5")


def test_campaign_dimension_mismatch():
    with pytest.raises(ValueError):
        compare_campaigns({"sc": observability_indices(np.eye(2)), "so": observability_indices(np.eye(3))})
