import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrt_integration.datamodel import (
    CombinedDataset,
    ModeratorConfig,
    TimePoint,
    Trajectory,
    read_csv,
    validate,
    write_csv,
)
from mrt_integration.errors import (
    DimensionMismatch,
    EmptyInternalStudy,
    NonMonotoneTime,
    ParseError,
    PositivityViolation,
    ValidationError,
)
from mrt_integration.features import FeatureSpec, eval_features
from mrt_integration.sim.generative import generate_combined


def _traj(pid, study, ph, T=3, K=2):
    pts = [TimePoint(t, (0.1 * t,) * K, t % 2, float(t), ph) for t in range(1, T + 1)]
    return Trajectory(pid, study, pts)


def test_well_formed_dataset_is_ok():
    ds = CombinedDataset.from_trajectories([_traj("a", 1, 0.5), _traj("b", 1, 0.5)])
    report = validate(ds)
    assert report.ok
    assert ds.n == 2 and ds.n1 == 2 and ds.n0 == 0 and ds.T == 3


def test_zero_probability_is_positivity_violation():
    pts = [TimePoint(1, (0.0,), 0, 1.0, 0.5), TimePoint(2, (0.0,), 0, 1.0, 0.0)]
    ds = CombinedDataset.from_trajectories([Trajectory("p", 1, pts)])
    report = validate(ds, epsilon=0.01)
    assert not report.ok
    assert report.violations[0].kind is PositivityViolation
    assert report.violations[0].row == 1
    with pytest.raises(PositivityViolation):
        report.raise_if_invalid()


def test_no_internal_participants():
    ds = CombinedDataset.from_trajectories([_traj("a", 0, 0.5)])
    with pytest.raises(EmptyInternalStudy):
        validate(ds).raise_if_invalid()


def test_non_monotone_time():
    pts = [TimePoint(2, (0.0,), 0, 1.0, 0.5), TimePoint(1, (0.0,), 1, 1.0, 0.5)]
    ds = CombinedDataset.from_trajectories([Trajectory("p", 1, pts)])
    kinds = {v.kind for v in validate(ds).violations}
    assert NonMonotoneTime in kinds


def test_ragged_covariates_rejected():
    pts = [TimePoint(1, (0.0,), 0, 1.0), TimePoint(2, (0.0, 1.0), 1, 1.0)]
    with pytest.raises(DimensionMismatch):
        CombinedDataset.from_trajectories([Trajectory("p", 1, pts)])


def test_treatment_out_of_range():
    ds = CombinedDataset.from_arrays([0, 0], [1, 1], [1, 2], [[0.0], [0.0]], [0, 2], [1.0, 2.0], [0.5, 0.5], 1)
    assert any(v.kind is DimensionMismatch for v in validate(ds).violations)


def test_feature_spec_beyond_covariates():
    ds = CombinedDataset.from_trajectories([_traj("a", 1, 0.5, K=1)])
    cfg = ModeratorConfig(FeatureSpec.parse("1 + x1"), FeatureSpec.parse("1 + x1 + x2"), FeatureSpec.parse("1"))
    assert not validate(ds, cfg).ok


def test_study_must_be_constant_within_participant():
    with pytest.raises(ValidationError):
        CombinedDataset.from_arrays([0, 0], [1, 0], [1, 2], [[0.0], [0.0]], [0, 1], [1.0, 2.0])


def test_rows_grouped_in_order_of_first_appearance():
    ds = CombinedDataset.from_arrays(
        ["b", "a", "b", "a"], [1, 0, 1, 0], [1, 1, 2, 2], np.arange(4.0)[:, None], [0, 1, 1, 0], [0, 1, 2, 3]
    )
    assert ds.participant_ids == ("b", "a")
    np.testing.assert_array_equal(ds.y, [0, 2, 1, 3])
    np.testing.assert_array_equal(ds.group_sum(ds.y[:, None]).ravel(), [2, 4])
    assert ds.n1 == 1 and ds.n0 == 1


def test_trajectory_round_trip():
    ds = generate_combined(3, 2, 4, seed=0)
    back = CombinedDataset.from_trajectories(list(ds.trajectories()))
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.prob_h, ds.prob_h)
    np.testing.assert_array_equal(back.participant_study, ds.participant_study)


def test_select_and_concat_inverse():
    ds = generate_combined(4, 3, 5, seed=1)
    internal = ds.select(ds.participant_study == 1)
    external = ds.select(ds.participant_study == 0)
    again = CombinedDataset.concat(internal, external)
    np.testing.assert_array_equal(again.y, ds.y)
    assert internal.n0 == 0 and external.n1 == 0


def test_csv_round_trip(tmp_path):
    ds = generate_combined(3, 2, 4, seed=2)
    path = tmp_path / "d.csv"
    write_csv(ds, path)
    back = read_csv(path)
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.prob_h, ds.prob_h)
    np.testing.assert_array_equal(back.participant_study, ds.participant_study)


def test_csv_non_numeric_cell_names_line_and_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("participant_id,study,t,x1,a,y,prob_h\n1,1,1,0.3,1,2.0,0.5\n1,1,2,0.1,0,oops,0.5\n")
    with pytest.raises(ParseError) as info:
        read_csv(path)
    assert info.value.line == 3 and info.value.column == "y"


def test_csv_missing_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("participant_id,study,t,x1,y\n1,1,1,0.3,2.0\n")
    with pytest.raises(ParseError, match="'a'"):
        read_csv(path)


def test_counts_invariant():
    ds = generate_combined(5, 7, 3, seed=3)
    assert ds.n1 + ds.n0 == ds.n == 12
    assert ds.n_rows == 36


def test_moderator_config_common_prefix():
    cfg = ModeratorConfig(FeatureSpec.parse("1 + x1"), FeatureSpec.parse("1 + x1 + x2"), FeatureSpec.parse("1"))
    assert cfg.c == 2 and cfg.d_r == 2 and cfg.d_s == 3
    with pytest.raises(ValueError):
        ModeratorConfig(FeatureSpec.parse("1 + x1"), FeatureSpec.parse("1 + x2 + x1"), FeatureSpec.parse("1"), common_count=2)


def test_moderators_must_nest():
    with pytest.raises(ValueError):
        ModeratorConfig(FeatureSpec.parse("1 + x3"), FeatureSpec.parse("1 + x1"), FeatureSpec.parse("1"))


@settings(max_examples=50)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=3, max_size=3))
def test_common_prefix_features_agree(x):
    cfg = ModeratorConfig(FeatureSpec.parse("1 + x1"), FeatureSpec.parse("1 + x1 + x2 + x1*x3"), FeatureSpec.parse("1"))
    fr = eval_features(x, cfg.f_r)
    fs = eval_features(x, cfg.f_s)
    np.testing.assert_array_equal(fr[: cfg.c], fs[: cfg.c])
