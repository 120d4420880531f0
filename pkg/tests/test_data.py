import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from smarttmle.data import (
    CSV_COLUMNS,
    DataError,
    REGIMES,
    SubjectRecord,
    TrialDataset,
    evaluate_rule_d,
    follows_regime,
    get_regime,
    parse_dataset,
    rule_d,
    serialize_dataset,
)
from smarttmle.simulation import SimParams, simulate_trial

HEADER = ",".join(CSV_COLUMNS)


@pytest.mark.parametrize("args, arm", [((0, 5, 9), 0), ((1, 2, 0), 1), ((2, 2, 3), 3), ((1, 3, 3), 3),
                                       ((1, 3, 2), 1), ((2, 0, 0), 2)])
def test_rule_d_examples(args, arm):
    assert evaluate_rule_d(*args) == arm


def test_rule_d_rejects_bad_input():
    with pytest.raises(DataError):
        evaluate_rule_d(3, 1, 1)
    with pytest.raises(DataError):
        evaluate_rule_d(1, -1, 1)


@given(st.integers(0, 2), st.integers(0, 50), st.integers(0, 50))
def test_rule_d_properties(a0, y0, y1):
    d = evaluate_rule_d(a0, y0, y1)
    assert d in (0, 1, 2, 3)
    if d == 3:
        assert a0 != 0
    if a0 != 0 and (y1 < y0 or y1 == 0):
        assert d == a0
    assert rule_d(a0, y0, y1) == d


def test_rule_d_vectorised_nan():
    out = rule_d([1, 1], [1, 1], [2, np.nan])
    assert out[0] == 3 and np.isnan(out[1])


def _rec(**kw):
    base = dict(id="x", w0=0.0, y0=2, a0=1, c1=1, w1=0.0, y1=5, a1=3)
    base.update(kw)
    return SubjectRecord(**base)


def test_follows_regime_examples():
    ii = REGIMES["II"]
    assert follows_regime(_rec(), ii, 1)
    assert not follows_regime(_rec(a1=1), ii, 1)
    assert not follows_regime(_rec(a0=2, a1=2), ii, 0)
    assert follows_regime(_rec(a1=1), REGIMES["IIA"], 1)


@given(st.integers(0, 2), st.integers(0, 9), st.integers(0, 9), st.booleans(),
       st.sampled_from(sorted(REGIMES)))
def test_follows_stage1_implies_stage0(a0, y0, y1, step, label):
    a1 = evaluate_rule_d(a0, y0, y1) if step else a0
    rec = _rec(a0=a0, y0=y0, y1=y1, a1=a1)
    r = REGIMES[label]
    if follows_regime(rec, r, 1):
        assert follows_regime(rec, r, 0)


def test_get_regime():
    assert get_regime("iia") is REGIMES["IIA"]
    with pytest.raises(ValueError):
        get_regime("IV")


def test_parse_example_row():
    # literal mapping of the row: c3=1 and y3=0
    data = parse_dataset(HEADER + "\ns1,1,2,1,1,0.5,3,3,1,0.2,1,1,0\n")
    r = data.record(0)
    assert (r.w0, r.y0, r.a0, r.c1, r.w1, r.y1, r.a1) == (1.0, 2, 1, 1, 0.5, 3, 3)
    assert (r.c2, r.w2, r.y2, r.c3, r.y3) == (1, 0.2, 1, 1, 0)
    assert r.cumulative_y == 4


def test_parse_censored_at_visit_three():
    data = parse_dataset(HEADER + "\ns1,1,2,1,1,0.5,3,3,1,0.2,1,0,\n")
    r = data.record(0)
    assert r.c3 == 0 and r.y3 is None and r.cumulative_y is None
    assert np.isnan(data.y3[0])


def test_parse_errors():
    with pytest.raises(DataError) as e:
        parse_dataset(HEADER + "\ns1,1,2,1,0,0.5,3,,0,,,0,\n")
    assert e.value.ids == ["s1"]
    with pytest.raises(DataError) as e:
        parse_dataset(HEADER + "\ns1,1,2,1,1,0.5,3,1,1,0.2,1,1,0\ns2,1,x,1,0,,,,0,,,0,\n")
    assert e.value.row == 3
    with pytest.raises(DataError):
        parse_dataset("id,w0\n")
    with pytest.raises(DataError):
        parse_dataset("")
    # duplicate ids
    with pytest.raises(DataError):
        parse_dataset(HEADER + "\ns1,1,2,0,0,,,,0,,,0,\ns1,1,2,0,0,,,,0,,,0,\n")
    # count cap
    with pytest.raises(DataError):
        parse_dataset(HEADER + "\ns1,1,2000,0,0,,,,0,,,0,\n")
    assert parse_dataset(HEADER + "\ns1,1,2000,0,0,,,,0,,,0,\n", count_cap=5000).n == 1
    # a1 must respect the step-up design
    with pytest.raises(DataError):
        parse_dataset(HEADER + "\ns1,1,2,1,1,0,1,3,0,,,0,\n")
    with pytest.raises(DataError):
        parse_dataset(HEADER + "\ns1,1,2,1,1,0,1,2,0,,,0,\n")


def test_non_monotone_rejected_or_coerced():
    row = HEADER + "\ns1,1,2,0,1,0,3,0,0,,,1,4\n"
    with pytest.raises(DataError):
        parse_dataset(row)
    data = parse_dataset(row, coerce_monotone=True)
    assert data.c3[0] == 0 and np.isnan(data.y3[0])


def test_empty_dataset():
    data = parse_dataset(HEADER + "\n")
    assert data.n == 0
    assert serialize_dataset(data) == HEADER + "\n"


def test_round_trip(sim_data):
    text = serialize_dataset(sim_data)
    again = parse_dataset(io.StringIO(text))
    assert again == sim_data
    assert serialize_dataset(again) == text


@given(st.integers(0, 40), st.integers(0, 10_000), st.floats(-4.5, -1.0))
def test_round_trip_property(n, seed, alpha0):
    data = simulate_trial(SimParams(n=n, alpha0=alpha0), seed=seed)
    assert parse_dataset(serialize_dataset(data)) == data


def test_dataset_is_read_only(sim_data):
    assert isinstance(sim_data, TrialDataset)
    with pytest.raises(ValueError):
        sim_data.y0[0] = 5
    sub = sim_data.subset(sim_data.a0 == 1)
    assert sub.n == sim_data.arm_counts()[1]
    assert TrialDataset.from_records(sim_data.records()) == sim_data
