from bisect import bisect_right
from datetime import date

import pytest
from conftest import D0, day, ingest_synthetic, lab, purchase, record, small_records
from hypothesis import given, settings
from hypothesis import strategies as st
from oracle import holds

from gcaudit.abstraction import abstract_states, change_days, eval_condition, intervals_to_csv
from gcaudit.kb import (
    AbstractionRule,
    AgeCompare,
    And,
    Bin,
    LatestValueCompare,
    Not,
    Or,
    RecordAbsent,
    RecordExists,
    StateHolds,
)
from gcaudit.synth import synth_cohort

INF = float("inf")
GLUCOSE_MG = AbstractionRule("glycemic_state", "glucose",
                             (Bin(-INF, 70, "Hypo"), Bin(70, 180, "Normo"), Bin(180, INF, "Hyper")), 30)


def states(points, rule=GLUCOSE_MG):
    return [(iv.state_label, (iv.start - D0).days, (iv.end - D0).days, iv.support_points)
            for iv in abstract_states([(day(n), v) for n, v in points], rule)]


def test_glucose_example():
    assert states([(0, 100), (10, 110), (15, 320)]) == [("Normo", 0, 10, 2), ("Hyper", 15, 15, 1)]


def test_empty_series():
    assert abstract_states([], GLUCOSE_MG) == []


def test_gap_over_max_splits():
    assert states([(0, 100), (40, 110)]) == [("Normo", 0, 0, 1), ("Normo", 40, 40, 1)]


def test_gap_equal_to_max_merges():
    assert states([(0, 100), (30, 110)]) == [("Normo", 0, 30, 2)]


def test_unsorted_series_is_an_error():
    with pytest.raises(ValueError, match="not sorted"):
        abstract_states([(day(5), 100), (day(1), 100)], GLUCOSE_MG)


def test_bin_boundaries_are_lower_inclusive():
    assert [s[0] for s in states([(0, 70), (100, 180), (200, 69.99)])] == ["Normo", "Hyper", "Hypo"]


def test_intervals_csv():
    text = intervals_to_csv(abstract_states([(day(0), 100)], GLUCOSE_MG))
    assert text == "abstraction_id,state,start,end,support_points\nglycemic_state,Normo,2014-01-01,2014-01-01,1\n"


# ---------------------------------------------------------------------------
# eval_condition
# ---------------------------------------------------------------------------


def test_latest_value_compare_fig1(kb):
    rec = record([lab("hba1c", 0, 11)])
    ok, witnesses = eval_condition(LatestValueCompare("hba1c", ">", 10, 180), rec, kb, day(10))
    assert ok and witnesses == [0]


def test_latest_value_outside_lookback_is_false(kb):
    rec = record([lab("hba1c", 0, 11)])
    assert eval_condition(LatestValueCompare("hba1c", ">", 10, 180), rec, kb, day(181)) == (False, [])
    assert eval_condition(LatestValueCompare("hba1c", ">", 10, 180), rec, kb, day(180))[0]


def test_latest_value_uses_only_the_latest(kb):
    rec = record([lab("hba1c", 0, 11), lab("hba1c", 20, 6)])
    assert not eval_condition(LatestValueCompare("hba1c", ">", 10, None), rec, kb, day(30))[0]
    assert eval_condition(LatestValueCompare("hba1c", ">", 10, None), rec, kb, day(19))[0]


def test_future_data_is_invisible(kb):
    rec = record([lab("hba1c", 5, 11)])
    assert eval_condition(LatestValueCompare("hba1c", ">", 10, None), rec, kb, day(4)) == (False, [])


@pytest.mark.parametrize("cond", [
    LatestValueCompare("hba1c", ">", 0, None),
    LatestValueCompare("hba1c", "<", 100, None),
    RecordExists("metformin", None),
    StateHolds("glycemic_state", "Normoglycemia"),
])
def test_atoms_on_empty_record_are_false(kb, cond):
    assert eval_condition(cond, record(), kb, day(0)) == (False, [])


def test_not_record_exists_with_no_insulin(kb):
    cond = Not(RecordExists("insulin_fast_acting", None))
    assert eval_condition(cond, record([lab("hba1c", 0, 11)]), kb, day(10)) == (True, [])


def test_record_absent(kb):
    rec = record([purchase("statin", 0, 30)])
    assert eval_condition(RecordAbsent("statin", 60), rec, kb, day(30)) == (False, [])
    assert eval_condition(RecordAbsent("statin", 60), rec, kb, day(61)) == (True, [])


def test_state_holds_witnesses_the_supporting_run(kb):
    rec = record([lab("creatinine", 0, 80), lab("creatinine", 30, 150), lab("creatinine", 60, 160)])
    ok, w = eval_condition(StateHolds("kidney_function", "reduced-kidney-function"), rec, kb, day(100))
    assert ok and w == [1, 2]
    assert not eval_condition(StateHolds("kidney_function", "reduced-kidney-function"), rec, kb, day(241))[0]


def test_age_compare(kb):
    rec = record(birth_year=1970)
    assert eval_condition(AgeCompare(">=", 44), rec, kb, day(0))[0]
    assert not eval_condition(AgeCompare(">=", 45), rec, kb, day(0))[0]
    assert not eval_condition(AgeCompare(">=", 0), record(birth_year=None), kb, day(0))[0]


def test_boolean_combinations_merge_witnesses(kb):
    rec = record([lab("hba1c", 0, 11), lab("glucose", 1, 17)])
    both = And((LatestValueCompare("hba1c", ">", 10, None), LatestValueCompare("glucose", ">", 16, None)))
    assert eval_condition(both, rec, kb, day(5)) == (True, [0, 1])
    either = Or((LatestValueCompare("hba1c", ">", 20, None), LatestValueCompare("glucose", ">", 16, None)))
    assert eval_condition(either, rec, kb, day(5)) == (True, [1])


def test_dangling_reference_is_an_error(kb):
    with pytest.raises(KeyError):
        eval_condition(RecordExists("aspirin", None), record(), kb, day(0))
    with pytest.raises(KeyError):
        eval_condition(StateHolds("mood", "calm"), record(), kb, day(0))


# ---------------------------------------------------------------------------
# Properties
# ---------------------------------------------------------------------------

series_points = st.lists(st.tuples(st.integers(0, 400), st.floats(0, 400, allow_nan=False)), max_size=25)


@given(series_points, st.integers(1, 60))
def test_every_point_lies_in_exactly_one_interval(points, max_gap):
    points = sorted(points, key=lambda p: p[0])
    rule = AbstractionRule("g", "glucose", GLUCOSE_MG.bins, max_gap)
    ivs = abstract_states([(day(n), v) for n, v in points], rule)
    assert sum(iv.support_points for iv in ivs) == len(points)
    for a, b in zip(ivs, ivs[1:]):
        assert a.end <= b.start
        if a.state_label == b.state_label:
            assert (b.start - a.end).days > max_gap
    for n, v in points:
        containing = [iv for iv in ivs if iv.start <= day(n) <= iv.end and iv.state_label == rule.label_for(v)]
        assert containing


@given(series_points, st.integers(1, 40), st.integers(0, 40))
def test_wider_max_gap_never_adds_intervals(points, gap, extra):
    points = sorted(points, key=lambda p: p[0])
    narrow = AbstractionRule("g", "glucose", GLUCOSE_MG.bins, gap)
    wide = AbstractionRule("g", "glucose", GLUCOSE_MG.bins, gap + extra)
    series = [(day(n), v) for n, v in points]
    assert len(abstract_states(series, wide)) <= len(abstract_states(series, narrow))


@given(series_points, st.integers(0, 400))
def test_appending_later_points_keeps_earlier_intervals(points, cut):
    points = sorted(points, key=lambda p: p[0])
    series = [(day(n), v) for n, v in points]
    prefix = [p for p in series if p[0] <= day(cut)]
    full = abstract_states(series, GLUCOSE_MG)
    part = abstract_states(prefix, GLUCOSE_MG)
    # all but the last prefix interval are final; the last may only extend
    assert full[:max(len(part) - 1, 0)] == part[:-1]
    if part:
        last, same = part[-1], full[len(part) - 1]
        assert (same.state_label, same.start) == (last.state_label, last.start) and same.end >= last.end


def _kb_conditions(kb):
    conds = [s.applicability for s in kb.monitoring_specs]
    for s in kb.drug_steps:
        conds += [s.indication, s.contraindication]
    return conds


@settings(max_examples=40, deadline=None)
@given(small_records())
def test_conditions_agree_with_brute_force(kb, rec):
    for d in range(rec.horizon_days[0], rec.horizon_days[1] + 1, 7):
        for cond in _kb_conditions(kb):
            ok, w = eval_condition(cond, rec, kb, date.fromordinal(d))
            want, want_w = holds(cond, rec, kb, d)
            assert ok == want
            if ok:
                assert sorted(w) == sorted(want_w)


@settings(max_examples=40, deadline=None)
@given(small_records())
def test_conditions_only_change_on_change_days(kb, rec):
    days = change_days(kb, rec)
    lo, hi = rec.horizon_days
    conds = _kb_conditions(kb)
    for d in range(lo, hi + 1):
        k = bisect_right(days, d) - 1
        anchor = days[k]
        assert anchor <= d
        for cond in conds:
            assert holds(cond, rec, kb, d)[0] == holds(cond, rec, kb, anchor)[0]


@settings(max_examples=20, deadline=None)
@given(small_records(), st.integers(0, 700), st.floats(2, 250, allow_nan=False))
def test_adding_a_later_transaction_does_not_change_the_past(kb, rec, n, value):
    later = record(list(rec.transactions) + [lab("hba1c", n, value)], 0, rec.horizon_days[1] - D0.toordinal())
    for d in range(rec.horizon_days[0], n):
        at = date.fromordinal(d)
        for cond in _kb_conditions(kb):
            assert eval_condition(cond, rec, kb, at)[0] == eval_condition(cond, later, kb, at)[0]


def test_synthetic_records_agree_with_brute_force(kb):
    cohort = ingest_synthetic(synth_cohort(3, seed=4, n_transactions=80), kb)
    for rec in cohort.records():
        lo, hi = rec.horizon_days
        for d in range(lo, hi + 1, 11):
            for cond in _kb_conditions(kb):
                assert eval_condition(cond, rec, kb, date.fromordinal(d))[0] == holds(cond, rec, kb, d)[0]
