import io
from datetime import date

import pytest
from conftest import D0, day, ingest_synthetic, lab, purchase, record
from hypothesis import given, settings
from hypothesis import strategies as st

from gcaudit.patient_store import (
    IngestError,
    coverage_segments,
    dumps_cohort,
    ingest_transactions,
    load_cohort,
    loads_cohort,
    merge_intervals,
    save_cohort,
    series_query,
)
from gcaudit.synth import synth_cohort

HEADER = "patient_id,date,kind,code,code_system,value,unit,days_supply\n"


def ingest(body: str, kb, mode="strict"):
    return ingest_transactions(io.StringIO(HEADER + body), kb, mode)


def test_three_well_formed_rows(kb):
    cohort = ingest(
        "P1,2014-01-01,lab_result,HBA1C,LOCAL,7.1,%,\n"
        "P1,2014-01-02,med_order,A10BA02,ATC,,,\n"
        "P1,2014-01-03,med_purchase,A10BA02,ATC,,,30\n",
        kb,
    )
    rec = cohort.patients["P1"]
    assert len(rec.transactions) == 3
    assert cohort.report.rejected == []
    assert cohort.report.input_rows == cohort.report.accepted == 3
    assert [tx.concept for tx in rec.transactions] == ["hba1c", "metformin", "metformin"]
    assert rec.transactions[2].quantity_days_supply == 30


def test_unmapped_code_strict_is_rejected(kb):
    cohort = ingest("P1,2014-01-01,lab_result,Z99,LOCAL,1,%,\n", kb)
    assert cohort.report.accepted == 0
    [rej] = cohort.report.rejected
    assert rej.reason == "unmapped code"
    assert rej.row_number == 2


def test_unmapped_code_lenient_is_retained_flagged(kb):
    cohort = ingest("P1,2014-01-01,lab_result,Z99,LOCAL,1,%,\n", kb, mode="lenient")
    [tx] = cohort.patients["P1"].transactions
    assert tx.concept is None
    assert cohort.report.unmapped_retained == 1 and not cohort.report.rejected


def test_glucose_mg_dl_is_normalised(kb):
    cohort = ingest("P1,2014-01-01,lab_result,GLU-SER,LOCAL,180,mg/dL,\n", kb)
    [tx] = cohort.patients["P1"].transactions
    assert round(tx.value, 2) == 9.99
    assert tx.unit == "mmol/L"
    assert (tx.source_value, tx.source_unit) == (180, "mg/dL")


@pytest.mark.parametrize("row, reason", [
    ("P1,2014-13-01,lab_result,HBA1C,LOCAL,7,%,", "unparseable date"),
    ("P1,2014-01-01,lab_result,HBA1C,LOCAL,seven,%,", "unparseable value"),
    ("P1,2014-01-01,lab_result,HBA1C,LOCAL,7,%", "expected 8 columns"),
    ("P1,2014-01-01,med_purchase,A10BA02,ATC,,,0", "days_supply must be positive"),
    ("P1,2014-01-01,med_purchase,A10BA02,ATC,,,", "needs days_supply"),
    ("P1,2014-01-01,vaccination,A10BA02,ATC,,,", "unknown kind"),
    ("P1,2014-01-01,lab_result,GLU-SER,LOCAL,100,furlongs,", "not convertible"),
    ("P1,2014-01-01,lab_result,A10BA02,ATC,1,%,", "maps to medication-class"),
])
def test_malformed_rows_are_rejected_not_fatal(kb, row, reason):
    cohort = ingest(row + "\nP2,2014-01-01,lab_result,HBA1C,LOCAL,7,%,\n", kb)
    assert cohort.report.input_rows == 2
    assert cohort.report.accepted == 1
    [rej] = cohort.report.rejected
    assert reason in rej.reason and rej.row_number == 2


def test_bad_header_is_a_file_error(kb):
    with pytest.raises(IngestError):
        ingest_transactions(io.StringIO("a,b,c\n"), kb)


def test_totals_add_up(kb):
    cohort = ingest_synthetic(synth_cohort(5, seed=3, unmapped_rate=0.1), kb, mode="strict")
    r = cohort.report
    assert r.accepted + len(r.rejected) == r.input_rows
    assert r.rejected and all(x.reason == "unmapped code" for x in r.rejected)


def test_ingestion_is_idempotent(kb):
    patients = list(synth_cohort(4, seed=11, unmapped_rate=0.05))
    a = ingest_synthetic(patients, kb, mode="lenient")
    b = ingest_synthetic(patients, kb, mode="lenient")
    assert a == b


# ---------------------------------------------------------------------------
# series_query
# ---------------------------------------------------------------------------


def _hba1c_record():
    return record([lab("hba1c", n, 6 + n / 100) for n in (0, 30, 60, 90, 120)])


def test_series_window_filters():
    got = series_query(_hba1c_record(), "hba1c", (day(20), day(100)))
    assert got == [(day(30), 6.3), (day(60), 6.6), (day(90), 6.9)]


def test_series_empty_window():
    assert series_query(_hba1c_record(), "hba1c", (day(31), day(59))) == []


def test_series_full_horizon():
    rec = _hba1c_record()
    assert len(series_query(rec, "hba1c", rec.horizon)) == 5


def test_series_unknown_concept(kb):
    with pytest.raises(KeyError):
        series_query(_hba1c_record(), "hemoglobin", (D0, D0), kb)


# ---------------------------------------------------------------------------
# coverage_segments
# ---------------------------------------------------------------------------


def _ordinal_segments(rec, concept="metformin"):
    return [(a.toordinal() - D0.toordinal(), b.toordinal() - D0.toordinal()) for a, b in coverage_segments(rec, concept)]


def test_coverage_with_gap():
    rec = record([purchase("metformin", 0, 30), purchase("metformin", 45, 30)])
    assert _ordinal_segments(rec) == [(0, 30), (45, 75)]


def test_coverage_overlap_merges():
    rec = record([purchase("metformin", 0, 30), purchase("metformin", 20, 30)])
    assert _ordinal_segments(rec) == [(0, 50)]


def test_coverage_touching_merges():
    rec = record([purchase("metformin", 0, 30), purchase("metformin", 30, 10)])
    assert _ordinal_segments(rec) == [(0, 40)]


def test_coverage_none():
    assert coverage_segments(record([lab("hba1c", 0, 7)]), "metformin") == []


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def test_cohort_round_trip_is_bit_exact(kb, tmp_path):
    cohort = ingest_synthetic(synth_cohort(6, seed=2, unmapped_rate=0.05), kb, mode="lenient")
    text = dumps_cohort(cohort)
    assert loads_cohort(text) == cohort
    path = tmp_path / "cohort.json"
    save_cohort(cohort, path)
    assert path.read_text(encoding="utf-8") == text
    assert load_cohort(path) == cohort
    assert dumps_cohort(load_cohort(path)) == text


def test_round_trip_preserves_float_bits(kb):
    cohort = ingest("P1,2014-01-01,lab_result,GLU-SER,LOCAL,123.456789,mg/dL,\n", kb)
    again = loads_cohort(dumps_cohort(cohort))
    a = cohort.patients["P1"].transactions[0].value
    b = again.patients["P1"].transactions[0].value
    assert a.hex() == b.hex()


# ---------------------------------------------------------------------------
# Properties
# ---------------------------------------------------------------------------

purchases = st.lists(st.tuples(st.integers(0, 400), st.integers(1, 120)), max_size=12)


@given(purchases)
def test_coverage_is_disjoint_sorted_and_bounded(items):
    rec = record([purchase("metformin", d, s) for d, s in items])
    segs = _ordinal_segments(rec)
    assert all(a < b for a, b in segs)
    assert all(prev[1] < nxt[0] for prev, nxt in zip(segs, segs[1:]))
    total = sum(b - a for a, b in segs)
    assert total <= sum(s for _, s in items)
    covered = {x for d, s in items for x in range(d, d + s)}
    assert total == len(covered)
    overlapping = len(covered) < sum(s for _, s in items)
    assert (total == sum(s for _, s in items)) == (not overlapping)


@given(st.lists(st.tuples(st.integers(-50, 50), st.integers(0, 30)), max_size=10))
def test_merge_intervals_is_idempotent(raw):
    intervals = [(a, a + n) for a, n in raw]
    once = merge_intervals(intervals)
    assert merge_intervals(once) == once


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_full_horizon_series_partition_lab_transactions(seed):
    from gcaudit.kb import bundled_kb
    kb = bundled_kb()
    cohort = ingest_synthetic(synth_cohort(1, seed=seed, n_transactions=60), kb)
    rec = cohort.records()[0]
    labs = [tx for tx in rec.transactions if tx.kind == "lab_result"]
    seen = []
    for concept in (c.id for c in kb.concepts if c.kind == "raw-numeric"):
        seen += series_query(rec, concept, rec.horizon)
    assert sorted(seen) == sorted((tx.date, tx.value) for tx in labs)


def test_demographic_observation_window_widens_horizon(kb):
    from gcaudit.patient_store import load_demographics
    demo = load_demographics(io.StringIO(
        "patient_id,gender,birth_year,observation_start,observation_end\nP1,F,1950,2013-01-01,2015-12-31\n"))
    cohort = ingest_transactions(io.StringIO(HEADER + "P1,2014-01-01,lab_result,HBA1C,LOCAL,7,%,\n"), kb,
                                 demographics=demo)
    assert cohort.patients["P1"].horizon == (date(2013, 1, 1), date(2015, 12, 31))
    assert cohort.patients["P1"].birth_year == 1950
