import io
from datetime import date, timedelta

import pytest
from hypothesis import strategies as st

from gcaudit.kb import bundled_kb
from gcaudit.patient_store import Transaction, ingest_transactions, load_demographics, make_record
from gcaudit.synth import demographics_csv, transactions_csv

D0 = date(2014, 1, 1)


def day(n: int) -> date:
    return D0 + timedelta(days=n)


def lab(concept: str, n: int, value: float, pid: str = "P1") -> Transaction:
    return Transaction(pid, day(n), "lab_result", concept.upper(), "LOCAL", value, "u", None, concept, value, "u")


def order(concept: str, n: int, pid: str = "P1") -> Transaction:
    return Transaction(pid, day(n), "med_order", concept.upper(), "ATC", concept=concept)


def purchase(concept: str, n: int, supply: int, pid: str = "P1") -> Transaction:
    return Transaction(pid, day(n), "med_purchase", concept.upper(), "ATC", quantity_days_supply=supply, concept=concept)


def record(txs=(), first: int = 0, last: int | None = None, birth_year: int | None = 1960, pid: str = "P1"):
    """Record with an explicit observation window [day(first), day(last)]."""
    observation = None if last is None else (day(first), day(last))
    return make_record(pid, txs, "F", birth_year, observation)


def ingest_synthetic(patients, kb, mode="strict"):
    patients = list(patients)
    demo = load_demographics(io.StringIO(demographics_csv(patients)))
    return ingest_transactions(io.StringIO(transactions_csv(patients)), kb, mode, demo)


LAB_RANGES = {"hba1c": (5, 13), "glucose": (3, 25), "creatinine": (50, 250), "ldl": (50, 200)}
DRUGS = ["metformin", "statin", "insulin_fast_acting", "insulin_intermediate"]


@st.composite
def small_records(draw, max_tx: int = 12, max_day: int = 700):
    """Short random records over the fixture KB's concepts, with values near its thresholds."""
    txs = []
    for _ in range(draw(st.integers(0, max_tx))):
        n = draw(st.integers(0, max_day))
        kind = draw(st.sampled_from([*LAB_RANGES, "order", "purchase"]))
        if kind == "order":
            txs.append(order(draw(st.sampled_from(DRUGS)), n))
        elif kind == "purchase":
            txs.append(purchase(draw(st.sampled_from(DRUGS)), n, draw(st.integers(1, 120))))
        else:
            lo, hi = LAB_RANGES[kind]
            txs.append(lab(kind, n, draw(st.floats(lo, hi, allow_nan=False))))
    end = draw(st.integers(0, max_day + 100))
    return record(txs, 0, end, birth_year=draw(st.sampled_from([None, 1950, 1975, 1990])))


@pytest.fixture(scope="session")
def kb():
    return bundled_kb("diabetes_excerpt")


@pytest.fixture(scope="session")
def minimal_kb():
    return bundled_kb("minimal")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.call_report = rep
