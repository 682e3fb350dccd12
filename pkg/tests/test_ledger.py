from concurrent.futures import ThreadPoolExecutor

import pytest

from src.managers.ledger_manager import QueryLedger
from src.utils.errors import AuthError, PreconditionError, QuotaError


def test_charge_counts_one_query_per_image(ledger):
    ledger.open_account("alice")
    ledger.charge("alice", 5)
    snapshot = ledger.charge("alice", 3)
    assert snapshot.query_count == 8
    assert snapshot.cost_dollars == pytest.approx(8 * 3.2 / 1000)
    assert snapshot.cost_dollars == pytest.approx(0.0256)


def test_default_price_matches_published_rate():
    assert QueryLedger().cost(1000) == pytest.approx(3.2)


@pytest.mark.parametrize("count, dollars", [(1000, 3.2), (2500, 8.0), (5000, 16.0)])
def test_published_price_points(count, dollars):
    ledger = QueryLedger()
    ledger.open_account("bulk")
    assert ledger.charge("bulk", count).cost_dollars == pytest.approx(dollars)


def test_cost_accumulates_across_charges():
    ledger = QueryLedger()
    ledger.open_account("bulk")
    assert ledger.charge("bulk", 2500).cost_dollars == pytest.approx(8.0)
    assert ledger.charge("bulk", 2500).cost_dollars == pytest.approx(16.0)


def test_unknown_account_is_refused(ledger):
    with pytest.raises(AuthError):
        ledger.charge("mallory", 1)
    with pytest.raises(AuthError):
        ledger.report("mallory")


def test_quota_error_leaves_count_unchanged(ledger):
    ledger.open_account("capped", budget_cap=10)
    ledger.charge("capped", 8)
    with pytest.raises(QuotaError):
        ledger.charge("capped", 3)
    snapshot = ledger.report("capped")
    assert snapshot.query_count == 8
    assert snapshot.remaining == 2


def test_exact_cap_is_allowed(ledger):
    ledger.open_account("capped", budget_cap=4)
    assert ledger.charge("capped", 4).remaining == 0
    with pytest.raises(QuotaError):
        ledger.check("capped", 1)


def test_zero_count_is_free_and_negative_rejected(ledger):
    ledger.open_account("alice")
    assert ledger.charge("alice", 0).query_count == 0
    with pytest.raises(PreconditionError):
        ledger.charge("alice", -1)


def test_reopening_keeps_count(ledger):
    ledger.open_account("alice")
    ledger.charge("alice", 2)
    ledger.open_account("alice", budget_cap=100)
    assert ledger.report("alice").query_count == 2
    assert ledger.report("alice").budget_cap == 100


def test_negative_price_rejected():
    with pytest.raises(PreconditionError):
        QueryLedger(price_per_1000=-1.0)


def test_concurrent_charges_are_all_counted(ledger):
    ledger.open_account("alice")
    with ThreadPoolExecutor(max_workers=8) as pool:
        list(pool.map(lambda _: ledger.charge("alice", 1), range(400)))
    assert ledger.report("alice").query_count == 400


def test_concurrent_charges_never_overrun_cap(ledger):
    ledger.open_account("capped", budget_cap=50)

    def attempt(_):
        try:
            ledger.charge("capped", 1)
            return True
        except QuotaError:
            return False

    with ThreadPoolExecutor(max_workers=8) as pool:
        accepted = sum(pool.map(attempt, range(200)))
    assert accepted == 50
    assert ledger.report("capped").query_count == 50


def test_snapshot_lists_every_account(ledger):
    ledger.open_account("alice")
    ledger.open_account("bob", budget_cap=3)
    ledger.charge("bob", 1)
    snapshot = ledger.snapshot()
    assert set(snapshot) == {"alice", "bob"}
    assert snapshot["bob"]["remaining"] == 2
