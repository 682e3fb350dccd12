"""Per-account query metering and billing."""

import logging
import threading
from dataclasses import dataclass
from typing import Dict, Optional

from src.utils.errors import AuthError, PreconditionError, QuotaError

logger = logging.getLogger(__name__)

DEFAULT_PRICE_PER_1000 = 3.2


@dataclass
class AccountLedger:
    """Mutable per-account counter; only QueryLedger touches it."""

    token: str
    query_count: int = 0
    budget_cap: Optional[int] = None


@dataclass(frozen=True)
class LedgerSnapshot:
    """Consistent read of one account."""

    account: str
    query_count: int
    cost_dollars: float
    budget_cap: Optional[int] = None

    @property
    def remaining(self) -> Optional[int]:
        if self.budget_cap is None:
            return None
        return self.budget_cap - self.query_count

    def to_dict(self) -> Dict:
        return {
            "account": self.account,
            "query_count": self.query_count,
            "cost_dollars": self.cost_dollars,
            "budget_cap": self.budget_cap,
            "remaining": self.remaining,
        }


class QueryLedger:
    """
    Counts one query per image and prices them per 1,000.

    Counters only grow. check() and charge() are safe to call from several
    threads; charge() re-checks the cap under the lock, so two racing
    callers can never overrun it.
    """

    def __init__(self, price_per_1000: float = DEFAULT_PRICE_PER_1000):
        if price_per_1000 < 0:
            raise PreconditionError(f"price must be non-negative, got {price_per_1000}")
        self.price_per_1000 = price_per_1000
        self._accounts: Dict[str, AccountLedger] = {}
        self._lock = threading.Lock()
        self.logger = logger

    def open_account(self, token: str, budget_cap: Optional[int] = None):
        """Register an account; reopening an existing one keeps its count."""
        with self._lock:
            if token in self._accounts:
                self._accounts[token].budget_cap = budget_cap
                return
            self._accounts[token] = AccountLedger(token=token, budget_cap=budget_cap)
        self.logger.info(f"Opened account {token} (budget_cap={budget_cap})")

    def has_account(self, token: str) -> bool:
        with self._lock:
            return token in self._accounts

    def cost(self, query_count: int) -> float:
        return query_count * self.price_per_1000 / 1000

    def _get(self, token: str) -> AccountLedger:
        try:
            return self._accounts[token]
        except KeyError:
            raise AuthError(f"Unknown account '{token}'") from None

    def _snapshot(self, entry: AccountLedger) -> LedgerSnapshot:
        return LedgerSnapshot(
            account=entry.token,
            query_count=entry.query_count,
            cost_dollars=self.cost(entry.query_count),
            budget_cap=entry.budget_cap,
        )

    def check(self, token: str, count: int):
        """Raise AuthError / QuotaError if `count` more queries would be refused."""
        with self._lock:
            entry = self._get(token)
            self._check_cap(entry, count)

    @staticmethod
    def _check_cap(entry: AccountLedger, count: int):
        if count < 0:
            raise PreconditionError(f"query count must be non-negative, got {count}")
        if entry.budget_cap is not None and entry.query_count + count > entry.budget_cap:
            raise QuotaError(
                f"Account '{entry.token}' would exceed its budget: "
                f"{entry.query_count} + {count} > {entry.budget_cap}"
            )

    def charge(self, token: str, count: int) -> LedgerSnapshot:
        """Atomically check the cap and add `count` queries."""
        with self._lock:
            entry = self._get(token)
            self._check_cap(entry, count)
            entry.query_count += count
            return self._snapshot(entry)

    def report(self, token: str) -> LedgerSnapshot:
        with self._lock:
            return self._snapshot(self._get(token))

    def snapshot(self) -> Dict[str, Dict]:
        """All accounts, for persisting beside experiment artifacts."""
        with self._lock:
            return {token: self._snapshot(entry).to_dict() for token, entry in self._accounts.items()}
