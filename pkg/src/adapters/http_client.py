"""Remote EaaS client over the HTTP binding."""

import logging
from typing import Optional

import httpx

from src.adapters.base import EncoderAPI, ImageBatch
from src.adapters.wire_codec import decode_features, encode_images
from src.managers.ledger_manager import LedgerSnapshot
from src.models.features import FeatureBatch
from src.utils.errors import AuthError, EaaSError, PreconditionError, QuotaError

logger = logging.getLogger(__name__)

STATUS_ERRORS = {
    401: AuthError,
    402: QuotaError,
    400: PreconditionError,
}


class HttpEncoderAPI(EncoderAPI):
    """
    EncoderAPI backed by a running `serve --transport http` process.

    Feature values arrive rounded to 8 significant digits.
    """

    def __init__(self, base_url: str, client: Optional[httpx.Client] = None, timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.client = client or httpx.Client(base_url=self.base_url, timeout=timeout)
        self.logger = logger

    def _raise_for_error(self, response: httpx.Response):
        if response.status_code < 400:
            return
        try:
            detail = response.json().get("detail", response.text)
        except ValueError:
            detail = response.text
        error_cls = STATUS_ERRORS.get(response.status_code, EaaSError)
        self.logger.error(f"EaaS request failed with HTTP {response.status_code}: {detail}")
        raise error_cls(str(detail))

    def query(self, account: str, images: ImageBatch) -> FeatureBatch:
        payload = {"account": account, **encode_images(images)}
        try:
            response = self.client.post("/v1/embed", json=payload)
        except httpx.HTTPError as e:
            raise EaaSError(f"EaaS endpoint unreachable: {e}") from e
        self._raise_for_error(response)
        body = response.json()
        remaining = body.get("remaining")
        return FeatureBatch(
            vectors=decode_features(body["features"]),
            source="eaas",
            defense_applied=body.get("defense_applied"),
            billing=LedgerSnapshot(
                account=account,
                query_count=body["query_count"],
                cost_dollars=body["cost"],
                budget_cap=None if remaining is None else body["query_count"] + remaining,
            ),
        )

    def ledger_report(self, account: str) -> LedgerSnapshot:
        try:
            response = self.client.get(f"/v1/ledger/{account}")
        except httpx.HTTPError as e:
            raise EaaSError(f"EaaS endpoint unreachable: {e}") from e
        self._raise_for_error(response)
        body = response.json()
        return LedgerSnapshot(
            account=body["account"],
            query_count=body["query_count"],
            cost_dollars=body["cost_dollars"],
            budget_cap=body.get("budget_cap"),
        )

    def close(self):
        self.client.close()
