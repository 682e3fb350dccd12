"""HTTP/JSON binding of the EaaS service."""

import logging
from typing import List, Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from src.adapters.wire_codec import decode_images, encode_features
from src.handlers.service import EaaSService
from src.utils.errors import EaaSError

logger = logging.getLogger(__name__)

ERROR_STATUS = {
    "auth": 401,
    "quota": 402,
    "precondition": 400,
    "configuration": 400,
}


class EmbedRequest(BaseModel):
    account: str
    shape: List[int] = Field(min_length=4, max_length=4)
    images: str


class EmbedResponse(BaseModel):
    features: List[List[float]]
    query_count: int
    cost: float
    remaining: Optional[int] = None
    defense_applied: Optional[str] = None


class LedgerResponse(BaseModel):
    account: str
    query_count: int
    cost_dollars: float
    budget_cap: Optional[int] = None
    remaining: Optional[int] = None


def create_app(service: EaaSService) -> FastAPI:
    """
    Build the FastAPI app around a service instance.

    Args:
        service: In-process service that holds the target and the ledger

    Returns:
        FastAPI application
    """
    app = FastAPI(title="EaaS simulator", version="1.0")

    @app.exception_handler(EaaSError)
    async def _eaas_error(request: Request, exc: EaaSError):
        status = ERROR_STATUS.get(exc.kind, 500)
        logger.error(f"{request.method} {request.url.path} failed ({exc.kind}): {exc}")
        return JSONResponse(status_code=status, content={"error": exc.kind, "detail": str(exc)})

    @app.get("/health")
    def health():
        return {"status": "ok", "feature_dim": service.feature_dim, "defense": service.defense.describe()}

    @app.post("/v1/embed", response_model=EmbedResponse)
    def embed(request: EmbedRequest):
        images = decode_images({"shape": request.shape, "images": request.images})
        batch = service.query(request.account, images)
        snapshot = batch.billing
        return EmbedResponse(
            features=encode_features(batch.vectors),
            query_count=snapshot.query_count,
            cost=snapshot.cost_dollars,
            remaining=snapshot.remaining,
            defense_applied=batch.defense_applied,
        )

    @app.get("/v1/ledger/{account}", response_model=LedgerResponse)
    def ledger(account: str):
        return LedgerResponse(**service.ledger_report(account).to_dict())

    return app
