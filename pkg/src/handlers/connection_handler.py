"""TCP connection handler for the JSON-lines EaaS protocol."""

import asyncio
import json
import logging
from typing import Dict

from src.adapters.wire_codec import decode_images, encode_features
from src.handlers.service import EaaSService
from src.utils.errors import EaaSError, PreconditionError

logger = logging.getLogger(__name__)

# Max bytes per request line
LINE_LIMIT = 64 * 1024 * 1024


class ConnectionHandler:
    """
    Handles one client connection.

    Requests are one JSON object per line:
        {"op": "embed", "account": ..., "shape": [N, H, W, C], "images": <base64>}
        {"op": "ledger", "account": ...}
    Every request gets exactly one JSON response line.
    """

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, service: EaaSService):
        """
        Initialize connection handler.

        Args:
            reader: Asyncio stream reader
            writer: Asyncio stream writer
            service: Service answering the requests
        """
        self.reader = reader
        self.writer = writer
        self.service = service
        self.logger = logger
        self.addr = writer.get_extra_info("peername")
        self.requests = 0

    async def handle(self):
        """Main connection handling loop."""
        try:
            self.logger.info(f"New connection from {self.addr}")
            while True:
                line = await self.reader.readline()
                if not line:
                    self.logger.info(f"Connection closed by client {self.addr}")
                    break
                if not line.strip():
                    continue

                response = await self._process_line(line)
                self.writer.write(json.dumps(response).encode("utf-8") + b"\n")
                await self.writer.drain()

        except asyncio.CancelledError:
            self.logger.info(f"Connection cancelled for {self.addr}")
        except Exception as e:
            self.logger.error(f"Error handling connection from {self.addr}: {e}")
        finally:
            await self._close_connection()

    async def _process_line(self, line: bytes) -> Dict:
        self.requests += 1
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise PreconditionError("request must be a JSON object")
            op = request.get("op")
            if op == "embed":
                # CPU bound
                return await asyncio.to_thread(self._embed, request)
            if op == "ledger":
                return self._ledger(request)
            raise PreconditionError(f"unknown op '{op}'")
        except json.JSONDecodeError as e:
            self.logger.error(f"Malformed request from {self.addr}: {e}")
            return {"error": "precondition", "detail": f"malformed JSON: {e}"}
        except EaaSError as e:
            self.logger.error(f"Request {self.requests} from {self.addr} failed ({e.kind}): {e}")
            return {"error": e.kind, "detail": str(e)}

    def _embed(self, request: Dict) -> Dict:
        account = request.get("account")
        images = decode_images(request)
        batch = self.service.query(account, images)
        snapshot = batch.billing
        return {
            "features": encode_features(batch.vectors),
            "query_count": snapshot.query_count,
            "cost": snapshot.cost_dollars,
            "remaining": snapshot.remaining,
            "defense_applied": batch.defense_applied,
        }

    def _ledger(self, request: Dict) -> Dict:
        return self.service.ledger_report(request.get("account")).to_dict()

    async def _close_connection(self):
        """Close the connection gracefully."""
        try:
            if self.writer:
                self.writer.close()
                await self.writer.wait_closed()
            self.logger.info(f"Connection closed for {self.addr} after {self.requests} requests")
        except Exception as e:
            self.logger.error(f"Error closing connection: {e}")


async def start_tcp_server(service: EaaSService, host: str, port: int) -> asyncio.AbstractServer:
    """Start the line-protocol server; the caller owns its lifetime."""

    async def handle_client(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        handler = ConnectionHandler(reader, writer, service)
        await handler.handle()

    server = await asyncio.start_server(handle_client, host, port, limit=LINE_LIMIT)
    addr = server.sockets[0].getsockname()
    logger.info(f"EaaS line-protocol server started on {addr[0]}:{addr[1]}")
    return server
