"""
Bridge web server: rosbridge WebSocket endpoint at "/" plus
small JSON status API.  Started by twinlink.bridge.websocket.serve
(scripts/twinlink.py serve).
"""

import asyncio
import logging
import os
from typing import Dict

# PyPI:
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from sentry_sdk.integrations.asgi import SentryAsgiMiddleware

import twinlink
from twinlink.bridge.messages import DecodeError, decode
from twinlink.bridge.router import TopicRouter
import twinlink.sentry

from server.util import api_method

logger = logging.getLogger(__name__)


async def _sender(ws: WebSocket, router: TopicRouter, client_id: str,
                  wake: asyncio.Event) -> None:
    """
    forward queued messages to the client, one frame per message
    """
    try:
        while True:
            await wake.wait()
            wake.clear()
            for seq, data in router.drain(client_id):
                await ws.send_text(data.decode('utf-8'))
    except asyncio.CancelledError:
        raise
    except Exception as e:
        # receive side sees the disconnect and cleans up
        logger.debug(f"{client_id}: send failed: {e!r}")


def create_app(router: TopicRouter) -> FastAPI:
    app = FastAPI(
        title="twinlink bridge",
        description="rosbridge compatible topic bus for the twinlink digital twins",
        version=twinlink.VERSION,
        license_info={
            "name": "The MIT License"
        },
    )

    if twinlink.sentry.init():
        try:
            app.add_middleware(SentryAsgiMiddleware)
        except Exception:
            # pass silently if the Sentry integration failed
            pass

    @app.websocket("/")
    async def bridge_socket(ws: WebSocket) -> None:
        await ws.accept()
        loop = asyncio.get_running_loop()
        wake = asyncio.Event()
        peer = f"{ws.client.host}:{ws.client.port}" if ws.client else 'ws'
        client_id = router.connect(peer, notify=lambda: loop.call_soon_threadsafe(wake.set))
        sender = asyncio.create_task(_sender(ws, router, client_id, wake))
        try:
            while True:
                text = await ws.receive_text()
                try:
                    msg = decode(text)
                except DecodeError as e:
                    logger.warning(f"{client_id}: {e}")
                    continue
                router.handle(client_id, msg)
        except WebSocketDisconnect:
            pass
        finally:
            router.disconnect(client_id)
            sender.cancel()

    @app.get("/api/version")
    @api_method
    def version() -> Dict:
        return {'VERSION': twinlink.VERSION, 'GIT_REV': os.environ.get('GIT_REV')}

    @app.get("/api/stats")
    @api_method
    def stats() -> Dict:
        return router.stats_dict()

    return app
