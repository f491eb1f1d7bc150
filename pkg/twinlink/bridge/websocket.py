"""
Run the bridge server (server.create_app under uvicorn) in a
background thread; the returned handle exposes the router and the
bound port, and stops the server on close.
"""

import logging
import threading
import time
from types import TracebackType
from typing import Any, Dict, Optional, Type

# PyPI
import uvicorn

# local
from twinlink.bridge.messages import TransportError
from twinlink.bridge.router import TopicRouter
from twinlink.config import conf
import server

logger = logging.getLogger(__name__)


class BridgeServer:
    def __init__(self, host: Optional[str] = None, port: Optional[int] = None,
                 queue_size: Optional[int] = None):
        self.host = conf.BRIDGE_HOST if host is None else host
        self.requested_port = conf.BRIDGE_PORT if port is None else port
        self.router = TopicRouter(queue_size)
        config = uvicorn.Config(server.create_app(self.router),
                                host=self.host, port=self.requested_port,
                                log_config=None,  # use our logging
                                ws='websockets', lifespan='off',
                                ws_max_size=1 << 24)
        self._server = uvicorn.Server(config)
        self._thread: Optional[threading.Thread] = None

    def start(self, timeout: Optional[float] = None) -> 'BridgeServer':
        if timeout is None:
            timeout = conf.WS_CONNECT_TIMEOUT
        self._thread = threading.Thread(target=self._server.run, daemon=True,
                                        name='bridge-server')
        self._thread.start()
        deadline = time.monotonic() + timeout
        while not self._server.started:
            if not self._thread.is_alive() or time.monotonic() > deadline:
                # uvicorn exits its thread when the bind fails
                self.close()
                raise TransportError(f"cannot serve on {self.host}:{self.requested_port}")
            time.sleep(0.01)
        logger.info(f"bridge serving on ws://{self.host}:{self.port}")
        return self

    @property
    def port(self) -> int:
        """
        bound port (differs from the requested one when that was 0)
        """
        servers = getattr(self._server, 'servers', [])
        for srv in servers:
            for sock in srv.sockets:
                return int(sock.getsockname()[1])
        return self.requested_port

    @property
    def url(self) -> str:
        host = '127.0.0.1' if self.host in ('0.0.0.0', '') else self.host
        return f"ws://{host}:{self.port}"

    def stats(self) -> Dict[str, Any]:
        return self.router.stats_dict()

    def close(self) -> None:
        self._server.should_exit = True
        if self._thread and self._thread.is_alive():
            self._thread.join(timeout=10)
        self._thread = None

    def __enter__(self) -> 'BridgeServer':
        return self

    def __exit__(self, exc_type: Optional[Type[BaseException]],
                 exc: Optional[BaseException],
                 tb: Optional[TracebackType]) -> None:
        self.close()


def serve(host: Optional[str] = None, port: Optional[int] = None,
          queue_size: Optional[int] = None) -> BridgeServer:
    """
    start a bridge server; raises TransportError if it cannot bind
    """
    return BridgeServer(host, port, queue_size).start()
