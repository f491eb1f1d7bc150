"""
Bus client handles.  BusClient holds the transport independent
part (advertisements, subscriptions, typed dispatch);
WebSocketClient speaks rosbridge to a server.

Callbacks are only ever called from pump() (loopback) or
spin_once() (WebSocket), in delivery order, on the calling thread.
"""

import logging
import queue
import threading
import time
from typing import Any, Callable, Dict, List, Optional, Union
import uuid

# PyPI
from websockets.exceptions import ConnectionClosed, InvalidHandshake, InvalidURI
from websockets.sync.client import ClientConnection
from websockets.sync.client import connect as ws_connect

# local
from twinlink.bridge.messages import (BoolMsg, BridgeMessage, DecodeError, Op,
                                      TransportError, decode, encode, publish)
from twinlink.config import conf

logger = logging.getLogger(__name__)

Callback = Callable[[BridgeMessage], None]


class BusClient:
    """
    one participant on the bus
    """

    def __init__(self, name: str):
        self.name = name
        self.advertised: Dict[str, str] = {}
        self.subscriptions: Dict[str, str] = {}
        self.callbacks: Dict[str, List[Callback]] = {}
        self.received = 0
        self.closed = False

    def _send(self, msg: BridgeMessage) -> None:
        raise NotImplementedError

    def advertise(self, topic: str, msg_type: str) -> None:
        if self.advertised.get(topic) == msg_type:
            return
        self.advertised[topic] = msg_type
        self._send(BridgeMessage(Op.ADVERTISE, topic, msg_type, id=f"advertise:{topic}"))

    def unadvertise(self, topic: str) -> None:
        if self.advertised.pop(topic, None) is not None:
            self._send(BridgeMessage(Op.UNADVERTISE, topic, id=f"advertise:{topic}"))

    def subscribe(self, topic: str, msg_type: str, callback: Callback) -> None:
        self.callbacks.setdefault(topic, []).append(callback)
        if topic not in self.subscriptions:
            self.subscriptions[topic] = msg_type
            self._send(BridgeMessage(Op.SUBSCRIBE, topic, msg_type, id=f"subscribe:{topic}"))

    def unsubscribe(self, topic: str) -> None:
        self.callbacks.pop(topic, None)
        if self.subscriptions.pop(topic, None) is not None:
            self._send(BridgeMessage(Op.UNSUBSCRIBE, topic, id=f"subscribe:{topic}"))

    def publish(self, topic: str, payload: Any, msg_type: Optional[str] = None) -> None:
        """
        publish payload (typed message, or JSON value); the topic is
        advertised on first use when the type is known.
        """
        msg = publish(topic, payload, msg_type or self.advertised.get(topic))
        if msg.msg_type and topic not in self.advertised:
            self.advertise(topic, msg.msg_type)
        self._send(msg)

    def dispatch(self, data: Union[bytes, str]) -> None:
        """
        decode one incoming frame and run the topic's callbacks
        """
        try:
            head = decode(data)
            if head.op != Op.PUBLISH:
                logger.debug(f"{self.name}: ignoring {head.op.value} {head.topic}")
                return
            msg = head
            if msg.msg_type is None and msg.topic in self.subscriptions:
                msg = decode(data, self.subscriptions[msg.topic])
        except DecodeError as e:
            logger.warning(f"{self.name}: undecodable message: {e}")
            return
        self.received += 1
        for cb in list(self.callbacks.get(msg.topic, [])):
            cb(msg)

    def close(self) -> None:
        self.closed = True


class WebSocketClient(BusClient):
    """
    rosbridge client over websockets' synchronous API: a receiver
    thread feeds a queue, spin_once() runs callbacks.
    """

    def __init__(self, url: str, name: str = 'client',
                 timeout: Optional[float] = None):
        super().__init__(name)
        self.url = url
        if timeout is None:
            timeout = conf.WS_CONNECT_TIMEOUT
        try:
            self.ws: ClientConnection = ws_connect(url, open_timeout=timeout,
                                                   max_size=None)
        except (OSError, TimeoutError, InvalidHandshake, InvalidURI) as e:
            raise TransportError(f"{name}: cannot connect to {url}: {e}") from e
        logger.info(f"{name}: connected to {url}")
        self.incoming: 'queue.Queue[Optional[str]]' = queue.Queue()
        self.lost = False
        self._receiver = threading.Thread(target=self._receive, daemon=True,
                                          name=f"{name}-recv")
        self._receiver.start()

    def _receive(self) -> None:
        try:
            for frame in self.ws:
                self.incoming.put(frame if isinstance(frame, str) else frame.decode('utf-8'))
        except ConnectionClosed as e:
            if not self.closed:
                logger.warning(f"{self.name}: connection lost: {e}")
        finally:
            self.lost = not self.closed
            self.incoming.put(None)

    def _send(self, msg: BridgeMessage) -> None:
        if self.closed:
            raise TransportError(f"{self.name}: send after close")
        try:
            self.ws.send(encode(msg).decode('utf-8'))
        except (ConnectionClosed, OSError) as e:
            raise TransportError(f"{self.name}: send failed: {e}") from e

    def spin_once(self, timeout: Optional[float] = None) -> int:
        """
        wait up to timeout for a message, then run callbacks for
        everything queued; returns number of frames handled.
        raises TransportError once the connection is gone and drained.
        """
        try:
            frame = self.incoming.get(timeout=timeout)
        except queue.Empty:
            return 0
        count = 0
        while True:
            if frame is None:
                if self.lost:
                    raise TransportError(f"{self.name}: connection to {self.url} lost")
                return count
            self.dispatch(frame)
            count += 1
            try:
                frame = self.incoming.get_nowait()
            except queue.Empty:
                return count

    def barrier(self, timeout: Optional[float] = None) -> None:
        """
        return once the server has processed everything sent so far
        (round trip of a private topic); subscriptions made before
        the call are then in effect.
        """
        if timeout is None:
            timeout = conf.WS_CONNECT_TIMEOUT
        topic = f"/twinlink/barrier/{uuid.uuid4().hex}"
        seen: List[bool] = []
        self.subscribe(topic, BoolMsg.TYPE, lambda msg: seen.append(True))
        self.publish(topic, BoolMsg(True))
        deadline = time.monotonic() + timeout
        while not seen:
            left = deadline - time.monotonic()
            if left <= 0:
                raise TransportError(f"{self.name}: no barrier reply from {self.url}")
            self.spin_once(left)
        self.unsubscribe(topic)
        self.unadvertise(topic)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self.ws.close()
        self._receiver.join(timeout=5)
        logger.info(f"{self.name}: closed after {self.received} messages")


def normalize_endpoint(endpoint: str) -> str:
    """
    "host:port" or "ws://host:port" to a ws:// URL
    """
    if endpoint.startswith(('ws://', 'wss://')):
        return endpoint
    return f"ws://{endpoint}"


def connect(endpoint: str, name: str = 'client',
            timeout: Optional[float] = None) -> WebSocketClient:
    return WebSocketClient(normalize_endpoint(endpoint), name, timeout)
