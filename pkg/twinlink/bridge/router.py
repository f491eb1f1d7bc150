"""
Topic router shared by the loopback bus and the WebSocket server.

All routing decisions are made under one lock (single logical
writer).  Each published message gets a global sequence number and
is encoded once; subscribers each have a bounded queue which drops
the oldest entry on overflow (the publisher never blocks).
"""

from collections import deque
import itertools
import logging
import threading
from typing import Any, Callable, Deque, Dict, List, Optional, Tuple

# local
from twinlink.bridge.messages import BridgeMessage, Op, encode
from twinlink.config import conf
from twinlink.stats import Stats

logger = logging.getLogger(__name__)

Notify = Callable[[], None]
Queued = Tuple[int, bytes]      # (sequence number, wire bytes)


class _Client:
    def __init__(self, client_id: str, queue_size: int, notify: Optional[Notify]):
        self.client_id = client_id
        self.queue: Deque[Queued] = deque()
        self.queue_size = queue_size
        self.notify = notify
        self.delivered = 0      # enqueued for delivery
        self.dropped = 0
        self.published = 0


class _Topic:
    def __init__(self, name: str):
        self.name = name
        self.msg_type: Optional[str] = None
        self.publishers: Dict[str, None] = {}   # ordered sets
        self.subscribers: Dict[str, None] = {}
        self.messages = 0


class TopicRouter:
    def __init__(self, queue_size: Optional[int] = None):
        if queue_size is None:
            queue_size = conf.BRIDGE_QUEUE_SIZE
        if queue_size < 1:
            raise ValueError(f"queue_size {queue_size}")
        self.queue_size = queue_size
        self._lock = threading.Lock()
        self._clients: Dict[str, _Client] = {}
        self._topics: Dict[str, _Topic] = {}
        self._seq = itertools.count(1)
        self._ids = itertools.count(1)
        self.stats = Stats.get()

    def connect(self, name: str = 'client', notify: Optional[Notify] = None) -> str:
        """
        register a client; returns its (unique) id.
        notify is called (outside the lock) when messages are queued for it.
        """
        with self._lock:
            client_id = f"{name}.{next(self._ids)}"
            self._clients[client_id] = _Client(client_id, self.queue_size, notify)
            nclients = len(self._clients)
        logger.info(f"client {client_id} connected ({nclients} clients)")
        self.stats.gauge('bridge.clients', nclients)
        return client_id

    def disconnect(self, client_id: str) -> None:
        """
        remove client and its subscriptions; undelivered messages are discarded
        """
        with self._lock:
            client = self._clients.pop(client_id, None)
            for topic in self._topics.values():
                topic.publishers.pop(client_id, None)
                topic.subscribers.pop(client_id, None)
            nclients = len(self._clients)
        if client:
            logger.info(f"client {client_id} disconnected, {len(client.queue)} undelivered")
            self.stats.gauge('bridge.clients', nclients)

    def _topic(self, name: str, msg_type: Optional[str]) -> _Topic:
        topic = self._topics.get(name)
        if topic is None:
            topic = self._topics[name] = _Topic(name)
        if msg_type:
            if topic.msg_type is None:
                topic.msg_type = msg_type
            elif topic.msg_type != msg_type:
                logger.warning(f"{name}: type {msg_type} differs from {topic.msg_type}")
        return topic

    def handle(self, client_id: str, msg: BridgeMessage) -> int:
        """
        act on a message from client_id;
        returns number of subscribers a publish was queued for.
        """
        notify: List[Notify] = []
        count = 0
        with self._lock:
            client = self._clients.get(client_id)
            if client is None:
                raise KeyError(f"unknown client {client_id}")
            if msg.op == Op.PUBLISH:
                count = self._publish(client, msg, notify)
            elif msg.op == Op.ADVERTISE:
                self._topic(msg.topic, msg.msg_type).publishers[client_id] = None
            elif msg.op == Op.UNADVERTISE:
                if msg.topic in self._topics:
                    self._topics[msg.topic].publishers.pop(client_id, None)
            elif msg.op == Op.SUBSCRIBE:
                self._topic(msg.topic, msg.msg_type).subscribers[client_id] = None
            elif msg.op == Op.UNSUBSCRIBE:
                if msg.topic in self._topics:
                    self._topics[msg.topic].subscribers.pop(client_id, None)
        self.stats.incr('bridge.messages', labels=[('op', msg.op.value)])
        for n in notify:
            n()
        return count

    def _publish(self, client: _Client, msg: BridgeMessage, notify: List[Notify]) -> int:
        # called with lock held
        topic = self._topic(msg.topic, msg.msg_type)
        topic.messages += 1
        client.published += 1
        if not topic.subscribers:
            return 0
        if msg.msg_type is None and topic.msg_type:
            msg = BridgeMessage(msg.op, msg.topic, topic.msg_type, msg.payload, msg.id)
        item = (next(self._seq), encode(msg))
        for sub_id in topic.subscribers:
            sub = self._clients[sub_id]
            if len(sub.queue) >= sub.queue_size:
                sub.queue.popleft()
                sub.dropped += 1
                self.stats.incr('bridge.drops')
                if sub.dropped == 1 or sub.dropped % 1000 == 0:
                    logger.warning(f"{sub_id}: queue full, {sub.dropped} dropped")
            sub.queue.append(item)
            sub.delivered += 1
            if sub.notify:
                notify.append(sub.notify)
        return len(topic.subscribers)

    def drain(self, client_id: str) -> List[Queued]:
        """
        take all messages queued for client_id (in sequence order)
        """
        with self._lock:
            client = self._clients.get(client_id)
            if client is None:
                return []
            items = list(client.queue)
            client.queue.clear()
        return items

    def pending(self) -> Dict[str, List[Queued]]:
        """
        take everything queued, for every client (loopback pump)
        """
        with self._lock:
            out = {}
            for client_id, client in self._clients.items():
                if client.queue:
                    out[client_id] = list(client.queue)
                    client.queue.clear()
        return out

    def stats_dict(self) -> Dict[str, Any]:
        with self._lock:
            return {
                'clients': {
                    c.client_id: {'published': c.published,
                                  'delivered': c.delivered,
                                  'dropped': c.dropped,
                                  'queued': len(c.queue)}
                    for c in self._clients.values()},
                'topics': {
                    t.name: {'type': t.msg_type,
                             'messages': t.messages,
                             'publishers': len(t.publishers),
                             'subscribers': len(t.subscribers)}
                    for t in self._topics.values()},
            }
