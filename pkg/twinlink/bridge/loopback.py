"""
Deterministic in-process bus: same routing as the WebSocket server,
lock-step delivery.  Nothing reaches a subscriber until pump().
"""

import logging
from typing import Any, Dict, List, Optional, Tuple

# local
from twinlink.bridge.client import BusClient
from twinlink.bridge.messages import BridgeMessage
from twinlink.bridge.router import TopicRouter

logger = logging.getLogger(__name__)


class LoopbackClient(BusClient):
    def __init__(self, bus: 'LoopbackBus', name: str):
        super().__init__(name)
        self.bus = bus
        self.client_id = bus.router.connect(name)

    def _send(self, msg: BridgeMessage) -> None:
        self.bus.router.handle(self.client_id, msg)

    def close(self) -> None:
        if not self.closed:
            super().close()
            self.bus._remove(self)


class LoopbackBus:
    def __init__(self, queue_size: Optional[int] = None):
        self.router = TopicRouter(queue_size)
        self._clients: Dict[str, LoopbackClient] = {}
        self.pumped = 0

    def client(self, name: str = 'client') -> LoopbackClient:
        c = LoopbackClient(self, name)
        self._clients[c.client_id] = c
        return c

    def _remove(self, client: LoopbackClient) -> None:
        logger.debug(f"removing {client.client_id}")
        self.router.disconnect(client.client_id)
        self._clients.pop(client.client_id, None)

    def pump(self) -> int:
        """
        deliver everything queued when called, in enqueue (sequence)
        order; a message for several subscribers goes to them in
        connection order.  Messages published by callbacks wait for
        the next pump.  Returns number of deliveries.
        """
        order = list(self._clients)
        items: List[Tuple[int, int, str, bytes]] = []
        for client_id, queued in self.router.pending().items():
            rank = order.index(client_id)
            items.extend((seq, rank, client_id, data) for seq, data in queued)
        items.sort(key=lambda item: item[:2])
        for seq, rank, client_id, data in items:
            client = self._clients.get(client_id)
            if client is not None:
                client.dispatch(data)
        self.pumped += len(items)
        return len(items)

    def stats(self) -> Dict[str, Any]:
        return self.router.stats_dict()

    def close(self) -> None:
        for c in list(self._clients.values()):
            c.close()


def loopback_bus(queue_size: Optional[int] = None) -> LoopbackBus:
    return LoopbackBus(queue_size)
