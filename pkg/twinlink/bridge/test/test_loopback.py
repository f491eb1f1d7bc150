import unittest

from twinlink.bridge.loopback import loopback_bus
from twinlink.bridge.messages import BoolMsg, BridgeMessage, JointStateMsg, Op, Stamp
from twinlink.bridge.router import TopicRouter


def joint_state(i: int) -> JointStateMsg:
    return JointStateMsg(Stamp.from_ns(i * 8_000_000), ('j',), (float(i),))


class TestLoopback(unittest.TestCase):

    def test_lock_step(self):
        bus = loopback_bus()
        pub = bus.client('pub')
        sub = bus.client('sub')
        got = []
        sub.subscribe('/capture', BoolMsg.TYPE, got.append)
        pub.publish('/capture', BoolMsg(True))
        assert got == []
        assert bus.pump() == 1
        assert len(got) == 1
        assert got[0].payload == BoolMsg(True)
        assert bus.pump() == 0

    def test_untyped_publish_typed_by_subscription(self):
        bus = loopback_bus()
        pub = bus.client('pub')
        sub = bus.client('sub')
        got = []
        sub.subscribe('/c', BoolMsg.TYPE, got.append)
        pub.publish('/c', {'data': True})
        bus.pump()
        assert got[0].payload == BoolMsg(True)

    def test_interleaved_order(self):
        bus = loopback_bus()
        a = bus.client('a')
        b = bus.client('b')
        sub = bus.client('sub')
        got = []
        sub.subscribe('/a', JointStateMsg.TYPE, lambda m: got.append(('a', m.payload.position[0])))
        sub.subscribe('/b', JointStateMsg.TYPE, lambda m: got.append(('b', m.payload.position[0])))
        sent = []
        for i in range(20):
            who, client = (('a', a) if i % 3 else ('b', b))
            client.publish(f"/{who}", joint_state(i))
            sent.append((who, float(i)))
        bus.pump()
        assert got == sent

    def test_exactly_once_per_subscriber(self):
        bus = loopback_bus()
        pub = bus.client('pub')
        subs = [bus.client(f"s{i}") for i in range(3)]
        got = [[] for _ in subs]
        for s, g in zip(subs, got):
            s.subscribe('/joint_states', JointStateMsg.TYPE, g.append)
        for i in range(100):
            pub.publish('/joint_states', joint_state(i))
        bus.pump()
        for g in got:
            assert [m.payload.position[0] for m in g] == [float(i) for i in range(100)]

    def test_callback_publish_waits(self):
        bus = loopback_bus()
        a = bus.client('a')
        b = bus.client('b')
        got = []
        b.subscribe('/ping', BoolMsg.TYPE, lambda m: b.publish('/pong', BoolMsg(True)))
        a.subscribe('/pong', BoolMsg.TYPE, got.append)
        a.publish('/ping', BoolMsg(True))
        bus.pump()
        assert got == []
        bus.pump()
        assert len(got) == 1

    def test_unsubscribe_and_close(self):
        bus = loopback_bus()
        pub = bus.client('pub')
        sub = bus.client('sub')
        got = []
        sub.subscribe('/x', BoolMsg.TYPE, got.append)
        sub.unsubscribe('/x')
        pub.publish('/x', BoolMsg(True))
        bus.pump()
        assert got == []
        sub.subscribe('/x', BoolMsg.TYPE, got.append)
        pub.publish('/x', BoolMsg(True))
        sub.close()
        bus.pump()
        assert got == []
        pub.publish('/x', BoolMsg(True))     # no subscribers: no error


class TestRouter(unittest.TestCase):

    def test_drop_oldest(self):
        router = TopicRouter(queue_size=4)
        pub = router.connect('pub')
        sub = router.connect('sub')
        router.handle(sub, BridgeMessage(Op.SUBSCRIBE, '/x', BoolMsg.TYPE))
        for i in range(10):
            router.handle(pub, BridgeMessage(Op.PUBLISH, '/x', BoolMsg.TYPE, BoolMsg(i % 2 == 0)))
        items = router.drain(sub)
        assert [seq for seq, data in items] == [7, 8, 9, 10]
        stats = router.stats_dict()
        assert stats['clients'][sub]['dropped'] == 6
        assert stats['topics']['/x']['messages'] == 10
        assert stats['topics']['/x']['type'] == BoolMsg.TYPE

    def test_notify(self):
        router = TopicRouter(queue_size=8)
        calls = []
        pub = router.connect('pub')
        sub = router.connect('sub', notify=lambda: calls.append(1))
        router.handle(sub, BridgeMessage(Op.SUBSCRIBE, '/x', BoolMsg.TYPE))
        router.handle(pub, BridgeMessage(Op.PUBLISH, '/x', None, BoolMsg(True)))
        assert calls == [1]
        # encoded once, type filled in from the topic table
        (seq, data), = router.drain(sub)
        assert b'"type":"std_msgs/Bool"' in data

    def test_disconnect_removes_subscriptions(self):
        router = TopicRouter(queue_size=8)
        pub = router.connect('pub')
        sub = router.connect('sub')
        router.handle(sub, BridgeMessage(Op.SUBSCRIBE, '/x', BoolMsg.TYPE))
        router.disconnect(sub)
        assert router.handle(pub, BridgeMessage(Op.PUBLISH, '/x', None, BoolMsg(True))) == 0
        assert router.drain(sub) == []


if __name__ == "__main__":
    unittest.main()
