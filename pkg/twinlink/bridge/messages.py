"""
rosbridge v2 envelope codec, and the three message types the
twins exchange.

Wire format: one UTF-8 JSON object per frame, keys in the order
op, id, topic, type, msg; floats written with repr (17 significant
digits) so values survive a round trip bit-exactly.
"""

from dataclasses import dataclass, field
from enum import Enum
import json
import logging
import math
from typing import Any, Callable, Dict, NamedTuple, Optional, Tuple, Type, Union

logger = logging.getLogger(__name__)

NSEC_PER_SEC = 1_000_000_000


class BridgeError(Exception):
    """base for bus errors"""


class DecodeError(BridgeError):
    """invalid JSON, or not a rosbridge envelope"""


class UnsupportedOpError(DecodeError):
    def __init__(self, op: str):
        super().__init__(f"unsupported op {op!r}")
        self.op = op


class SchemaError(DecodeError, ValueError):
    """
    missing or invalid field (also raised on construction)
    """

    def __init__(self, field: str, problem: str = 'missing'):
        super().__init__(f"{field}: {problem}")
        self.field = field


class TransportError(BridgeError):
    """bind failure, refused connection, lost connection"""


class Op(Enum):
    ADVERTISE = 'advertise'
    UNADVERTISE = 'unadvertise'
    PUBLISH = 'publish'
    SUBSCRIBE = 'subscribe'
    UNSUBSCRIBE = 'unsubscribe'


class Stamp(NamedTuple):
    secs: int
    nsecs: int

    @classmethod
    def from_ns(cls, ns: int) -> 'Stamp':
        secs, nsecs = divmod(int(ns), NSEC_PER_SEC)
        return cls(secs, nsecs)

    def to_ns(self) -> int:
        return self.secs * NSEC_PER_SEC + self.nsecs

    def to_json(self) -> Dict[str, int]:
        return {'secs': self.secs, 'nsecs': self.nsecs}

    @classmethod
    def from_json(cls, d: Any, where: str) -> 'Stamp':
        d = _get(d, 'stamp', where, dict)
        return cls(_get(d, 'secs', f"{where}.stamp", int),
                   _get(d, 'nsecs', f"{where}.stamp", int))


def _check_stamp(stamp: Stamp, where: str) -> None:
    if not 0 <= stamp.nsecs < NSEC_PER_SEC:
        raise SchemaError(f"{where}.nsecs", f"{stamp.nsecs} out of range")


def _get(d: Any, key: str, where: str, typ: Union[type, Tuple[type, ...]]) -> Any:
    """
    fetch d[key], checking type; bool is not accepted as a number
    """
    name = f"{where}.{key}" if where else key
    if not isinstance(d, dict) or key not in d:
        raise SchemaError(name)
    v = d[key]
    if isinstance(v, bool) and typ is not bool:
        raise SchemaError(name, f"unexpected {v!r}")
    if not isinstance(v, typ):
        raise SchemaError(name, f"unexpected {type(v).__name__}")
    return v


def _floats(v: Any, name: str) -> Tuple[float, ...]:
    if not isinstance(v, list):
        raise SchemaError(name, "not a list")
    out = []
    for x in v:
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise SchemaError(name, f"bad value {x!r}")
        out.append(float(x))
    return tuple(out)


################ typed payloads

@dataclass(frozen=True)
class JointStateMsg:
    TYPE = 'sensor_msgs/JointState'

    stamp: Stamp
    name: Tuple[str, ...]
    position: Tuple[float, ...]
    velocity: Tuple[float, ...] = ()
    frame_id: str = ''

    def __post_init__(self) -> None:
        _check_stamp(self.stamp, 'msg.header.stamp')
        if len(self.name) != len(self.position):
            raise SchemaError('msg.position', f"{len(self.position)} values for {len(self.name)} names")
        if len(set(self.name)) != len(self.name):
            raise SchemaError('msg.name', "duplicate joint names")
        if self.velocity and len(self.velocity) != len(self.name):
            raise SchemaError('msg.velocity', "length differs from name")
        if not all(math.isfinite(x) for x in self.position + self.velocity):
            raise SchemaError('msg.position', "non-finite value")

    def to_json(self) -> Dict[str, Any]:
        return {'header': {'stamp': self.stamp.to_json(), 'frame_id': self.frame_id},
                'name': list(self.name),
                'position': [float(x) for x in self.position],
                'velocity': [float(x) for x in self.velocity],
                'effort': []}

    @classmethod
    def from_json(cls, d: Any) -> 'JointStateMsg':
        header = _get(d, 'header', 'msg', dict)
        names = _get(d, 'name', 'msg', list)
        if not all(isinstance(n, str) for n in names):
            raise SchemaError('msg.name', "names must be strings")
        velocity = d.get('velocity') or []
        return cls(stamp=Stamp.from_json(header, 'msg.header'),
                   name=tuple(names),
                   position=_floats(_get(d, 'position', 'msg', list), 'msg.position'),
                   velocity=_floats(velocity, 'msg.velocity'),
                   frame_id=str(header.get('frame_id', '')))


@dataclass(frozen=True)
class BoolMsg:
    TYPE = 'std_msgs/Bool'

    data: bool

    def __post_init__(self) -> None:
        if not isinstance(self.data, bool):
            raise SchemaError('msg.data', "not a boolean")

    def to_json(self) -> Dict[str, Any]:
        return {'data': self.data}

    @classmethod
    def from_json(cls, d: Any) -> 'BoolMsg':
        return cls(_get(d, 'data', 'msg', bool))


@dataclass(frozen=True)
class TransformStampedMsg:
    TYPE = 'geometry_msgs/TransformStamped'

    stamp: Stamp
    frame_id: str
    child_frame_id: str
    translation: Tuple[float, float, float]
    rotation: Tuple[float, float, float, float]   # w, x, y, z

    def __post_init__(self) -> None:
        _check_stamp(self.stamp, 'msg.header.stamp')
        if len(self.translation) != 3 or len(self.rotation) != 4:
            raise SchemaError('msg.transform', "wrong vector length")
        if not all(math.isfinite(x) for x in self.translation + self.rotation):
            raise SchemaError('msg.transform', "non-finite value")
        n = math.sqrt(sum(x * x for x in self.rotation))
        if abs(n - 1.0) > 1e-6:
            raise SchemaError('msg.transform.rotation', f"norm {n}")

    def to_json(self) -> Dict[str, Any]:
        tx, ty, tz = (float(v) for v in self.translation)
        w, x, y, z = (float(v) for v in self.rotation)
        return {'header': {'stamp': self.stamp.to_json(), 'frame_id': self.frame_id},
                'child_frame_id': self.child_frame_id,
                'transform': {'translation': {'x': tx, 'y': ty, 'z': tz},
                              'rotation': {'x': x, 'y': y, 'z': z, 'w': w}}}

    @classmethod
    def from_json(cls, d: Any) -> 'TransformStampedMsg':
        header = _get(d, 'header', 'msg', dict)
        xform = _get(d, 'transform', 'msg', dict)
        t = _get(xform, 'translation', 'msg.transform', dict)
        r = _get(xform, 'rotation', 'msg.transform', dict)

        def num(dd: Any, k: str, where: str) -> float:
            return float(_get(dd, k, where, (int, float)))

        return cls(stamp=Stamp.from_json(header, 'msg.header'),
                   frame_id=_get(header, 'frame_id', 'msg.header', str),
                   child_frame_id=_get(d, 'child_frame_id', 'msg', str),
                   translation=tuple(num(t, k, 'msg.transform.translation')
                                     for k in 'xyz'),  # type: ignore[arg-type]
                   rotation=tuple(num(r, k, 'msg.transform.rotation')
                                  for k in 'wxyz'))  # type: ignore[arg-type]


Payload = Union[JointStateMsg, BoolMsg, TransformStampedMsg]

MESSAGE_TYPES: Dict[str, Type[Payload]] = {
    cls.TYPE: cls for cls in (JointStateMsg, BoolMsg, TransformStampedMsg)
}


################ envelope

@dataclass(frozen=True)
class BridgeMessage:
    """
    payload is a typed message (when msg_type is registered)
    or any JSON value
    """
    op: Op
    topic: str
    msg_type: Optional[str] = None
    payload: Any = None
    id: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not isinstance(self.op, Op):
            raise SchemaError('op', f"not an Op: {self.op!r}")
        if not isinstance(self.topic, str) or not self.topic.startswith('/') \
           or len(self.topic) < 2:
            raise SchemaError('topic', f"bad topic {self.topic!r}")
        if self.op in (Op.ADVERTISE, Op.SUBSCRIBE) and not self.msg_type:
            raise SchemaError('type')
        if self.op == Op.PUBLISH and self.payload is None:
            raise SchemaError('msg')


def publish(topic: str, payload: Any, msg_type: Optional[str] = None) -> BridgeMessage:
    if msg_type is None and hasattr(payload, 'TYPE'):
        msg_type = payload.TYPE
    return BridgeMessage(Op.PUBLISH, topic, msg_type, payload)


def _payload_json(payload: Any) -> Any:
    to_json: Optional[Callable[[], Any]] = getattr(payload, 'to_json', None)
    return to_json() if to_json else payload


def encode_dict(msg: BridgeMessage) -> Dict[str, Any]:
    d: Dict[str, Any] = {'op': msg.op.value}
    if msg.id is not None:
        d['id'] = msg.id
    d['topic'] = msg.topic
    if msg.msg_type:
        d['type'] = msg.msg_type
    if msg.payload is not None:
        d['msg'] = _payload_json(msg.payload)
    return d


def encode(msg: BridgeMessage) -> bytes:
    """
    single-line UTF-8 JSON
    """
    return json.dumps(encode_dict(msg), separators=(',', ':'),
                      ensure_ascii=False, allow_nan=False).encode('utf-8')


def decode(data: Union[bytes, str], msg_type: Optional[str] = None) -> BridgeMessage:
    """
    parse an envelope; msg_type (from a subscription) is used to
    type the payload when the envelope carries no "type".
    unknown fields are kept in .extra and otherwise ignored.
    """
    try:
        d = json.loads(data)
    except (ValueError, UnicodeDecodeError) as e:
        raise DecodeError(f"invalid JSON: {e}") from e
    if not isinstance(d, dict):
        raise DecodeError(f"envelope is {type(d).__name__}, not an object")

    op_str = _get(d, 'op', '', str)
    try:
        op = Op(op_str)
    except ValueError:
        raise UnsupportedOpError(op_str)

    topic = _get(d, 'topic', '', str)
    typ = d.get('type')
    if typ is not None and not isinstance(typ, str):
        raise SchemaError('type', "not a string")
    mid = d.get('id')
    if mid is not None:
        mid = str(mid)

    payload = d.get('msg')
    if op == Op.PUBLISH:
        if 'msg' not in d:
            raise SchemaError('msg')
        cls = MESSAGE_TYPES.get(typ or msg_type or '')
        if cls is not None:
            payload = cls.from_json(payload)

    extra = {k: v for k, v in d.items() if k not in ('op', 'id', 'topic', 'type', 'msg')}
    return BridgeMessage(op, topic, typ, payload, mid, extra)
