"""
Rigid transforms (unit quaternion + translation) and joint configurations.

Quaternions are stored (w, x, y, z) and renormalized after every
composition.  scipy's Rotation (which uses (x, y, z, w)) does the
euler conversions and slerp.
"""

import math
from typing import Iterator, List, Sequence, Tuple, Union

# PyPI
import numpy as np
import numpy.typing as npt
from scipy.spatial.transform import Rotation, Slerp

TWO_PI = 2 * math.pi

ArrayLike = Union[Sequence[float], npt.NDArray[np.float64]]


def normalize_angle(a: float) -> float:
    """
    wrap a single angle to (-pi, pi]
    """
    if -math.pi < a <= math.pi:
        return a
    return math.pi - (math.pi - a) % TWO_PI


def normalize_angles(a: ArrayLike) -> npt.NDArray[np.float64]:
    """
    wrap angles to (-pi, pi]; values already in range are untouched
    """
    out = np.array(a, dtype=float)
    bad = (out <= -math.pi) | (out > math.pi)
    if np.any(bad):
        out[bad] = math.pi - np.remainder(math.pi - out[bad], TWO_PI)
    return out


def _qmul(a: Tuple[float, ...], b: Tuple[float, ...]) -> Tuple[float, float, float, float]:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return (w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2)


def _qrot(q: Tuple[float, ...], v: Tuple[float, ...]) -> Tuple[float, float, float]:
    """
    rotate vector v by unit quaternion q
    """
    w, x, y, z = q
    vx, vy, vz = v
    # t = 2 * (u x v)
    tx = 2.0 * (y * vz - z * vy)
    ty = 2.0 * (z * vx - x * vz)
    tz = 2.0 * (x * vy - y * vx)
    return (vx + w * tx + (y * tz - z * ty),
            vy + w * ty + (z * tx - x * tz),
            vz + w * tz + (x * ty - y * tx))


def quat_from_matrix(r: ArrayLike) -> Tuple[float, float, float, float]:
    """
    unit quaternion (w, x, y, z), w >= 0, of a 3x3 rotation matrix
    """
    (m00, m01, m02), (m10, m11, m12), (m20, m21, m22) = np.asarray(r, dtype=float)[:3, :3].tolist()
    tr = m00 + m11 + m22
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = (0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s)
    elif m00 > m11 and m00 > m22:
        s = 2.0 * math.sqrt(1.0 + m00 - m11 - m22)
        q = ((m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s)
    elif m11 > m22:
        s = 2.0 * math.sqrt(1.0 + m11 - m00 - m22)
        q = ((m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s)
    else:
        s = 2.0 * math.sqrt(1.0 + m22 - m00 - m11)
        q = ((m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s)
    if q[0] < 0.0:
        return (-q[0], -q[1], -q[2], -q[3])
    return q


class Transform:
    """
    rigid transform: rotation (unit quaternion w,x,y,z) then translation (m)
    compose with "@": (a @ b).apply(p) == a.apply(b.apply(p))
    """

    __slots__ = ('rotation', 'translation')

    rotation: npt.NDArray[np.float64]
    translation: npt.NDArray[np.float64]

    def __init__(self,
                 rotation: ArrayLike = (1.0, 0.0, 0.0, 0.0),
                 translation: ArrayLike = (0.0, 0.0, 0.0)):
        q = np.array(rotation, dtype=float).reshape(4)
        n = float(np.linalg.norm(q))
        if not math.isfinite(n) or n == 0.0:
            raise ValueError(f"bad quaternion {rotation}")
        t = np.array(translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError(f"bad translation {translation}")
        q /= n
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, 'rotation', q)
        object.__setattr__(self, 'translation', t)

    def __setattr__(self, name: str, value: object) -> None:
        raise AttributeError("Transform is immutable")

    def __repr__(self) -> str:
        q = ', '.join(f"{v:.6g}" for v in self.rotation)
        t = ', '.join(f"{v:.6g}" for v in self.translation)
        return f"Transform(rotation=({q}), translation=({t}))"

    # constructors

    @classmethod
    def identity(cls) -> 'Transform':
        return cls()

    @classmethod
    def from_xyz_rpy(cls, xyz: ArrayLike = (0.0, 0.0, 0.0),
                     rpy: ArrayLike = (0.0, 0.0, 0.0)) -> 'Transform':
        """
        URDF <origin>: fixed-axis roll, pitch, yaw (R = Rz(y) Ry(p) Rx(r))
        """
        x, y, z, w = Rotation.from_euler('xyz', np.asarray(rpy, dtype=float)).as_quat()
        return cls((w, x, y, z), xyz)

    @classmethod
    def from_axis_angle(cls, axis: ArrayLike, angle: float,
                        translation: ArrayLike = (0.0, 0.0, 0.0)) -> 'Transform':
        ax = np.asarray(axis, dtype=float)
        ax = ax / np.linalg.norm(ax)
        s = math.sin(angle / 2)
        return cls((math.cos(angle / 2), ax[0] * s, ax[1] * s, ax[2] * s),
                   translation)

    @classmethod
    def from_matrix(cls, m: ArrayLike) -> 'Transform':
        """
        from 4x4 homogeneous matrix (or 3x3 rotation matrix)
        """
        a = np.asarray(m, dtype=float)
        t = a[:3, 3] if a.shape == (4, 4) else (0.0, 0.0, 0.0)
        return cls(quat_from_matrix(a), t)

    # operations

    def __matmul__(self, other: 'Transform') -> 'Transform':
        q1 = tuple(self.rotation)
        rt = _qrot(q1, tuple(other.translation))
        t = self.translation
        return Transform(_qmul(q1, tuple(other.rotation)),
                         (t[0] + rt[0], t[1] + rt[1], t[2] + rt[2]))

    def inverse(self) -> 'Transform':
        w, x, y, z = self.rotation
        conj = (w, -x, -y, -z)
        rt = _qrot(conj, tuple(self.translation))
        return Transform(conj, (-rt[0], -rt[1], -rt[2]))

    def apply(self, points: ArrayLike) -> npt.NDArray[np.float64]:
        """
        transform a point (3,) or points (n,3)
        """
        p = np.asarray(points, dtype=float)
        return p @ self.rotation_matrix().T + self.translation

    def rotate(self, vectors: ArrayLike) -> npt.NDArray[np.float64]:
        """
        rotate (no translation) a vector (3,) or vectors (n,3)
        """
        v = np.asarray(vectors, dtype=float)
        return v @ self.rotation_matrix().T

    def rotation_matrix(self) -> npt.NDArray[np.float64]:
        w, x, y, z = self.rotation
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])

    def matrix(self) -> npt.NDArray[np.float64]:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    def rpy(self) -> npt.NDArray[np.float64]:
        """
        fixed-axis roll, pitch, yaw (URDF convention); yaw = 0 at gimbal lock
        """
        r = self.rotation_matrix()
        if math.hypot(r[0, 0], r[1, 0]) > 1e-12:
            yaw = math.atan2(r[1, 0], r[0, 0])
        else:
            yaw = 0.0
        # roll and pitch from Rz(yaw)^T R = Ry(pitch) Rx(roll), which stays
        # consistent with yaw near gimbal lock
        cy, sy = math.cos(yaw), math.sin(yaw)
        m = np.array([[cy, sy, 0.0], [-sy, cy, 0.0], [0.0, 0.0, 1.0]]) @ r
        pitch = math.atan2(-m[2, 0], m[0, 0])
        roll = math.atan2(-m[1, 2], m[1, 1])
        return np.array([roll, pitch, yaw])

    def scipy_rotation(self) -> Rotation:
        w, x, y, z = self.rotation
        return Rotation.from_quat((x, y, z, w))

    def axis(self, i: int) -> npt.NDArray[np.float64]:
        """
        i'th (0=X, 1=Y, 2=Z) axis of this frame, in parent coordinates
        """
        return self.rotation_matrix()[:, i]

    def pose_error(self, other: 'Transform') -> Tuple[float, float]:
        """
        return (translation distance m, rotation angle rad) between poses
        """
        dist = float(np.linalg.norm(self.translation - other.translation))
        w1, x1, y1, z1 = self.rotation
        d = _qmul((w1, -x1, -y1, -z1), tuple(other.rotation))
        vec = math.sqrt(d[1] * d[1] + d[2] * d[2] + d[3] * d[3])
        return dist, 2.0 * math.atan2(vec, abs(d[0]))


def slerp_path(a: Transform, b: Transform,
               fractions: ArrayLike) -> List[Transform]:
    """
    poses along a→b: translation linear, rotation spherical
    """
    s = np.asarray(fractions, dtype=float)
    rots = Rotation.concatenate([a.scipy_rotation(), b.scipy_rotation()])
    quats = Slerp([0.0, 1.0], rots)(s).as_quat()
    trans = a.translation + np.outer(s, b.translation - a.translation)
    return [Transform((q[3], q[0], q[1], q[2]), t)
            for q, t in zip(quats, trans)]


def look_at(position: ArrayLike, target: ArrayLike) -> Transform:
    """
    pose at position whose +Z points at target, +X "right" and +Y "down"
    (image convention), roll fixed by world +Z up; world +X when
    looking straight up or down.
    """
    p = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - p
    z = z / np.linalg.norm(z)
    x = np.cross(z, (0.0, 0.0, 1.0))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, (1.0, 0.0, 0.0))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, 0] = x
    m[:3, 1] = y
    m[:3, 2] = z
    m[:3, 3] = p
    return Transform.from_matrix(m)


class JointConfig:
    """
    joint angles (radians), wrapped to (-pi, pi] on construction
    """

    __slots__ = ('angles',)

    angles: npt.NDArray[np.float64]

    def __init__(self, angles: ArrayLike):
        a = np.array(angles, dtype=float).reshape(-1)
        if not np.all(np.isfinite(a)):
            raise ValueError(f"non-finite joint angles {angles}")
        a = normalize_angles(a)
        a.setflags(write=False)
        object.__setattr__(self, 'angles', a)

    def __setattr__(self, name: str, value: object) -> None:
        raise AttributeError("JointConfig is immutable")

    def __len__(self) -> int:
        return len(self.angles)

    def __iter__(self) -> Iterator[float]:
        return iter(float(a) for a in self.angles)

    def __getitem__(self, i: int) -> float:
        return float(self.angles[i])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, JointConfig):
            return NotImplemented
        return bool(np.array_equal(self.angles, other.angles))

    def __repr__(self) -> str:
        return f"JointConfig({', '.join(f'{a:.6g}' for a in self.angles)})"

    def distance(self, other: 'JointConfig') -> float:
        """
        joint-space L-infinity distance, modulo 2pi
        """
        return float(np.max(np.abs(normalize_angles(self.angles - other.angles)),
                            initial=0.0))
