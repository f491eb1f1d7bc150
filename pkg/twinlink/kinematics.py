"""
Robot model: URDF subset parser, forward kinematics, and closed-form
inverse kinematics for UR-type 6R arms.

Only <robot>, <link>, <joint type="revolute|fixed">, <origin>, <axis>
and <limit> are read; visuals, collisions and inertials are ignored.

The inverse kinematics works from the zero-configuration geometry of
the parsed chain (joint axes and points in the base frame), so the
DH-equivalent parameters come from the URDF rather than a table.
"""

import functools
import logging
import math
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union
import xml.etree.ElementTree as ET

# PyPI
import numpy as np
import numpy.typing as npt

# local
from twinlink.transform import ArrayLike, JointConfig, Transform, normalize_angles

logger = logging.getLogger(__name__)

Vec = npt.NDArray[np.float64]
Joints = Union[JointConfig, ArrayLike]

# IK acceptance (FK residual), and branch deduplication
IK_TOLERANCE = 1e-6
DEDUP_TOLERANCE = 1e-6

# geometric tolerance for "parallel", "perpendicular", "intersecting"
_GEOM_EPS = 1e-6


class KinematicsError(Exception):
    """base for robot model errors"""


class UrdfParseError(KinematicsError):
    def __init__(self, msg: str, line: Optional[int] = None):
        super().__init__(msg)
        self.line = line


class UnsupportedFeatureError(KinematicsError):
    """URDF (or geometry) outside the supported subset"""


class StructureError(KinematicsError):
    """disconnected or ambiguous kinematic tree"""


class Link(NamedTuple):
    name: str                   # joint name
    fixed_offset: Transform     # parent joint frame to this joint frame
    joint_axis: Vec             # unit, in this joint's frame
    joint_limits: Tuple[float, float]


class KinematicChain:
    """
    serial chain: base_transform, then for each link
    fixed_offset @ Rot(axis, q), then tool_offset.
    """

    def __init__(self, links: Sequence[Link],
                 tool_offset: Transform = Transform(),
                 base_transform: Transform = Transform(),
                 name: str = 'robot',
                 tool_name: str = 'tool'):
        for link in links:
            lo, hi = link.joint_limits
            if not lo < hi:
                raise StructureError(f"joint {link.name}: limits {lo} >= {hi}")
            if abs(float(np.linalg.norm(link.joint_axis)) - 1.0) > 1e-9:
                raise StructureError(f"joint {link.name}: axis not unit length")
        self.links = tuple(links)
        self.tool_offset = tool_offset
        self.base_transform = base_transform
        self.name = name
        self.tool_name = tool_name

    def __repr__(self) -> str:
        return f"KinematicChain({self.name}, {self.dof} joints)"

    @property
    def dof(self) -> int:
        return len(self.links)

    @property
    def joint_names(self) -> List[str]:
        return [link.name for link in self.links]

    def with_base(self, base_transform: Transform) -> 'KinematicChain':
        """
        same geometry, mounted at base_transform (world frame)
        """
        return KinematicChain(self.links, self.tool_offset, base_transform,
                              self.name, self.tool_name)

    @functools.cached_property
    def fk_tables(self) -> '_FkTables':
        return _fk_tables(self)

    @functools.cached_property
    def ur_geometry(self) -> '_UrGeometry':
        return _ur_geometry(self)


################ URDF

def _floats(text: Optional[str], n: int, what: str) -> Vec:
    if text is None:
        return np.zeros(n)
    try:
        vals = [float(v) for v in text.split()]
    except ValueError:
        raise UrdfParseError(f"{what}: bad number in {text!r}")
    if len(vals) != n:
        raise UrdfParseError(f"{what}: expected {n} values, got {text!r}")
    return np.array(vals)


class _Joint(NamedTuple):
    name: str
    type: str
    parent: str
    child: str
    origin: Transform
    axis: Vec
    limits: Tuple[float, float]


def _parse_joint(j: ET.Element) -> _Joint:
    name = j.get('name', '')
    jtype = j.get('type', '')
    if not name:
        raise UrdfParseError("<joint> without name")
    if jtype not in ('revolute', 'fixed'):
        raise UnsupportedFeatureError(
            f"joint {name}: type {jtype!r} not supported (revolute, fixed only)")

    parent = j.find('parent')
    child = j.find('child')
    if parent is None or child is None or \
       not parent.get('link') or not child.get('link'):
        raise StructureError(f"joint {name}: missing parent or child link")

    origin = j.find('origin')
    if origin is None:
        xform = Transform()
    else:
        xform = Transform.from_xyz_rpy(
            _floats(origin.get('xyz'), 3, f"joint {name} origin xyz"),
            _floats(origin.get('rpy'), 3, f"joint {name} origin rpy"))

    axis = np.array([1.0, 0.0, 0.0])
    limits = (-math.pi, math.pi)
    if jtype == 'revolute':
        ax = j.find('axis')
        if ax is not None:
            axis = _floats(ax.get('xyz'), 3, f"joint {name} axis")
        n = float(np.linalg.norm(axis))
        if n == 0.0:
            raise StructureError(f"joint {name}: zero axis")
        axis = axis / n
        limit = j.find('limit')
        if limit is None:
            raise UrdfParseError(f"revolute joint {name} has no <limit>")
        try:
            limits = (float(limit.get('lower', '0')),
                      float(limit.get('upper', '0')))
        except ValueError:
            raise UrdfParseError(f"joint {name}: bad <limit>")

    return _Joint(name, jtype, str(parent.get('link')), str(child.get('link')),
                  xform, axis, limits)


def parse_urdf(text: str, tip: Optional[str] = None) -> KinematicChain:
    """
    parse URDF text into the serial chain from the root link to tip
    (default: the single leaf link).  Fixed joints are folded into the
    following revolute joint's fixed_offset (or the tool_offset).
    """
    try:
        root = ET.fromstring(text)
    except ET.ParseError as e:
        line, col = e.position
        raise UrdfParseError(f"malformed URDF at line {line}, column {col}: {e}",
                             line=line) from e
    if root.tag != 'robot':
        raise UrdfParseError(f"root element is <{root.tag}>, not <robot>")

    link_names = [str(link.get('name')) for link in root.findall('link')]
    if not link_names:
        raise StructureError("no <link> elements")
    if len(set(link_names)) != len(link_names):
        raise StructureError("duplicate link names")

    joints = [_parse_joint(j) for j in root.findall('joint')]
    parent_joint: Dict[str, _Joint] = {}
    children: Dict[str, List[str]] = {name: [] for name in link_names}
    for j in joints:
        for link in (j.parent, j.child):
            if link not in children:
                raise StructureError(f"joint {j.name}: unknown link {link}")
        if j.child in parent_joint:
            raise StructureError(f"link {j.child} has two parent joints")
        parent_joint[j.child] = j
        children[j.parent].append(j.child)

    roots = [name for name in link_names if name not in parent_joint]
    if len(roots) != 1:
        raise StructureError(f"expected one root link, found {roots}")

    # every link reachable from the root?
    seen = set()
    todo = [roots[0]]
    while todo:
        link = todo.pop()
        seen.add(link)
        todo.extend(children[link])
    if len(seen) != len(link_names):
        missing = sorted(set(link_names) - seen)
        raise StructureError(f"links not connected to {roots[0]}: {missing}")

    if tip is None:
        leaves = [name for name in link_names if not children[name]]
        if len(leaves) != 1:
            raise StructureError(f"several leaf links {leaves}: pass tip")
        tip = leaves[0]
    elif tip not in children:
        raise StructureError(f"unknown tip link {tip}")

    path: List[_Joint] = []
    link = tip
    while link in parent_joint:
        j = parent_joint[link]
        path.append(j)
        link = j.parent
    path.reverse()

    links: List[Link] = []
    pending = Transform()
    for j in path:
        if j.type == 'fixed':
            pending = pending @ j.origin
        else:
            links.append(Link(j.name, pending @ j.origin, j.axis, j.limits))
            pending = Transform()

    chain = KinematicChain(links, pending, name=root.get('name', 'robot'),
                           tool_name=tip)
    logger.debug(f"parsed {chain}: {chain.joint_names}")
    return chain


def load_urdf(fname: str, tip: Optional[str] = None) -> KinematicChain:
    with open(fname, encoding='utf-8') as f:
        return parse_urdf(f.read(), tip)


def _fmt(v: Sequence[float]) -> str:
    return ' '.join(repr(float(x)) for x in v)


def chain_to_urdf(chain: KinematicChain) -> str:
    """
    minimal URDF for chain (base_transform not included):
    joint names, origins, axes and limits survive a parse.
    """
    lines = ['<?xml version="1.0" encoding="utf-8"?>',
             f'<robot name="{chain.name}">']
    names = ['base_link'] + [f"link_{i + 1}" for i in range(chain.dof)]
    names.append(chain.tool_name)
    for name in names:
        lines.append(f'  <link name="{name}"/>')
    for i, link in enumerate(chain.links):
        lo, hi = link.joint_limits
        lines.extend([
            f'  <joint name="{link.name}" type="revolute">',
            f'    <parent link="{names[i]}"/>',
            f'    <child link="{names[i + 1]}"/>',
            f'    <origin xyz="{_fmt(link.fixed_offset.translation)}"'
            f' rpy="{_fmt(link.fixed_offset.rpy())}"/>',
            f'    <axis xyz="{_fmt(link.joint_axis)}"/>',
            f'    <limit lower="{lo!r}" upper="{hi!r}"/>',
            '  </joint>'])
    lines.extend([
        f'  <joint name="{chain.tool_name}_fixed_joint" type="fixed">',
        f'    <parent link="{names[-2]}"/>',
        f'    <child link="{names[-1]}"/>',
        f'    <origin xyz="{_fmt(chain.tool_offset.translation)}"'
        f' rpy="{_fmt(chain.tool_offset.rpy())}"/>',
        '  </joint>',
        '</robot>'])
    return '\n'.join(lines) + '\n'


################ forward kinematics

class _FkTables(NamedTuple):
    base: Vec                   # 4x4
    offsets: Vec                # (dof, 4, 4) fixed offsets
    k: Vec                      # (dof, 3, 3) cross-product matrix of each axis
    k2: Vec                     # k @ k
    tool: Vec                   # 4x4
    lo: Vec                     # joint limits
    hi: Vec


def _skew(w: Vec) -> Vec:
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def _fk_tables(chain: KinematicChain) -> _FkTables:
    k = np.array([_skew(link.joint_axis) for link in chain.links]).reshape(-1, 3, 3)
    return _FkTables(
        base=chain.base_transform.matrix(),
        offsets=np.array([link.fixed_offset.matrix() for link in chain.links]).reshape(-1, 4, 4),
        k=k, k2=k @ k,
        tool=chain.tool_offset.matrix(),
        lo=np.array([link.joint_limits[0] for link in chain.links]),
        hi=np.array([link.joint_limits[1] for link in chain.links]))


@functools.lru_cache(maxsize=None)
def _warn_limit(chain_name: str, joint: str) -> None:
    # once per joint
    logger.warning(f"{chain_name}: joint {joint} outside its limits")


def _angles(chain: KinematicChain, q: object) -> Vec:
    """
    joint angles as (dof,) or (n, dof)
    """
    a = q.angles if isinstance(q, JointConfig) else np.asarray(q, dtype=float)
    if a.ndim not in (1, 2) or a.shape[-1] != chain.dof:
        raise ValueError(f"{chain.name}: expected {chain.dof} joint values, got {a.shape}")
    tb = chain.fk_tables
    out = (a < tb.lo) | (a > tb.hi)
    if out.any():
        for i in np.flatnonzero(out.reshape(-1, chain.dof).any(axis=0)):
            _warn_limit(chain.name, chain.links[i].name)
    return a


def frame_matrices(chain: KinematicChain, q: object) -> Vec:
    """
    world frames as 4x4 matrices: each joint frame (before its
    rotation), then the tool frame.  q of shape (dof,) gives
    (dof+1, 4, 4); a batch (n, dof) gives (n, dof+1, 4, 4).
    """
    return _frames(chain, _angles(chain, q))


def _frames(chain: KinematicChain, a: Vec) -> Vec:
    tb = chain.fk_tables
    dof = chain.dof
    s = np.sin(a)[..., None, None]
    c = np.cos(a)[..., None, None]
    joint = np.zeros(a.shape + (4, 4))
    joint[..., :3, :3] = np.eye(3) + s * tb.k + (1.0 - c) * tb.k2
    joint[..., 3, 3] = 1.0
    out = np.empty(a.shape[:-1] + (dof + 1, 4, 4))
    t = np.broadcast_to(tb.base, a.shape[:-1] + (4, 4))
    for i in range(dof):
        t = t @ tb.offsets[i]
        out[..., i, :, :] = t
        t = t @ joint[..., i, :, :]
    out[..., dof, :, :] = t @ tb.tool
    return out


def tool_matrices(chain: KinematicChain, q: object) -> Vec:
    """
    tool pose(s) in the world frame as 4x4 matrices
    """
    return frame_matrices(chain, q)[..., -1, :, :]


def forward_kinematics(chain: KinematicChain, q: Joints) -> Transform:
    """
    tool pose in the world frame; q may be a JointConfig or
    unwrapped angles.
    """
    a = _angles(chain, q)
    if a.ndim != 1:
        raise ValueError(f"{chain.name}: one configuration expected, got {a.shape}")
    return Transform.from_matrix(_frames(chain, a)[-1])


def joint_origins(chain: KinematicChain, q: object) -> Vec:
    """
    (dof+1, 3) world positions: each joint origin, then the tool point
    ((n, dof+1, 3) for a batch of configurations)
    """
    return frame_matrices(chain, q)[..., :3, 3]


################ inverse kinematics

class IkSolutions(List[JointConfig]):
    """
    list of solutions, plus flags:
    unreachable: target outside the workspace (no geometric solution)
    out_of_limits: solutions exist, but every one breaks a joint limit
    singular: wrist singular (free wrist angle fixed at 0)
    """

    def __init__(self, solutions: Sequence[JointConfig] = (),
                 unreachable: bool = False, singular: bool = False,
                 out_of_limits: bool = False):
        super().__init__(solutions)
        self.unreachable = unreachable
        self.out_of_limits = out_of_limits
        self.singular = singular


class _UrGeometry(NamedTuple):
    w: List[Vec]                # joint axes at zero config (base frame)
    p: List[Vec]                # joint origins at zero config
    s3: float                   # axis 3 direction relative to axis 2
    s4: float
    e2: Vec                     # w1 x w2
    d: float                    # arm plane offset along w2
    alpha: float                # wrist angle equation coefficients
    beta: float
    p1: Vec
    p2: Vec
    delta: Vec                  # p56 - p45 at zero config
    c_tool: Vec                 # axis 5/6 intersection, tool frame
    w6_tool: Vec                # axis 6, tool frame
    tool_r: npt.NDArray[np.float64]  # zero config tool rotation
    a: Vec                      # shoulder->elbow, projected
    b: Vec                      # elbow->wrist, projected


def _line_intersection(p: Vec, u: Vec, q: Vec, v: Vec) -> Optional[Vec]:
    """
    midpoint of closest approach of two non-parallel lines,
    None if they are parallel or miss each other
    """
    b = float(u @ v)
    denom = 1.0 - b * b
    if denom < _GEOM_EPS:
        return None
    w0 = p - q
    d = float(u @ w0)
    e = float(v @ w0)
    s = (b * e - d) / denom
    t = (e - b * d) / denom
    pa = p + s * u
    pb = q + t * v
    if np.linalg.norm(pa - pb) > _GEOM_EPS:
        return None
    return (pa + pb) / 2


def _proj(v: Vec, w: Vec) -> Vec:
    return v - float(w @ v) * w


def _cross(u: Vec, v: Vec) -> Vec:
    # np.cross is slow on single 3-vectors
    u0, u1, u2 = u.tolist()
    v0, v1, v2 = v.tolist()
    return np.array([u1 * v2 - u2 * v1, u2 * v0 - u0 * v2, u0 * v1 - u1 * v0])


def _rot(w: Vec, theta: float) -> npt.NDArray[np.float64]:
    """
    rotation matrix about unit axis w (Rodrigues)
    """
    k = _skew(w)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def _ur_geometry(chain: KinematicChain) -> _UrGeometry:
    if chain.dof != 6:
        raise UnsupportedFeatureError(
            f"{chain.name}: analytic IK needs 6 revolute joints, has {chain.dof}")
    local = chain.with_base(Transform())
    frames = frame_matrices(local, np.zeros(6))
    tool = Transform.from_matrix(frames[-1])
    w = [f[:3, :3] @ link.joint_axis for f, link in zip(frames, local.links)]
    w = [v / np.linalg.norm(v) for v in w]
    p = [f[:3, 3].copy() for f in frames[:-1]]

    def check(ok: bool, what: str) -> None:
        if not ok:
            raise UnsupportedFeatureError(f"{chain.name}: not a UR-type arm ({what})")

    check(abs(float(w[0] @ w[1])) < _GEOM_EPS, "axes 1, 2 not perpendicular")
    check(np.linalg.norm(np.cross(w[1], w[2])) < _GEOM_EPS and
          np.linalg.norm(np.cross(w[1], w[3])) < _GEOM_EPS,
          "axes 2, 3, 4 not parallel")
    check(abs(float(w[3] @ w[4])) < _GEOM_EPS, "axes 4, 5 not perpendicular")
    check(abs(float(w[4] @ w[5])) < _GEOM_EPS, "axes 5, 6 not perpendicular")
    p45 = _line_intersection(p[3], w[3], p[4], w[4])
    p56 = _line_intersection(p[4], w[4], p[5], w[5])
    check(p45 is not None, "axes 4, 5 do not intersect")
    check(p56 is not None, "axes 5, 6 do not intersect")
    assert p45 is not None and p56 is not None

    w2 = w[1]
    tool_inv = tool.inverse()
    return _UrGeometry(
        w=w, p=p,
        s3=float(np.sign(w[2] @ w2)),
        s4=float(np.sign(w[3] @ w2)),
        e2=np.cross(w[0], w2),
        d=float(w2 @ (p56 - p[0])),
        alpha=float(w2 @ w[5]),
        beta=float(w2 @ np.cross(w[4], w[5])),
        p1=p[0], p2=p[1],
        delta=p56 - p45,
        c_tool=tool_inv.apply(p56),
        w6_tool=tool_inv.rotate(w[5]),
        tool_r=tool.rotation_matrix(),
        a=_proj(p[2] - p[1], w2),
        b=_proj(p45 - p[2], w2))


def _solve_trig(a: float, b: float, c: float) -> List[float]:
    """
    solutions theta of a*cos(theta) + b*sin(theta) = c
    (first the +acos root); [] if none
    """
    r = math.hypot(a, b)
    if r < 1e-12:
        return []
    ratio = c / r
    if abs(ratio) - 1.0 > 1e-9:
        return []
    if abs(ratio) > 1.0 - 1e-14:
        # tangent (or rounding past it): one double root
        ratio = math.copysign(1.0, ratio)
    base = math.atan2(b, a)
    off = math.acos(ratio)
    return [base + off, base - off]


def _signed_angle(w: Vec, u: Vec, v: Vec) -> Optional[float]:
    """
    angle rotating u onto v about unit axis w (components along w ignored);
    None when either projection vanishes
    """
    up = _proj(u, w)
    vp = _proj(v, w)
    if float(up @ up) < 1e-18 or float(vp @ vp) < 1e-18:
        return None
    return math.atan2(float(w @ _cross(up, vp)), float(up @ vp))


def inverse_kinematics(chain: KinematicChain, target: Transform) -> IkSolutions:
    """
    all joint configurations (up to 8) placing the tool at target
    (world frame), ordered by branch: shoulder, elbow, wrist.
    """
    g = chain.ur_geometry
    local = chain.base_transform.inverse() @ target
    r_d = local.rotation_matrix()
    p56 = local.apply(g.c_tool)
    a6 = r_d @ g.w6_tool
    w1, w2 = g.w[0], g.w[1]

    v = p56 - g.p1
    shoulders = _solve_trig(float(w2 @ v), float(g.e2 @ v), g.d)
    w_base = r_d @ g.tool_r.T

    candidates: List[Tuple[Tuple[int, int, int], Vec, bool]] = []
    for i, th1 in enumerate(shoulders):
        r1 = _rot(w1, th1)
        w = r1.T @ w_base
        for j, th5 in enumerate(_solve_trig(g.alpha, g.beta, float((r1 @ w2) @ a6))):
            r5 = _rot(g.w[4], th5)
            th6 = _signed_angle(g.w[5], w.T @ w2, r5.T @ w2)
            singular = th6 is None
            if th6 is None:
                th6 = 0.0
            r_phi = w @ _rot(g.w[5], th6).T @ r5.T
            phi = _signed_angle(w2, w1, r_phi @ w1)
            if phi is None:
                continue
            p45 = p56 - r1 @ _rot(w2, phi) @ g.delta
            x = r1.T @ (p45 - g.p1) + g.p1
            t_vec = _proj(x - g.p2, w2)
            c = (float(t_vec @ t_vec) - float(g.a @ g.a) - float(g.b @ g.b)) / 2
            elbows = _solve_trig(float(g.a @ g.b), float(g.a @ _cross(w2, g.b)), c)
            for k, t in enumerate(elbows):
                th2 = _signed_angle(w2, g.a + _rot(w2, t) @ g.b, t_vec)
                if th2 is None:
                    th2 = 0.0
                th3 = g.s3 * t
                th4 = g.s4 * (phi - th2 - t)
                q = np.array([th1, th2, th3, th4, th5, th6])
                candidates.append(((i, k, j), q, singular))

    if not candidates:
        logger.debug(f"{chain.name}: unreachable {target}")
        return IkSolutions(unreachable=True)

    candidates.sort(key=lambda c: c[0])
    qs = normalize_angles(np.array([c[1] for c in candidates]))
    # FK residual of every branch at once
    m = _frames(chain, qs)[:, -1]
    tm = target.matrix()
    dist = np.linalg.norm(m[:, :3, 3] - tm[:3, 3], axis=1)
    rel = np.swapaxes(m[:, :3, :3], 1, 2) @ tm[:3, :3]
    vee = np.stack([rel[:, 2, 1] - rel[:, 1, 2], rel[:, 0, 2] - rel[:, 2, 0],
                    rel[:, 1, 0] - rel[:, 0, 1]], axis=1)
    ang = np.arctan2(np.linalg.norm(vee, axis=1) / 2, (np.trace(rel, axis1=1, axis2=2) - 1) / 2)
    tb = chain.fk_tables
    within = np.all((qs >= tb.lo) & (qs <= tb.hi), axis=1)

    out = IkSolutions()
    limited = False
    for n, (key, q, singular) in enumerate(candidates):
        if dist[n] > IK_TOLERANCE or ang[n] > IK_TOLERANCE:
            continue
        jc = JointConfig(qs[n])
        if any(jc.distance(s) <= DEDUP_TOLERANCE for s in out):
            continue
        if not within[n]:
            limited = True
            continue
        out.append(jc)
        out.singular = out.singular or singular
    if not out:
        if limited:
            logger.debug(f"{chain.name}: every solution for {target} breaks a joint limit")
            out.out_of_limits = True
        else:
            logger.debug(f"{chain.name}: no valid solution for {target}")
            out.unreachable = True
    return out


def nearest_solution(solutions: Sequence[JointConfig], q_prev: ArrayLike,
                     weights: ArrayLike) -> Tuple[Vec, float]:
    """
    choose the solution closest to q_prev (unwrapped angles) by
    weighted joint-space distance; returns it unwrapped next to q_prev,
    with its largest single-joint change.
    """
    prev = np.asarray(q_prev, dtype=float)
    wts = np.asarray(weights, dtype=float)
    best: Optional[Vec] = None
    best_cost = math.inf
    for s in solutions:
        delta = normalize_angles(s.angles - prev)
        cost = float(np.sum(wts * delta * delta))
        if cost < best_cost:
            best_cost = cost
            best = prev + delta
    if best is None:
        raise ValueError("no solutions")
    return best, float(np.max(np.abs(best - prev)))
