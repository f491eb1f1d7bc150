"""
Planning-side twin: setpoints around the plant, joint-space and
Cartesian-linear trajectories, stand collision checks, and the tick
loop that publishes joint states, end-effector poses and capture
triggers.

Time on the bus is integer nanoseconds of simulated time; trajectory
sample times are seconds from the start of the trajectory.
"""

from dataclasses import dataclass, field
from enum import Enum
import functools
import logging
import math
import time
from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Set, Tuple

# PyPI
import numpy as np
import numpy.typing as npt

from twinlink.bridge.client import BusClient
from twinlink.bridge.messages import BoolMsg, JointStateMsg, Stamp, TransformStampedMsg
from twinlink.kinematics import (KinematicChain, KinematicsError,
                                 inverse_kinematics, joint_origins, nearest_solution,
                                 tool_matrices)
from twinlink.stats import Stats
from twinlink.transform import (ArrayLike, JointConfig, Transform, look_at, normalize_angles,
                                quat_from_matrix, slerp_path)

logger = logging.getLogger(__name__)

Vec = npt.NDArray[np.float64]

# weighted joint-space distance: base to wrist
DEFAULT_WEIGHTS = (3.0, 3.0, 2.0, 1.0, 1.0, 1.0)

MAX_JUMP = 0.2                  # rad per linear-path step
COLLISION_MARGIN = 0.05         # m
ARRIVAL_THRESHOLD = 1e-4        # m

DONE_TOPIC = '/twinlink/done'

NS = 1_000_000_000


class PlanningError(Exception):
    def __init__(self, msg: str, waypoint: Optional[int] = None,
                 robot_id: Optional[int] = None, setpoint_id: Optional[int] = None):
        super().__init__(msg)
        self.waypoint = waypoint
        self.robot_id = robot_id
        self.setpoint_id = setpoint_id

    def __str__(self) -> str:
        where = []
        if self.robot_id is not None:
            where.append(f"robot {self.robot_id}")
        if self.setpoint_id is not None:
            where.append(f"setpoint {self.setpoint_id}")
        if self.waypoint is not None:
            where.append(f"waypoint {self.waypoint}")
        msg = super().__str__()
        return f"{', '.join(where)}: {msg}" if where else msg


class CollisionError(PlanningError):
    pass


################ setpoints

class Pattern(Enum):
    SPHERICAL = 'spherical'
    CYLINDRICAL = 'cylindrical'


class Setpoint(NamedTuple):
    id: int
    pose: Transform             # tool (camera) pose; +Z is the viewing axis
    pattern: Pattern

    @property
    def position(self) -> Vec:
        return self.pose.translation


def _longitudes(n: int, lon_range: Optional[Tuple[float, float]]) -> Vec:
    """
    n evenly spaced longitudes: the whole circle when no range given,
    else both range ends included
    """
    if lon_range is None:
        return 2 * math.pi * np.arange(n) / n
    lo, hi = lon_range
    if n == 1:
        return np.array([(lo + hi) / 2])
    return lo + (hi - lo) * np.arange(n) / (n - 1)


def spherical_setpoints(center: ArrayLike, radius: float, n_rings: int, n_per_ring: int,
                        lat_range: Tuple[float, float],
                        lon_range: Optional[Tuple[float, float]] = None,
                        start_id: int = 0) -> List[Setpoint]:
    """
    rings of constant latitude on a sphere, each pose looking at the
    center (roll fixed by world +Z up)
    """
    if radius <= 0:
        raise ValueError(f"radius {radius} must be positive")
    if n_rings < 1 or n_per_ring < 1:
        raise ValueError("ring counts must be at least 1")
    lat_lo, lat_hi = lat_range
    if not (-math.pi / 2 < lat_lo <= lat_hi < math.pi / 2):
        raise ValueError(f"latitude range {lat_range} outside (-pi/2, pi/2)")
    c = np.asarray(center, dtype=float)
    if n_rings == 1:
        lats = np.array([(lat_lo + lat_hi) / 2])
    else:
        lats = lat_lo + (lat_hi - lat_lo) * np.arange(n_rings) / (n_rings - 1)
    out = []
    for lat in lats:
        for lon in _longitudes(n_per_ring, lon_range):
            u = np.array([math.cos(lat) * math.cos(lon),
                          math.cos(lat) * math.sin(lon),
                          math.sin(lat)])
            u /= np.linalg.norm(u)
            p = c + radius * u
            out.append(Setpoint(start_id + len(out), look_at(p, c), Pattern.SPHERICAL))
    return out


def cylindrical_setpoints(axis_point: ArrayLike, radius: float, heights: Sequence[float],
                          n_per_ring: int,
                          lon_range: Optional[Tuple[float, float]] = None,
                          start_id: int = 0) -> List[Setpoint]:
    """
    rings at the given world heights on a vertical cylinder, each pose
    looking horizontally at the axis
    """
    if radius <= 0:
        raise ValueError(f"radius {radius} must be positive")
    if n_per_ring < 1:
        raise ValueError("n_per_ring must be at least 1")
    a = np.asarray(axis_point, dtype=float)
    out = []
    for h in heights:
        for lon in _longitudes(n_per_ring, lon_range):
            p = np.array([a[0] + radius * math.cos(lon), a[1] + radius * math.sin(lon), h])
            target = np.array([a[0], a[1], h])
            out.append(Setpoint(start_id + len(out), look_at(p, target), Pattern.CYLINDRICAL))
    return out


def jitter_setpoints(setpoints: Sequence[Setpoint], sigma: float,
                     rng: np.random.Generator) -> List[Setpoint]:
    """
    move each setpoint by a normal random offset, keeping its viewing
    direction
    """
    if sigma <= 0:
        return list(setpoints)
    out = []
    for sp in setpoints:
        q = sp.position + rng.normal(scale=sigma, size=3)
        out.append(sp._replace(pose=look_at(q, q + sp.pose.axis(2))))
    return out


################ trajectories

class TrajectoryKind(Enum):
    JOINT = 'joint'
    LINEAR = 'linear'


@dataclass(frozen=True)
class Trajectory:
    kind: TrajectoryKind
    t: Vec                      # (n,) seconds from start, uniform dt
    q: Vec                      # (n, dof) unwrapped joint angles

    def __len__(self) -> int:
        return len(self.t)

    @property
    def duration(self) -> float:
        return float(self.t[-1])

    def samples(self) -> Iterator[Tuple[float, JointConfig]]:
        for t, q in zip(self.t, self.q):
            yield float(t), JointConfig(q)


def _joints(q: object) -> Vec:
    if isinstance(q, JointConfig):
        return np.array(q.angles)
    return np.array(q, dtype=float).reshape(-1)


def plan_joint(q0: object, q1: object, duration: float, dt: float) -> Trajectory:
    """
    per joint cubic with zero end velocities, sampled every dt; the
    duration is rounded up to a whole number of steps
    """
    if duration <= 0 or not 0 < dt <= duration:
        raise ValueError(f"bad duration {duration} / dt {dt}")
    a = _joints(q0)
    b = _joints(q1)
    n = max(1, math.ceil(duration / dt - 1e-9))
    t = np.arange(n + 1) * dt
    s = np.arange(n + 1) / n
    blend = 3 * s * s - 2 * s * s * s
    q = a + np.outer(blend, b - a)
    q[0] = a
    q[-1] = b
    return Trajectory(TrajectoryKind.JOINT, t, q)


def plan_linear(chain: KinematicChain, pose0: Transform, pose1: Transform,
                speed: float, dt: float, q_seed: object,
                weights: Sequence[float] = DEFAULT_WEIGHTS,
                max_jump: float = MAX_JUMP) -> Trajectory:
    """
    straight-line tool path (rotation slerped) at steps of at most
    speed * dt, each waypoint solved by IK nearest the previous one
    """
    if speed <= 0 or dt <= 0:
        raise ValueError(f"bad speed {speed} / dt {dt}")
    dist = float(np.linalg.norm(pose1.translation - pose0.translation))
    n = math.ceil(dist / (speed * dt) - 1e-9) if dist > 0 else 0
    if n == 0 and pose0.pose_error(pose1)[1] > 1e-12:
        n = 1
    poses = slerp_path(pose0, pose1, np.arange(n + 1) / max(n, 1)) if n else [pose0]
    prev = _joints(q_seed)
    qs = []
    for k, pose in enumerate(poses):
        sols = inverse_kinematics(chain, pose)
        if not sols:
            why = "outside the joint limits" if sols.out_of_limits else "no IK solution"
            raise PlanningError(f"{why} at {np.round(pose.translation, 4).tolist()}",
                                waypoint=k)
        q, jump = nearest_solution(sols, prev, weights)
        if k > 0 and jump > max_jump:
            raise PlanningError(f"IK branch jump of {jump:.3f} rad", waypoint=k)
        qs.append(q)
        prev = q
    return Trajectory(TrajectoryKind.LINEAR, np.arange(len(qs)) * dt, np.array(qs))


################ collisions

@dataclass(frozen=True)
class CollisionBox:
    center: Tuple[float, float, float]
    half_extents: Tuple[float, float, float]

    def __post_init__(self) -> None:
        if len(self.center) != 3 or len(self.half_extents) != 3:
            raise ValueError("box center and half extents are 3-vectors")
        if min(self.half_extents) <= 0:
            raise ValueError(f"half extents {self.half_extents} must be positive")


def segments_hit_box(p0: Vec, p1: Vec, box: CollisionBox, margin: float = 0.0) -> npt.NDArray[np.bool_]:
    """
    slab test of segments p0[i]->p1[i] against the box grown by margin
    """
    c = np.asarray(box.center, dtype=float)
    h = np.asarray(box.half_extents, dtype=float) + margin
    lo, hi = c - h, c + h
    d = p1 - p0
    with np.errstate(divide='ignore', invalid='ignore'):
        t1 = (lo - p0) / d
        t2 = (hi - p0) / d
    parallel = d == 0.0
    in_slab = (p0 >= lo) & (p0 <= hi)
    t_near = np.where(parallel, np.where(in_slab, -np.inf, np.inf), np.minimum(t1, t2))
    t_far = np.where(parallel, np.where(in_slab, np.inf, -np.inf), np.maximum(t1, t2))
    enter = np.maximum(np.max(t_near, axis=-1), 0.0)
    leave = np.minimum(np.min(t_far, axis=-1), 1.0)
    return enter <= leave


def collides(chain: KinematicChain, q: object, boxes: Sequence[CollisionBox],
             margin: float = COLLISION_MARGIN) -> bool:
    """
    True if any link segment (joint origin to joint origin, then the
    tool segment) touches any box inflated by margin
    """
    pts = joint_origins(chain, q)
    p0, p1 = pts[:-1], pts[1:]
    return any(bool(np.any(segments_hit_box(p0, p1, box, margin))) for box in boxes)


def _path_collision(chain: KinematicChain, traj: Trajectory, boxes: Sequence[CollisionBox],
                    margin: float) -> Optional[int]:
    """
    index of the first colliding sample, or None
    """
    if not boxes or not len(traj):
        return None
    pts = joint_origins(chain, traj.q)         # (samples, dof+1, 3)
    p0, p1 = pts[:, :-1], pts[:, 1:]
    hit = np.zeros(len(traj), dtype=bool)
    for box in boxes:
        hit |= np.any(segments_hit_box(p0, p1, box, margin), axis=1)
    first = np.flatnonzero(hit)
    return int(first[0]) if len(first) else None


################ per-robot plans

@dataclass(frozen=True)
class PlannerParams:
    publish_rate: float = 125.0         # Hz; also the trajectory dt
    approach_distance: float = 0.1      # m, standoff back along the viewing axis
    approach_speed: float = 0.05        # m/s
    joint_speed: float = 1.0            # rad/s, average over a joint move
    min_joint_duration: float = 0.5     # s
    dwell: float = 1.5                  # s at the setpoint; capture at the end
    arrival_threshold: float = ARRIVAL_THRESHOLD
    collision_margin: float = COLLISION_MARGIN
    max_jump: float = MAX_JUMP
    weights: Tuple[float, ...] = DEFAULT_WEIGHTS
    robot_offset: float = 0.75          # s between consecutive robots' starts

    def __post_init__(self) -> None:
        for name in ('publish_rate', 'approach_speed', 'joint_speed', 'min_joint_duration'):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ('approach_distance', 'dwell', 'arrival_threshold',
                     'collision_margin', 'robot_offset'):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must not be negative")

    @property
    def dt(self) -> float:
        return 1.0 / self.publish_rate

    @property
    def dt_ns(self) -> int:
        return round(NS / self.publish_rate)


class Visit(NamedTuple):
    setpoint: Setpoint
    standoff: Transform
    move: Trajectory            # joint move to the standoff
    approach: Trajectory        # linear standoff -> setpoint
    first_tick: int             # first tick of the move
    capture_tick: int           # last dwell tick


@dataclass
class RobotPlan:
    robot_id: int
    chain: KinematicChain
    prefix: str                 # topic prefix, "/robot1"
    start_ns: int
    dt_ns: int
    q: Vec                      # (ticks, dof) one row per publish
    visits: List[Visit]

    @property
    def ticks(self) -> int:
        return len(self.q)

    @property
    def end_ns(self) -> int:
        return self.start_ns + (self.ticks - 1) * self.dt_ns

    def tick_ns(self, k: int) -> int:
        return self.start_ns + k * self.dt_ns

    @functools.cached_property
    def ee(self) -> Vec:
        """
        (ticks, 4, 4) tool pose at every tick
        """
        return tool_matrices(self.chain, self.q)


def standoff_pose(setpoint: Setpoint, distance: float) -> Transform:
    pose = setpoint.pose
    return Transform(pose.rotation, pose.translation - distance * pose.axis(2))


def initial_config(chain: KinematicChain, pose: Transform, boxes: Sequence[CollisionBox],
                   margin: float = COLLISION_MARGIN) -> Vec:
    """
    collision free IK solution for pose with the highest elbow
    """
    sols = [s for s in inverse_kinematics(chain, pose) if not collides(chain, s, boxes, margin)]
    if not sols:
        raise PlanningError(f"no collision free configuration at {pose}")
    best = max(sols, key=lambda s: float(joint_origins(chain, s)[2, 2]))
    return np.array(best.angles)


def _plan_visit(chain: KinematicChain, current: Vec, setpoint: Setpoint,
                boxes: Sequence[CollisionBox], params: PlannerParams
                ) -> Tuple[Transform, Trajectory, Trajectory]:
    standoff = standoff_pose(setpoint, params.approach_distance)
    sols = inverse_kinematics(chain, standoff)
    if not sols:
        raise PlanningError("standoff pose outside the joint limits" if sols.out_of_limits
                            else "standoff pose unreachable")
    wts = np.asarray(params.weights)
    # nearest branches first
    ordered = sorted(sols, key=lambda s: float(np.sum(wts * normalize_angles(s.angles - current) ** 2)))
    first_error: Optional[PlanningError] = None
    for sol in ordered:
        target = current + normalize_angles(sol.angles - current)
        span = float(np.max(np.abs(target - current), initial=0.0))
        duration = max(params.min_joint_duration, span / params.joint_speed)
        move = plan_joint(current, target, duration, params.dt)
        k = _path_collision(chain, move, boxes, params.collision_margin)
        if k is not None:
            first_error = first_error or CollisionError("joint move collides", waypoint=k)
            continue
        try:
            approach = plan_linear(chain, standoff, setpoint.pose, params.approach_speed,
                                   params.dt, target, params.weights, params.max_jump)
        except PlanningError as e:
            first_error = first_error or e
            continue
        k = _path_collision(chain, approach, boxes, params.collision_margin)
        if k is not None:
            first_error = first_error or CollisionError("linear approach collides", waypoint=k)
            continue
        return standoff, move, approach
    assert first_error is not None
    raise first_error


def plan_robot(robot_id: int, chain: KinematicChain, setpoints: Sequence[Setpoint],
               boxes: Sequence[CollisionBox], params: PlannerParams,
               start_ns: int = 0, home: Optional[ArrayLike] = None,
               prefix: Optional[str] = None) -> RobotPlan:
    """
    visit each setpoint in order: joint move to its standoff, linear
    approach, dwell.  One row of q per publish tick.
    """
    if not setpoints:
        raise PlanningError("no setpoints", robot_id=robot_id)
    try:
        if home is not None:
            current = _joints(home)
            if collides(chain, current, boxes, params.collision_margin):
                raise CollisionError("home configuration collides")
        else:
            current = initial_config(chain, standoff_pose(setpoints[0], params.approach_distance),
                                     boxes, params.collision_margin)
    except PlanningError as e:
        e.robot_id = robot_id
        e.setpoint_id = setpoints[0].id
        raise
    except KinematicsError as e:
        raise PlanningError(str(e), robot_id=robot_id) from e

    rows: List[Vec] = [current]
    visits: List[Visit] = []
    dwell_ticks = max(1, round(params.dwell * params.publish_rate))
    for sp in setpoints:
        try:
            standoff, move, approach = _plan_visit(chain, current, sp, boxes, params)
        except PlanningError as e:
            e.robot_id = robot_id
            e.setpoint_id = sp.id
            raise
        first = len(rows)
        rows.extend(move.q[1:])
        rows.extend(approach.q[1:])
        rows.extend([approach.q[-1]] * dwell_ticks)
        visits.append(Visit(sp, standoff, move, approach, first, len(rows) - 1))
        current = approach.q[-1]
        logger.debug(f"robot {robot_id} setpoint {sp.id}: move {move.duration:.3f}s"
                     f" approach {approach.duration:.3f}s")
    logger.info(f"robot {robot_id}: {len(visits)} setpoints, {len(rows)} ticks")
    return RobotPlan(robot_id, chain, prefix or f"/robot{robot_id}", start_ns,
                     params.dt_ns, np.array(rows), visits)


################ tick loop

class Arrival(NamedTuple):
    id: int
    robot_id: int
    arrival_t: float            # s
    position: Tuple[float, float, float]    # setpoint position


@dataclass
class TraceRecorder:
    """
    end-effector positions of one robot, one sample per call
    """
    robot_id: int
    source: str
    t_ns: List[int] = field(default_factory=list)
    positions: List[Tuple[float, float, float]] = field(default_factory=list)

    def add(self, t_ns: int, position: ArrayLike) -> None:
        p = tuple(float(v) for v in position)
        if self.t_ns and t_ns <= self.t_ns[-1]:
            if t_ns < self.t_ns[-1]:
                raise ValueError(f"trace time went backwards: {t_ns} < {self.t_ns[-1]}")
            # same instant: keep the latest state
            self.positions[-1] = p      # type: ignore[assignment]
            return
        self.t_ns.append(t_ns)
        self.positions.append(p)        # type: ignore[arg-type]


@dataclass
class PlannerLog:
    traces: Dict[int, TraceRecorder] = field(default_factory=dict)
    arrivals: List[Arrival] = field(default_factory=list)
    published: Dict[int, int] = field(default_factory=dict)
    captures: Dict[int, int] = field(default_factory=dict)


class Planner:
    """
    publishes every robot's plan one tick at a time
    """

    def __init__(self, client: BusClient, plans: Sequence[RobotPlan],
                 threshold: float = ARRIVAL_THRESHOLD):
        self.client = client
        self.plans = list(plans)
        self.threshold = threshold
        self.log = PlannerLog()
        self._visit: Dict[int, int] = {}    # visit in progress
        self._arrived: Dict[int, Set[int]] = {}
        for plan in self.plans:
            self.log.traces[plan.robot_id] = TraceRecorder(plan.robot_id, 'planner')
            self.log.published[plan.robot_id] = 0
            self.log.captures[plan.robot_id] = 0
            self._visit[plan.robot_id] = 0
            self._arrived[plan.robot_id] = set()
            client.advertise(f"{plan.prefix}/joint_states", JointStateMsg.TYPE)
            client.advertise(f"{plan.prefix}/capture", BoolMsg.TYPE)
            client.advertise(f"{plan.prefix}/tf_ee", TransformStampedMsg.TYPE)
        client.advertise(DONE_TOPIC, BoolMsg.TYPE)

    def times(self) -> List[int]:
        """
        every tick time of every robot, ascending
        """
        return sorted({plan.tick_ns(k) for plan in self.plans for k in range(plan.ticks)})

    def tick(self, t_ns: int) -> None:
        for plan in self.plans:
            k, rem = divmod(t_ns - plan.start_ns, plan.dt_ns)
            if rem or not 0 <= k < plan.ticks:
                continue
            self._tick_robot(plan, k, t_ns)

    def _tick_robot(self, plan: RobotPlan, k: int, t_ns: int) -> None:
        q = plan.q[k]
        stamp = Stamp.from_ns(t_ns)
        rid = plan.robot_id
        self.client.publish(f"{plan.prefix}/joint_states",
                            JointStateMsg(stamp, tuple(plan.chain.joint_names),
                                          tuple(float(a) for a in q)))
        self.log.published[rid] += 1
        m = plan.ee[k]
        ee = Transform(quat_from_matrix(m), m[:3, 3])
        self.log.traces[rid].add(t_ns, ee.translation)
        self.client.publish(f"{plan.prefix}/tf_ee",
                            TransformStampedMsg(stamp, 'world', f"{plan.prefix}/{plan.chain.tool_name}",
                                                tuple(float(v) for v in ee.translation),  # type: ignore[arg-type]
                                                tuple(float(v) for v in ee.rotation)))  # type: ignore[arg-type]

        i = self._visit[rid]
        if i < len(plan.visits):
            visit = plan.visits[i]
            if visit.first_tick <= k <= visit.capture_tick and i not in self._arrived[rid] and \
               float(np.linalg.norm(ee.translation - visit.setpoint.position)) < self.threshold:
                self._arrived[rid].add(i)
                self.log.arrivals.append(Arrival(visit.setpoint.id, rid, t_ns / NS,
                                                 tuple(float(v) for v in visit.setpoint.position)))  # type: ignore[arg-type]
            if k == visit.capture_tick:
                if i in self._arrived[rid]:
                    self.client.publish(f"{plan.prefix}/capture", BoolMsg(True))
                    self.log.captures[rid] += 1
                    logger.debug(f"robot {rid}: capture for setpoint {visit.setpoint.id} at {t_ns} ns")
                else:
                    logger.warning(f"robot {rid}: setpoint {visit.setpoint.id} not reached, no capture")
                self._visit[rid] = i + 1

    def finish(self) -> None:
        self.client.publish(DONE_TOPIC, BoolMsg(True))
        stats = Stats.get()
        stats.incr('planner.publishes', sum(self.log.published.values()))
        stats.incr('planner.captures', sum(self.log.captures.values()))


def run_planner(client: BusClient, plans: Sequence[RobotPlan],
                after_tick: Optional[Callable[[int], None]] = None,
                realtime: Optional[float] = None,
                threshold: float = ARRIVAL_THRESHOLD) -> PlannerLog:
    """
    step the simulated clock over every robot's plan.  after_tick(t_ns)
    runs after each tick (the loopback scheduler advances the other
    twin there); realtime paces ticks against the wall clock, scaled
    by the given factor.
    """
    planner = Planner(client, plans, threshold)
    t0 = time.monotonic()
    for t_ns in planner.times():
        planner.tick(t_ns)
        if after_tick:
            after_tick(t_ns)
        elif realtime:
            delay = t0 + t_ns / NS / realtime - time.monotonic()
            if delay > 0:
                time.sleep(delay)
    planner.finish()
    missing = sum(len(p.visits) for p in plans) - len(planner.log.arrivals)
    if missing:
        logger.warning(f"{missing} setpoints never reached within {threshold} m")
    return planner.log
