"""
Render-side twin: follows the joint-state stream through a first
order lag with a rate limit and a transport delay, holds on contact
with the stands or table, and turns capture triggers into image
files (RGB, segmentation, depth) plus a fused point cloud.

The twin runs on its own tick clock (default 240 Hz).  Incoming
targets and capture triggers become due at their stamp plus the
transport delay; between events the lag is integrated in closed form.
"""

from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
import json
import logging
import math
import os
from typing import Deque, Dict, List, NamedTuple, Optional, Sequence, Tuple

# PyPI
import numpy as np
import numpy.typing as npt

from twinlink.bridge.client import BusClient, WebSocketClient
from twinlink.bridge.messages import BoolMsg, BridgeMessage, JointStateMsg, Stamp, TransformStampedMsg
from twinlink.config import conf
from twinlink.kinematics import KinematicChain, forward_kinematics
from twinlink.planner import COLLISION_MARGIN, DONE_TOPIC, NS, CollisionBox, TraceRecorder, collides
from twinlink.scenecam.camera import (CameraIntrinsics, DepthMode, depth_to_pointcloud,
                                      ray_to_planar, render_all)
from twinlink.scenecam.imageio import write_pfm, write_ply, write_ppm
from twinlink.scenecam.scene import Scene
from twinlink.stats import Stats
from twinlink.transform import JointConfig, Transform, normalize_angles

logger = logging.getLogger(__name__)

TICK_RATE = 240.0               # Hz
CLOUD_FILE = 'cloud.ply'
POSE_FILE = 'camera_pose.json'


@dataclass(frozen=True)
class LagParams:
    tau: float = 0.01                   # s, first order time constant (0: none)
    rate_limit: float = 0.8             # rad/s per joint (inf: none)
    transport_delay: float = 0.008      # s

    def __post_init__(self) -> None:
        if self.tau < 0 or self.transport_delay < 0:
            raise ValueError("tau and transport_delay must not be negative")
        if not self.rate_limit > 0:
            raise ValueError(f"rate_limit {self.rate_limit} must be positive")

    @classmethod
    def ideal(cls) -> 'LagParams':
        return cls(0.0, math.inf, 0.0)

    @property
    def delay_ns(self) -> int:
        return round(self.transport_delay * NS)


@dataclass(frozen=True)
class TwinState:
    q: JointConfig
    q_target: JointConfig
    t: float


def lag_step(state: TwinState, dt: float, params: LagParams) -> TwinState:
    """
    advance the follower by dt: exponential approach to the target,
    then each joint's step clamped to rate_limit * dt on its own.
    dt == 0 with tau == 0 and no rate limit lands exactly on the target.
    """
    if dt < 0:
        raise ValueError(f"negative dt {dt}")
    q = state.q.angles
    delta = normalize_angles(state.q_target.angles - q)
    alpha = 1.0 if params.tau == 0 else -math.expm1(-dt / params.tau)
    step = alpha * delta
    limit = math.inf if math.isinf(params.rate_limit) else params.rate_limit * dt
    clamped = bool(np.any(np.abs(step) > limit))
    if clamped:
        step = np.clip(step, -limit, limit)
    if alpha == 1.0 and not clamped:
        return TwinState(state.q_target, state.q_target, state.t + dt)
    return TwinState(JointConfig(q + step), state.q_target, state.t + dt)


def twin_tick_ns(k: int, rate: float = TICK_RATE) -> int:
    return round(k * NS / rate)


class TwinRobot(NamedTuple):
    robot_id: int
    chain: KinematicChain
    prefix: str                         # topic prefix, "/robot1"
    setpoint_ids: Tuple[int, ...]       # names the captures, in visit order


class CaptureRecord(NamedTuple):
    robot_id: int
    sequence: int
    setpoint_id: int
    t: float                            # s, simulated
    pose: Transform
    files: Tuple[str, ...]


@dataclass
class TwinLog:
    traces: Dict[int, TraceRecorder] = field(default_factory=dict)
    holds: Dict[int, int] = field(default_factory=dict)
    captures: List[CaptureRecord] = field(default_factory=list)
    cloud_points: int = 0


@dataclass(frozen=True)
class RenderSettings:
    intrinsics: CameraIntrinsics
    depth_mode: DepthMode = DepthMode.PLANAR
    cloud_stride: int = 16


def render_capture(scene: Scene, pose: Transform, settings: RenderSettings,
                   base: str) -> npt.NDArray[np.float64]:
    """
    write base_rgb.ppm, base_seg.ppm and base_depth.pfm; returns the
    world-frame points for the fused cloud
    """
    intr = settings.intrinsics
    frame = render_all(scene, pose, intr, settings.depth_mode)
    write_ppm(frame.rgb, f"{base}_rgb.ppm")
    write_ppm(frame.seg, f"{base}_seg.ppm")
    write_pfm(frame.depth, f"{base}_depth.pfm")
    planar = frame.depth if settings.depth_mode == DepthMode.PLANAR else ray_to_planar(frame.depth, intr)
    return depth_to_pointcloud(planar, intr, pose, stride=settings.cloud_stride)


class _RenderJob(NamedTuple):
    record: CaptureRecord
    future: 'Future[npt.NDArray[np.float64]]'


class _Follower:
    """
    per-robot state of the twin
    """

    def __init__(self, robot: TwinRobot, out_dir: str):
        self.robot = robot
        self.state: Optional[TwinState] = None
        self.targets: Deque[Tuple[int, JointConfig]] = deque()     # (due ns, target)
        self.triggers: Deque[int] = deque()                         # due ns
        self.last_stamp: Optional[int] = None
        self.trace = TraceRecorder(robot.robot_id, 'twin')
        self.holds = 0
        self.sequence = 0
        self.dir = os.path.join(out_dir, f"robot{robot.robot_id}")
        self.poses: List[Dict[str, object]] = []

    def next_event(self) -> Optional[int]:
        due = []
        if self.targets:
            due.append(self.targets[0][0])
        if self.triggers:
            due.append(self.triggers[0])
        return min(due, default=None)


class Twin:
    """
    subscribes to every robot's joint states and capture triggers;
    advance_to() moves simulated time forward.
    """

    def __init__(self, client: BusClient, robots: Sequence[TwinRobot], scene: Scene,
                 settings: RenderSettings, out_dir: str,
                 boxes: Sequence[CollisionBox] = (),
                 params: LagParams = LagParams(),
                 margin: float = COLLISION_MARGIN,
                 tick_rate: float = TICK_RATE,
                 workers: Optional[int] = None):
        if tick_rate <= 0:
            raise ValueError(f"tick_rate {tick_rate} must be positive")
        self.client = client
        self.scene = scene
        self.settings = settings
        self.out_dir = out_dir
        self.boxes = list(boxes)
        self.margin = margin              # box inflation, as in planning
        self.params = params
        self.tick_rate = tick_rate
        self.done = False
        self.now: Optional[int] = None
        self._tick = 0
        self.log = TwinLog()
        self._followers: Dict[int, _Follower] = {}
        self._jobs: List[_RenderJob] = []
        self._pool = ThreadPoolExecutor(max_workers=workers or conf.RENDER_WORKERS,
                                        thread_name_prefix='render')
        self.stats = Stats.get()

        for robot in robots:
            f = _Follower(robot, out_dir)
            os.makedirs(f.dir, exist_ok=True)
            self._followers[robot.robot_id] = f
            self.log.traces[robot.robot_id] = f.trace
            client.subscribe(f"{robot.prefix}/joint_states", JointStateMsg.TYPE,
                             lambda msg, f=f: self._on_joint_state(f, msg))
            client.subscribe(f"{robot.prefix}/capture", BoolMsg.TYPE,
                             lambda msg, f=f: self._on_capture(f, msg))
            client.advertise(f"{robot.prefix}/ue_ee", TransformStampedMsg.TYPE)
        client.subscribe(DONE_TOPIC, BoolMsg.TYPE, self._on_done)

    ################ bus callbacks

    def _on_joint_state(self, f: _Follower, msg: BridgeMessage) -> None:
        js = msg.payload
        if not isinstance(js, JointStateMsg):
            logger.warning(f"{msg.topic}: not a joint state")
            return
        names = f.robot.chain.joint_names
        try:
            index = {n: i for i, n in enumerate(js.name)}
            q = JointConfig([js.position[index[n]] for n in names])
        except KeyError as e:
            logger.warning(f"{msg.topic}: missing joint {e}")
            return
        stamp = js.stamp.to_ns()
        if f.last_stamp is not None and stamp < f.last_stamp:
            logger.warning(f"{msg.topic}: stamp {stamp} older than {f.last_stamp}, ignored")
            return
        f.last_stamp = stamp
        f.targets.append((stamp + self.params.delay_ns, q))

    def _on_capture(self, f: _Follower, msg: BridgeMessage) -> None:
        if f.last_stamp is None:
            logger.warning(f"{msg.topic}: capture before any joint state, ignored")
            return
        f.triggers.append(f.last_stamp + self.params.delay_ns)

    def _on_done(self, msg: BridgeMessage) -> None:
        logger.info("planner done")
        self.done = True

    ################ simulation

    def latest_due(self) -> Optional[int]:
        """
        latest time the twin can safely advance to with what it has received
        """
        due = [f.last_stamp + self.params.delay_ns
               for f in self._followers.values() if f.last_stamp is not None]
        return max(due) if due else None

    def advance_to(self, t_ns: int) -> None:
        """
        process every target, trigger and twin tick due at or before t_ns
        """
        while True:
            tick = twin_tick_ns(self._tick, self.tick_rate)
            events = [e for e in (f.next_event() for f in self._followers.values()) if e is not None]
            t = min([tick] + events)
            if t > t_ns:
                break
            for f in self._followers.values():
                self._integrate(f, t)
                while f.targets and f.targets[0][0] == t:
                    self._apply_target(f, f.targets.popleft()[1], t)
                while f.triggers and f.triggers[0] == t:
                    f.triggers.popleft()
                    self._trigger(f, t)
            if t == tick:
                for f in self._followers.values():
                    self._on_tick(f, t)
                self._tick += 1
            self.now = t

    def _integrate(self, f: _Follower, t_ns: int) -> None:
        state = f.state
        if state is None:
            return
        dt = t_ns / NS - state.t
        if dt <= 0:
            return
        new = lag_step(state, dt, self.params)
        if self.boxes and collides(f.robot.chain, new.q, self.boxes, self.margin):
            if f.holds == 0:
                logger.warning(f"robot {f.robot.robot_id}: contact at {t_ns} ns, holding")
            f.holds += 1
            new = TwinState(state.q, state.q_target, new.t)
        f.state = new

    def _apply_target(self, f: _Follower, target: JointConfig, t_ns: int) -> None:
        if f.state is None:
            # spawn at the first target
            f.state = TwinState(target, target, t_ns / NS)
            logger.info(f"robot {f.robot.robot_id}: twin spawned at {t_ns} ns")
        else:
            f.state = TwinState(f.state.q, target, f.state.t)
            f.state = lag_step(f.state, 0.0, self.params)
        self._record(f, t_ns)

    def _record(self, f: _Follower, t_ns: int) -> Optional[Transform]:
        if f.state is None:
            return None
        ee = forward_kinematics(f.robot.chain, f.state.q)
        f.trace.add(t_ns, ee.translation)
        return ee

    def _on_tick(self, f: _Follower, t_ns: int) -> None:
        ee = self._record(f, t_ns)
        if ee is None:
            return
        self.client.publish(f"{f.robot.prefix}/ue_ee",
                            TransformStampedMsg(Stamp.from_ns(t_ns), 'world',
                                                f"{f.robot.prefix}/ue_{f.robot.chain.tool_name}",
                                                tuple(float(v) for v in ee.translation),  # type: ignore[arg-type]
                                                tuple(float(v) for v in ee.rotation)))  # type: ignore[arg-type]

    def _trigger(self, f: _Follower, t_ns: int) -> None:
        if f.state is None:
            logger.warning(f"robot {f.robot.robot_id}: capture before spawn, ignored")
            return
        pose = forward_kinematics(f.robot.chain, f.state.q)
        ids = f.robot.setpoint_ids
        seq = f.sequence
        f.sequence += 1
        if seq < len(ids):
            sid = ids[seq]
        else:
            sid = (ids[-1] if ids else -1) + 1 + seq - len(ids)
            logger.warning(f"robot {f.robot.robot_id}: unexpected capture {seq}, named {sid}")
        base = os.path.join(f.dir, f"{sid:04d}")
        fut = self._pool.submit(render_capture, self.scene, pose, self.settings, base)
        self._jobs.append(_RenderJob(CaptureRecord(f.robot.robot_id, seq, sid, t_ns / NS, pose, (
            f"{base}_rgb.ppm", f"{base}_seg.ppm", f"{base}_depth.pfm")), fut))
        logger.debug(f"robot {f.robot.robot_id}: capture {seq} (setpoint {sid}) at {t_ns} ns")
        f.poses.append({'sequence': seq, 'setpoint_id': sid, 't': t_ns / NS,
                        'translation': [float(v) for v in pose.translation],
                        'rotation_wxyz': [float(v) for v in pose.rotation]})

    def finish(self) -> TwinLog:
        """
        wait for outstanding renders (in trigger order), then write the
        camera poses and the fused cloud
        """
        clouds = []
        try:
            for job in self._jobs:
                clouds.append(job.future.result())
                self.log.captures.append(job.record)
        finally:
            self._pool.shutdown(wait=True)
        for f in self._followers.values():
            with open(os.path.join(f.dir, POSE_FILE), 'w') as out:
                json.dump(f.poses, out, indent=2, sort_keys=True)
            self.log.holds[f.robot.robot_id] = f.holds

        cloud = np.concatenate(clouds) if clouds else np.zeros((0, 3))
        depth = self.settings.depth_mode.value
        write_ply(cloud, os.path.join(self.out_dir, CLOUD_FILE),
                  comments=[f"twinlink fused cloud, world frame, {len(clouds)} captures",
                            f"depth {depth}: rendered depth files hold "
                            + ('camera Z' if depth == 'planar' else 'distance along the ray')])
        self.log.cloud_points = len(cloud)
        self.stats.incr('twin.captures', len(self.log.captures))
        self.stats.incr('twin.holds', sum(self.log.holds.values()))
        logger.info(f"twin: {len(self.log.captures)} captures, {len(cloud)} cloud points,"
                    f" {sum(self.log.holds.values())} holds")
        return self.log


def run_twin(client: WebSocketClient, twin: Twin, tail: float = 0.5,
             idle_timeout: Optional[float] = None) -> TwinLog:
    """
    drive the twin from a WebSocket stream: advance to the latest due
    time as messages arrive, and past the last one by tail seconds once
    the planner is done.
    """
    if idle_timeout is None:
        idle_timeout = conf.WS_CONNECT_TIMEOUT
    while not twin.done:
        if not client.spin_once(idle_timeout):
            logger.warning(f"no messages for {idle_timeout}s, stopping")
            break
        due = twin.latest_due()
        if due is not None:
            twin.advance_to(due)
    due = twin.latest_due()
    if due is not None:
        twin.advance_to(due + round(tail * NS))
    return twin.finish()
