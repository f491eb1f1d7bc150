"""
Experiment harness: the "schema": 1 JSON document, setpoint and plan
construction, and the two ways of running planner and twin together:

* loopback: one thread, the planner's tick loop pumps the in-process
  bus and advances the twin after every tick (bit-deterministic)
* websocket: planner and twin on separate connections to a live
  bridge server (twin in a thread, driven by message stamps)
"""

import copy
from dataclasses import dataclass, field
import json
import logging
import math
import os
import threading
import time
from typing import Any, Dict, List, Optional, Sequence, Tuple

# PyPI
import numpy as np

from twinlink.bridge.client import connect
from twinlink.bridge.loopback import loopback_bus
from twinlink.bridge.websocket import BridgeServer, serve
from twinlink.config import conf
from twinlink.kinematics import KinematicChain, load_urdf
from twinlink.metrics import MIN_COVERAGE, WINDOW, ErrorReport, ErrorSeries, PoseTrace, build_report
import twinlink.path as path
from twinlink.planner import (NS, CollisionBox, PlannerLog, PlannerParams, RobotPlan, Setpoint,
                              cylindrical_setpoints, jitter_setpoints, plan_robot, run_planner,
                              spherical_setpoints)
from twinlink.scenecam.camera import CameraIntrinsics, DepthMode
from twinlink.scenecam.scene import Scene, default_scene
from twinlink.stats import Stats
from twinlink.traces import write_arrivals, write_errors, write_report, write_traces
from twinlink.transform import Transform
from twinlink.twin import LagParams, RenderSettings, Twin, TwinLog, TwinRobot, run_twin

logger = logging.getLogger(__name__)

SCHEMA = 1
LOOPBACK = 'loopback'

PLANNER_TRACE = 'planner_trace.csv'
TWIN_TRACE = 'twin_trace.csv'
ARRIVALS = 'arrivals.csv'
REPORT = 'report.json'
ERRORS = 'errors.csv'

TOP_KEYS = {'schema', 'seed', 'transport', 'out_dir', 'robots', 'setpoints', 'trajectory',
            'lag', 'camera', 'collision_boxes', 'metrics', 'fast'}


class ConfigError(Exception):
    pass


################ typed access to the JSON document

_MISSING = object()


def _path(where: str, key: str) -> str:
    return f"{where}.{key}" if where else key


def _get(d: Dict[str, Any], key: str, where: str, default: Any = _MISSING) -> Any:
    if key in d:
        return d[key]
    if default is _MISSING:
        raise ConfigError(f"{_path(where, key)}: missing")
    return default


def _number(d: Dict[str, Any], key: str, where: str, default: Any = _MISSING) -> float:
    v = _get(d, key, where, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{_path(where, key)}: expected a number, got {v!r}")
    return float(v)


def _int(d: Dict[str, Any], key: str, where: str, default: Any = _MISSING) -> int:
    v = _get(d, key, where, default)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{_path(where, key)}: expected an integer, got {v!r}")
    return v


def _str(d: Dict[str, Any], key: str, where: str, default: Any = _MISSING) -> str:
    v = _get(d, key, where, default)
    if not isinstance(v, str):
        raise ConfigError(f"{_path(where, key)}: expected a string, got {v!r}")
    return v


def _vector(d: Dict[str, Any], key: str, where: str, n: Optional[int] = 3,
            default: Any = _MISSING) -> Tuple[float, ...]:
    v = _get(d, key, where, default)
    if not isinstance(v, (list, tuple)) or (n is not None and len(v) != n) or \
       not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        want = f"{n} numbers" if n else "a list of numbers"
        raise ConfigError(f"{_path(where, key)}: expected {want}, got {v!r}")
    return tuple(float(x) for x in v)


def _section(d: Dict[str, Any], key: str, where: str) -> Dict[str, Any]:
    v = d.get(key, {})
    if not isinstance(v, dict):
        raise ConfigError(f"{_path(where, key)}: expected an object")
    return v


def _merge(base: Dict[str, Any], over: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


################ configuration

@dataclass(frozen=True)
class RobotConfig:
    robot_id: int
    urdf: str                   # resolved path
    base: Transform
    prefix: str
    home: Optional[Tuple[float, ...]] = None


@dataclass(frozen=True)
class SetpointConfig:
    center: Tuple[float, float, float] = (0.0, 0.0, 1.15)
    lon_span: float = math.radians(60.0)    # rad, centred on the robot's side
    jitter: float = 0.0                     # m
    sph_radius: float = 0.45
    sph_rings: int = 3
    sph_per_ring: int = 10
    sph_lat: Tuple[float, float] = (math.radians(10.0), math.radians(50.0))
    cyl_radius: float = 0.5
    cyl_heights: Tuple[float, ...] = (1.0, 1.15, 1.3)
    cyl_per_ring: int = 10

    @property
    def per_robot(self) -> int:
        return self.sph_rings * self.sph_per_ring + len(self.cyl_heights) * self.cyl_per_ring


@dataclass(frozen=True)
class CameraConfig:
    width: int = 1920
    height: int = 1080
    hfov: float = 70.0          # degrees
    depth_mode: DepthMode = DepthMode.PLANAR
    cloud_stride: int = 16

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.width, self.height, self.hfov)

    def settings(self) -> RenderSettings:
        return RenderSettings(self.intrinsics(), self.depth_mode, self.cloud_stride)


@dataclass(frozen=True)
class ExperimentConfig:
    robots: Tuple[RobotConfig, ...]
    setpoints: SetpointConfig = SetpointConfig()
    planner: PlannerParams = PlannerParams()
    lag: LagParams = LagParams()
    tick_rate: float = 240.0
    tail: float = 0.5           # s the twin runs past the last due target
    camera: CameraConfig = CameraConfig()
    boxes: Tuple[CollisionBox, ...] = ()
    transport: str = LOOPBACK
    seed: int = 0
    out_dir: Optional[str] = None
    window: float = WINDOW
    min_coverage: float = MIN_COVERAGE
    source: str = ''            # config file name


def _resolve_file(name: str, config_dir: str, where: str) -> str:
    if os.path.isabs(name):
        candidates = [name]
    else:
        candidates = [os.path.join(config_dir, name), os.path.join(path.ASSET_DIR, name)]
    for c in candidates:
        if os.path.isfile(c):
            return c
    raise ConfigError(f"{where}: file {name} not found")


def _robots(doc: Dict[str, Any], config_dir: str) -> Tuple[RobotConfig, ...]:
    robots = doc.get('robots')
    if not isinstance(robots, list) or not robots:
        raise ConfigError("robots: expected a non-empty list")
    out = []
    for i, r in enumerate(robots):
        where = f"robots[{i}]"
        if not isinstance(r, dict):
            raise ConfigError(f"{where}: expected an object")
        rid = _int(r, 'id', where, i + 1)
        urdf = _resolve_file(_str(r, 'urdf', where, 'ur10.urdf'), config_dir, f"{where}.urdf")
        base = _section(r, 'base', where)
        xyz = _vector(base, 'xyz', f"{where}.base", 3, (0.0, 0.0, 0.0))
        rpy = _vector(base, 'rpy', f"{where}.base", 3, (0.0, 0.0, 0.0))
        prefix = _str(r, 'topic_prefix', where, f"/robot{rid}")
        if not prefix.startswith('/') or prefix.endswith('/'):
            raise ConfigError(f"{where}.topic_prefix: bad prefix {prefix!r}")
        home = _vector(r, 'home', where, None) if 'home' in r else None
        out.append(RobotConfig(rid, urdf, Transform.from_xyz_rpy(xyz, rpy), prefix, home))
    ids = [r.robot_id for r in out]
    if len(set(ids)) != len(ids) or len({r.prefix for r in out}) != len(out):
        raise ConfigError("robots: duplicate id or topic_prefix")
    return tuple(out)


def _setpoints(doc: Dict[str, Any]) -> SetpointConfig:
    where = 'setpoints'
    s = _section(doc, 'setpoints', '')
    sph = _section(s, 'spherical', where)
    cyl = _section(s, 'cylindrical', where)
    d = SetpointConfig()
    lat = _vector(sph, 'lat_deg', f"{where}.spherical", 2,
                  tuple(math.degrees(a) for a in d.sph_lat))
    return SetpointConfig(
        center=_vector(s, 'center', where, 3, d.center),  # type: ignore[arg-type]
        lon_span=math.radians(_number(s, 'lon_span_deg', where, math.degrees(d.lon_span))),
        jitter=_number(s, 'jitter', where, d.jitter),
        sph_radius=_number(sph, 'radius', f"{where}.spherical", d.sph_radius),
        sph_rings=_int(sph, 'rings', f"{where}.spherical", d.sph_rings),
        sph_per_ring=_int(sph, 'per_ring', f"{where}.spherical", d.sph_per_ring),
        sph_lat=(math.radians(lat[0]), math.radians(lat[1])),
        cyl_radius=_number(cyl, 'radius', f"{where}.cylindrical", d.cyl_radius),
        cyl_heights=_vector(cyl, 'heights', f"{where}.cylindrical", None, d.cyl_heights),
        cyl_per_ring=_int(cyl, 'per_ring', f"{where}.cylindrical", d.cyl_per_ring))


def _planner(doc: Dict[str, Any]) -> PlannerParams:
    t = _section(doc, 'trajectory', '')
    d = PlannerParams()
    kw: Dict[str, Any] = {}
    for name in ('publish_rate', 'approach_distance', 'approach_speed', 'joint_speed',
                 'min_joint_duration', 'dwell', 'arrival_threshold', 'collision_margin',
                 'max_jump', 'robot_offset'):
        kw[name] = _number(t, name, 'trajectory', getattr(d, name))
    kw['weights'] = _vector(t, 'weights', 'trajectory', 6, d.weights)
    return PlannerParams(**kw)


def _lag(doc: Dict[str, Any]) -> Tuple[LagParams, float, float]:
    lag = _section(doc, 'lag', '')
    d = LagParams()
    rate = lag.get('rate_limit', d.rate_limit)
    rate_limit = math.inf if rate is None else _number(lag, 'rate_limit', 'lag')
    params = LagParams(_number(lag, 'tau', 'lag', d.tau), rate_limit,
                       _number(lag, 'transport_delay', 'lag', d.transport_delay))
    return params, _number(lag, 'tick_rate', 'lag', 240.0), _number(lag, 'tail', 'lag', 0.5)


def _camera(doc: Dict[str, Any]) -> CameraConfig:
    c = _section(doc, 'camera', '')
    d = CameraConfig()
    mode = _str(c, 'depth_mode', 'camera', d.depth_mode.value)
    try:
        depth_mode = DepthMode(mode)
    except ValueError:
        raise ConfigError(f"camera.depth_mode: expected planar or ray, got {mode!r}")
    return CameraConfig(_int(c, 'width', 'camera', d.width), _int(c, 'height', 'camera', d.height),
                        _number(c, 'hfov_deg', 'camera', d.hfov), depth_mode,
                        _int(c, 'cloud_stride', 'camera', d.cloud_stride))


def _boxes(doc: Dict[str, Any]) -> Tuple[CollisionBox, ...]:
    boxes = doc.get('collision_boxes', [])
    if not isinstance(boxes, list):
        raise ConfigError("collision_boxes: expected a list")
    out = []
    for i, b in enumerate(boxes):
        where = f"collision_boxes[{i}]"
        if not isinstance(b, dict):
            raise ConfigError(f"{where}: expected an object")
        out.append(CollisionBox(_vector(b, 'center', where), _vector(b, 'half_extents', where)))  # type: ignore[arg-type]
    return tuple(out)


def parse_config(doc: Any, config_dir: str = path.ASSET_DIR, fast: bool = False,
                 source: str = '') -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("experiment: expected a JSON object")
    schema = doc.get('schema')
    if schema != SCHEMA:
        raise ConfigError(f"schema: expected {SCHEMA}, got {schema!r}")
    for key in sorted(set(doc) - TOP_KEYS):
        logger.warning(f"{source or 'experiment'}: unknown key {key!r} ignored")
    if fast:
        doc = _merge(doc, _section(doc, 'fast', ''))
    metrics = _section(doc, 'metrics', '')
    out_dir = doc.get('out_dir')
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("out_dir: expected a string")
    try:
        lag, tick_rate, tail = _lag(doc)
        cfg = ExperimentConfig(
            robots=_robots(doc, config_dir),
            setpoints=_setpoints(doc),
            planner=_planner(doc),
            lag=lag, tick_rate=tick_rate, tail=tail,
            camera=_camera(doc),
            boxes=_boxes(doc),
            transport=_str(doc, 'transport', '', LOOPBACK),
            seed=_int(doc, 'seed', '', 0),
            out_dir=out_dir,
            window=_number(metrics, 'window', 'metrics', WINDOW),
            min_coverage=_number(metrics, 'min_coverage', 'metrics', MIN_COVERAGE),
            source=source)
        cfg.camera.intrinsics()
    except ValueError as e:
        # range checks in the parameter classes
        raise ConfigError(str(e)) from e
    if cfg.tick_rate <= 0 or cfg.tail < 0:
        raise ConfigError("lag: tick_rate must be positive, tail not negative")
    if cfg.camera.cloud_stride < 1:
        raise ConfigError("camera.cloud_stride: must be at least 1")
    if cfg.window <= 0 or not 0 <= cfg.min_coverage <= 1:
        raise ConfigError("metrics: window must be positive, min_coverage within [0, 1]")
    return cfg


def load_config(fname: Optional[str] = None, fast: bool = False) -> ExperimentConfig:
    fname = fname or path.DEFAULT_EXPERIMENT
    try:
        with open(fname) as f:
            doc = json.load(f)
    except OSError as e:
        raise ConfigError(f"{fname}: {e.strerror}") from e
    except ValueError as e:
        raise ConfigError(f"{fname}: invalid JSON: {e}") from e
    cfg = parse_config(doc, os.path.dirname(os.path.abspath(fname)), fast, fname)
    logger.info(f"loaded {fname}{' (fast)' if fast else ''}: {len(cfg.robots)} robots,"
                f" {cfg.setpoints.per_robot} setpoints each")
    return cfg


def resolve_out_dir(cfg: ExperimentConfig, out: Optional[str] = None) -> str:
    """
    --out, then the experiment's out_dir, then TWINLINK_OUT, then storage/output
    """
    return out or cfg.out_dir or conf.TWINLINK_OUT or path.OUTPUT_DIR


################ setpoints and plans

def load_chains(cfg: ExperimentConfig) -> Dict[int, KinematicChain]:
    return {r.robot_id: load_urdf(r.urdf).with_base(r.base) for r in cfg.robots}


def make_setpoints(cfg: ExperimentConfig) -> Dict[int, List[Setpoint]]:
    """
    per robot, in visit order: spherical rings then cylindrical rings
    over the longitudes facing that robot.  Ids run on across robots.
    """
    s = cfg.setpoints
    rng = np.random.default_rng(cfg.seed)
    c = np.asarray(s.center)
    out: Dict[int, List[Setpoint]] = {}
    next_id = 0
    try:
        for robot in cfg.robots:
            b = robot.base.translation
            lon0 = math.atan2(b[1] - c[1], b[0] - c[0])
            lon_range = None if s.lon_span >= 2 * math.pi else \
                (lon0 - s.lon_span / 2, lon0 + s.lon_span / 2)
            sph = spherical_setpoints(c, s.sph_radius, s.sph_rings, s.sph_per_ring, s.sph_lat,
                                      lon_range, start_id=next_id)
            cyl = cylindrical_setpoints(c, s.cyl_radius, s.cyl_heights, s.cyl_per_ring,
                                        lon_range, start_id=next_id + len(sph))
            out[robot.robot_id] = jitter_setpoints(sph + cyl, s.jitter, rng)
            next_id += len(sph) + len(cyl)
    except ValueError as e:
        raise ConfigError(f"setpoints: {e}") from e
    return out


def make_plans(cfg: ExperimentConfig, chains: Dict[int, KinematicChain],
               setpoints: Dict[int, List[Setpoint]]) -> List[RobotPlan]:
    offset = round(cfg.planner.robot_offset * NS)
    return [plan_robot(r.robot_id, chains[r.robot_id], setpoints[r.robot_id], cfg.boxes,
                       cfg.planner, start_ns=i * offset, home=r.home, prefix=r.prefix)
            for i, r in enumerate(cfg.robots)]


def make_scene(cfg: ExperimentConfig) -> Scene:
    """
    default scene with a stand under each robot base
    """
    bases = [r.base.translation for r in cfg.robots]
    heights = {round(float(b[2]), 9) for b in bases}
    if len(heights) != 1:
        raise ConfigError("robots: bases must share one height (stand height)")
    return default_scene(tuple((float(b[0]), float(b[1])) for b in bases), heights.pop())


def _twin(cfg: ExperimentConfig, client: Any, chains: Dict[int, KinematicChain],
          setpoints: Dict[int, List[Setpoint]], out_dir: str) -> Twin:
    robots = [TwinRobot(r.robot_id, chains[r.robot_id], r.prefix,
                        tuple(sp.id for sp in setpoints[r.robot_id])) for r in cfg.robots]
    return Twin(client, robots, make_scene(cfg), cfg.camera.settings(), out_dir,
                boxes=cfg.boxes, params=cfg.lag, margin=cfg.planner.collision_margin,
                tick_rate=cfg.tick_rate)


################ running

@dataclass
class RunResult:
    out_dir: str
    planner: PlannerLog
    twin: TwinLog
    report: ErrorReport
    series: Dict[int, ErrorSeries] = field(default_factory=dict)
    setpoints: int = 0

    @property
    def images(self) -> int:
        return sum(len(c.files) for c in self.twin.captures)


def _run_loopback(cfg: ExperimentConfig, plans: Sequence[RobotPlan], twin_factory: Any) -> Tuple[PlannerLog, TwinLog]:
    bus = loopback_bus()
    try:
        twin = twin_factory(bus.client('twin'))
        planner_client = bus.client('planner')

        def step(t_ns: int) -> None:
            bus.pump()
            twin.advance_to(t_ns)

        plog = run_planner(planner_client, plans, after_tick=step,
                           threshold=cfg.planner.arrival_threshold)
        bus.pump()
        end = max(p.end_ns for p in plans)
        twin.advance_to(end + cfg.lag.delay_ns + round(cfg.tail * NS))
        tlog = twin.finish()
        logger.info(f"loopback bus: {bus.stats()}")
    finally:
        bus.close()
    return plog, tlog


def _run_websocket(cfg: ExperimentConfig, plans: Sequence[RobotPlan], twin_factory: Any,
                   endpoint: Optional[str], realtime: Optional[float],
                   sync_every: int = 50) -> Tuple[PlannerLog, TwinLog]:
    server: Optional[BridgeServer] = None
    if endpoint is None:
        server = serve(host='127.0.0.1', port=0)
        endpoint = server.url
    try:
        twin_client = connect(endpoint, 'twin')
        twin = twin_factory(twin_client)
        twin_client.barrier()       # subscriptions in place before the first publish

        result: Dict[str, Any] = {}

        def twin_loop() -> None:
            try:
                result['log'] = run_twin(twin_client, twin, cfg.tail)
            except BaseException as e:
                result['error'] = e

        thread = threading.Thread(target=twin_loop, name='twin')
        thread.start()
        planner_client = connect(endpoint, 'planner')
        ticks = [0]

        def throttle(t_ns: int) -> None:
            # bound how far the planner runs ahead of the server
            ticks[0] += 1
            if ticks[0] % sync_every == 0:
                planner_client.barrier()

        try:
            plog = run_planner(planner_client, plans,
                               after_tick=None if realtime else throttle,
                               realtime=realtime, threshold=cfg.planner.arrival_threshold)
            planner_client.barrier()
        finally:
            thread.join()
            planner_client.close()
            twin_client.close()
        if 'error' in result:
            raise result['error']
        if server:
            logger.info(f"bridge: {server.stats()}")
        return plog, result['log']
    finally:
        if server:
            server.close()


def run_experiment(cfg: ExperimentConfig, out_dir: str, transport: Optional[str] = None,
                   realtime: Optional[float] = None, with_server: bool = False) -> RunResult:
    """
    plan, run planner and twin over the chosen transport, write traces
    and report.  transport is "loopback" or a ws:// endpoint; with
    with_server a private bridge server is started instead.
    """
    t0 = time.monotonic()
    transport = transport or cfg.transport
    chains = load_chains(cfg)
    setpoints = make_setpoints(cfg)
    plans = make_plans(cfg, chains, setpoints)
    path.check_dir(out_dir)

    def twin_factory(client: Any) -> Twin:
        return _twin(cfg, client, chains, setpoints, out_dir)

    if transport == LOOPBACK and not with_server:
        plog, tlog = _run_loopback(cfg, plans, twin_factory)
    else:
        endpoint = None if with_server else transport
        plog, tlog = _run_websocket(cfg, plans, twin_factory, endpoint, realtime)

    result = write_results(cfg, out_dir, plog, tlog)
    result.setpoints = sum(len(v) for v in setpoints.values())
    sec = time.monotonic() - t0
    Stats.get().timing('run.duration', sec)
    logger.info(f"run finished in {sec:.1f}s: {len(plog.arrivals)}/{result.setpoints} setpoints reached,"
                f" {result.images} images")
    return result


def write_results(cfg: ExperimentConfig, out_dir: str, plog: PlannerLog, tlog: TwinLog) -> RunResult:
    planner = {rid: PoseTrace.from_recorder(rec) for rid, rec in sorted(plog.traces.items())}
    twin = {rid: PoseTrace.from_recorder(rec) for rid, rec in sorted(tlog.traces.items())}
    write_traces(os.path.join(out_dir, PLANNER_TRACE), planner.values())
    write_traces(os.path.join(out_dir, TWIN_TRACE), twin.values())
    write_arrivals(os.path.join(out_dir, ARRIVALS), plog.arrivals)
    report, series = build_report(planner, twin, plog.arrivals, cfg.window, cfg.min_coverage)
    write_report(os.path.join(out_dir, REPORT), report)
    write_errors(os.path.join(out_dir, ERRORS), series)
    return RunResult(out_dir, plog, tlog, report, series)
