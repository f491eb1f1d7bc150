"""
twinlink command line: run an experiment, print its setpoints and
plans, render a single view, recompute metrics from saved traces,
or run the bridge server on its own.

exit status: 0 ok, 2 config error, 3 planning error,
4 transport error, 5 file I/O error
"""

import argparse
import dataclasses
import logging
import os
import sys
import time
from typing import Callable, Dict, Optional, Tuple
from urllib.parse import urlsplit

# PyPI:
from setproctitle import setproctitle

# local:
from twinlink import APP
from twinlink.bridge.messages import BridgeError
from twinlink.bridge.websocket import serve
from twinlink.config import conf
from twinlink.experiment import (ARRIVALS, ERRORS, LOOPBACK, PLANNER_TRACE, REPORT, TWIN_TRACE,
                                 ConfigError, ExperimentConfig, load_chains, load_config,
                                 make_plans, make_scene, make_setpoints, resolve_out_dir,
                                 run_experiment)
from twinlink.kinematics import KinematicsError
from twinlink.logargparse import LogArgumentParser
from twinlink.metrics import build_report
import twinlink.path as path
from twinlink.planner import PlanningError
from twinlink.report import summarize
from twinlink.scenecam.imageio import ImageIOError
from twinlink.traces import (TraceFormatError, read_arrivals, read_traces, write_errors,
                             write_report)
from twinlink.transform import look_at
from twinlink.twin import render_capture

SCRIPT = 'twinlink'
logger = logging.getLogger(SCRIPT)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PLANNING = 3
EXIT_TRANSPORT = 4
EXIT_IO = 5


def _config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config, args.fast)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.transport is not None:
        if args.transport != LOOPBACK and not args.transport.startswith('ws://'):
            raise ConfigError(f"--transport: expected loopback or ws://host:port, got {args.transport}")
        cfg = dataclasses.replace(cfg, transport=args.transport)
    return cfg


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out_dir = resolve_out_dir(cfg, args.out)
    result = run_experiment(cfg, out_dir, realtime=args.realtime, with_server=args.with_server)
    print(summarize(result.report.to_json()), end='')
    print(f"setpoints reached {len(result.planner.arrivals)}/{result.setpoints},"
          f" captures {len(result.twin.captures)}, images written {result.images}")
    print(f"output in {out_dir}")
    return EXIT_OK


def cmd_plan(args: argparse.Namespace) -> int:
    cfg = _config(args)
    setpoints = make_setpoints(cfg)
    for robot in cfg.robots:
        for sp in setpoints[robot.robot_id]:
            x, y, z = sp.pose.translation
            qw, qx, qy, qz = sp.pose.rotation
            print(f"{sp.id} robot{robot.robot_id} {sp.pattern.value}"
                  f" {x:.6f} {y:.6f} {z:.6f} {qw:.6f} {qx:.6f} {qy:.6f} {qz:.6f}")
    if args.trajectories:
        plans = make_plans(cfg, load_chains(cfg), setpoints)
        for plan in plans:
            for v in plan.visits:
                print(f"{v.setpoint.id} robot{plan.robot_id} t={plan.tick_ns(v.first_tick) / 1e9:.3f}s"
                      f" {v.move.kind.value} {v.move.duration:.3f}s"
                      f" {v.approach.kind.value} {v.approach.duration:.3f}s")
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    cfg = _config(args)
    target = args.look_at or cfg.setpoints.center
    position = args.pose or (cfg.setpoints.center[0] + cfg.setpoints.sph_radius,
                             cfg.setpoints.center[1], cfg.setpoints.center[2])
    out_dir = resolve_out_dir(cfg, args.out)
    path.check_dir(out_dir)
    base = os.path.join(out_dir, 'render')
    if tuple(position) == tuple(target):
        raise ConfigError("--pose: camera position equals the look-at point")
    pose = look_at(position, target)
    points = render_capture(make_scene(cfg), pose, cfg.camera.settings(), base)
    logger.info(f"rendered {base}_*: {len(points)} cloud points")
    print(f"{base}_rgb.ppm\n{base}_seg.ppm\n{base}_depth.pfm")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out_dir = resolve_out_dir(cfg, args.out)
    traces = read_traces(os.path.join(out_dir, PLANNER_TRACE))
    traces.update(read_traces(os.path.join(out_dir, TWIN_TRACE)))
    planner = {rid: tr for (rid, source), tr in sorted(traces.items()) if source == 'planner'}
    twin = {rid: tr for (rid, source), tr in sorted(traces.items()) if source == 'twin'}
    arrivals = read_arrivals(os.path.join(out_dir, ARRIVALS))
    report, series = build_report(planner, twin, arrivals, cfg.window, cfg.min_coverage)
    write_report(os.path.join(out_dir, REPORT), report)
    write_errors(os.path.join(out_dir, ERRORS), series)
    print(summarize(report.to_json()), end='')
    return EXIT_OK


def _host_port(args: argparse.Namespace) -> Tuple[Optional[str], Optional[int]]:
    host, port = args.host, args.port
    if args.transport and args.transport != LOOPBACK:
        url = urlsplit(args.transport)
        if url.scheme != 'ws' or not url.hostname:
            raise ConfigError(f"--transport: expected ws://host:port, got {args.transport}")
        host = host or url.hostname
        port = port if port is not None else url.port
    return host, port


def cmd_serve(args: argparse.Namespace) -> int:
    host, port = _host_port(args)
    server = serve(host, port)
    print(f"bridge serving on {server.url}", flush=True)
    try:
        while True:
            time.sleep(60)
            logger.info(f"stats: {server.stats()}")
    except KeyboardInterrupt:
        logger.info("interrupted")
    finally:
        server.close()
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    'run': cmd_run,
    'plan': cmd_plan,
    'render': cmd_render,
    'analyze': cmd_analyze,
    'serve': cmd_serve,
}


def _xyz(text: str) -> Tuple[float, float, float]:
    try:
        x, y, z = (float(v) for v in text.replace(',', ' ').split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X Y Z, got {text!r}")
    return (x, y, z)


def build_parser() -> LogArgumentParser:
    p = LogArgumentParser(SCRIPT, 'Digital twin experiment runner')

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None,
                        help=f"experiment JSON (default: {path.DEFAULT_EXPERIMENT})")
    common.add_argument('--out', default=None,
                        help="output directory (default: config out_dir, TWINLINK_OUT or storage/output)")
    common.add_argument('--transport', default=None,
                        help="loopback or ws://host:port (default: from config)")
    common.add_argument('--seed', type=int, default=None,
                        help="override the config seed")
    common.add_argument('--fast', action='store_true',
                        help="small images and 24 setpoints")

    sub = p.add_subparsers(dest='command', metavar='COMMAND',
                           parser_class=argparse.ArgumentParser)
    sub.required = True

    run = sub.add_parser('run', parents=[common], help="run planner and twin, write traces and report")
    run.add_argument('--with-server', action='store_true',
                     help="start a bridge server in-process and run over WebSockets")
    run.add_argument('--realtime', type=float, default=None, metavar='FACTOR',
                     help="pace the planner against the wall clock (WebSocket mode)")

    plan = sub.add_parser('plan', parents=[common], help="print setpoints (and trajectories)")
    plan.add_argument('--trajectories', action='store_true',
                      help="also plan and print each visit's moves")

    render = sub.add_parser('render', parents=[common], help="render one view of the scene")
    render.add_argument('--pose', type=_xyz, default=None, metavar='"X Y Z"',
                        help="camera position (default: on the setpoint sphere, +X side)")
    render.add_argument('--look-at', type=_xyz, default=None, metavar='"X Y Z"',
                        help="point the camera looks at (default: setpoint center)")

    sub.add_parser('analyze', parents=[common], help="recompute report.json from saved traces")

    srv = sub.add_parser('serve', parents=[common], help="run the bridge server")
    srv.add_argument('--host', default=None,
                     help=f"addr to listen on [default: {conf.BRIDGE_HOST}]")
    srv.add_argument('--port', type=int, default=None,
                     help=f"port to listen on [default: {conf.BRIDGE_PORT}]")
    return p


def dispatch(args: argparse.Namespace) -> int:
    """
    run a parsed command; expected failures map to exit codes
    """
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        logger.error(f"config: {e}")
        return EXIT_CONFIG
    except (PlanningError, KinematicsError) as e:
        logger.error(f"planning: {e}")
        return EXIT_PLANNING
    except BridgeError as e:
        logger.error(f"transport: {e}")
        return EXIT_TRANSPORT
    except (ImageIOError, TraceFormatError, OSError) as e:
        logger.error(f"I/O: {e}")
        return EXIT_IO


def main() -> int:
    p = build_parser()
    args = p.my_parse_args()       # parse logging args, output start message
    setproctitle(f"{APP} {args.command}")
    return dispatch(args)


if __name__ == '__main__':
    try:
        sys.exit(main())
    except Exception as e:
        logger.exception("main")  # for log file
        raise                   # for Sentry
