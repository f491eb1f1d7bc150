import contextlib
import io
import json
import math
import os
import tempfile
import time
import unittest
from unittest import mock

from scripts.twinlink import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_PLANNING, SCRIPT, build_parser, dispatch
from twinlink.bridge.loopback import loopback_bus
from twinlink.experiment import (ARRIVALS, ERRORS, PLANNER_TRACE, REPORT, TWIN_TRACE, ConfigError,
                                 load_chains, load_config, make_plans, make_setpoints, parse_config,
                                 resolve_out_dir, run_experiment)
from twinlink.metrics import PoseTrace
import twinlink.path as path
from twinlink.planner import Pattern, run_planner
from twinlink.scenecam.camera import DepthMode, RenderMode
from twinlink.stats import Stats
from twinlink.scenecam.imageio import read_ppm
from twinlink.traces import write_traces


def bundled():
    with open(path.DEFAULT_EXPERIMENT) as f:
        return json.load(f)


def tiny(doc):
    """
    two setpoints per robot, for runs that only check behavior
    """
    doc['fast']['setpoints'] = {'spherical': {'rings': 1, 'per_ring': 1},
                                'cylindrical': {'heights': [1.15], 'per_ring': 1}}
    return doc


def output_files(out_dir):
    """
    relative name -> bytes of every file a run writes
    """
    out = {}
    for root, _, files in os.walk(out_dir):
        for name in files:
            fname = os.path.join(root, name)
            with open(fname, 'rb') as f:
                out[os.path.relpath(fname, out_dir)] = f.read()
    return out


class TempDirTest(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def write_config(self, doc, name='experiment.json'):
        fname = os.path.join(self.dir, name)
        with open(fname, 'w') as f:
            json.dump(doc, f)
        return fname


class TestConfig(TempDirTest):

    def test_bundled(self):
        cfg = load_config()
        assert [r.robot_id for r in cfg.robots] == [1, 2]
        assert cfg.setpoints.per_robot == 60
        assert (cfg.camera.width, cfg.camera.height) == (1920, 1080)
        assert cfg.camera.depth_mode == DepthMode.PLANAR
        assert cfg.lag.rate_limit == 0.8
        assert len(cfg.boxes) == 3

    def test_fast(self):
        cfg = load_config(fast=True)
        assert (cfg.camera.width, cfg.camera.height) == (160, 90)
        assert cfg.setpoints.per_robot == 12
        sps = make_setpoints(cfg)
        assert sum(len(v) for v in sps.values()) == 24

    def test_setpoint_ids(self):
        sps = make_setpoints(load_config())
        ids1 = [sp.id for sp in sps[1]]
        ids2 = [sp.id for sp in sps[2]]
        assert ids1 == list(range(60))
        assert ids2 == list(range(60, 120))
        # spherical rings first
        assert sps[1][29].pattern == Pattern.SPHERICAL
        assert sps[1][30].pattern == Pattern.CYLINDRICAL
        # each robot looks at its own side of the plant
        assert all(sp.position[0] < 0 for sp in sps[1])
        assert all(sp.position[0] > 0 for sp in sps[2])

    def test_errors_name_the_key(self):
        doc = bundled()
        doc['schema'] = 2
        with self.assertRaises(ConfigError):
            parse_config(doc)

        doc = bundled()
        doc['camera']['width'] = 'wide'
        with self.assertRaises(ConfigError) as cm:
            parse_config(doc)
        assert 'camera.width' in str(cm.exception)

        doc = bundled()
        doc['robots'][1]['urdf'] = 'missing.urdf'
        with self.assertRaises(ConfigError) as cm:
            parse_config(doc)
        assert 'robots[1].urdf' in str(cm.exception)

        doc = bundled()
        doc['lag']['tau'] = -1.0
        with self.assertRaises(ConfigError):
            parse_config(doc)

        doc = bundled()
        doc['camera']['depth_mode'] = 'fisheye'
        with self.assertRaises(ConfigError):
            parse_config(doc)

    def test_unknown_key_warns(self):
        doc = bundled()
        doc['colour'] = 'green'
        with self.assertLogs('twinlink.experiment', level='WARNING'):
            parse_config(doc)

    def test_bad_file(self):
        fname = os.path.join(self.dir, 'broken.json')
        with open(fname, 'w') as f:
            f.write('{"schema": 1,')
        with self.assertRaises(ConfigError):
            load_config(fname)
        with self.assertRaises(ConfigError):
            load_config(os.path.join(self.dir, 'nonesuch.json'))

    def test_null_rate_limit(self):
        doc = bundled()
        doc['lag']['rate_limit'] = None
        assert math.isinf(parse_config(doc).lag.rate_limit)

    def test_out_dir_order(self):
        doc = bundled()
        cfg = parse_config(doc)
        assert resolve_out_dir(cfg, '/tmp/a') == '/tmp/a'
        doc['out_dir'] = '/tmp/b'
        cfg = parse_config(doc)
        assert resolve_out_dir(cfg) == '/tmp/b'
        assert resolve_out_dir(cfg, '/tmp/a') == '/tmp/a'


class TestDefaultCounts(unittest.TestCase):
    """
    the bundled config, planned and driven open loop without rendering
    """

    def test_setpoints_and_captures(self):
        cfg = load_config()
        sps = make_setpoints(cfg)
        plans = make_plans(cfg, load_chains(cfg), sps)
        assert sum(len(p.visits) for p in plans) == 120
        bus = loopback_bus()
        log = run_planner(bus.client('planner'), plans, after_tick=lambda t: bus.pump())
        bus.close()
        assert len(log.arrivals) == 120
        assert sorted(a.id for a in log.arrivals) == list(range(120))
        captures = sum(log.captures.values())
        assert captures == 120
        # rgb, seg and depth per capture
        assert captures * len(RenderMode) == 360


class TestFastRun(unittest.TestCase):
    """
    one --fast loopback run shared by the tests below
    """

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.out = os.path.join(cls.tmp.name, 'run1')
        cls.cfg = load_config(fast=True)
        start = time.monotonic()
        cls.result = run_experiment(cls.cfg, cls.out)
        cls.elapsed = time.monotonic() - start
        cls.files = output_files(cls.out)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_outputs(self):
        for name in (PLANNER_TRACE, TWIN_TRACE, ARRIVALS, ERRORS, REPORT, 'cloud.ply',
                     os.path.join('robot1', 'camera_pose.json'),
                     os.path.join('robot2', 'camera_pose.json')):
            assert name in self.files, name

    def test_runtime(self):
        assert self.elapsed < 60.0

    def test_capture_accounting(self):
        res = self.result
        assert len(res.planner.arrivals) == 24
        assert len(res.twin.captures) == 24
        assert res.images == 72
        images = [n for n in self.files if n.endswith(('.ppm', '.pfm'))]
        assert len(images) == 72
        assert read_ppm(os.path.join(self.out, 'robot2', '0012_rgb.ppm')).shape == (90, 160, 3)

    def test_lag_regime(self):
        r = self.result.report
        assert not r.excluded
        assert 1e-4 <= r.setpoint_mean <= 0.02
        assert r.window_mean * 10 < r.setpoint_mean
        # joint moves leave transients far above the settled error
        assert r.same_time_max >= 100 * r.setpoint_mean

    def test_deterministic(self):
        with tempfile.TemporaryDirectory() as tmp:
            run_experiment(self.cfg, tmp)
            again = output_files(tmp)
        assert sorted(again) == sorted(self.files)
        for name, data in self.files.items():
            assert again[name] == data, name

    def test_analyze_reproduces_report(self):
        with tempfile.TemporaryDirectory() as tmp:
            for name in (PLANNER_TRACE, TWIN_TRACE, ARRIVALS):
                with open(os.path.join(tmp, name), 'wb') as f:
                    f.write(self.files[name])
            args = build_parser().parse_args(['analyze', '--fast', '--out', tmp])
            with contextlib.redirect_stdout(io.StringIO()):
                assert dispatch(args) == EXIT_OK
            with open(os.path.join(tmp, REPORT), 'rb') as f:
                assert f.read() == self.files[REPORT]
            with open(os.path.join(tmp, ERRORS), 'rb') as f:
                assert f.read() == self.files[ERRORS]

    def test_planner_ignores_twin(self):
        """
        open loop: the planner stream is the same with nobody listening
        """
        cfg = self.cfg
        plans = make_plans(cfg, load_chains(cfg), make_setpoints(cfg))
        bus = loopback_bus()
        log = run_planner(bus.client('planner'), plans, after_tick=lambda t: bus.pump())
        bus.close()
        with tempfile.TemporaryDirectory() as tmp:
            fname = os.path.join(tmp, PLANNER_TRACE)
            write_traces(fname, [PoseTrace.from_recorder(r) for _, r in sorted(log.traces.items())])
            with open(fname, 'rb') as f:
                assert f.read() == self.files[PLANNER_TRACE]


class TestRuns(TempDirTest):

    def test_zero_lag(self):
        doc = tiny(bundled())
        doc['lag'].update(tau=0.0, rate_limit=None, transport_delay=0.0)
        cfg = load_config(self.write_config(doc), fast=True)
        r = run_experiment(cfg, os.path.join(self.dir, 'out')).report
        assert len(r.setpoints) == 4
        assert r.same_time_max <= 1e-9
        assert r.setpoint_max <= 1e-9
        assert r.window_max <= 1e-9

    def test_websocket_matches_loopback(self):
        cfg = load_config(self.write_config(tiny(bundled())), fast=True)
        loop = run_experiment(cfg, os.path.join(self.dir, 'loop'))
        ws = run_experiment(cfg, os.path.join(self.dir, 'ws'), with_server=True)
        assert len(ws.twin.captures) == len(loop.twin.captures) == 4
        assert [a.id for a in ws.planner.arrivals] == [a.id for a in loop.planner.arrivals]
        ratio = ws.report.setpoint_mean / loop.report.setpoint_mean
        assert 0.1 < ratio < 10.0

    def test_seed_changes_jitter_only(self):
        doc = bundled()
        doc['setpoints']['jitter'] = 0.002
        cfg = parse_config(doc)
        a = make_setpoints(cfg)
        b = make_setpoints(cfg)
        assert all((x.position == y.position).all() for x, y in zip(a[1], b[1]))
        doc['seed'] = 7
        c = make_setpoints(parse_config(doc))
        assert any((x.position != y.position).any() for x, y in zip(a[1], c[1]))


class TestCommands(TempDirTest):

    def run_cli(self, *argv):
        args = build_parser().parse_args(list(argv))
        out = io.StringIO()
        with contextlib.redirect_stdout(out):
            status = dispatch(args)
        return status, out.getvalue()

    def test_plan_lines(self):
        status, text = self.run_cli('plan')
        assert status == EXIT_OK
        lines = text.splitlines()
        assert len(lines) == 120
        assert lines[0].startswith('0 robot1 spherical ')
        assert lines[-1].startswith('119 robot2 cylindrical ')

    def test_plan_trajectories(self):
        fname = self.write_config(tiny(bundled()))
        status, text = self.run_cli('plan', '--config', fname, '--fast', '--trajectories')
        assert status == EXIT_OK
        lines = text.splitlines()
        assert len(lines) == 8
        assert ' joint ' in lines[4] and ' linear ' in lines[4]

    def test_render(self):
        out = os.path.join(self.dir, 'render')
        status, _ = self.run_cli('render', '--fast', '--out', out, '--pose', '0.45 0 1.15')
        assert status == EXIT_OK
        assert sorted(os.listdir(out)) == ['render_depth.pfm', 'render_rgb.ppm', 'render_seg.ppm']

    def test_unreachable_setpoint(self):
        doc = tiny(bundled())
        doc['fast']['setpoints']['spherical']['radius'] = 5.0
        fname = self.write_config(doc)
        with self.assertLogs('twinlink', level='ERROR') as cm:
            status, _ = self.run_cli('run', '--config', fname, '--fast',
                                     '--out', os.path.join(self.dir, 'out'))
        assert status == EXIT_PLANNING
        assert any('setpoint 0' in line for line in cm.output)

    def test_every_command_parses(self):
        p = build_parser()
        for argv in (['run', '--fast', '--with-server'], ['plan', '--fast'],
                     ['render', '--pose', '1 0 1'], ['analyze', '--out', self.dir],
                     ['serve', '--port', '0']):
            args = p.parse_args(argv)
            assert args.command == argv[0]
        args = p.parse_args(['--no-log-file', 'plan', '--fast', '--seed', '3'])
        assert args.fast and args.seed == 3 and args.log_file is None
        with self.assertRaises(SystemExit), contextlib.redirect_stderr(io.StringIO()):
            p.parse_args([])

    def test_startup(self):
        with mock.patch.object(Stats, '_instance', None), mock.patch.dict(os.environ):
            args = build_parser().my_parse_args(
                ['--no-log-file', '--set', 'RENDER_WORKERS=3', 'plan', '--fast'])
            assert os.environ['RENDER_WORKERS'] == '3'
            assert Stats.get().component == SCRIPT
        assert args.command == 'plan' and args.fast
        fname = self.write_config(tiny(bundled()))
        status, text = self.run_cli('plan', '--config', fname, '--fast')
        assert status == EXIT_OK
        assert len(text.splitlines()) == 4

    def test_analyze_missing_traces(self):
        with self.assertLogs('twinlink', level='ERROR'):
            status, _ = self.run_cli('analyze', '--out', self.dir)
        assert status == EXIT_IO

    def test_serve_bad_transport(self):
        with self.assertLogs('twinlink', level='ERROR'):
            status, _ = self.run_cli('serve', '--transport', 'http://localhost:1')
        assert status == EXIT_CONFIG

    def test_config_error(self):
        doc = bundled()
        doc['schema'] = 'one'
        fname = self.write_config(doc)
        with self.assertLogs('twinlink', level='ERROR'):
            status, _ = self.run_cli('plan', '--config', fname)
        assert status == EXIT_CONFIG

    def test_bad_transport(self):
        with self.assertLogs('twinlink', level='ERROR'):
            status, _ = self.run_cli('plan', '--transport', 'carrier-pigeon')
        assert status == EXIT_CONFIG


if __name__ == "__main__":
    unittest.main()
