import json
import math
import os
import tempfile
import unittest

import numpy as np

import twinlink.path as path
from twinlink.bridge.loopback import loopback_bus
from twinlink.bridge.messages import BoolMsg, JointStateMsg, Stamp
from twinlink.kinematics import forward_kinematics, joint_origins, load_urdf
from twinlink.planner import CollisionBox, collides, initial_config, spherical_setpoints
from twinlink.scenecam.camera import CameraIntrinsics
from twinlink.scenecam.imageio import ply_comments, read_pfm, read_ppm
from twinlink.scenecam.scene import default_scene
from twinlink.transform import JointConfig, Transform
from twinlink.twin import (LagParams, RenderSettings, Twin, TwinRobot, TwinState, lag_step,
                           twin_tick_ns)

DT_NS = 8_000_000
BOXES = (CollisionBox((-0.95, 0.0, 0.4), (0.15, 0.15, 0.4)),
         CollisionBox((0.0, 0.0, 0.4), (0.3, 0.3, 0.4)))


def robot1():
    return load_urdf(path.DEFAULT_URDF).with_base(Transform.from_xyz_rpy((-0.95, 0.0, 0.8)))


def start_config(chain):
    (sp,) = spherical_setpoints((0.0, 0.0, 1.15), 0.45, 1, 1, (0.5, 0.5), (math.pi, math.pi))
    return initial_config(chain, sp.pose, BOXES)


def state(q, target):
    return TwinState(JointConfig(q), JointConfig(target), 0.0)


class TestLagStep(unittest.TestCase):

    def test_ideal_follower(self):
        s = lag_step(state([0.0] * 6, [0.1, 0.2, 0.3, -1.0, 2.0, 3.0]), 0.0, LagParams.ideal())
        assert s.q == s.q_target
        assert s.t == 0.0

    def test_exponential(self):
        params = LagParams(tau=0.1, rate_limit=math.inf, transport_delay=0.0)
        s = state([0.0], [1.0])
        for _ in range(100):
            s = lag_step(s, 0.001, params)
        assert abs(s.t - 0.1) < 1e-12
        assert abs((1.0 - s.q[0]) - math.exp(-1.0)) < 1e-6

    def test_rate_limit(self):
        params = LagParams(tau=0.0, rate_limit=1.0, transport_delay=0.0)
        s = lag_step(state([0.0], [1.0]), 0.1, params)
        assert s.q[0] == 0.1

    def test_rate_limit_per_joint(self):
        params = LagParams(tau=0.0, rate_limit=1.0, transport_delay=0.0)
        s = lag_step(state([0.0, 0.0, 0.0], [1.0, -0.5, 0.05]), 0.1, params)
        # fast joints clamped on their own, the slow one lands on its target
        assert np.allclose(s.q.angles, [0.1, -0.1, 0.05], atol=1e-15)

    def test_rate_limit_with_lag(self):
        params = LagParams(tau=0.1, rate_limit=1.0, transport_delay=0.0)
        s = lag_step(state([0.0, 0.0], [2.0, 0.1]), 0.01, params)
        alpha = -math.expm1(-0.1)
        assert s.q[0] == 0.01
        assert abs(s.q[1] - alpha * 0.1) < 1e-15

    def test_shortest_way_round(self):
        params = LagParams(tau=0.0, rate_limit=1.0, transport_delay=0.0)
        s = lag_step(state([3.1], [-3.1]), 0.01, params)
        # through pi, not back through zero
        assert abs(abs(s.q[0]) - 3.11) < 1e-9

    def test_negative_dt(self):
        with self.assertRaises(ValueError):
            lag_step(state([0.0], [1.0]), -0.001, LagParams())

    def test_params(self):
        with self.assertRaises(ValueError):
            LagParams(tau=-1.0)
        with self.assertRaises(ValueError):
            LagParams(rate_limit=0.0)
        assert LagParams(transport_delay=0.04).delay_ns == 40_000_000

    def test_tick_clock(self):
        assert twin_tick_ns(0) == 0
        assert twin_tick_ns(1) == 4_166_667
        assert twin_tick_ns(240) == 1_000_000_000


class TestTwin(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = self.tmp.name
        self.chain = robot1()
        self.q0 = start_config(self.chain)
        self.bus = loopback_bus()
        self.pub = self.bus.client('planner')
        self.settings = RenderSettings(CameraIntrinsics.from_fov(16, 12, 70.0), cloud_stride=2)

    def tearDown(self):
        self.bus.close()
        self.tmp.cleanup()

    def twin(self, params, boxes=(), ids=(5, 9), margin=0.05):
        robot = TwinRobot(1, self.chain, '/robot1', tuple(ids))
        return Twin(self.bus.client('twin'), [robot], default_scene(), self.settings,
                    self.out, boxes=boxes, params=params, margin=margin, workers=1)

    def stream(self, twin, qs, captures=()):
        names = tuple(self.chain.joint_names)
        for k, q in enumerate(qs):
            self.pub.publish('/robot1/joint_states',
                             JointStateMsg(Stamp.from_ns(k * DT_NS), names, tuple(float(a) for a in q)))
            if k in captures:
                self.pub.publish('/robot1/capture', BoolMsg(True))
            self.bus.pump()
            twin.advance_to(k * DT_NS)

    def samples(self, twin):
        trace = twin.log.traces[1]
        return dict(zip(trace.t_ns, trace.positions))

    def test_ideal_follower_matches_targets(self):
        twin = self.twin(LagParams.ideal())
        qs = [self.q0 + 0.002 * k for k in range(50)]
        self.stream(twin, qs)
        got = self.samples(twin)
        for k, q in enumerate(qs):
            expected = forward_kinematics(self.chain, q).translation
            assert np.linalg.norm(np.array(got[k * DT_NS]) - expected) < 1e-9

    def test_transport_delay(self):
        twin = self.twin(LagParams(0.0, math.inf, 0.04))
        qs = [self.q0 + 0.002 * k for k in range(50)]
        self.stream(twin, qs)
        twin.advance_to(49 * DT_NS + 40_000_000)
        trace = twin.log.traces[1]
        # spawned at the first due target, nothing before
        assert trace.t_ns[0] == 40_000_000
        got = self.samples(twin)
        for k, q in enumerate(qs):
            expected = forward_kinematics(self.chain, q).translation
            assert np.linalg.norm(np.array(got[k * DT_NS + 40_000_000]) - expected) < 1e-9

    def test_captures(self):
        twin = self.twin(LagParams.ideal())
        qs = [self.q0 + 0.002 * k for k in range(30)]
        self.stream(twin, qs, captures=(10, 25))
        log = twin.finish()
        assert [c.setpoint_id for c in log.captures] == [5, 9]
        robot_dir = os.path.join(self.out, 'robot1')
        names = sorted(os.listdir(robot_dir))
        assert names == ['0005_depth.pfm', '0005_rgb.ppm', '0005_seg.ppm',
                         '0009_depth.pfm', '0009_rgb.ppm', '0009_seg.ppm', 'camera_pose.json']
        assert read_ppm(os.path.join(robot_dir, '0005_rgb.ppm')).shape == (12, 16, 3)
        assert read_pfm(os.path.join(robot_dir, '0009_depth.pfm')).shape == (12, 16)

        with open(os.path.join(robot_dir, 'camera_pose.json')) as f:
            poses = json.load(f)
        assert [p['setpoint_id'] for p in poses] == [5, 9]
        expected = forward_kinematics(self.chain, qs[10]).translation
        assert np.allclose(poses[0]['translation'], expected, atol=1e-12)
        assert abs(poses[1]['t'] - 25 * DT_NS / 1e9) < 1e-12

        comments = ply_comments(os.path.join(self.out, 'cloud.ply'))
        assert any('depth planar' in c for c in comments)
        assert log.cloud_points > 0

    def test_holds_on_contact(self):
        q1 = self.q0.copy()
        q1[0] += 0.5
        pts = joint_origins(self.chain, q1)
        box = CollisionBox(tuple((pts[2] + pts[3]) / 2), (0.02, 0.02, 0.02))
        assert not collides(self.chain, self.q0, [box])
        twin = self.twin(LagParams(0.05, math.inf, 0.0), boxes=[box])
        self.stream(twin, [self.q0] + [q1] * 20)
        twin.advance_to(1_000_000_000)
        log = twin.finish()
        assert log.holds[1] > 0
        last = np.array(log.traces[1].positions[-1])
        assert np.linalg.norm(last - forward_kinematics(self.chain, q1).translation) > 1e-3

    def near_miss(self, margin):
        """
        turn the base 0.5 rad toward a box 3 cm off the forearm; holds counted
        """
        q1 = self.q0.copy()
        q1[0] += 0.5
        pts = joint_origins(self.chain, q1)
        mid = (pts[2] + pts[3]) / 2
        # off the surface the forearm sweeps as the base turns
        sweep = np.cross((0.0, 0.0, 1.0), mid - pts[0])
        side = np.cross(pts[3] - pts[2], sweep)
        side /= np.linalg.norm(side)
        center = mid + 0.03 * side
        box = CollisionBox(tuple(center), (0.005, 0.005, 0.005))
        assert not collides(self.chain, q1, [box], margin=0.0)
        assert collides(self.chain, q1, [box], margin=0.05)
        assert not collides(self.chain, self.q0, [box], margin=0.05)
        twin = self.twin(LagParams(0.05, math.inf, 0.0), boxes=[box], margin=margin)
        self.stream(twin, [self.q0] + [q1] * 20)
        twin.advance_to(1_000_000_000)
        return twin.finish().holds[1]

    def test_holds_inside_margin(self):
        assert self.near_miss(0.05) > 0

    def test_no_hold_without_margin(self):
        assert self.near_miss(0.0) == 0


if __name__ == "__main__":
    unittest.main()
