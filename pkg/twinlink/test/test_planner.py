import math
import unittest

import numpy as np

import twinlink.path as path
from twinlink.bridge.loopback import loopback_bus
from twinlink.bridge.messages import BoolMsg, JointStateMsg
from twinlink.kinematics import forward_kinematics, joint_origins, load_urdf
from twinlink.planner import (COLLISION_MARGIN, DONE_TOPIC, CollisionBox, PlannerParams, PlanningError,
                              TraceRecorder, collides, cylindrical_setpoints, initial_config,
                              jitter_setpoints, plan_joint, plan_linear, plan_robot, run_planner,
                              _path_collision, segments_hit_box, spherical_setpoints)
from twinlink.transform import Transform

CENTER = (0.0, 0.0, 1.15)
BOXES = (CollisionBox((-0.95, 0.0, 0.4), (0.15, 0.15, 0.4)),
         CollisionBox((0.0, 0.0, 0.4), (0.3, 0.3, 0.4)))


def robot1():
    return load_urdf(path.DEFAULT_URDF).with_base(Transform.from_xyz_rpy((-0.95, 0.0, 0.8)))


def two_setpoints():
    return spherical_setpoints(CENTER, 0.45, 1, 2, (0.5, 0.5), (math.pi - 0.25, math.pi + 0.25))


def origins_by_transforms(chain, q):
    """
    joint origins and tool point by composing quaternion transforms
    """
    t = chain.base_transform
    pts = []
    for link, a in zip(chain.links, q):
        t = t @ link.fixed_offset
        pts.append(t.translation)
        t = t @ Transform.from_axis_angle(link.joint_axis, float(a))
    pts.append((t @ chain.tool_offset).translation)
    return np.array(pts)



class TestSetpoints(unittest.TestCase):

    def test_single_spherical(self):
        (sp,) = spherical_setpoints(CENTER, 0.45, 1, 1, (0.3, 0.3), (1.0, 1.0), start_id=7)
        assert sp.id == 7
        expected = np.array(CENTER) + 0.45 * np.array([math.cos(0.3) * math.cos(1.0),
                                                       math.cos(0.3) * math.sin(1.0),
                                                       math.sin(0.3)])
        assert np.allclose(sp.position, expected, atol=1e-12)

    def test_spherical_invariants(self):
        sps = spherical_setpoints(CENTER, 0.45, 3, 10, (math.radians(10), math.radians(50)))
        assert [sp.id for sp in sps] == list(range(30))
        c = np.array(CENTER)
        for sp in sps:
            assert abs(np.linalg.norm(sp.position - c) - 0.45) < 1e-12
            # camera +Z looks at the centre
            assert np.allclose(sp.pose.axis(2), (c - sp.position) / 0.45, atol=1e-12)
        lats = sorted({round(float(sp.position[2]), 9) for sp in sps})
        assert len(lats) == 3

    def test_spherical_bad_args(self):
        with self.assertRaises(ValueError):
            spherical_setpoints(CENTER, -1.0, 1, 1, (0.1, 0.2))
        with self.assertRaises(ValueError):
            spherical_setpoints(CENTER, 0.4, 1, 1, (0.1, math.pi / 2))

    def test_cylindrical_invariants(self):
        heights = [1.0, 1.15, 1.3]
        sps = cylindrical_setpoints((0.0, 0.0, 0.0), 0.5, heights, 10, start_id=30)
        assert len(sps) == 30
        assert sps[0].id == 30
        for i, sp in enumerate(sps):
            assert abs(math.hypot(sp.position[0], sp.position[1]) - 0.5) < 1e-12
            assert sp.position[2] == heights[i // 10]
            z = sp.pose.axis(2)
            assert abs(z[2]) < 1e-12
            assert np.allclose(z[:2], -sp.position[:2] / 0.5, atol=1e-12)

    def test_jitter_keeps_direction(self):
        sps = two_setpoints()
        moved = jitter_setpoints(sps, 0.01, np.random.default_rng(2))
        for a, b in zip(sps, moved):
            assert a.id == b.id
            assert 0 < np.linalg.norm(a.position - b.position) < 0.1
            assert np.allclose(a.pose.axis(2), b.pose.axis(2), atol=1e-12)
        assert jitter_setpoints(sps, 0.0, np.random.default_rng(2)) == sps


class TestJointTrajectory(unittest.TestCase):

    def test_endpoints_and_midpoint(self):
        q0 = np.zeros(6)
        q1 = np.array([1.0, -0.5, 0.25, 2.0, 0.0, -3.0])
        traj = plan_joint(q0, q1, 1.0, 0.01)
        assert len(traj) == 101
        assert np.array_equal(traj.q[0], q0)
        assert np.array_equal(traj.q[-1], q1)
        assert np.allclose(traj.q[50], (q0 + q1) / 2, atol=1e-12)

    def test_monotonic(self):
        q1 = np.array([1.0, -1.0, 0.5, 0.0, 2.0, -2.0])
        traj = plan_joint(np.zeros(6), q1, 0.8, 0.008)
        steps = np.diff(traj.q, axis=0)
        assert np.all(steps * np.sign(q1) >= -1e-15)
        # zero end velocities
        mid = len(steps) // 2
        assert np.all(np.abs(steps[0]) <= np.abs(steps[mid]))
        assert np.all(np.abs(steps[-1]) <= np.abs(steps[mid]))

    def test_identity(self):
        q = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
        traj = plan_joint(q, q, 0.5, 0.1)
        assert np.all(traj.q == q)

    def test_duration_rounds_up(self):
        traj = plan_joint(np.zeros(1), np.ones(1), 0.5, 0.2)
        assert len(traj) == 4
        assert abs(traj.duration - 0.6) < 1e-12

    def test_bad_args(self):
        with self.assertRaises(ValueError):
            plan_joint(np.zeros(2), np.ones(2), 0.0, 0.1)
        with self.assertRaises(ValueError):
            plan_joint(np.zeros(2), np.ones(2), 1.0, 2.0)


class TestLinearTrajectory(unittest.TestCase):

    def setUp(self):
        self.chain = robot1()
        self.sp = two_setpoints()[0]

    def seed(self, pose):
        return initial_config(self.chain, pose, BOXES)

    def test_on_segment(self):
        pose1 = self.sp.pose
        pose0 = Transform(pose1.rotation, pose1.translation - 0.1 * pose1.axis(2))
        traj = plan_linear(self.chain, pose0, pose1, 0.05, 0.008, self.seed(pose0))
        assert len(traj) == 251
        a, b = pose0.translation, pose1.translation
        u = (b - a) / np.linalg.norm(b - a)
        for q in traj.q:
            p = forward_kinematics(self.chain, q).translation
            off = (p - a) - np.dot(p - a, u) * u
            assert np.linalg.norm(off) < 1e-6
        ends = forward_kinematics(self.chain, traj.q[-1])
        assert np.linalg.norm(ends.translation - b) < 1e-9
        assert np.max(np.abs(np.diff(traj.q, axis=0))) < 0.2

    def test_degenerate(self):
        pose = self.sp.pose
        traj = plan_linear(self.chain, pose, pose, 0.05, 0.008, self.seed(pose))
        assert len(traj) == 1

    def test_unreachable_waypoint(self):
        pose0 = self.sp.pose
        pose1 = Transform(pose0.rotation, pose0.translation + np.array([3.0, 0.0, 0.0]))
        with self.assertRaises(PlanningError) as cm:
            plan_linear(self.chain, pose0, pose1, 0.5, 0.008, self.seed(pose0))
        assert cm.exception.waypoint is not None
        assert cm.exception.waypoint > 0
        assert 'waypoint' in str(cm.exception)


class TestCollisions(unittest.TestCase):

    def test_segments_against_sampling_oracle(self):
        """
        segments near a box: the slab test agrees with dense sampling
        (sample spacing below 1mm) except within 1mm of the surface
        """
        rng = np.random.default_rng(99)
        box = CollisionBox((0.2, -0.1, 0.5), (0.15, 0.25, 0.1))
        margin = 0.05
        n = 10_000
        p0 = rng.uniform(-0.5, 0.9, (n, 3))
        p1 = p0 + rng.uniform(-0.4, 0.4, (n, 3))
        hit = segments_hit_box(p0, p1, box, margin)
        assert 0.05 < hit.mean() < 0.95

        s = np.linspace(0.0, 1.0, 1200)
        c = np.array(box.center)
        h = np.array(box.half_extents)
        for lo in range(0, n, 500):
            a, b = p0[lo:lo + 500], p1[lo:lo + 500]
            pts = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
            gap = np.max(np.abs(pts - c) - h, axis=-1).min(axis=1)
            # gap: smallest Chebyshev distance outside the box
            assert np.all(gap[hit[lo:lo + 500]] <= margin + 0.001)
            assert np.all(hit[lo:lo + 500][gap <= margin - 0.001])

    def test_parallel_segment(self):
        box = CollisionBox((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
        p0 = np.array([[-2.0, 0.5, 0.5], [-2.0, 1.5, 0.5]])
        p1 = np.array([[2.0, 0.5, 0.5], [2.0, 1.5, 0.5]])
        assert segments_hit_box(p0, p1, box).tolist() == [True, False]
        assert segments_hit_box(p0, p1, box, margin=0.6).tolist() == [True, True]

    def test_robot_collisions(self):
        chain = robot1()
        q = initial_config(chain, two_setpoints()[0].pose, BOXES)
        assert not collides(chain, q, BOXES)
        # a box around the forearm
        pts = joint_origins(chain, q)
        mid = (pts[2] + pts[3]) / 2
        assert collides(chain, q, [CollisionBox(tuple(mid), (0.02, 0.02, 0.02))], margin=0.0)

    def test_configurations_against_sampling_oracle(self):
        """
        random arm configurations: collides() agrees with points sampled
        every 0.3mm or less along each link, except within 1mm of the margin
        """
        chain = robot1()
        rng = np.random.default_rng(101)
        qs = rng.uniform(-math.pi, math.pi, (500, 6))
        hits = np.array([collides(chain, q, BOXES) for q in qs])
        assert hits.any() and not hits.all()

        s = np.linspace(0.0, 1.0, 2000)
        for q, hit in zip(qs, hits):
            pts = origins_by_transforms(chain, q)
            a, b = pts[:-1], pts[1:]
            samples = (a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]).reshape(-1, 3)
            gap = min(float(np.max(np.abs(samples - box.center) - box.half_extents, axis=1).min())
                      for box in BOXES)
            if abs(gap - COLLISION_MARGIN) > 0.001:
                assert hit == (gap <= COLLISION_MARGIN), q

    def test_trajectory_first_contact(self):
        chain = robot1()
        rng = np.random.default_rng(102)
        found = 0
        for _ in range(30):
            q0, q1 = rng.uniform(-math.pi, math.pi, (2, 6))
            traj = plan_joint(q0, q1, 1.0, 0.008)
            expect = next((k for k, q in enumerate(traj.q) if collides(chain, q, BOXES)), None)
            assert _path_collision(chain, traj, BOXES, COLLISION_MARGIN) == expect
            found += expect is not None
        assert found > 0
        assert _path_collision(chain, traj, [], COLLISION_MARGIN) is None

    def test_box_validation(self):
        with self.assertRaises(ValueError):
            CollisionBox((0.0, 0.0, 0.0), (1.0, 0.0, 1.0))


class TestPlans(unittest.TestCase):

    def test_plan_robot(self):
        params = PlannerParams()
        plan = plan_robot(1, robot1(), two_setpoints(), BOXES, params)
        assert plan.prefix == '/robot1'
        assert len(plan.visits) == 2
        dwell = round(params.dwell * params.publish_rate)
        for v in plan.visits:
            arrive = forward_kinematics(plan.chain, plan.q[v.capture_tick]).translation
            assert np.linalg.norm(arrive - v.setpoint.position) < 1e-9
            assert np.array_equal(plan.q[v.capture_tick - dwell + 1], plan.q[v.capture_tick])
        assert plan.visits[-1].capture_tick == plan.ticks - 1
        for q in plan.q:
            assert not collides(plan.chain, q, BOXES, params.collision_margin)
        # no jumps anywhere in the stream
        assert np.max(np.abs(np.diff(plan.q, axis=0))) < 0.2

    def test_unreachable_setpoint(self):
        far = spherical_setpoints(CENTER, 5.0, 1, 1, (0.2, 0.2), (math.pi, math.pi), start_id=42)
        with self.assertRaises(PlanningError) as cm:
            plan_robot(1, robot1(), two_setpoints() + far, BOXES, PlannerParams())
        assert cm.exception.robot_id == 1
        assert cm.exception.setpoint_id == 42

    def test_params_validation(self):
        with self.assertRaises(ValueError):
            PlannerParams(publish_rate=0.0)
        with self.assertRaises(ValueError):
            PlannerParams(dwell=-1.0)
        assert PlannerParams().dt_ns == 8_000_000


class TestTickLoop(unittest.TestCase):

    def test_trace_recorder(self):
        rec = TraceRecorder(1, 'twin')
        rec.add(10, (0, 0, 0))
        rec.add(10, (1, 1, 1))
        rec.add(20, (2, 2, 2))
        assert rec.t_ns == [10, 20]
        assert rec.positions[0] == (1.0, 1.0, 1.0)
        with self.assertRaises(ValueError):
            rec.add(5, (0, 0, 0))

    def test_run_planner(self):
        plan = plan_robot(1, robot1(), two_setpoints(), BOXES, PlannerParams())
        bus = loopback_bus()
        client = bus.client('planner')
        spy = bus.client('spy')
        states, captures, done = [], [], []
        spy.subscribe('/robot1/joint_states', JointStateMsg.TYPE, states.append)
        spy.subscribe('/robot1/capture', BoolMsg.TYPE, captures.append)
        spy.subscribe(DONE_TOPIC, BoolMsg.TYPE, done.append)
        log = run_planner(client, [plan], after_tick=lambda t: bus.pump())
        bus.pump()

        assert log.published[1] == plan.ticks
        assert len(states) == plan.ticks
        stamps = [m.payload.stamp.to_ns() for m in states]
        assert set(np.diff(stamps)) == {8_000_000}
        assert len(captures) == 2
        assert log.captures[1] == 2
        assert len(done) == 1
        assert [a.id for a in log.arrivals] == [0, 1]
        assert log.arrivals[0].arrival_t < log.arrivals[1].arrival_t
        trace = log.traces[1]
        assert len(trace.t_ns) == plan.ticks
        bus.close()


if __name__ == "__main__":
    unittest.main()
