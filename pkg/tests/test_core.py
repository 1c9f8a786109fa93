import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shoalgap.core import (
    Arena, GeometryError, Pose, RngStream, Trajectory, TrajectoryCsvError,
    TrajectoryFrame, agent_state, nearest_wall_frame, raycast, raycast_fan,
    read_trajectory_csv, step_kinematics, wall_distance, wrap_angle,
    write_trajectory_csv, TRAJECTORY_HEADER,
)

ARENA = Arena(100.0, 100.0)


class TestWrapAngle:
    def test_identity(self):
        assert wrap_angle(0.0) == 0.0

    def test_three_half_pi(self):
        assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)

    def test_boundary_convention(self):
        assert wrap_angle(-math.pi) == -math.pi
        assert wrap_angle(math.pi) == -math.pi

    def test_non_finite_rejected(self):
        for bad in (math.inf, -math.inf, math.nan):
            with pytest.raises(GeometryError):
                wrap_angle(bad)

    @given(st.floats(min_value=-1e6, max_value=1e6))
    def test_idempotent_and_congruent(self, a):
        w = wrap_angle(a)
        assert -math.pi <= w < math.pi
        assert wrap_angle(w) == w
        # same angle modulo 2*pi
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-6)
        assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-6)


class TestRaycast:
    def test_center_to_right_wall(self):
        assert raycast(Pose(50, 50, 0), 0.0, ARENA) == pytest.approx(50.0)

    def test_diagonal_to_corner(self):
        assert raycast(Pose(50, 50, 0), math.pi / 4, ARENA) == pytest.approx(50 * math.sqrt(2))

    def test_facing_near_wall(self):
        assert raycast(Pose(10, 50, math.pi), 0.0, ARENA) == pytest.approx(10.0)

    def test_outside_arena_rejected(self):
        with pytest.raises(GeometryError):
            raycast(Pose(150, 50, 0), 0.0, ARENA)

    @given(st.floats(min_value=1.0, max_value=99.0), st.floats(min_value=1.0, max_value=99.0))
    def test_axis_aligned_chord(self, x, y):
        p = Pose(x, y, 0.0)
        assert raycast(p, 0.0, ARENA) + raycast(p, math.pi, ARENA) == pytest.approx(ARENA.width)
        assert raycast(p, math.pi / 2, ARENA) + raycast(p, -math.pi / 2, ARENA) == pytest.approx(ARENA.height)

    def test_fan_matches_scalar(self):
        offsets = np.linspace(0, 2 * math.pi, 36, endpoint=False)
        p = Pose(23.0, 71.0, 0.7)
        fan = raycast_fan(p.x, p.y, p.theta, offsets, ARENA)
        for off, got in zip(offsets, fan):
            assert got == pytest.approx(raycast(p, off, ARENA))


class TestWallDistance:
    @pytest.mark.parametrize("point,expected", [((50, 50), 50), ((3, 50), 3), ((97, 98), 2)])
    def test_examples(self, point, expected):
        assert wall_distance(point[0], point[1], ARENA) == pytest.approx(expected)

    def test_outside_rejected(self):
        with pytest.raises(GeometryError):
            wall_distance(-1, 50, ARENA)

    def test_nearest_wall_tie_prefers_x_walls(self):
        d, away, tangent = nearest_wall_frame(10.0, 10.0, ARENA)
        assert d == 10.0
        assert away == (1.0, 0.0)
        assert tangent == (0.0, 1.0)


class TestKinematics:
    def test_turn_then_translate(self):
        s = agent_state(50, 50, 0.0)
        s2 = step_kinematics(s, v=10.0, omega=math.pi / 2 / 0.04, dt=0.04, arena=ARENA)
        assert s2.theta == pytest.approx(math.pi / 2)
        assert s2.x == pytest.approx(50.0, abs=1e-9)
        assert s2.y == pytest.approx(50.4)

    def test_clamped_at_boundary_heading_preserved(self):
        s = agent_state(99.9, 50, 0.0)
        s2 = step_kinematics(s, v=15.0, omega=0.0, dt=0.04, arena=ARENA)
        assert s2.x < 100.0 and s2.x > 99.9
        assert s2.theta == 0.0
        assert ARENA.contains(s2.x, s2.y)


class TestRngStream:
    def test_same_key_same_sequence(self):
        a = RngStream(123, 7).normal(size=100)
        b = RngStream(123, 7).normal(size=100)
        assert np.array_equal(a, b)

    def test_children_independent_of_creation_order(self):
        root = RngStream(9)
        c3_then_c1 = (root.child(3), root.child(1))
        root2 = RngStream(9)
        c1_then_c3 = (root2.child(1), root2.child(3))
        assert np.array_equal(c3_then_c1[1].normal(size=10), c1_then_c3[0].normal(size=10))
        assert np.array_equal(c3_then_c1[0].normal(size=10), c1_then_c3[1].normal(size=10))

    def test_distinct_children_differ(self):
        root = RngStream(5)
        assert not np.array_equal(root.child(0).normal(size=20), root.child(1).normal(size=20))

    def test_child_does_not_consume_parent(self):
        a = RngStream(4)
        a.child(0)
        b = RngStream(4)
        assert np.array_equal(a.normal(size=5), b.normal(size=5))


def _toy_trajectory(trial_id="t0", env="sim", policy="p0", n=5):
    frames = [
        TrajectoryFrame(t=0.04 * i,
                        robot=agent_state(10.0 + i, 20.0, 0.1 * i),
                        fish=agent_state(30.0, 40.0 + i, -0.2),
                        goal=(70.0, 70.0))
        for i in range(n)
    ]
    return Trajectory.from_frames(trial_id, env, policy, frames)


class TestTrajectoryCsv:
    def test_round_trip_bit_exact(self, tmp_path):
        trajs = [_toy_trajectory("a"), _toy_trajectory("b", env="real", policy="p1")]
        path = tmp_path / "t.csv"
        write_trajectory_csv(path, trajs)
        again = read_trajectory_csv(path)
        assert [t.trial_id for t in again] == ["a", "b"]
        for orig, back in zip(trajs, again):
            assert np.array_equal(orig.t, back.t)
            assert np.array_equal(orig.robot, back.robot)
            assert np.array_equal(orig.fish, back.fish)
            assert np.array_equal(orig.goal, back.goal)
            assert back.env_label == orig.env_label
            assert back.policy_label == orig.policy_label

    def test_header_and_line_endings(self, tmp_path):
        path = tmp_path / "t.csv"
        write_trajectory_csv(path, [_toy_trajectory()])
        raw = path.read_bytes()
        assert raw.startswith(TRAJECTORY_HEADER.encode() + b"\n")
        assert b"\r" not in raw

    def test_malformed_row_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.csv"
        good = TRAJECTORY_HEADER + "\n" + "t,sim,p,0.0,1,1,0,2,2,0,3,3\n" + "t,sim,p,oops\n"
        path.write_text(good)
        with pytest.raises(TrajectoryCsvError) as err:
            read_trajectory_csv(path)
        assert err.value.line_number == 3

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("nope\n")
        with pytest.raises(TrajectoryCsvError):
            read_trajectory_csv(path)

    def test_empty_trajectory_rejected(self):
        with pytest.raises(ValueError):
            Trajectory.from_frames("x", "sim", "p", [])

    def test_nonincreasing_time_rejected(self):
        frames = [
            TrajectoryFrame(0.0, agent_state(1, 1, 0), agent_state(2, 2, 0), (3, 3)),
            TrajectoryFrame(0.0, agent_state(1, 1, 0), agent_state(2, 2, 0), (3, 3)),
        ]
        with pytest.raises(ValueError):
            Trajectory.from_frames("x", "sim", "p", frames)
