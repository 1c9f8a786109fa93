import math

import numpy as np
import pytest

from shoalgap.core import DT, Arena, RngStream, agent_state
from shoalgap.env import (EnvConfig, EnvError, GuppyEnv, VectorEnv, build_observation,
                          goal_scheduler, low_level_controller, N_BINS, OBS_DIM)
from shoalgap.models import build_model, follow_spec, zone_spec
from shoalgap.stats import chi2_sf

CFG = EnvConfig()
ARENA = CFG.arena
FOLLOW = build_model(follow_spec())
ZONE = build_model(zone_spec())


def make_env(mode="train", model=FOLLOW, record=False, **overrides):
    return GuppyEnv(EnvConfig(**overrides), model, mode=mode, record=record)


class TestReset:
    def test_eval_goal_at_first_corner(self):
        env = make_env(mode="eval")
        env.reset(RngStream(1))
        assert env.goal == (30.0, 30.0)

    def test_equal_seeds_identical_observations(self):
        a = make_env().reset(RngStream(42, 5)).as_vector()
        b = make_env().reset(RngStream(42, 5)).as_vector()
        assert np.array_equal(a, b)

    def test_train_goals_uniform_over_legal_region(self):
        rng = RngStream(7)
        lo, hi = CFG.goal_radius, ARENA.width - CFG.goal_radius
        counts = np.zeros((5, 5))
        for k in range(1000):
            env = make_env()
            env.reset(rng.child(k))
            gx, gy = env.goal
            assert lo <= gx <= hi and lo <= gy <= hi
            counts[min(int((gx - lo) / (hi - lo) * 5), 4),
                   min(int((gy - lo) / (hi - lo) * 5), 4)] += 1
        expected = 1000 / 25
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2_sf(chi2, 24) > 0.01

    def test_explicit_placement_overrides(self):
        env = make_env()
        env.reset(RngStream(1), robot=agent_state(10, 10, 0.0),
                  fish=agent_state(90, 90, 1.0), goal=(50.0, 50.0))
        assert (env.robot.x, env.robot.y) == (10, 10)
        assert env.goal == (50.0, 50.0)

    def test_spawn_separation_enforced(self):
        for k in range(50):
            env = make_env()
            env.reset(RngStream(11, k))
            d = math.hypot(env.robot.x - env.fish.x, env.robot.y - env.fish.y)
            assert d >= CFG.min_spawn_separation


class TestStep:
    def test_fish_already_in_goal_rewarded(self):
        env = make_env()
        env.reset(RngStream(2), robot=agent_state(80, 80, 0.0),
                  fish=agent_state(50, 50, 0.0), goal=(50.0, 50.0))
        res = env.step(0.0)
        assert res.goal_reached
        assert res.reward == pytest.approx(1.0)

    def test_robot_at_center_no_penalty(self):
        env = make_env()
        env.reset(RngStream(3), robot=agent_state(50, 50, 0.0),
                  fish=agent_state(70, 30, 0.0), goal=(10.0, 90.0))
        res = env.step(0.0)
        assert res.reward == 0.0

    def test_driving_into_wall_penalized(self):
        env = make_env()
        env.reset(RngStream(4), robot=agent_state(10, 50, math.pi),
                  fish=agent_state(80, 80, 0.0), goal=(80.0, 20.0))
        res = env.step(0.0)  # keep heading: straight at the left wall at full speed
        assert res.reward == pytest.approx(-0.1)

    def test_step_after_done_rejected(self):
        env = make_env(episode_len_train=1)
        env.reset(RngStream(5))
        env.step(0.0)
        assert env.done
        with pytest.raises(EnvError):
            env.step(0.0)

    def test_action_clipped_and_must_be_finite(self):
        env = make_env()
        env.reset(RngStream(6), robot=agent_state(50, 50, 0.0),
                  fish=agent_state(20, 20, 0.0), goal=(80.0, 80.0))
        env.step(123.0)  # clipped to pi rather than spinning forever
        with pytest.raises(EnvError):
            env.step(math.nan)

    def test_goal_rescheduled_after_entry(self):
        env = make_env(mode="eval", model=FOLLOW)
        env.reset(RngStream(7), robot=agent_state(40, 40, 0.0),
                  fish=agent_state(31, 31, 0.0), goal=(30.0, 30.0))
        res = env.step(0.0)
        assert res.goal_reached
        assert env.goal == (70.0, 70.0)


class TestController:
    def test_aligned_target_ramps_to_full_speed(self):
        plan = low_level_controller(agent_state(50, 50, 0.0, v=0.0), 0.0, CFG)
        speeds = [v for v, _ in plan]
        assert all(w == 0.0 for _, w in plan)
        assert speeds[-1] == CFG.robot_v_max
        assert all(b >= a for a, b in zip(speeds, speeds[1:]))

    def test_half_turn_completes_within_a_second(self):
        plan = low_level_controller(agent_state(50, 50, 0.0, v=0.0), math.pi - 1e-9, CFG)
        turning = [w for _, w in plan if w != 0.0]
        assert len(turning) * DT <= 1.0 + CFG.heading_tolerance / CFG.robot_omega_max
        total_turn = sum(w * DT for _, w in plan)
        assert abs(total_turn - (math.pi - 1e-9)) <= CFG.heading_tolerance

    def test_displacement_bounded_per_window(self):
        plan = low_level_controller(agent_state(50, 50, 0.0, v=CFG.robot_v_max), 0.0, CFG)
        assert sum(v * DT for v, _ in plan) <= CFG.robot_v_max * 1.0 + 1e-9

    def test_limits_never_exceeded(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            state = agent_state(50, 50, rng.uniform(-math.pi, math.pi),
                                v=rng.uniform(0, CFG.robot_v_max))
            target = rng.uniform(-math.pi, math.pi)
            for v, w in low_level_controller(state, target, CFG):
                assert 0.0 <= v <= CFG.robot_v_max + 1e-12
                assert abs(w) <= CFG.robot_omega_max + 1e-12

    def test_brake_before_turn(self):
        plan = low_level_controller(agent_state(50, 50, 0.0, v=CFG.robot_v_max), math.pi / 2, CFG)
        first_turn = next(i for i, (_, w) in enumerate(plan) if w != 0.0)
        assert all(v > 0 for v, _ in plan[:first_turn - 1]) or first_turn <= 1
        assert plan[first_turn][0] == 0.0


class TestObservation:
    def test_fish_occupies_single_bin_with_distance(self):
        robot = agent_state(50, 50, 0.0)
        fish = agent_state(60, 50, 0.0)
        obs = build_observation(robot, fish, (80.0, 80.0), None, ARENA)
        assert np.count_nonzero(obs.fish_bins) == 1
        assert obs.fish_bins[0] == pytest.approx(10.0 / ARENA.diagonal)

    def test_center_ray_symmetry(self):
        obs = build_observation(agent_state(50, 50, 0.0), agent_state(20, 20, 0), (80, 80),
                                None, ARENA)
        expected = 50.0 / ARENA.diagonal
        for idx in (0, 9, 18, 27):  # 0, 90, 180, 270 degrees
            assert obs.wall_rays[idx] == pytest.approx(expected)

    def test_first_observation_prev_equals_current(self):
        env = make_env()
        obs = env.reset(RngStream(8))
        assert np.array_equal(obs.prev_fish_bins, obs.fish_bins)
        assert np.array_equal(obs.prev_goal_bins, obs.goal_bins)

    def test_prev_bins_copied_verbatim_next_step(self):
        env = make_env()
        obs0 = env.reset(RngStream(9))
        res = env.step(0.5)
        assert np.array_equal(res.observation.prev_fish_bins, obs0.fish_bins)
        assert np.array_equal(res.observation.prev_goal_bins, obs0.goal_bins)

    def test_vector_layout_and_range(self):
        env = make_env(model=ZONE)
        obs = env.reset(RngStream(10))
        rng = RngStream(20)
        for _ in range(10):
            vec = obs.as_vector()
            assert vec.shape == (OBS_DIM,)
            assert np.all(vec >= 0.0) and np.all(vec <= 1.0)
            assert np.count_nonzero(obs.fish_bins) <= 1
            assert np.count_nonzero(obs.goal_bins) <= 1
            obs = env.step(rng.uniform(-math.pi, math.pi)).observation


class TestGoalScheduler:
    def test_eval_alternation(self):
        a, b = CFG.eval_corners()
        nxt = goal_scheduler("eval", a, RngStream(1), CFG)
        assert nxt == b
        assert goal_scheduler("eval", nxt, RngStream(1), CFG) == a

    def test_train_uniform(self):
        rng = RngStream(12)
        lo, hi = CFG.goal_radius, ARENA.width - CFG.goal_radius
        counts = np.zeros((5, 5))
        for _ in range(1000):
            gx, gy = goal_scheduler("train", (50.0, 50.0), rng, CFG)
            counts[min(int((gx - lo) / (hi - lo) * 5), 4),
                   min(int((gy - lo) / (hi - lo) * 5), 4)] += 1
        chi2 = float(((counts - 40.0) ** 2 / 40.0).sum())
        assert chi2_sf(chi2, 24) > 0.01


def scripted_rollout(env, seed, n_steps=None):
    rng = RngStream(seed)
    obs = env.reset(rng.child(0))
    act_rng = rng.child(1)
    rewards = []
    entries = 0
    steps = n_steps if n_steps is not None else env.config.episode_len(env.mode)
    for _ in range(steps):
        res = env.step(act_rng.uniform(-math.pi, math.pi))
        rewards.append(res.reward)
        entries += res.entries
    return rewards, entries


class TestEpisodeInvariants:
    def test_eval_frame_count(self):
        env = make_env(mode="eval", model=FOLLOW, record=True, episode_len_eval=4)
        scripted_rollout(env, 31, n_steps=4)
        traj = env.trajectory("t0")
        assert len(traj) == 4 * 25 + 1
        assert np.allclose(np.diff(traj.t), DT)

    def test_reward_bounds_and_goal_accounting(self):
        env = make_env(mode="eval", model=FOLLOW, record=True, episode_len_eval=30)
        rewards, entries = scripted_rollout(env, 32, n_steps=30)
        assert sum(rewards) >= -0.1 * 30
        positive_steps = sum(1 for r in rewards if r in (1.0, 0.9))
        assert positive_steps == sum(1 for r in rewards if r >= 0.9)
        assert entries >= positive_steps

    def test_bitwise_deterministic_rollout(self):
        def run():
            env = make_env(mode="eval", model=ZONE, record=True, episode_len_eval=20)
            scripted_rollout(env, 33, n_steps=20)
            return env.trajectory("t")

        a, b = run(), run()
        assert np.array_equal(a.robot, b.robot)
        assert np.array_equal(a.fish, b.fish)
        assert np.array_equal(a.goal, b.goal)

    def test_poses_stay_inside_arena(self):
        env = make_env(mode="eval", model=ZONE, record=True, episode_len_eval=20)
        scripted_rollout(env, 34, n_steps=20)
        traj = env.trajectory("t")
        for arr in (traj.robot, traj.fish):
            assert np.all(arr[:, 0] >= 0) and np.all(arr[:, 0] <= ARENA.width)
            assert np.all(arr[:, 1] >= 0) and np.all(arr[:, 1] <= ARENA.height)


class TestVectorEnv:
    @pytest.mark.parametrize("model", [FOLLOW, ZONE])
    def test_matches_sequential_stepping(self, model):
        def build(record):
            envs = [GuppyEnv(EnvConfig(), model, mode="train", record=record) for _ in range(3)]
            for i, env in enumerate(envs):
                env.reset(RngStream(50, i))
            return envs

        seq = build(False)
        vec_envs = build(False)
        vec = VectorEnv(vec_envs)
        actions = [0.3, -1.2, 0.0]
        for _ in range(5):
            seq_results = [env.step(a) for env, a in zip(seq, actions)]
            vec_results = vec.step(actions)
            for r_seq, r_vec in zip(seq_results, vec_results):
                assert r_seq.reward == r_vec.reward
                assert np.array_equal(r_seq.observation.as_vector(), r_vec.observation.as_vector())
        for env_seq, env_vec in zip(seq, vec_envs):
            assert env_seq.robot == env_vec.robot
            assert env_seq.fish == env_vec.fish
