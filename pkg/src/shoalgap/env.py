"""Goal-guidance environment: 1 Hz turn commands, 25 Hz physics.

The robot receives one relative turn angle per second, executed by a
burst-style low-level controller (brake, pivot, accelerate). A fish
behavior model is stepped every substep with the robot as its neighbor.
Reward is goal entry by the fish plus a wall-proximity penalty on the
robot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .core import (DT, AgentState, Arena, Pose, RngStream, Trajectory, TrajectoryFrame,
                   agent_state, raycast_fan, step_kinematics, wall_distance, wrap_angle)
from .models import FishModel

N_BINS = 36  # rays/sectors per observation block
OBS_DIM = 5 * N_BINS
_BIN_WIDTH = 2.0 * math.pi / N_BINS
_RAY_OFFSETS = _BIN_WIDTH * np.arange(N_BINS)


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    arena: Arena = field(default_factory=Arena)
    goal_radius: float = 5.0
    wall_penalty_threshold: float = 3.0
    wall_penalty: float = -0.1
    goal_reward: float = 1.0
    robot_v_max: float = 15.0
    robot_omega_max: float = math.pi  # 180 deg/s
    substeps_per_action: int = 25
    episode_len_train: int = 41
    episode_len_eval: int = 900
    eval_goal_margin: float = 30.0  # eval corners sit this far from both walls
    heading_tolerance: float = math.radians(5.0)
    robot_accel: float = 125.0  # cm/s^2, shared by the brake and burst phases
    spawn_margin: float = 5.0
    min_spawn_separation: float = 10.0
    goal_reschedule_on: str = "fish"  # training reschedule trigger: "fish" or "robot"

    def __post_init__(self):
        if self.goal_radius <= 0:
            raise EnvError("goal_radius must be positive")
        half_min = min(self.arena.width, self.arena.height) / 2.0
        if self.goal_radius >= half_min or self.wall_penalty_threshold >= half_min:
            raise EnvError("goal radius / wall threshold must be below half the arena size")
        if self.goal_reschedule_on not in ("fish", "robot"):
            raise EnvError("goal_reschedule_on must be 'fish' or 'robot'")

    def episode_len(self, mode: str) -> int:
        return self.episode_len_train if mode == "train" else self.episode_len_eval

    def eval_corners(self) -> tuple[tuple[float, float], tuple[float, float]]:
        m = self.eval_goal_margin
        return (m, m), (self.arena.width - m, self.arena.height - m)


@dataclass(frozen=True)
class Observation:
    wall_rays: np.ndarray
    fish_bins: np.ndarray
    goal_bins: np.ndarray
    prev_fish_bins: np.ndarray
    prev_goal_bins: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.wall_rays, self.fish_bins, self.goal_bins,
                               self.prev_fish_bins, self.prev_goal_bins])


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    reward: float
    goal_reached: bool
    frames: list[TrajectoryFrame]
    entries: int = 0  # goal-entry events this window (>= goal_reached)


def _bearing_bin(dx: float, dy: float, theta: float) -> int:
    rel = wrap_angle(math.atan2(dy, dx) - theta)
    return int(math.floor(rel / _BIN_WIDTH + 0.5)) % N_BINS


def _occupancy_bins(robot: AgentState, target_x: float, target_y: float,
                    diagonal: float) -> np.ndarray:
    bins = np.zeros(N_BINS)
    dx = target_x - robot.x
    dy = target_y - robot.y
    d = math.hypot(dx, dy)
    if d >= 1e-12:
        bins[_bearing_bin(dx, dy, robot.theta)] = min(d / diagonal, 1.0)
    return bins


def build_observation(robot: AgentState, fish: AgentState, goal: tuple[float, float],
                      prev: tuple[np.ndarray, np.ndarray] | None,
                      arena: Arena) -> Observation:
    """36 wall rays plus single-occupancy fish/goal bins, all over [0, 1].

    Distances are normalized by the arena diagonal. `prev` carries the
    previous window's (fish_bins, goal_bins); at episode start they are
    initialized to the current bins.
    """
    wall = raycast_fan(robot.x, robot.y, robot.theta, _RAY_OFFSETS, arena) / arena.diagonal
    fish_bins = _occupancy_bins(robot, fish.x, fish.y, arena.diagonal)
    goal_bins = _occupancy_bins(robot, goal[0], goal[1], arena.diagonal)
    if prev is None:
        prev = (fish_bins, goal_bins)
    return Observation(wall, fish_bins, goal_bins, prev[0], prev[1])


def low_level_controller(current: AgentState, target_heading: float,
                         config: EnvConfig) -> list[tuple[float, float]]:
    """Plan one command window: brake, pivot toward the target, then burst.

    Speeds never exceed robot_v_max and turn rates never exceed
    robot_omega_max; the turn phase begins only once the robot has stopped.
    """
    plan: list[tuple[float, float]] = []
    v = current.v
    err = wrap_angle(target_heading - current.theta)
    dv = config.robot_accel * DT
    max_turn = config.robot_omega_max * DT
    for _ in range(config.substeps_per_action):
        if abs(err) > config.heading_tolerance:
            if v > 1e-9:
                v = max(0.0, v - dv)
                plan.append((v, 0.0))
            else:
                turn = max(-max_turn, min(max_turn, err))
                err -= turn
                plan.append((0.0, turn / DT))
        else:
            v = min(config.robot_v_max, v + dv)
            plan.append((v, 0.0))
    return plan


def goal_scheduler(mode: str, current_goal: tuple[float, float], rng: RngStream,
                   config: EnvConfig) -> tuple[float, float]:
    """Next goal: uniform over the legal region in training, the other fixed
    corner in evaluation."""
    if mode == "train":
        lo = config.goal_radius
        return (rng.uniform(lo, config.arena.width - lo),
                rng.uniform(lo, config.arena.height - lo))
    corner_a, corner_b = config.eval_corners()
    da = math.hypot(current_goal[0] - corner_a[0], current_goal[1] - corner_a[1])
    db = math.hypot(current_goal[0] - corner_b[0], current_goal[1] - corner_b[1])
    return corner_b if da <= db else corner_a


class GuppyEnv:
    """Single environment instance; single-threaded, rng-explicit."""

    def __init__(self, config: EnvConfig, model: FishModel, mode: str = "train",
                 record: bool = False):
        if mode not in ("train", "eval"):
            raise EnvError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.config = config
        self.model = model
        self.mode = mode
        self.record = record
        self.rng: RngStream | None = None
        self.robot: AgentState | None = None
        self.fish: AgentState | None = None
        self.goal: tuple[float, float] = (0.0, 0.0)
        self.steps_taken = 0
        self.done = True
        self.total_entries = 0
        self._prev_bins: tuple[np.ndarray, np.ndarray] | None = None
        self._frames: np.ndarray | None = None
        self._n_frames = 0

    # -- episode lifecycle ---------------------------------------------------

    def reset(self, rng: RngStream, robot: AgentState | None = None,
              fish: AgentState | None = None,
              goal: tuple[float, float] | None = None) -> Observation:
        """Start an episode; explicit placements override the mode protocol."""
        cfg = self.config
        arena = cfg.arena
        self.rng = rng
        if self.mode == "train":
            if robot is None:
                robot = agent_state(
                    rng.uniform(cfg.spawn_margin, arena.width - cfg.spawn_margin),
                    rng.uniform(cfg.spawn_margin, arena.height - cfg.spawn_margin),
                    rng.uniform(-math.pi, math.pi))
            if fish is None:
                while True:
                    fx = rng.uniform(cfg.spawn_margin, arena.width - cfg.spawn_margin)
                    fy = rng.uniform(cfg.spawn_margin, arena.height - cfg.spawn_margin)
                    if math.hypot(fx - robot.x, fy - robot.y) >= cfg.min_spawn_separation:
                        break
                fish = agent_state(fx, fy, rng.uniform(-math.pi, math.pi))
            if goal is None:
                goal = (rng.uniform(cfg.goal_radius, arena.width - cfg.goal_radius),
                        rng.uniform(cfg.goal_radius, arena.height - cfg.goal_radius))
        else:
            center = (arena.width / 2.0, arena.height / 2.0)
            if robot is None:
                robot = agent_state(center[0], center[1], 0.0)
            if fish is None:
                fish = agent_state(arena.width * 0.25, arena.height * 0.75, -math.pi / 4)
            if goal is None:
                goal = self.config.eval_corners()[0]
        self.robot = robot
        self.fish = fish
        self.goal = goal
        self.steps_taken = 0
        self.done = False
        self.total_entries = 0
        self._prev_bins = None
        if self.record:
            n = self.config.episode_len(self.mode) * self.config.substeps_per_action + 1
            self._frames = np.empty((n, 9))
            self._n_frames = 0
            self._record_frame(0.0)
        obs = build_observation(robot, fish, goal, None, arena)
        self._prev_bins = (obs.fish_bins, obs.goal_bins)
        return obs

    def _record_frame(self, t: float) -> None:
        row = self._frames[self._n_frames]
        row[0] = t
        row[1] = self.robot.x
        row[2] = self.robot.y
        row[3] = self.robot.theta
        row[4] = self.fish.x
        row[5] = self.fish.y
        row[6] = self.fish.theta
        row[7] = self.goal[0]
        row[8] = self.goal[1]
        self._n_frames += 1

    # -- stepping ------------------------------------------------------------

    def step_driver(self, action: float) -> Iterator[tuple[AgentState, list[AgentState]]]:
        """Generator protocol for one command window.

        Yields (fish_state, neighbor_states) before each substep and expects
        the fish's (v, omega) via send(); this lets a vector wrapper batch
        fish-model calls across environments in lockstep. Returns the
        StepResult as the generator's value.
        """
        if self.done:
            raise EnvError("episode is finished; call reset() before stepping")
        if not math.isfinite(action):
            raise EnvError(f"action must be finite, got {action!r}")
        cfg = self.config
        arena = cfg.arena
        action = max(-math.pi, min(math.pi, action))
        target = wrap_angle(self.robot.theta + action)
        plan = low_level_controller(self.robot, target, cfg)
        t0 = self.steps_taken * cfg.substeps_per_action * DT
        frames: list[TrajectoryFrame] = []
        wall_hit = False
        entries = 0
        for k, (v_cmd, w_cmd) in enumerate(plan):
            fish_cmd = yield (self.fish, [self.robot])
            self.robot = step_kinematics(self.robot, v_cmd, w_cmd, DT, arena)
            self.fish = step_kinematics(self.fish, fish_cmd[0], fish_cmd[1], DT, arena)
            if wall_distance(self.robot.x, self.robot.y, arena) < cfg.wall_penalty_threshold:
                wall_hit = True
            t = t0 + (k + 1) * DT
            if self.record:
                self._record_frame(t)
                frames.append(TrajectoryFrame(t, self.robot, self.fish, self.goal))
            entered = math.hypot(self.fish.x - self.goal[0],
                                 self.fish.y - self.goal[1]) <= cfg.goal_radius
            if entered:
                entries += 1
            # entry always reschedules (prevents repeat rewards); the robot
            # trigger is an additional training-mode option
            reschedule = entered
            if not reschedule and self.mode == "train" and cfg.goal_reschedule_on == "robot":
                reschedule = math.hypot(self.robot.x - self.goal[0],
                                        self.robot.y - self.goal[1]) <= cfg.goal_radius
            if reschedule:
                self.goal = goal_scheduler(self.mode, self.goal, self.rng, cfg)
        self.total_entries += entries
        self.steps_taken += 1
        if self.steps_taken >= cfg.episode_len(self.mode):
            self.done = True
        reward = (cfg.goal_reward if entries else 0.0) + (cfg.wall_penalty if wall_hit else 0.0)
        obs = build_observation(self.robot, self.fish, self.goal, self._prev_bins, arena)
        self._prev_bins = (obs.fish_bins, obs.goal_bins)
        return StepResult(obs, reward, entries > 0, frames, entries)

    def step(self, action: float) -> StepResult:
        """Single-environment convenience wrapper around step_driver."""
        driver = self.step_driver(action)
        try:
            fish, neighbors = next(driver)
            while True:
                cmd = self.model.step(fish, neighbors, self.config.arena, self.rng)
                fish, neighbors = driver.send(cmd)
        except StopIteration as stop:
            return stop.value

    def trajectory(self, trial_id: str, env_label: str = "sim",
                   policy_label: str = "") -> Trajectory:
        if not self.record or self._frames is None or self._n_frames == 0:
            raise EnvError("environment was not recording frames")
        data = self._frames[:self._n_frames]
        return Trajectory(trial_id, env_label, policy_label,
                          t=data[:, 0].copy(), robot=data[:, 1:4].copy(),
                          fish=data[:, 4:7].copy(), goal=data[:, 7:9].copy())


class VectorEnv:
    """Steps several GuppyEnv instances in lockstep, batching fish-model calls."""

    def __init__(self, envs: Sequence[GuppyEnv]):
        if not envs:
            raise EnvError("VectorEnv needs at least one environment")
        self.envs = list(envs)
        self.model = envs[0].model

    def __len__(self) -> int:
        return len(self.envs)

    def step(self, actions: Sequence[float]) -> list[StepResult]:
        if len(actions) != len(self.envs):
            raise EnvError(f"expected {len(self.envs)} actions, got {len(actions)}")
        drivers = [env.step_driver(a) for env, a in zip(self.envs, actions)]
        pending = [next(d) for d in drivers]
        results: list[StepResult | None] = [None] * len(drivers)
        substeps = self.envs[0].config.substeps_per_action
        arena = self.envs[0].config.arena
        rngs = [env.rng for env in self.envs]
        for k in range(substeps):
            owns = [p[0] for p in pending]
            neighbor_lists = [p[1] for p in pending]
            commands = self.model.step_many(owns, neighbor_lists, arena, rngs)
            if k + 1 < substeps:
                pending = [d.send(c) for d, c in zip(drivers, commands)]
            else:
                for i, (d, c) in enumerate(zip(drivers, commands)):
                    try:
                        d.send(c)
                    except StopIteration as stop:
                        results[i] = stop.value
        if any(r is None for r in results):
            raise EnvError("driver did not finish its command window")
        return results
