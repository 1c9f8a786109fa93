"""Geometry, kinematics, RNG streams, and trajectory primitives.

Everything downstream (behavior models, environment, metrics, statistics)
builds on the value types and pure functions defined here. Units are
centimeters, radians, and seconds throughout; the simulation runs at a
fixed 25 Hz substep.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

# 25 Hz tracking/simulation substep.
DT = 0.04

# Positions are clamped this far inside the boundary so that raycasts from a
# "wall-touching" agent stay strictly positive.
EDGE_INSET = 1e-9

_MASK64 = (1 << 64) - 1


class GeometryError(ValueError):
    """Raised when a geometric precondition (finite input, inside arena) fails."""


@dataclass(frozen=True)
class Arena:
    """Rectangular tank, origin at the lower-left corner."""

    width: float = 100.0
    height: float = 100.0

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise GeometryError(f"arena dimensions must be positive, got {self.width}x{self.height}")

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x <= self.width and 0.0 <= y <= self.height

    def clamp(self, x: float, y: float) -> tuple[float, float]:
        """Clamp a point to just inside the boundary (heading untouched)."""
        cx = min(max(x, EDGE_INSET), self.width - EDGE_INSET)
        cy = min(max(y, EDGE_INSET), self.height - EDGE_INSET)
        return cx, cy


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float  # [-pi, pi), 0 = +x, counter-clockwise positive


@dataclass(frozen=True)
class AgentState:
    pose: Pose
    v: float = 0.0  # linear speed, cm/s, >= 0
    omega: float = 0.0  # turn rate, rad/s

    @property
    def x(self) -> float:
        return self.pose.x

    @property
    def y(self) -> float:
        return self.pose.y

    @property
    def theta(self) -> float:
        return self.pose.theta


def agent_state(x: float, y: float, theta: float, v: float = 0.0, omega: float = 0.0) -> AgentState:
    return AgentState(Pose(x, y, wrap_angle(theta)), v, omega)


def wrap_angle(a: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    if not math.isfinite(a):
        raise GeometryError(f"cannot wrap non-finite angle {a!r}")
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w < 0.0:
        w += 2.0 * math.pi
    return w - math.pi


def raycast(origin: Pose, angle_offset: float, arena: Arena) -> float:
    """Distance from `origin` along heading+offset to the first wall."""
    if not arena.contains(origin.x, origin.y):
        raise GeometryError(f"raycast origin ({origin.x}, {origin.y}) outside arena")
    ang = origin.theta + angle_offset
    dx = math.cos(ang)
    dy = math.sin(ang)
    best = arena.diagonal
    if dx > 1e-15:
        best = min(best, (arena.width - origin.x) / dx)
    elif dx < -1e-15:
        best = min(best, -origin.x / dx)
    if dy > 1e-15:
        best = min(best, (arena.height - origin.y) / dy)
    elif dy < -1e-15:
        best = min(best, -origin.y / dy)
    return best


def raycast_fan(x: float, y: float, theta: float, offsets: np.ndarray, arena: Arena) -> np.ndarray:
    """Vectorized raycast for several angle offsets from one pose."""
    if not arena.contains(x, y):
        raise GeometryError(f"raycast origin ({x}, {y}) outside arena")
    ang = theta + offsets
    dx = np.cos(ang)
    dy = np.sin(ang)
    out = np.full(offsets.shape, arena.diagonal)
    with np.errstate(divide="ignore"):
        tx = np.where(dx > 1e-15, (arena.width - x) / dx, np.where(dx < -1e-15, -x / dx, np.inf))
        ty = np.where(dy > 1e-15, (arena.height - y) / dy, np.where(dy < -1e-15, -y / dy, np.inf))
    return np.minimum(out, np.minimum(tx, ty))


def wall_distance(x: float, y: float, arena: Arena) -> float:
    """Distance to the nearest of the four walls."""
    if not arena.contains(x, y):
        raise GeometryError(f"point ({x}, {y}) outside arena")
    return min(x, arena.width - x, y, arena.height - y)


def nearest_wall_frame(x: float, y: float, arena: Arena) -> tuple[float, tuple[float, float], tuple[float, float]]:
    """Nearest wall as (distance, unit vector away from it, unit tangent).

    Ties (corner diagonal) resolve in fixed order: left, right, bottom, top,
    so x-walls win over y-walls.
    """
    d = wall_distance(x, y, arena)
    if x == d:
        return d, (1.0, 0.0), (0.0, 1.0)
    if arena.width - x == d:
        return d, (-1.0, 0.0), (0.0, 1.0)
    if y == d:
        return d, (0.0, 1.0), (1.0, 0.0)
    return d, (0.0, -1.0), (1.0, 0.0)


def step_kinematics(state: AgentState, v: float, omega: float, dt: float, arena: Arena) -> AgentState:
    """Advance one substep: turn, then translate along the new heading.

    Agents that would exit the arena are clamped to the boundary with
    heading preserved.
    """
    theta = wrap_angle(state.pose.theta + omega * dt)
    x = state.pose.x + v * math.cos(theta) * dt
    y = state.pose.y + v * math.sin(theta) * dt
    x, y = arena.clamp(x, y)
    return AgentState(Pose(x, y, theta), v, omega)


# ---------------------------------------------------------------------------
# Deterministic splittable RNG


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class RngStream:
    """Counter-based random stream keyed by (seed, stream_id).

    Streams with equal keys replay identical draw sequences on every
    platform (Philox). `child` derives statistically independent streams
    without consuming state, so per-episode / per-replicate streams do not
    depend on scheduling order.
    """

    __slots__ = ("seed", "stream_id", "_gen", "_nbuf", "_npos", "_ubuf", "_upos")

    _BUF = 1024

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._gen: np.random.Generator | None = None
        self._nbuf: np.ndarray | None = None
        self._npos = 0
        self._ubuf: np.ndarray | None = None
        self._upos = 0

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream_id]))
        return self._gen

    def child(self, index: int) -> "RngStream":
        return RngStream(self.seed, _splitmix64(self.stream_id ^ _splitmix64(int(index) & _MASK64)))

    # Thin draw helpers; all consume the stream in call order. Scalar draws
    # are served from block-refilled buffers (refills happen at deterministic
    # points of the call sequence, so replays stay identical).
    def _next_normal(self) -> float:
        if self._nbuf is None or self._npos >= self._BUF:
            self._nbuf = self.generator.standard_normal(self._BUF)
            self._npos = 0
        value = self._nbuf[self._npos]
        self._npos += 1
        return float(value)

    def _next_uniform(self) -> float:
        if self._ubuf is None or self._upos >= self._BUF:
            self._ubuf = self.generator.random(self._BUF)
            self._upos = 0
        value = self._ubuf[self._upos]
        self._upos += 1
        return float(value)

    def normal(self, loc=0.0, scale=1.0, size=None):
        if size is None:
            return loc + scale * self._next_normal()
        if isinstance(size, int) and size <= 8:
            return loc + scale * np.array([self._next_normal() for _ in range(size)])
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        if size is None:
            return low + (high - low) * self._next_uniform()
        return self.generator.uniform(low, high, size)

    def random(self, size=None):
        if size is None:
            return self._next_uniform()
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


# ---------------------------------------------------------------------------
# Trajectories

TRAJECTORY_HEADER = "trial_id,env,policy,t,robot_x,robot_y,robot_theta,fish_x,fish_y,fish_theta,goal_x,goal_y"


@dataclass(frozen=True)
class TrajectoryFrame:
    t: float
    robot: AgentState
    fish: AgentState
    goal: tuple[float, float]

    def __post_init__(self):
        if self.t < 0:
            raise ValueError(f"frame time must be nonnegative, got {self.t}")


class Trajectory:
    """One trial at 25 Hz, stored columnar for cheap metric extraction.

    Pose columns are (x, y, theta) for robot and fish; linear/angular
    velocities are recovered downstream by finite differences so that
    recorded and externally supplied trials go through identical code.
    """

    __slots__ = ("trial_id", "env_label", "policy_label", "t", "robot", "fish", "goal")

    def __init__(self, trial_id: str, env_label: str, policy_label: str,
                 t: np.ndarray, robot: np.ndarray, fish: np.ndarray, goal: np.ndarray):
        t = np.asarray(t, dtype=float)
        robot = np.asarray(robot, dtype=float)
        fish = np.asarray(fish, dtype=float)
        goal = np.asarray(goal, dtype=float)
        if t.ndim != 1 or len(t) == 0:
            raise ValueError("trajectory needs at least one frame")
        if robot.shape != (len(t), 3) or fish.shape != (len(t), 3) or goal.shape != (len(t), 2):
            raise ValueError("trajectory column shapes inconsistent with frame count")
        if len(t) > 1 and not np.all(np.diff(t) > 0):
            raise ValueError(f"frame times must be strictly increasing in trial {trial_id!r}")
        self.trial_id = trial_id
        self.env_label = env_label
        self.policy_label = policy_label
        self.t = t
        self.robot = robot
        self.fish = fish
        self.goal = goal

    def __len__(self) -> int:
        return len(self.t)

    def frame(self, i: int) -> TrajectoryFrame:
        r = self.robot[i]
        f = self.fish[i]
        return TrajectoryFrame(
            t=float(self.t[i]),
            robot=AgentState(Pose(float(r[0]), float(r[1]), float(r[2]))),
            fish=AgentState(Pose(float(f[0]), float(f[1]), float(f[2]))),
            goal=(float(self.goal[i][0]), float(self.goal[i][1])),
        )

    def frames(self) -> Iterator[TrajectoryFrame]:
        for i in range(len(self)):
            yield self.frame(i)

    @classmethod
    def from_frames(cls, trial_id: str, env_label: str, policy_label: str,
                    frames: Sequence[TrajectoryFrame]) -> "Trajectory":
        if not frames:
            raise ValueError("trajectory needs at least one frame")
        t = np.array([f.t for f in frames])
        robot = np.array([[f.robot.x, f.robot.y, f.robot.theta] for f in frames])
        fish = np.array([[f.fish.x, f.fish.y, f.fish.theta] for f in frames])
        goal = np.array([list(f.goal) for f in frames])
        return cls(trial_id, env_label, policy_label, t, robot, fish, goal)


def _format_row(trial_id: str, env_label: str, policy_label: str, values: Iterable[float]) -> str:
    return ",".join([trial_id, env_label, policy_label] + [repr(float(v)) for v in values])


def write_trajectory_csv(path: str | Path, trajectories: Sequence[Trajectory]) -> None:
    """Write trials in the interchange CSV format (UTF-8, LF line endings).

    Floats use shortest round-trip repr, so write -> read is bit-exact.
    """
    buf = io.StringIO()
    buf.write(TRAJECTORY_HEADER + "\n")
    for traj in trajectories:
        for i in range(len(traj)):
            row = _format_row(
                traj.trial_id, traj.env_label, traj.policy_label,
                (traj.t[i],
                 traj.robot[i, 0], traj.robot[i, 1], traj.robot[i, 2],
                 traj.fish[i, 0], traj.fish[i, 1], traj.fish[i, 2],
                 traj.goal[i, 0], traj.goal[i, 1]))
            buf.write(row + "\n")
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


class TrajectoryCsvError(ValueError):
    """Malformed trajectory CSV; carries the 1-based offending line number."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


def read_trajectory_csv(path: str | Path) -> list[Trajectory]:
    """Read an interchange CSV back into trajectories, preserving trial order."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if not lines or lines[0].rstrip("\r") != TRAJECTORY_HEADER:
        raise TrajectoryCsvError(f"expected header {TRAJECTORY_HEADER!r}", 1)
    order: list[tuple[str, str, str]] = []
    rows: dict[tuple[str, str, str], list[list[float]]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.rstrip("\r")
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 12:
            raise TrajectoryCsvError(f"expected 12 fields, got {len(parts)}", lineno)
        key = (parts[0], parts[1], parts[2])
        try:
            values = [float(p) for p in parts[3:]]
        except ValueError as exc:
            raise TrajectoryCsvError(str(exc), lineno) from None
        if key not in rows:
            rows[key] = []
            order.append(key)
        rows[key].append(values)
    out = []
    for key in order:
        arr = np.array(rows[key])
        out.append(Trajectory(key[0], key[1], key[2],
                              t=arr[:, 0], robot=arr[:, 1:4], fish=arr[:, 4:7], goal=arr[:, 7:9]))
    return out
