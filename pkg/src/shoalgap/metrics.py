"""Behavioral metric extraction from trajectories.

Nine per-frame series (distances, alignments, kinematics) plus per-trial
goal statistics. Everything is a pure function of the trajectory arrays;
speeds and turn rates come from finite differences of tracked poses so
recorded and externally supplied trials are processed identically.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Arena, Trajectory

METRIC_KINDS = (
    "iid", "iid_change", "alignment", "fish_speed", "fish_turn",
    "fish_goal_distance", "fish_faces_robot", "wall_distance", "wall_alignment",
)

# metrics defined on frame-to-frame differences (series one element shorter)
_DIFFERENCED = {"iid_change", "fish_speed", "fish_turn"}


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricSeries:
    kind: str
    trial_id: str
    t: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class TrialSummary:
    trial_id: str
    n_goals: int
    goal_durations: list[float]
    goals_per_minute: np.ndarray


def _wrap(a: np.ndarray) -> np.ndarray:
    return np.mod(a + math.pi, 2.0 * math.pi) - math.pi


def _iid(traj: Trajectory) -> np.ndarray:
    return np.hypot(traj.robot[:, 0] - traj.fish[:, 0], traj.robot[:, 1] - traj.fish[:, 1])


def compute_metric(traj: Trajectory, kind: str, arena: Arena | None = None) -> MetricSeries:
    """One per-frame behavioral series for a trial."""
    if kind not in METRIC_KINDS:
        raise MetricError(f"unknown metric {kind!r}, expected one of {METRIC_KINDS}")
    arena = arena or Arena()
    n = len(traj)
    if kind in _DIFFERENCED and n < 2:
        raise MetricError(f"metric {kind!r} needs at least two frames, got {n}")
    dt = np.diff(traj.t)
    if kind == "iid":
        values, t = _iid(traj), traj.t
    elif kind == "iid_change":
        values, t = np.diff(_iid(traj)) / dt, traj.t[1:]
    elif kind == "alignment":
        values, t = np.cos(traj.robot[:, 2] - traj.fish[:, 2]), traj.t
    elif kind == "fish_speed":
        disp = np.hypot(np.diff(traj.fish[:, 0]), np.diff(traj.fish[:, 1]))
        values, t = disp / dt, traj.t[1:]
    elif kind == "fish_turn":
        values, t = _wrap(np.diff(traj.fish[:, 2])) / dt, traj.t[1:]
    elif kind == "fish_goal_distance":
        values = np.hypot(traj.fish[:, 0] - traj.goal[:, 0], traj.fish[:, 1] - traj.goal[:, 1])
        t = traj.t
    elif kind == "fish_faces_robot":
        dx = traj.robot[:, 0] - traj.fish[:, 0]
        dy = traj.robot[:, 1] - traj.fish[:, 1]
        d = np.hypot(dx, dy)
        heading_x = np.cos(traj.fish[:, 2])
        heading_y = np.sin(traj.fish[:, 2])
        with np.errstate(invalid="ignore"):
            values = np.where(d < 1e-12, 0.0, (heading_x * dx + heading_y * dy) / d)
        t = traj.t
    elif kind == "wall_distance":
        values = np.min(np.column_stack([
            traj.fish[:, 0], arena.width - traj.fish[:, 0],
            traj.fish[:, 1], arena.height - traj.fish[:, 1]]), axis=1)
        t = traj.t
    else:  # wall_alignment
        # nearest wall by fixed priority (x-walls win corner ties); tangent of
        # x-walls is vertical, of y-walls horizontal; absolute dot product
        dists = np.column_stack([
            traj.fish[:, 0], arena.width - traj.fish[:, 0],
            traj.fish[:, 1], arena.height - traj.fish[:, 1]])
        nearest = np.argmin(dists, axis=1)
        theta = traj.fish[:, 2]
        values = np.where(nearest < 2, np.abs(np.sin(theta)), np.abs(np.cos(theta)))
        t = traj.t
    return MetricSeries(kind, traj.trial_id, t, values)


def compute_all_metrics(traj: Trajectory, arena: Arena | None = None) -> dict[str, MetricSeries]:
    return {kind: compute_metric(traj, kind, arena) for kind in METRIC_KINDS}


def goal_entry_times(traj: Trajectory, goal_radius: float) -> list[float]:
    """Goal entries, edge-triggered and armed once per active goal.

    Each run of a constant goal position yields at most one entry (its
    first inside frame); the trigger re-arms only when the goal switches,
    so re-entering the same active goal never double-counts.
    """
    d = np.hypot(traj.fish[:, 0] - traj.goal[:, 0], traj.fish[:, 1] - traj.goal[:, 1])
    inside = d <= goal_radius
    goal_changed = np.zeros(len(traj), dtype=bool)
    if len(traj) > 1:
        goal_changed[1:] = np.any(np.diff(traj.goal, axis=0) != 0.0, axis=1)
    run_starts = np.flatnonzero(np.concatenate([[True], goal_changed[1:]]))
    run_ends = np.concatenate([run_starts[1:], [len(traj)]])
    times = []
    for start, end in zip(run_starts, run_ends):
        hits = np.flatnonzero(inside[start:end])
        if hits.size:
            times.append(float(traj.t[start + hits[0]]))
    return times


def trial_summary(traj: Trajectory, goal_radius: float, n_minutes: int = 15) -> TrialSummary:
    """Goal count, inter-goal durations, and per-minute goal counts."""
    entries = goal_entry_times(traj, goal_radius)
    durations = []
    prev = 0.0
    for t in entries:
        durations.append(t - prev)
        prev = t
    per_minute = np.zeros(n_minutes, dtype=np.int64)
    for t in entries:
        per_minute[min(int(t // 60.0), n_minutes - 1)] += 1
    return TrialSummary(traj.trial_id, len(entries), durations, per_minute)


METRIC_CSV_HEADER = "trial_id,env,policy,metric,t,value"


def write_metrics_csv(path: str | Path, trajectories: Sequence[Trajectory],
                      kinds: Sequence[str] = METRIC_KINDS,
                      arena: Arena | None = None) -> None:
    buf = io.StringIO()
    buf.write(METRIC_CSV_HEADER + "\n")
    for traj in trajectories:
        for kind in kinds:
            series = compute_metric(traj, kind, arena)
            for t, v in zip(series.t, series.values):
                buf.write(f"{traj.trial_id},{traj.env_label},{traj.policy_label},"
                          f"{kind},{float(t)!r},{float(v)!r}\n")
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))
