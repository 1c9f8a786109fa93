"""Study orchestration: transfer matrices, gap reports, assays, trends, stability.

Every run is a pure function of (configs, seed): resampling statistics get
child streams keyed by fixed purposes, and reports serialize to canonical
JSON/CSV so reruns are byte-identical.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import DT, Arena, RngStream, Trajectory, agent_state
from .env import EnvConfig, GuppyEnv
from .metrics import METRIC_KINDS, compute_metric, trial_summary
from .models import FishModelSpec, MODEL_KINDS
from .rl import PolicySnapshot, evaluate, train
from .stats import (GapEstimate, VarianceRatioResult, bootstrap_ci, cliffs_delta,
                    gap_estimate, holm_correct, kruskal_wallis, minmax_normalize,
                    nb_regression, permutation_test, trial_level_gap, variance_ratio,
                    wasserstein1)


class ExperimentError(RuntimeError):
    pass


def canonical_json(data) -> str:
    """Deterministic JSON (sorted keys, repr floats, LF)."""
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def _write_text(path: str | Path, text: str) -> None:
    Path(path).write_bytes(text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Sim-to-sim transfer matrix


@dataclass(frozen=True)
class SimToSimMatrix:
    model_order: list[str]
    goals: dict[str, dict[str, np.ndarray]] = field(repr=False)  # [policy][rollout model]
    cells: dict[str, dict[str, dict]]  # bootstrap-median W1 vs the policy's diagonal
    planned_p: dict[str, dict[str, float]]  # Holm-adjusted, off-diagonal comparisons
    kruskal: dict[str, dict]

    def to_dict(self) -> dict:
        return {
            "model_order": self.model_order,
            "goals": {p: {m: list(map(float, v)) for m, v in row.items()}
                      for p, row in self.goals.items()},
            "cells": self.cells,
            "planned_p": self.planned_p,
            "kruskal": self.kruskal,
        }


def transfer_matrix_stats(goals: Mapping[str, Mapping[str, np.ndarray]],
                          model_order: Sequence[str], rng: RngStream,
                          n_boot: int = 5000, n_perm: int = 100_000) -> SimToSimMatrix:
    """Distributional statistics for an evaluated policy x rollout-model grid.

    Each cell compares that cell's goal counts against the policy's own
    diagonal cell: bootstrap-median W1 with percentile CI. Off-diagonal
    cells additionally get permutation p-values, Holm-corrected within the
    policy; each policy column gets a Kruskal-Wallis omnibus test.
    """
    order = list(model_order)
    cells: dict[str, dict[str, dict]] = {}
    planned: dict[str, dict[str, float]] = {}
    kruskal: dict[str, dict] = {}
    for i, policy_model in enumerate(order):
        policy = f"pi_{policy_model}"
        diag = np.asarray(goals[policy][policy_model], dtype=float)
        cells[policy] = {}
        raw_p: list[tuple[str, float]] = []
        for j, rollout_model in enumerate(order):
            sample = np.asarray(goals[policy][rollout_model], dtype=float)
            boot = bootstrap_ci(sample, diag, statistic=wasserstein1, n_boot=n_boot,
                                rng=rng.child(1000 + i * len(order) + j))
            cells[policy][rollout_model] = {
                "w_median": boot.median,
                "ci_low": boot.low,
                "ci_high": boot.high,
                "mean_goals": float(sample.mean()),
                "diagonal": rollout_model == policy_model,
            }
            if rollout_model != policy_model:
                p = permutation_test(sample, diag, n_perm=n_perm,
                                     rng=rng.child(2000 + i * len(order) + j))
                raw_p.append((rollout_model, p))
        adjusted = holm_correct([p for _, p in raw_p])
        planned[policy] = {model: adj for (model, _), adj in zip(raw_p, adjusted)}
        h, p_kw = kruskal_wallis([goals[policy][m] for m in order])
        kruskal[policy] = {"H": h, "p": p_kw}
    return SimToSimMatrix(order, {p: dict(row) for p, row in goals.items()},
                          cells, planned, kruskal)


def run_sim_to_sim(snapshots: Mapping[str, PolicySnapshot],
                   model_specs: Mapping[str, FishModelSpec],
                   env_config: EnvConfig, seed: int, n_episodes: int = 50,
                   workers: int = 16, n_boot: int = 5000,
                   n_perm: int = 100_000) -> SimToSimMatrix:
    """Evaluate every policy against every model, then run the matrix stats."""
    order = [k for k in MODEL_KINDS if k in model_specs]
    missing = [k for k in order if k not in snapshots]
    if missing:
        raise ExperimentError(f"missing snapshots for models: {missing}")
    root = RngStream(seed)
    goals: dict[str, dict[str, np.ndarray]] = {}
    for i, policy_model in enumerate(order):
        snap = snapshots[policy_model]
        row: dict[str, np.ndarray] = {}
        for j, rollout_model in enumerate(order):
            eval_seed = root.child(i * len(order) + j)
            _, counts = evaluate(snap, model_specs[rollout_model], n_episodes, env_config,
                                 seed=eval_seed.stream_id, keep_trajectories=False,
                                 workers=workers)
            row[rollout_model] = counts
        goals[snap.policy_label] = row
    return transfer_matrix_stats(goals, order, root.child(999_999),
                                 n_boot=n_boot, n_perm=n_perm)


def write_simtosim_csv(path: str | Path, matrix: SimToSimMatrix) -> None:
    buf = io.StringIO()
    buf.write("policy,rollout_model,w_median,ci_low,ci_high,mean_goals,diagonal,p_holm\n")
    for model in matrix.model_order:
        policy = f"pi_{model}"
        for rollout in matrix.model_order:
            cell = matrix.cells[policy][rollout]
            p = matrix.planned_p[policy].get(rollout, "")
            p_txt = repr(p) if p != "" else ""
            buf.write(f"{policy},{rollout},{cell['w_median']!r},{cell['ci_low']!r},"
                      f"{cell['ci_high']!r},{cell['mean_goals']!r},"
                      f"{int(cell['diagonal'])},{p_txt}\n")
    _write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# Approach assay


class StationaryModel:
    """Zero-velocity interaction partner (visible in observations)."""

    kind = "stationary"

    def step(self, own, neighbors, arena, rng=None, dt=DT):
        return 0.0, 0.0

    def step_many(self, owns, neighbor_lists, arena, rngs, dt=DT):
        return [(0.0, 0.0)] * len(owns)


@dataclass(frozen=True)
class ApproachResult:
    policy_label: str
    min_iid: float
    mean_iid: float
    fraction_closer_to_dummy: float
    t: np.ndarray = field(repr=False)
    iid: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"policy": self.policy_label, "min_iid": self.min_iid,
                "mean_iid": self.mean_iid,
                "fraction_closer_to_dummy": self.fraction_closer_to_dummy}


def run_approach_assay(policy, env_config: EnvConfig, seed: int,
                       duration_s: float = 120.0, policy_label: str = "") -> ApproachResult:
    """Stationary-dummy probe of a policy's attraction behavior.

    The robot starts in a corner facing the tank center; the dummy and the
    goal sit 30 cm from the walls, to the left and right of its heading.
    """
    if isinstance(policy, PolicySnapshot):
        policy_label = policy_label or policy.policy_label
        policy = policy.policy()
    arena = env_config.arena
    n_actions = int(round(duration_s))
    cfg = replace(env_config, episode_len_eval=n_actions)
    env = GuppyEnv(cfg, StationaryModel(), mode="eval", record=True)
    root = RngStream(seed)
    margin = env_config.eval_goal_margin
    robot = agent_state(0.15 * arena.width, 0.15 * arena.height, math.pi / 4)
    dummy = agent_state(margin, arena.height - margin, 0.0)  # left of the heading
    goal = (arena.width - margin, margin)  # right of the heading
    obs = env.reset(root.child(0), robot=robot, fish=dummy, goal=goal)
    act_rngs = [root.child(1)]
    obs_vec = obs.as_vector()[None, :]
    for _ in range(n_actions):
        actions, _, _ = policy.act(obs_vec, act_rngs, deterministic=True)
        res = env.step(float(actions[0]))
        obs_vec = res.observation.as_vector()[None, :]
    traj = env.trajectory("approach", policy_label=policy_label)
    iid = np.hypot(traj.robot[:, 0] - traj.fish[:, 0], traj.robot[:, 1] - traj.fish[:, 1])
    goal_dist = np.hypot(traj.robot[:, 0] - goal[0], traj.robot[:, 1] - goal[1])
    return ApproachResult(
        policy_label=policy_label or "policy",
        min_iid=float(iid.min()),
        mean_iid=float(iid.mean()),
        fraction_closer_to_dummy=float(np.mean(iid < goal_dist)),
        t=traj.t, iid=iid,
    )


def _env_config_dict(cfg: EnvConfig) -> dict:
    from dataclasses import asdict

    d = asdict(cfg)
    d["arena"] = cfg.arena
    return d


def write_approach_csv(path: str | Path, results: Sequence[ApproachResult]) -> None:
    buf = io.StringIO()
    buf.write("policy,t,iid\n")
    for res in results:
        for t, v in zip(res.t, res.iid):
            buf.write(f"{res.policy_label},{float(t)!r},{float(v)!r}\n")
    _write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# Temporal trend (per-minute goal counts)


def run_temporal_trend(trajectories: Sequence[Trajectory], goal_radius: float,
                       n_minutes: int = 15) -> list[dict]:
    """Negative binomial trend of per-minute goal counts, per policy and pooled.

    Groups trials by (env label, policy label); each group needs at least
    two trials (clusters). Emits one row per (env, policy) plus an
    all-policies "total" row per env.
    """
    groups: dict[tuple[str, str], list[Trajectory]] = {}
    for traj in trajectories:
        groups.setdefault((traj.env_label, traj.policy_label), []).append(traj)
    envs = sorted({env for env, _ in groups})
    rows = []
    for env_label in envs:
        pooled_counts, pooled_minutes, pooled_clusters = [], [], []
        policies = sorted(p for e, p in groups if e == env_label)
        per_policy_rows = []
        for policy in policies:
            counts, minutes, clusters = [], [], []
            for traj in groups[(env_label, policy)]:
                summary = trial_summary(traj, goal_radius, n_minutes)
                counts.extend(summary.goals_per_minute.tolist())
                minutes.extend(range(n_minutes))
                clusters.extend([f"{policy}:{traj.trial_id}"] * n_minutes)
            if len(set(clusters)) < 2:
                raise ExperimentError(
                    f"temporal trend needs >= 2 trials for ({env_label}, {policy})")
            res = nb_regression(counts, minutes, clusters)
            per_policy_rows.append({
                "env": env_label, "policy": policy, "rate_ratio": res.rate_ratio,
                "ci_low": res.ci_low, "ci_high": res.ci_high, "p_value": res.p_value,
                "dispersion": res.dispersion, "n_clusters": res.n_clusters,
            })
            pooled_counts.extend(counts)
            pooled_minutes.extend(minutes)
            pooled_clusters.extend(clusters)
        pooled = nb_regression(pooled_counts, pooled_minutes, pooled_clusters)
        rows.append({
            "env": env_label, "policy": "total", "rate_ratio": pooled.rate_ratio,
            "ci_low": pooled.ci_low, "ci_high": pooled.ci_high, "p_value": pooled.p_value,
            "dispersion": pooled.dispersion, "n_clusters": pooled.n_clusters,
        })
        rows.extend(per_policy_rows)
    return rows


def write_temporal_csv(path: str | Path, rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    buf.write("env,policy,rate_ratio,ci_low,ci_high,p_value,dispersion,n_clusters\n")
    for r in rows:
        disp = r["dispersion"]
        disp_txt = "inf" if math.isinf(disp) else repr(disp)
        buf.write(f"{r['env']},{r['policy']},{r['rate_ratio']!r},{r['ci_low']!r},"
                  f"{r['ci_high']!r},{r['p_value']!r},{disp_txt},{r['n_clusters']}\n")
    _write_text(path, buf.getvalue())


def write_minute_means_csv(path: str | Path, trajectories: Sequence[Trajectory],
                           goal_radius: float, n_minutes: int = 15) -> None:
    """Per-minute mean and std of goals across trials, per (policy, env)."""
    groups: dict[tuple[str, str], list[np.ndarray]] = {}
    for traj in trajectories:
        summary = trial_summary(traj, goal_radius, n_minutes)
        groups.setdefault((traj.policy_label, traj.env_label), []).append(
            summary.goals_per_minute)
    buf = io.StringIO()
    buf.write("policy,env,minute,mean_goals,std_goals,n_trials\n")
    for (policy, env_label) in sorted(groups):
        counts = np.stack(groups[(policy, env_label)])
        for minute in range(n_minutes):
            col = counts[:, minute]
            buf.write(f"{policy},{env_label},{minute},{col.mean()!r},"
                      f"{col.std(ddof=0)!r},{len(col)}\n")
    _write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# Seed stability


def run_seed_stability(model_specs: Mapping[str, FishModelSpec], env_config: EnvConfig,
                       ppo_config, base_seed: int, seeds_per_model: int = 6,
                       eval_episodes: int = 50, workers: int = 16,
                       log_callback=None) -> tuple[VarianceRatioResult, dict]:
    """Retrain each policy with independent seeds; decompose score variance.

    Policies are evaluated on their own training model; the variance ratio
    compares between-model spread of mean goals against within-model
    (seed-to-seed) spread.
    """
    episode_scores: dict[str, list[np.ndarray]] = {}
    seeds_used: dict[str, list[int]] = {}
    for m_idx, (label, spec) in enumerate(model_specs.items()):
        per_policy = []
        seeds = []
        for k in range(seeds_per_model):
            seed = base_seed + 7919 * m_idx + k
            snap = train(spec, env_config, ppo_config, seed=seed, workers=workers)
            _, goals = evaluate(snap, spec, eval_episodes, env_config,
                                seed=base_seed + 104729 + 31 * m_idx + k,
                                keep_trajectories=False, workers=workers)
            per_policy.append(goals)
            seeds.append(seed)
            if log_callback is not None:
                log_callback({"model": label, "seed": seed,
                              "mean_goals": float(goals.mean())})
        episode_scores[label] = per_policy
        seeds_used[label] = seeds
    result = variance_ratio(episode_scores, rng=RngStream(base_seed, 777))
    meta = {
        "seeds": seeds_used,
        "policy_means": {m: [float(v) for v in result.policy_means[m]]
                         for m in result.policy_means},
    }
    return result, meta


# ---------------------------------------------------------------------------
# Gap report (policy x metric)


@dataclass(frozen=True)
class GapReport:
    policies: list[str]
    metric_kinds: list[str]
    goals: dict[str, GapEstimate]
    goals_by_trial: dict[str, dict[str, list]]  # [policy][side] -> (trial_id, count) pairs
    per_metric: dict[str, dict[str, dict]]  # [metric][policy] -> estimates + rank
    mean_rank: dict[str, float]
    normalization: dict[str, tuple[float, float]]

    def to_dict(self) -> dict:
        return {
            "policies": self.policies,
            "metric_kinds": self.metric_kinds,
            "goals": {p: {"w_obs": g.w_obs, "ci_low": g.ci_low, "ci_high": g.ci_high,
                          "p_value": g.p_value, "cliffs_delta": g.cliffs,
                          "cliffs_label": g.cliffs_label, "n_sim": g.n_x, "n_ref": g.n_y}
                      for p, g in self.goals.items()},
            "per_metric": self.per_metric,
            "mean_rank": self.mean_rank,
            "normalization": {k: list(v) for k, v in self.normalization.items()},
        }


def _ranks_with_ci_tiebreak(estimates: dict[str, dict]) -> dict[str, int]:
    """Rank 1 = smallest gap; ties broken by narrower CI, then policy name."""
    keys = sorted(estimates,
                  key=lambda p: (estimates[p]["raw"],
                                 estimates[p]["ci_high"] - estimates[p]["ci_low"], p))
    return {p: i + 1 for i, p in enumerate(keys)}


def build_gap_report(sim_by_policy: Mapping[str, Sequence[Trajectory]],
                     ref_by_policy: Mapping[str, Sequence[Trajectory]],
                     rng: RngStream, goal_radius: float = 5.0,
                     metric_kinds: Sequence[str] = METRIC_KINDS,
                     arena: Arena | None = None, n_boot: int = 5000,
                     n_perm: int = 100_000) -> GapReport:
    """Per-policy, per-metric distributional gaps between two trajectory sets.

    Goals reached are compared at trial level (bootstrap CI, permutation
    test, Cliff's delta); per-frame metrics go through the pairwise
    trial-level W1 median with a two-way cluster bootstrap. Point estimates
    are min-max normalized within each metric and ranked (1 = smallest).
    """
    policies = sorted(sim_by_policy)
    if not policies:
        raise ExperimentError("gap report needs at least one policy group")
    for p in policies:
        if p not in ref_by_policy:
            raise ExperimentError(f"reference trajectories missing for policy {p!r}")
        if not sim_by_policy[p] or not ref_by_policy[p]:
            raise ExperimentError(f"empty trajectory set for policy {p!r}")

    goals: dict[str, GapEstimate] = {}
    goals_by_trial: dict[str, dict[str, list]] = {}
    for i, p in enumerate(policies):
        sim_counts = [(t.trial_id, trial_summary(t, goal_radius).n_goals)
                      for t in sim_by_policy[p]]
        ref_counts = [(t.trial_id, trial_summary(t, goal_radius).n_goals)
                      for t in ref_by_policy[p]]
        goals_by_trial[p] = {"sim": sim_counts, "ref": ref_counts}
        goals[p] = gap_estimate([c for _, c in sim_counts], [c for _, c in ref_counts],
                                rng=rng.child(i), n_boot=n_boot, n_perm=n_perm)

    per_metric: dict[str, dict[str, dict]] = {}
    for k_idx, kind in enumerate(metric_kinds):
        estimates: dict[str, dict] = {}
        for p_idx, p in enumerate(policies):
            sim_series = [compute_metric(t, kind, arena).values for t in sim_by_policy[p]]
            ref_series = [compute_metric(t, kind, arena).values for t in ref_by_policy[p]]
            gap = trial_level_gap(sim_series, ref_series,
                                  rng=rng.child(10_000 + k_idx * 100 + p_idx),
                                  n_boot=n_boot)
            estimates[p] = {"raw": gap.median, "ci_low": gap.ci_low,
                            "ci_high": gap.ci_high}
        normalized = minmax_normalize([estimates[p]["raw"] for p in policies])
        ranks = _ranks_with_ci_tiebreak(estimates)
        for p, norm in zip(policies, normalized):
            estimates[p]["normalized"] = float(norm)
            estimates[p]["rank"] = ranks[p]
        per_metric[kind] = estimates

    mean_rank = {p: float(np.mean([per_metric[k][p]["rank"] for k in metric_kinds]))
                 for p in policies}
    normalization = {
        kind: (min(per_metric[kind][p]["raw"] for p in policies),
               max(per_metric[kind][p]["raw"] for p in policies))
        for kind in metric_kinds}
    return GapReport(policies, list(metric_kinds), goals, goals_by_trial, per_metric,
                     mean_rank, normalization)


def write_goals_csv(path: str | Path, report: GapReport) -> None:
    """Per-trial goal counts for both sides (histogram input)."""
    buf = io.StringIO()
    buf.write("policy,side,trial_id,n_goals\n")
    for p in report.policies:
        for side in ("sim", "ref"):
            for trial_id, count in report.goals_by_trial[p][side]:
                buf.write(f"{p},{side},{trial_id},{count}\n")
    _write_text(path, buf.getvalue())


def write_heatmap_csv(path: str | Path, report: GapReport) -> None:
    """Annotated heatmap cells: raw/normalized gap, CI, and rank per cell."""
    buf = io.StringIO()
    buf.write("policy,metric,gap_raw,gap_normalized,ci_low,ci_high,rank\n")
    for kind in report.metric_kinds:
        for p in report.policies:
            cell = report.per_metric[kind][p]
            buf.write(f"{p},{kind},{cell['raw']!r},{cell['normalized']!r},"
                      f"{cell['ci_low']!r},{cell['ci_high']!r},{cell['rank']}\n")
    _write_text(path, buf.getvalue())
