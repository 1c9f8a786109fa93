"""PPO trainer with a Gaussian-policy MLP, GAE, and rollout evaluation.

The network is float64 numpy with hand-written backward passes (gradients
are checked against finite differences in the test suite), so training and
evaluation replay bit-identically for a fixed seed and worker count.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import RngStream, Trajectory
from .env import OBS_DIM, EnvConfig, GuppyEnv, VectorEnv
from .models import FishModelSpec, build_model
from .nets import RMSProp, init_dense

LOG_2PI = math.log(2.0 * math.pi)


class RLError(RuntimeError):
    pass


@dataclass(frozen=True)
class PPOConfig:
    learning_rate: float = 0.00026
    batch_size: int = 8192
    minibatch_size: int = 512
    epochs: int = 100
    gamma: float = 0.9453
    gae_lambda: float = 0.9652
    entropy_coef: float = 0.0
    vf_coef: float = 1.0
    clip_epsilon: float = 0.1112
    total_env_steps: int = 832_300
    hidden: tuple[int, int] = (128, 128)
    normalize_advantages: bool = True  # not pinned upstream; documented default
    grad_clip: float = 0.0  # global-norm clip, 0 disables

    def __post_init__(self):
        if self.batch_size % self.minibatch_size != 0:
            raise RLError("minibatch_size must divide batch_size")
        if not (0 < self.gamma < 1 and 0 < self.gae_lambda < 1):
            raise RLError("gamma and gae_lambda must lie in (0, 1)")
        if self.clip_epsilon <= 0:
            raise RLError("clip_epsilon must be positive")


class MlpPolicy:
    """tanh trunk with a Gaussian action head and a value head.

    The action mean and value share the trunk; log-std is a single
    state-independent learnable parameter.
    """

    def __init__(self, obs_dim: int = OBS_DIM, hidden: tuple[int, int] = (128, 128),
                 rng: RngStream | None = None, weights: np.ndarray | None = None):
        self.obs_dim = obs_dim
        self.hidden = tuple(hidden)
        h1, h2 = self.hidden
        self._shapes = [(obs_dim, h1), (h1,), (h1, h2), (h2,),
                        (h2,), (1,), (h2,), (1,), (1,)]
        n = sum(int(np.prod(s)) for s in self._shapes)
        if weights is not None:
            if weights.size != n:
                raise RLError(f"weight vector has {weights.size} entries, expected {n}")
            self.weights = weights.astype(float).copy()
        else:
            if rng is None:
                rng = RngStream(0)
            blocks = [
                init_dense(rng, obs_dim, h1), np.zeros(h1),
                init_dense(rng, h1, h2), np.zeros(h2),
                init_dense(rng, h2, 1, scale=0.01), np.zeros(1),  # action mean head
                init_dense(rng, h2, 1), np.zeros(1),  # value head
                np.zeros(1),  # log-std
            ]
            self.weights = np.concatenate(blocks)
        self._views = []
        offset = 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            self._views.append(self.weights[offset:offset + size].reshape(shape))
            offset += size

    @property
    def n_weights(self) -> int:
        return self.weights.size

    def unpack(self):
        return self._views

    def forward(self, obs: np.ndarray):
        w1, b1, w2, b2, wm, bm, wv, bv, log_std = self._views
        z1 = obs @ w1 + b1
        h1 = np.tanh(z1)
        z2 = h1 @ w2 + b2
        h2 = np.tanh(z2)
        mean = h2 @ wm + bm[0]
        value = h2 @ wv + bv[0]
        return mean, value, float(log_std[0]), (h1, h2)

    def act(self, obs: np.ndarray, rngs: Sequence[RngStream] | None = None,
            deterministic: bool = False):
        """Actions, log-probs, values for a batch of observations.

        Sampled noise comes from each row's own stream so results do not
        depend on how rollouts are batched.
        """
        obs = np.atleast_2d(obs)
        mean, value, log_std, _ = self.forward(obs)
        sigma = math.exp(log_std)
        if deterministic:
            actions = mean.copy()
        else:
            if rngs is None or len(rngs) != obs.shape[0]:
                raise RLError("sampling requires one rng stream per observation row")
            noise = np.array([r.normal() for r in rngs])
            actions = mean + sigma * noise
        z = (actions - mean) / sigma
        log_probs = -0.5 * z * z - log_std - 0.5 * LOG_2PI
        return actions, log_probs, value

    def value(self, obs: np.ndarray) -> np.ndarray:
        _, value, _, _ = self.forward(np.atleast_2d(obs))
        return value

    def clone(self) -> "MlpPolicy":
        return MlpPolicy(self.obs_dim, self.hidden, weights=self.weights)


class RandomPolicy:
    """Uniform turn commands; the no-learning baseline."""

    def __init__(self, low: float = -math.pi, high: float = math.pi):
        self.low = low
        self.high = high

    def act(self, obs: np.ndarray, rngs: Sequence[RngStream] | None = None,
            deterministic: bool = False):
        obs = np.atleast_2d(obs)
        n = obs.shape[0]
        if deterministic or rngs is None:
            actions = np.zeros(n)
        else:
            actions = np.array([r.uniform(self.low, self.high) for r in rngs])
        logp = np.full(n, -math.log(self.high - self.low))
        return actions, logp, np.zeros(n)


# ---------------------------------------------------------------------------
# GAE


def gae_advantages(rewards, values, dones, gamma: float, lam: float):
    """Generalized advantage estimation over a (possibly multi-episode) batch.

    `values` carries one extra trailing entry: the bootstrap value of the
    state after the final row (ignored when that row is terminal). Returns
    (advantages, returns) with returns = advantages + values[:-1].
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    n = rewards.size
    if values.size != n + 1 or dones.size != n:
        raise RLError(f"gae_advantages length mismatch: rewards={n}, values={values.size} "
                      f"(need {n + 1}), dones={dones.size}")
    advantages = np.empty(n)
    gae = 0.0
    for t in range(n - 1, -1, -1):
        not_done = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * values[t + 1] * not_done - values[t]
        gae = delta + gamma * lam * not_done * gae
        advantages[t] = gae
    return advantages, advantages + values[:-1]


# ---------------------------------------------------------------------------
# Rollout buffer


class RolloutBuffer:
    def __init__(self, capacity: int, obs_dim: int):
        self.capacity = capacity
        self.obs = np.empty((capacity, obs_dim))
        self.actions = np.empty(capacity)
        self.log_probs = np.empty(capacity)
        self.rewards = np.empty(capacity)
        self.values = np.empty(capacity)
        self.dones = np.empty(capacity, dtype=bool)
        self.bootstrap_value = 0.0
        self.size = 0

    def is_full(self) -> bool:
        return self.size >= self.capacity

    def clear(self) -> None:
        self.size = 0
        self.bootstrap_value = 0.0

    def add_rows(self, obs, actions, log_probs, rewards, values, dones) -> int:
        """Append rows, truncating at capacity; returns rows actually stored."""
        n = min(len(rewards), self.capacity - self.size)
        s = self.size
        self.obs[s:s + n] = obs[:n]
        self.actions[s:s + n] = actions[:n]
        self.log_probs[s:s + n] = log_probs[:n]
        self.rewards[s:s + n] = rewards[:n]
        self.values[s:s + n] = values[:n]
        self.dones[s:s + n] = dones[:n]
        self.size += n
        return n

    def compute_advantages(self, gamma: float, lam: float, normalize: bool):
        values_ext = np.concatenate([self.values[:self.size], [self.bootstrap_value]])
        adv, ret = gae_advantages(self.rewards[:self.size], values_ext,
                                  self.dones[:self.size], gamma, lam)
        if normalize:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        return adv, ret


# ---------------------------------------------------------------------------
# PPO update


def ppo_surrogate(ratio: np.ndarray, advantages: np.ndarray, eps: float) -> np.ndarray:
    """Per-sample clipped surrogate min(r*A, clip(r, 1-eps, 1+eps)*A)."""
    return np.minimum(ratio * advantages, np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantages)


def _loss_and_grad(policy: MlpPolicy, obs, actions, logp_old, advantages, returns,
                   config: PPOConfig):
    w1, b1, w2, b2, wm, bm, wv, bv, log_std_arr = policy.unpack()
    n = obs.shape[0]
    z1 = obs @ w1 + b1
    h1 = np.tanh(z1)
    z2 = h1 @ w2 + b2
    h2 = np.tanh(z2)
    mean = h2 @ wm + bm[0]
    value = h2 @ wv + bv[0]
    log_std = float(log_std_arr[0])
    sigma = math.exp(log_std)

    z = (actions - mean) / sigma
    logp = -0.5 * z * z - log_std - 0.5 * LOG_2PI
    ratio = np.exp(logp - logp_old)
    clipped = np.clip(ratio, 1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon)
    surr_unclipped = ratio * advantages
    surr_clipped = clipped * advantages
    use_unclipped = surr_unclipped <= surr_clipped
    policy_loss = -float(np.mean(np.minimum(surr_unclipped, surr_clipped)))
    value_err = value - returns
    value_loss = float(np.mean(value_err ** 2))
    entropy = 0.5 * (1.0 + LOG_2PI) + log_std
    loss = policy_loss + config.vf_coef * value_loss - config.entropy_coef * entropy

    # d(policy_loss)/d(logp): only where the unclipped branch is active
    g_logp = np.where(use_unclipped, -surr_unclipped, 0.0) / n
    d_mean = g_logp * (z / sigma)  # dlogp/dmean = z/sigma
    d_log_std = float(np.sum(g_logp * (z * z - 1.0))) - config.entropy_coef
    d_value = config.vf_coef * 2.0 * value_err / n

    d_wm = h2.T @ d_mean
    d_bm = np.array([d_mean.sum()])
    d_wv = h2.T @ d_value
    d_bv = np.array([d_value.sum()])
    d_h2 = np.outer(d_mean, wm) + np.outer(d_value, wv)
    d_z2 = d_h2 * (1.0 - h2 * h2)
    d_w2 = h1.T @ d_z2
    d_b2 = d_z2.sum(axis=0)
    d_h1 = d_z2 @ w2.T
    d_z1 = d_h1 * (1.0 - h1 * h1)
    d_w1 = obs.T @ d_z1
    d_b1 = d_z1.sum(axis=0)
    grad = np.concatenate([d_w1.ravel(), d_b1, d_w2.ravel(), d_b2,
                           d_wm, d_bm, d_wv, d_bv, [d_log_std]])
    stats = {"loss": loss, "policy_loss": policy_loss, "value_loss": value_loss,
             "entropy": entropy,
             "clip_fraction": float(np.mean(~use_unclipped))}
    return loss, grad, stats


def ppo_update(policy: MlpPolicy, buffer: RolloutBuffer, config: PPOConfig,
               rng: RngStream, optimizer: RMSProp | None = None) -> dict:
    """Runs `epochs` shuffled minibatch passes of the clipped objective."""
    if not buffer.is_full():
        raise RLError(f"buffer holds {buffer.size}/{buffer.capacity} steps; fill it first")
    if optimizer is None:
        optimizer = RMSProp(policy.n_weights, lr=config.learning_rate)
    advantages, returns = buffer.compute_advantages(config.gamma, config.gae_lambda,
                                                    config.normalize_advantages)
    n = buffer.size
    obs = buffer.obs[:n]
    actions = buffer.actions[:n]
    logp_old = buffer.log_probs[:n]
    totals = {"loss": 0.0, "policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
              "clip_fraction": 0.0}
    count = 0
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = perm[start:start + config.minibatch_size]
            loss, grad, stats = _loss_and_grad(
                policy, obs[idx], actions[idx], logp_old[idx],
                advantages[idx], returns[idx], config)
            if not math.isfinite(loss):
                raise RLError(
                    f"non-finite loss {loss} (policy={stats['policy_loss']}, "
                    f"value={stats['value_loss']}, minibatch={count}); aborting update")
            if config.grad_clip > 0.0:
                norm = float(np.linalg.norm(grad))
                if norm > config.grad_clip:
                    grad = grad * (config.grad_clip / norm)
            optimizer.step(policy.weights, grad)
            for key in totals:
                totals[key] += stats[key]
            count += 1
    return {key: val / count for key, val in totals.items()}


# ---------------------------------------------------------------------------
# Snapshots

_SNAPSHOT_MAGIC = b"SHOALGAP-SNAPSHOT-v1\n"


@dataclass(frozen=True)
class PolicySnapshot:
    weights: np.ndarray = field(repr=False)
    obs_dim: int
    hidden: tuple[int, int]
    ppo_config: PPOConfig
    model_label: str
    seed: int
    env_steps: int
    training_log: list[dict] = field(default_factory=list, repr=False)

    @property
    def policy_label(self) -> str:
        return f"pi_{self.model_label}"

    def policy(self) -> MlpPolicy:
        return MlpPolicy(self.obs_dim, self.hidden, weights=self.weights)


def save_snapshot(path: str | Path, snap: PolicySnapshot) -> None:
    header = {
        "obs_dim": snap.obs_dim, "hidden": list(snap.hidden),
        "ppo_config": asdict(snap.ppo_config),
        "model_label": snap.model_label, "seed": snap.seed,
        "env_steps": snap.env_steps, "training_log": snap.training_log,
        "n_weights": int(snap.weights.size),
    }
    blob = _SNAPSHOT_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" \
        + np.ascontiguousarray(snap.weights, dtype="<f8").tobytes()
    Path(path).write_bytes(blob)


def load_snapshot(path: str | Path) -> PolicySnapshot:
    blob = Path(path).read_bytes()
    if not blob.startswith(_SNAPSHOT_MAGIC):
        raise RLError(f"{path}: not a policy snapshot file")
    rest = blob[len(_SNAPSHOT_MAGIC):]
    newline = rest.index(b"\n")
    header = json.loads(rest[:newline])
    weights = np.frombuffer(rest[newline + 1:], dtype="<f8").copy()
    if weights.size != header["n_weights"]:
        raise RLError(f"{path}: truncated weight payload")
    cfg_dict = dict(header["ppo_config"])
    cfg_dict["hidden"] = tuple(cfg_dict["hidden"])
    return PolicySnapshot(
        weights=weights, obs_dim=header["obs_dim"], hidden=tuple(header["hidden"]),
        ppo_config=PPOConfig(**cfg_dict), model_label=header["model_label"],
        seed=header["seed"], env_steps=header["env_steps"],
        training_log=header["training_log"],
    )


# ---------------------------------------------------------------------------
# Training loop

# Fixed purposes for deriving child streams from the run seed.
_STREAM_POLICY_INIT = 0
_STREAM_EPISODE_ENV = 1
_STREAM_ACTION_NOISE = 2
_STREAM_SHUFFLE = 3


def _collect_batch(policy: MlpPolicy, model, env_config: EnvConfig, config: PPOConfig,
                   root: RngStream, episode_base: int, workers: int,
                   buffer: RolloutBuffer) -> dict:
    """Fill the buffer with whole 41-step episodes in global episode order.

    Episode k always uses env stream child(k) and action stream child(k),
    so the filled buffer is identical for any worker count.
    """
    steps_per_ep = env_config.episode_len_train
    n_episodes = math.ceil(config.batch_size / steps_per_ep)
    env_stream = root.child(_STREAM_EPISODE_ENV)
    act_stream = root.child(_STREAM_ACTION_NOISE)
    buffer.clear()
    episode_rewards = []
    episode_entries = []
    done_eps = 0
    pending_bootstrap = None
    while done_eps < n_episodes:
        m = min(workers, n_episodes - done_eps)
        ep_ids = [episode_base + done_eps + j for j in range(m)]
        envs = [GuppyEnv(env_config, model, mode="train") for _ in range(m)]
        obs_now = np.stack([env.reset(env_stream.child(k)).as_vector()
                            for env, k in zip(envs, ep_ids)])
        act_rngs = [act_stream.child(k) for k in ep_ids]
        vec = VectorEnv(envs)
        ep_obs = np.empty((m, steps_per_ep, policy.obs_dim))
        ep_act = np.empty((m, steps_per_ep))
        ep_logp = np.empty((m, steps_per_ep))
        ep_rew = np.empty((m, steps_per_ep))
        ep_val = np.empty((m, steps_per_ep))
        for t in range(steps_per_ep):
            actions, log_probs, values = policy.act(obs_now, act_rngs)
            results = vec.step(actions)
            ep_obs[:, t] = obs_now
            ep_act[:, t] = actions
            ep_logp[:, t] = log_probs
            ep_val[:, t] = values
            ep_rew[:, t] = [r.reward for r in results]
            obs_now = np.stack([r.observation.as_vector() for r in results])
        dones = np.zeros(steps_per_ep, dtype=bool)
        dones[-1] = True
        for j in range(m):
            stored = buffer.add_rows(ep_obs[j], ep_act[j], ep_logp[j], ep_rew[j],
                                     ep_val[j], dones)
            if 0 < stored < steps_per_ep:
                # batch boundary truncated this episode mid-way: bootstrap
                # from the value of the observation it would see next
                pending_bootstrap = float(policy.value(ep_obs[j][stored:stored + 1])[0])
            episode_rewards.append(float(ep_rew[j].sum()))
            episode_entries.append(envs[j].total_entries)
        done_eps += m
    buffer.bootstrap_value = 0.0 if buffer.dones[buffer.size - 1] else (pending_bootstrap or 0.0)
    return {"episode_rewards": episode_rewards, "episode_entries": episode_entries}


def train(model_spec: FishModelSpec, env_config: EnvConfig, ppo_config: PPOConfig,
          seed: int, workers: int = 8, log_callback=None) -> PolicySnapshot:
    """Full PPO training against one fish model; returns a labeled snapshot."""
    root = RngStream(seed)
    model = build_model(model_spec)
    policy = MlpPolicy(OBS_DIM, ppo_config.hidden, rng=root.child(_STREAM_POLICY_INIT))
    optimizer = RMSProp(policy.n_weights, lr=ppo_config.learning_rate)
    shuffle_rng = root.child(_STREAM_SHUFFLE)
    buffer = RolloutBuffer(ppo_config.batch_size, OBS_DIM)
    steps_per_ep = env_config.episode_len_train
    episodes_per_batch = math.ceil(ppo_config.batch_size / steps_per_ep)
    env_steps = 0
    episode_base = 0
    update_idx = 0
    log: list[dict] = []
    while env_steps < ppo_config.total_env_steps:
        info = _collect_batch(policy, model, env_config, ppo_config, root,
                              episode_base, workers, buffer)
        episode_base += episodes_per_batch
        stats = ppo_update(policy, buffer, ppo_config, shuffle_rng.child(update_idx),
                           optimizer)
        env_steps += ppo_config.batch_size
        update_idx += 1
        row = {
            "update": update_idx,
            "env_steps": env_steps,
            "mean_episode_reward": float(np.mean(info["episode_rewards"])),
            "mean_episode_entries": float(np.mean(info["episode_entries"])),
            "policy_loss": stats["policy_loss"],
            "value_loss": stats["value_loss"],
            "clip_fraction": stats["clip_fraction"],
        }
        log.append(row)
        if log_callback is not None:
            log_callback(row)
    return PolicySnapshot(
        weights=policy.weights.copy(), obs_dim=OBS_DIM, hidden=tuple(ppo_config.hidden),
        ppo_config=ppo_config, model_label=model_spec.kind, seed=seed,
        env_steps=env_steps, training_log=log,
    )


# ---------------------------------------------------------------------------
# Evaluation rollouts


def evaluate(policy, model_spec: FishModelSpec, n_episodes: int, env_config: EnvConfig,
             seed: int, deterministic: bool = True, keep_trajectories: bool = True,
             policy_label: str = "", env_label: str = "sim",
             workers: int = 16) -> tuple[list[Trajectory], np.ndarray]:
    """15-minute evaluation episodes; returns (trajectories, goals per episode)."""
    if isinstance(policy, PolicySnapshot):
        policy_label = policy_label or policy.policy_label
        policy = policy.policy()
    if getattr(policy, "obs_dim", OBS_DIM) != OBS_DIM:
        raise RLError(f"policy expects obs_dim={policy.obs_dim}, environment provides {OBS_DIM}")
    model = build_model(model_spec)
    root = RngStream(seed)
    env_stream = root.child(_STREAM_EPISODE_ENV)
    act_stream = root.child(_STREAM_ACTION_NOISE)
    goals = np.zeros(n_episodes)
    trajectories: list[Trajectory] = []
    done = 0
    while done < n_episodes:
        m = min(workers, n_episodes - done)
        ep_ids = list(range(done, done + m))
        envs = [GuppyEnv(env_config, model, mode="eval", record=keep_trajectories)
                for _ in range(m)]
        obs_now = np.stack([env.reset(env_stream.child(k)).as_vector()
                            for env, k in zip(envs, ep_ids)])
        act_rngs = [act_stream.child(k) for k in ep_ids]
        vec = VectorEnv(envs)
        for _ in range(env_config.episode_len_eval):
            actions, _, _ = policy.act(obs_now, act_rngs, deterministic=deterministic)
            results = vec.step(actions)
            obs_now = np.stack([r.observation.as_vector() for r in results])
        for j, env in enumerate(envs):
            goals[done + j] = env.total_entries
            if keep_trajectories:
                trajectories.append(env.trajectory(
                    trial_id=f"{policy_label or 'policy'}-{done + j:03d}",
                    env_label=env_label, policy_label=policy_label))
        done += m
    return trajectories, goals
