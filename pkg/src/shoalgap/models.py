"""Fish behavior models behind one interchangeable step interface.

Four models map (own state, neighbor states, arena) to the next commanded
(v, omega): a constant-speed follower, a concentric-zones rule model, a
variable-speed force model, and a convolutional agent over an egocentric
view trained by behavioral cloning. Swapping models never requires
environment changes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (DT, AgentState, Arena, Pose, RngStream, Trajectory, agent_state,
                   raycast_fan, step_kinematics, wrap_angle)
from .nets import RMSProp, init_dense, leaky_relu, leaky_relu_grad, softmax

TWO_PI = 2.0 * math.pi

MODEL_KINDS = ("follow", "zone", "force", "convnet")


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Parameter blocks


@dataclass(frozen=True)
class FollowParams:
    speed: float = 6.30  # cm/s, matches the zone model so baselines differ in rules only
    max_omega: float = 10.0  # rad/s


@dataclass(frozen=True)
class ZoneParams:
    r_repulsion: float = 2.0
    r_orientation: float = 6.0
    r_attraction: float = 10.0
    speed: float = 6.30  # cm/s, constant
    field_of_view: float = TWO_PI
    turn_noise: float = 0.2  # rad std per substep on the desired turn
    max_omega: float = 10.0  # rad/s
    smoothing: float = 1.0  # fraction of desired turn applied; 1 = full turn
    wall_repulsion_radius: float = 8.39
    wall_reaction_angle: float = 1.88  # rad, half-angle of the "heading away" cone
    wall_repulsion_strength: float = 40.51

    def __post_init__(self):
        if not (0 < self.r_repulsion < self.r_orientation < self.r_attraction):
            raise ModelError("zone radii must satisfy 0 < repulsion < orientation < attraction")
        if self.speed <= 0 or self.max_omega <= 0:
            raise ModelError("zone speed and max_omega must be positive")


@dataclass(frozen=True)
class ForceParams:
    # social interaction
    interaction_range: float = 15.0
    r_d: float = 5.0  # preferred inter-individual distance, cm
    mu_alg: float = 0.1
    mu_d: float = 0.3
    m_d: float = 0.2
    # individual motion; speeds in cm per substep, rates per substep
    v0: float = 0.2
    beta: float = 0.5
    alpha: float = 1.0
    d_phi: float = 0.3
    d_v: float = 0.2
    # wall interaction
    wall_angle_outward: float = -0.7
    wall_angle_perp: float = 0.3
    wall_attraction: float = 0.3
    wall_repulsion_range: float = 11.0
    wall_repulsion_strength: float = 0.7

    def __post_init__(self):
        if self.interaction_range <= 0 or self.r_d <= 0 or self.wall_repulsion_range <= 0:
            raise ModelError("force model ranges must be positive")
        if self.v0 <= 0 or not (0 < self.beta <= 1):
            raise ModelError("force model needs v0 > 0 and beta in (0, 1]")


@dataclass(frozen=True)
class ConvNetParams:
    n_wall_rays: int = 36
    n_sectors: int = 36
    conv_kernel: int = 5
    conv_channels: int = 16
    hidden: tuple[int, int] = (128, 64)
    n_speed_bins: int = 8
    speed_max: float = 10.0  # cm/s grid upper edge
    n_turn_bins: int = 17
    turn_max: float = 10.0  # rad/s, grid spans [-turn_max, turn_max]
    weights: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def input_len(self) -> int:
        return self.n_wall_rays + 2 * self.n_sectors

    @property
    def n_actions(self) -> int:
        return self.n_speed_bins * self.n_turn_bins

    def layer_shapes(self) -> list[tuple[int, ...]]:
        h1, h2 = self.hidden
        flat = self.input_len * self.conv_channels
        return [
            (self.conv_kernel, self.conv_channels), (self.conv_channels,),
            (flat, h1), (h1,),
            (h1, h2), (h2,),
            (h2, self.n_actions), (self.n_actions,),
        ]

    @property
    def n_weights(self) -> int:
        return sum(int(np.prod(s)) for s in self.layer_shapes())

    def unpack(self) -> list[np.ndarray]:
        if self.weights is None:
            raise ModelError("conv agent has no weights; initialize or load them first")
        if self.weights.size != self.n_weights:
            raise ModelError(f"weight vector length {self.weights.size} does not match "
                             f"architecture ({self.n_weights} expected)")
        views, offset = [], 0
        for shape in self.layer_shapes():
            size = int(np.prod(shape))
            views.append(self.weights[offset:offset + size].reshape(shape))
            offset += size
        return views


def init_convnet_weights(params: ConvNetParams, rng: RngStream) -> ConvNetParams:
    blocks = []
    for shape in params.layer_shapes():
        if len(shape) == 1:
            blocks.append(np.zeros(shape[0]))
        else:
            blocks.append(init_dense(rng, shape[0], shape[1]))
    return replace(params, weights=np.concatenate(blocks))


@dataclass(frozen=True)
class FishModelSpec:
    """Tagged union selecting one behavior model and its parameters."""

    kind: str
    params: FollowParams | ZoneParams | ForceParams | ConvNetParams
    noise_stream: RngStream = field(default_factory=lambda: RngStream(0), compare=False)

    _EXPECTED = {"follow": FollowParams, "zone": ZoneParams, "force": ForceParams,
                 "convnet": ConvNetParams}

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}, expected one of {MODEL_KINDS}")
        expected = self._EXPECTED[self.kind]
        if not isinstance(self.params, expected):
            raise ModelError(f"model kind {self.kind!r} requires {expected.__name__}, "
                             f"got {type(self.params).__name__}")


def follow_spec(params: FollowParams | None = None) -> FishModelSpec:
    return FishModelSpec("follow", params or FollowParams())


def zone_spec(params: ZoneParams | None = None) -> FishModelSpec:
    return FishModelSpec("zone", params or ZoneParams())


def force_spec(params: ForceParams | None = None) -> FishModelSpec:
    return FishModelSpec("force", params or ForceParams())


def convnet_spec(params: ConvNetParams) -> FishModelSpec:
    return FishModelSpec("convnet", params)


# ---------------------------------------------------------------------------
# Follow model


def follow_step(own: AgentState, neighbors: Sequence[AgentState], dt: float = DT,
                params: FollowParams = FollowParams()) -> tuple[float, float]:
    """Constant speed, always turning toward the closest neighbor."""
    if not neighbors:
        raise ModelError("follow model needs at least one neighbor")
    best = None
    best_d2 = math.inf
    for nb in neighbors:
        d2 = (nb.x - own.x) ** 2 + (nb.y - own.y) ** 2
        if d2 < best_d2:
            best_d2 = d2
            best = nb
    if best_d2 < 1e-24:
        return params.speed, 0.0  # coincident; keep heading
    bearing = math.atan2(best.y - own.y, best.x - own.x)
    turn = wrap_angle(bearing - own.theta)
    omega = max(-params.max_omega, min(params.max_omega, turn / dt))
    return params.speed, omega


# ---------------------------------------------------------------------------
# Zone model


def zone_wall_force(own: AgentState, arena: Arena, params: ZoneParams) -> tuple[float, float]:
    """Wall interaction as a vector added to the unit desired direction.

    Heading into a wall (outside the reaction-angle cone around "directly
    away") triggers strong repulsion; otherwise a unit-scale pull toward
    the wall produces wall-following without trapping the agent.
    """
    fx = fy = 0.0
    hx = math.cos(own.theta)
    hy = math.sin(own.theta)
    radius = params.wall_repulsion_radius
    walls = ((own.x, 1.0, 0.0), (arena.width - own.x, -1.0, 0.0),
             (own.y, 0.0, 1.0), (arena.height - own.y, 0.0, -1.0))
    for d, ax, ay in walls:
        if d >= radius:
            continue
        ramp = 1.0 - d / radius
        phi_away = math.acos(min(1.0, max(-1.0, hx * ax + hy * ay)))
        if phi_away > params.wall_reaction_angle:
            fx += ax * params.wall_repulsion_strength * ramp
            fy += ay * params.wall_repulsion_strength * ramp
        else:
            fx -= ax * ramp
            fy -= ay * ramp
    return fx, fy


def zone_step(own: AgentState, neighbors: Sequence[AgentState], arena: Arena,
              params: ZoneParams, rng: RngStream | None = None,
              dt: float = DT) -> tuple[float, float]:
    """Concentric repulsion / orientation / attraction rules at constant speed."""
    th = own.theta
    rep_x = rep_y = ori_x = ori_y = att_x = att_y = 0.0
    n_rep = n_ori = n_att = 0
    half_fov = params.field_of_view / 2.0
    for nb in neighbors:
        dx = nb.x - own.x
        dy = nb.y - own.y
        d = math.hypot(dx, dy)
        if d < 1e-12:
            continue
        if half_fov < math.pi and abs(wrap_angle(math.atan2(dy, dx) - th)) > half_fov:
            continue
        if d < params.r_repulsion:
            rep_x -= dx / d
            rep_y -= dy / d
            n_rep += 1
        elif d < params.r_orientation:
            ori_x += math.cos(nb.theta)
            ori_y += math.sin(nb.theta)
            n_ori += 1
        elif d < params.r_attraction:
            att_x += dx / d
            att_y += dy / d
            n_att += 1
    if n_rep:
        des_x, des_y = rep_x, rep_y
    elif n_ori or n_att:
        des_x = des_y = 0.0
        n_terms = 0
        for sx, sy, n in ((ori_x, ori_y, n_ori), (att_x, att_y, n_att)):
            if n:
                norm = math.hypot(sx, sy)
                if norm > 1e-12:
                    des_x += sx / norm
                    des_y += sy / norm
                    n_terms += 1
        if n_terms:
            des_x /= n_terms
            des_y /= n_terms
        else:
            des_x, des_y = math.cos(th), math.sin(th)
    else:
        des_x, des_y = math.cos(th), math.sin(th)

    wfx, wfy = zone_wall_force(own, arena, params)
    des_x += wfx
    des_y += wfy

    if des_x * des_x + des_y * des_y < 1e-24:
        turn = 0.0
    else:
        turn = wrap_angle(math.atan2(des_y, des_x) - th)
    turn *= params.smoothing
    if params.turn_noise > 0.0:
        if rng is None:
            raise ModelError("zone model with turn_noise > 0 needs an rng stream")
        turn += params.turn_noise * rng.normal()
    omega = max(-params.max_omega, min(params.max_omega, turn / dt))
    return params.speed, omega


# ---------------------------------------------------------------------------
# Force model (variable speed)


def force_step(own: AgentState, neighbors: Sequence[AgentState], arena: Arena,
               params: ForceParams, rng: RngStream | None = None,
               dt_substeps: float = 1.0) -> tuple[float, float]:
    """Euler-Maruyama update of speed and turn rate under social/wall forces.

    Internal units are cm per substep; the returned pair is converted back
    to cm/s and rad/s so all models share one signature.
    """
    th = own.theta
    hx = math.cos(th)
    hy = math.sin(th)
    fx = fy = 0.0
    f_align = 0.0
    for nb in neighbors:
        dx = nb.x - own.x
        dy = nb.y - own.y
        d = math.hypot(dx, dy)
        if d < 1e-12 or d > params.interaction_range:
            continue
        f_align += params.mu_alg * wrap_angle(nb.theta - th)
        mag = params.mu_d * params.m_d * (d - params.r_d)  # attract beyond r_d, repel inside
        fx += mag * dx / d
        fy += mag * dy / d

    d_wall = min(own.x, arena.width - own.x, own.y, arena.height - own.y)
    if d_wall < params.wall_repulsion_range:
        if own.x == d_wall:
            ax, ay, tx, ty = 1.0, 0.0, 0.0, 1.0
        elif arena.width - own.x == d_wall:
            ax, ay, tx, ty = -1.0, 0.0, 0.0, 1.0
        elif own.y == d_wall:
            ax, ay, tx, ty = 0.0, 1.0, 1.0, 0.0
        else:
            ax, ay, tx, ty = 0.0, -1.0, 1.0, 0.0
        if hx * tx + hy * ty < 0.0:  # tangent follows current swim direction
            tx, ty = -tx, -ty
        wx = params.wall_angle_outward * ax + params.wall_angle_perp * tx
        wy = params.wall_angle_outward * ay + params.wall_angle_perp * ty
        norm = math.hypot(wx, wy)
        if norm > 1e-12:
            fx += params.wall_attraction * wx / norm
            fy += params.wall_attraction * wy / norm
        ramp = 1.0 - d_wall / params.wall_repulsion_range
        fx += params.wall_repulsion_strength * ramp * ax
        fy += params.wall_repulsion_strength * ramp * ay

    f_par = fx * hx + fy * hy
    f_perp = -fx * hy + fy * hx  # positive turns counter-clockwise

    noisy = params.d_v > 0.0 or params.d_phi > 0.0
    if noisy and rng is None:
        raise ModelError("force model with noise needs an rng stream")
    xi_v = xi_phi = 0.0
    if noisy:
        draws = rng.normal(size=2)
        xi_v = draws[0]
        xi_phi = draws[1]

    v = own.v * DT  # cm per substep
    w = own.omega * DT  # rad per substep
    v_next = v + (params.beta * (params.v0 - v) + f_par) * dt_substeps \
        + math.sqrt(2.0 * params.d_v * dt_substeps) * xi_v
    v_next = max(v_next, 0.0)
    w_next = w + (-params.alpha * w + f_align + f_perp) * dt_substeps \
        + math.sqrt(2.0 * params.d_phi * dt_substeps) * xi_phi
    return v_next / DT, w_next / DT


# ---------------------------------------------------------------------------
# Egocentric view + conv agent


@dataclass(frozen=True)
class EgocentricView:
    wall_component: np.ndarray  # (n_wall_rays,), distances normalized to [0, 1]
    agent_component: np.ndarray  # (n_sectors, 2): distance and in-sector angle, in [0, 1]

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.wall_component, self.agent_component.ravel()])


def encode_egocentric_view(own: AgentState, neighbors: Sequence[AgentState],
                           arena: Arena, params: ConvNetParams) -> EgocentricView:
    """Wall raycasts plus nearest-neighbor (distance, angle) per sector.

    Sectors are centered on the ray directions; the in-sector angle is the
    signed offset from the sector center over half the sector width,
    affinely mapped to [0, 1] (0.5 = dead center). Empty sectors are zero.
    """
    offsets = TWO_PI * np.arange(params.n_wall_rays) / params.n_wall_rays
    wall = raycast_fan(own.x, own.y, own.theta, offsets, arena) / arena.diagonal
    agent = np.zeros((params.n_sectors, 2))
    best = np.full(params.n_sectors, np.inf)
    width = TWO_PI / params.n_sectors
    for nb in neighbors:
        dx = nb.x - own.x
        dy = nb.y - own.y
        d = math.hypot(dx, dy)
        if d < 1e-12:
            continue
        rel = wrap_angle(math.atan2(dy, dx) - own.theta)
        idx = int(math.floor(rel / width + 0.5)) % params.n_sectors
        if d < best[idx]:
            center = wrap_angle(idx * width)
            offset = wrap_angle(rel - center) / (width / 2.0)
            best[idx] = d
            agent[idx, 0] = min(d / arena.diagonal, 1.0)
            agent[idx, 1] = (offset + 1.0) / 2.0
    return EgocentricView(wall, agent)


def encode_views_single_neighbor(own: np.ndarray, neighbor: np.ndarray, arena: Arena,
                                 params: ConvNetParams) -> np.ndarray:
    """Vectorized view encoding for B agents with exactly one neighbor each.

    `own` is (B, 3) poses, `neighbor` is (B, 2) positions. Matches
    encode_egocentric_view(...).as_vector() row for row.
    """
    own = np.asarray(own, dtype=float)
    neighbor = np.asarray(neighbor, dtype=float)
    b = own.shape[0]
    offsets = TWO_PI * np.arange(params.n_wall_rays) / params.n_wall_rays
    ang = own[:, 2:3] + offsets[None, :]
    dx = np.cos(ang)
    dy = np.sin(ang)
    with np.errstate(divide="ignore"):
        tx = np.where(dx > 1e-15, (arena.width - own[:, 0:1]) / dx,
                      np.where(dx < -1e-15, -own[:, 0:1] / dx, np.inf))
        ty = np.where(dy > 1e-15, (arena.height - own[:, 1:2]) / dy,
                      np.where(dy < -1e-15, -own[:, 1:2] / dy, np.inf))
    wall = np.minimum(arena.diagonal, np.minimum(tx, ty)) / arena.diagonal

    ndx = neighbor[:, 0] - own[:, 0]
    ndy = neighbor[:, 1] - own[:, 1]
    dist = np.hypot(ndx, ndy)
    rel = np.arctan2(ndy, ndx) - own[:, 2]
    rel = np.mod(rel + math.pi, TWO_PI) - math.pi
    width = TWO_PI / params.n_sectors
    idx = np.floor(rel / width + 0.5).astype(np.int64) % params.n_sectors
    center = np.mod(idx * width + math.pi, TWO_PI) - math.pi
    offset = np.mod(rel - center + math.pi, TWO_PI) - math.pi
    agent = np.zeros((b, params.n_sectors, 2))
    present = dist >= 1e-12
    rows = np.arange(b)[present]
    agent[rows, idx[present], 0] = np.minimum(dist[present] / arena.diagonal, 1.0)
    agent[rows, idx[present], 1] = (offset[present] / (width / 2.0) + 1.0) / 2.0
    return np.concatenate([wall, agent.reshape(b, -1)], axis=1)


def _conv_patches(x: np.ndarray, kernel: int) -> np.ndarray:
    """Zero-padded sliding windows: (B, L) -> (B, L, kernel)."""
    b, length = x.shape
    pad = kernel // 2
    xp = np.zeros((b, length + kernel - 1))
    xp[:, pad:pad + length] = x
    idx = np.arange(length)[:, None] + np.arange(kernel)[None, :]
    return xp[:, idx]


def _convnet_forward_batch(x: np.ndarray, params: ConvNetParams):
    wc, bc, w1, b1, w2, b2, w3, b3 = params.unpack()
    patches = _conv_patches(x, params.conv_kernel)
    b, length, kernel = patches.shape
    z0 = (patches.reshape(b * length, kernel) @ wc).reshape(b, length, -1) + bc  # (B, L, C)
    h0 = leaky_relu(z0).reshape(x.shape[0], -1)
    z1 = h0 @ w1 + b1
    h1 = leaky_relu(z1)
    z2 = h1 @ w2 + b2
    h2 = leaky_relu(z2)
    logits = h2 @ w3 + b3
    probs = softmax(logits)
    cache = (patches, z0, h0, z1, h1, z2, h2)
    return probs, cache


def convnet_forward(view: EgocentricView, params: ConvNetParams) -> np.ndarray:
    """Action-grid probabilities for one egocentric view."""
    vec = view.as_vector()
    if vec.size != params.input_len:
        raise ModelError(f"view length {vec.size} does not match architecture input "
                         f"{params.input_len}")
    probs, _ = _convnet_forward_batch(vec[None, :], params)
    return probs[0]


def _convnet_backward_batch(x: np.ndarray, params: ConvNetParams, probs: np.ndarray,
                            cache, targets: np.ndarray) -> np.ndarray:
    """Gradient of mean NLL over the batch w.r.t. the flat weight vector."""
    wc, bc, w1, b1, w2, b2, w3, b3 = params.unpack()
    patches, z0, h0, z1, h1, z2, h2 = cache
    b = x.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(b), targets] -= 1.0
    dlogits /= b
    dw3 = h2.T @ dlogits
    db3 = dlogits.sum(axis=0)
    dh2 = dlogits @ w3.T
    dz2 = dh2 * leaky_relu_grad(z2)
    dw2 = h1.T @ dz2
    db2 = dz2.sum(axis=0)
    dh1 = dz2 @ w2.T
    dz1 = dh1 * leaky_relu_grad(z1)
    dw1 = h0.T @ dz1
    db1 = dz1.sum(axis=0)
    dh0 = dz1 @ w1.T
    dz0 = dh0.reshape(z0.shape) * leaky_relu_grad(z0)
    dwc = np.einsum("blk,blc->kc", patches, dz0)
    dbc = dz0.sum(axis=(0, 1))
    return np.concatenate([g.ravel() for g in (dwc, dbc, dw1, db1, dw2, db2, dw3, db3)])


def convnet_nll(x: np.ndarray, targets: np.ndarray, params: ConvNetParams) -> float:
    probs, _ = _convnet_forward_batch(x, params)
    p = np.clip(probs[np.arange(x.shape[0]), targets], 1e-300, None)
    return float(-np.mean(np.log(p)))


def action_cell_center(index: int, params: ConvNetParams) -> tuple[float, float]:
    iv, it = divmod(int(index), params.n_turn_bins)
    v = (iv + 0.5) * params.speed_max / params.n_speed_bins
    omega = -params.turn_max + (it + 0.5) * 2.0 * params.turn_max / params.n_turn_bins
    return v, omega


def action_cell_index(v: float, omega: float, params: ConvNetParams) -> int:
    iv = min(max(int(v / (params.speed_max / params.n_speed_bins)), 0), params.n_speed_bins - 1)
    it = int((omega + params.turn_max) / (2.0 * params.turn_max / params.n_turn_bins))
    it = min(max(it, 0), params.n_turn_bins - 1)
    return iv * params.n_turn_bins + it


def convnet_sample_action(probs: np.ndarray, rng: RngStream,
                          params: ConvNetParams) -> tuple[float, float]:
    """Sample a grid cell and return its center (v, omega)."""
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    idx = min(idx, probs.size - 1)
    return action_cell_center(idx, params)


# ---------------------------------------------------------------------------
# Behavioral cloning


@dataclass(frozen=True)
class BCConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 256
    holdout_fraction: float = 0.1


def bc_train(views: np.ndarray, actions: np.ndarray, init: ConvNetParams,
             config: BCConfig, rng: RngStream) -> tuple[ConvNetParams, list[dict]]:
    """Minimize NLL of (view, action-cell) pairs; returns weights and a loss log.

    The returned weights are the best epoch-end checkpoint by training-set
    NLL, so the final loss never exceeds the initial one.
    """
    views = np.asarray(views, dtype=float)
    actions = np.asarray(actions, dtype=np.int64)
    if views.ndim != 2 or views.shape[0] == 0:
        raise ModelError("behavioral cloning needs a nonempty (n, input_len) view matrix")
    if views.shape[1] != init.input_len:
        raise ModelError(f"view width {views.shape[1]} does not match architecture input "
                         f"{init.input_len}")
    if actions.min() < 0 or actions.max() >= init.n_actions:
        raise ModelError("action cell indices outside the action grid")
    params = init if init.weights is not None else init_convnet_weights(init, rng.child(0))
    weights = params.weights.copy()
    work = replace(params, weights=weights)
    opt = RMSProp(weights.size, lr=config.learning_rate)
    shuffle_rng = rng.child(1)
    n = views.shape[0]
    log: list[dict] = []
    best_nll = convnet_nll(views, actions, work)
    best_weights = weights.copy()
    log.append({"epoch": 0, "nll": best_nll})
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            xb = views[batch]
            tb = actions[batch]
            probs, cache = _convnet_forward_batch(xb, work)
            grad = _convnet_backward_batch(xb, work, probs, cache, tb)
            opt.step(weights, grad)
        nll = convnet_nll(views, actions, work)
        log.append({"epoch": epoch, "nll": nll})
        if nll < best_nll:
            best_nll = nll
            best_weights = weights.copy()
    return replace(params, weights=best_weights), log


# ---------------------------------------------------------------------------
# Conv agent weights file

_WEIGHTS_MAGIC = b"SHOALGAP-WEIGHTS-v1\n"


def save_convnet_params(path: str | Path, params: ConvNetParams) -> None:
    if params.weights is None:
        raise ModelError("cannot save an uninitialized conv agent")
    header = {
        "n_wall_rays": params.n_wall_rays, "n_sectors": params.n_sectors,
        "conv_kernel": params.conv_kernel, "conv_channels": params.conv_channels,
        "hidden": list(params.hidden),
        "n_speed_bins": params.n_speed_bins, "speed_max": params.speed_max,
        "n_turn_bins": params.n_turn_bins, "turn_max": params.turn_max,
        "n_weights": int(params.weights.size),
    }
    blob = _WEIGHTS_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" \
        + np.ascontiguousarray(params.weights, dtype="<f8").tobytes()
    Path(path).write_bytes(blob)


def load_convnet_params(path: str | Path) -> ConvNetParams:
    blob = Path(path).read_bytes()
    if not blob.startswith(_WEIGHTS_MAGIC):
        raise ModelError(f"{path}: not a conv agent weights file")
    rest = blob[len(_WEIGHTS_MAGIC):]
    newline = rest.index(b"\n")
    header = json.loads(rest[:newline])
    weights = np.frombuffer(rest[newline + 1:], dtype="<f8").copy()
    params = ConvNetParams(
        n_wall_rays=header["n_wall_rays"], n_sectors=header["n_sectors"],
        conv_kernel=header["conv_kernel"], conv_channels=header["conv_channels"],
        hidden=tuple(header["hidden"]),
        n_speed_bins=header["n_speed_bins"], speed_max=header["speed_max"],
        n_turn_bins=header["n_turn_bins"], turn_max=header["turn_max"],
        weights=weights,
    )
    if weights.size != header["n_weights"] or weights.size != params.n_weights:
        raise ModelError(f"{path}: weight count does not match header/architecture")
    return params


# ---------------------------------------------------------------------------
# Uniform stepping interface


class FishModel:
    """Binds a FishModelSpec to the shared step interface."""

    def __init__(self, spec: FishModelSpec):
        self.spec = spec

    @property
    def kind(self) -> str:
        return self.spec.kind

    def step(self, own: AgentState, neighbors: Sequence[AgentState], arena: Arena,
             rng: RngStream | None = None, dt: float = DT) -> tuple[float, float]:
        rng = rng if rng is not None else self.spec.noise_stream
        kind = self.spec.kind
        p = self.spec.params
        if kind == "follow":
            return follow_step(own, neighbors, dt, p)
        if kind == "zone":
            return zone_step(own, neighbors, arena, p, rng, dt)
        if kind == "force":
            return force_step(own, neighbors, arena, p, rng)
        view = encode_egocentric_view(own, neighbors, arena, p)
        probs = convnet_forward(view, p)
        return convnet_sample_action(probs, rng, p)

    def step_many(self, owns: Sequence[AgentState], neighbor_lists: Sequence[Sequence[AgentState]],
                  arena: Arena, rngs: Sequence[RngStream], dt: float = DT) -> list[tuple[float, float]]:
        """Step several independent agents at once (batched conv forward).

        Per-agent rng draw sequences are identical to repeated step() calls.
        """
        if self.spec.kind != "convnet":
            return [self.step(o, nb, arena, r, dt) for o, nb, r in zip(owns, neighbor_lists, rngs)]
        p = self.spec.params
        if all(len(nb) == 1 for nb in neighbor_lists):
            own_arr = np.array([[o.x, o.y, o.theta] for o in owns])
            nb_arr = np.array([[nb[0].x, nb[0].y] for nb in neighbor_lists])
            x = encode_views_single_neighbor(own_arr, nb_arr, arena, p)
        else:
            x = np.stack([encode_egocentric_view(o, nb, arena, p).as_vector()
                          for o, nb in zip(owns, neighbor_lists)])
        probs, _ = _convnet_forward_batch(x, p)
        return [convnet_sample_action(probs[i], rngs[i], p) for i in range(len(owns))]


def build_model(spec: FishModelSpec) -> FishModel:
    if spec.kind == "convnet" and spec.params.weights is None:
        raise ModelError("convnet model spec has no weights; train or load them first")
    return FishModel(spec)


# ---------------------------------------------------------------------------
# Surrogate cloning corpus

# Rule-model parameterization behind the shipped cloning corpus: slower swim
# and a wider attraction zone than the zone default, so the cloned agent is a
# behaviorally distinct fourth model rather than a zone duplicate.
SURROGATE_ZONE_PARAMS = ZoneParams(
    r_repulsion=2.0, r_orientation=8.0, r_attraction=28.0, speed=4.0,
    turn_noise=0.35,
)


def generate_surrogate_corpus(n_pairs: int, view_params: ConvNetParams, rng: RngStream,
                              zone_params: ZoneParams = SURROGATE_ZONE_PARAMS,
                              arena: Arena | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Simulate a pair of rule-model fish and record (view, action-cell) pairs."""
    if n_pairs <= 0:
        raise ModelError("surrogate corpus size must be positive")
    arena = arena or Arena()
    place_rng = rng.child(0)
    noise_rng = rng.child(1)
    fish = [
        agent_state(place_rng.uniform(10, arena.width - 10), place_rng.uniform(10, arena.height - 10),
                    place_rng.uniform(-math.pi, math.pi)),
        agent_state(place_rng.uniform(10, arena.width - 10), place_rng.uniform(10, arena.height - 10),
                    place_rng.uniform(-math.pi, math.pi)),
    ]
    views = np.empty((n_pairs, view_params.input_len))
    actions = np.empty(n_pairs, dtype=np.int64)
    count = 0
    while count < n_pairs:
        next_fish = []
        for i in (0, 1):
            own, other = fish[i], fish[1 - i]
            if count < n_pairs:
                views[count] = encode_egocentric_view(own, [other], arena, view_params).as_vector()
            v, omega = zone_step(own, [other], arena, zone_params, noise_rng)
            if count < n_pairs:
                actions[count] = action_cell_index(v, omega, view_params)
                count += 1
            next_fish.append(step_kinematics(own, v, omega, DT, arena))
        fish = next_fish
    return views, actions


def corpus_from_trajectories(trajectories: Sequence[Trajectory],
                             view_params: ConvNetParams,
                             arena: Arena | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Convert tracked trials into (view, action-cell) pairs from the fish's side.

    Actions are finite-difference (v, omega) between consecutive frames, so
    external recordings and simulated rollouts produce identical datasets.
    """
    arena = arena or Arena()
    views_list = []
    actions_list = []
    for traj in trajectories:
        n = len(traj)
        for k in range(n - 1):
            dt = traj.t[k + 1] - traj.t[k]
            if dt <= 0:
                continue
            fx, fy, fth = traj.fish[k]
            rx, ry, rth = traj.robot[k]
            own = AgentState(Pose(fx, fy, fth))
            other = AgentState(Pose(rx, ry, rth))
            view = encode_egocentric_view(own, [other], arena, view_params)
            nxt = traj.fish[k + 1]
            v = math.hypot(nxt[0] - fx, nxt[1] - fy) / dt
            omega = wrap_angle(nxt[2] - fth) / dt
            views_list.append(view.as_vector())
            actions_list.append(action_cell_index(v, omega, view_params))
    if not views_list:
        raise ModelError("no usable frame pairs in the supplied trajectories")
    return np.stack(views_list), np.array(actions_list, dtype=np.int64)
