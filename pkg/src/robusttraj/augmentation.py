"""Kinematic-bicycle augmentation: control-space optimization that pushes
trajectories along a sampled direction while penalizing proximity to others.

Feasibility is by construction: every emitted trajectory is the exact
forward-Euler rollout of an in-bounds control sequence. The optimizer keeps
iterates feasible with a sequential projection, and the positional-deviation
clip acts as an acceptance filter on the best-so-far candidate, so the warm
start (zero deviation) is always an admissible fallback.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .scenes import Scene
from .seeding import substream

KAPPA_MAX = 0.2    # 1/m
A_MAX = 4.0        # m/s^2
KDOT_MAX = 0.1     # 1/(m*s)

# agent-frame deviation directions, rotated by the initial heading
DIRECTION_FRAME = {"forward": (1.0, 0.0), "backward": (-1.0, 0.0),
                   "left": (0.0, 1.0), "right": (0.0, -1.0)}


class AugmentationError(ValueError):
    """Bound violation or malformed augmentation input."""


@dataclass
class BicycleState:
    p: tuple          # (x, y) meters
    psi: float        # heading, rad
    v: float          # speed, m/s
    kappa: float      # curvature, 1/m
    a: float = 0.0    # last applied acceleration, m/s^2

    def validate(self):
        if self.v < 0:
            raise AugmentationError(f"bicycle state: v = {self.v} < 0")
        if abs(self.kappa) > KAPPA_MAX:
            raise AugmentationError(
                f"bicycle state: |kappa| = {abs(self.kappa):.4f} > {KAPPA_MAX}")
        if abs(self.a) > A_MAX:
            raise AugmentationError(
                f"bicycle state: |a| = {abs(self.a):.3f} > {A_MAX}")


@dataclass
class ControlSequence:
    kdot: np.ndarray   # curvature rate per step
    accel: np.ndarray  # acceleration per step

    def __post_init__(self):
        self.kdot = np.asarray(self.kdot, dtype=np.float64)
        self.accel = np.asarray(self.accel, dtype=np.float64)
        if self.kdot.shape != self.accel.shape or self.kdot.ndim != 1:
            raise AugmentationError("controls: kdot and accel must be equal-length 1-D")

    def __len__(self):
        return len(self.kdot)

    def validate(self):
        for t in range(len(self.kdot)):
            if abs(self.kdot[t]) > KDOT_MAX + 1e-12:
                raise AugmentationError(
                    f"controls: |kdot| = {abs(self.kdot[t]):.4f} > {KDOT_MAX} "
                    f"at step {t}")
            if abs(self.accel[t]) > A_MAX + 1e-12:
                raise AugmentationError(
                    f"controls: |a| = {abs(self.accel[t]):.3f} > {A_MAX} "
                    f"at step {t}")


@dataclass
class AugConfig:
    gamma: float = 1.0        # collision-term weight
    clip: float = 1.0         # max per-coordinate deviation, meters
    steps: int = 60           # optimizer iterations
    step_size: float = 0.02

    def validate(self):
        if self.gamma < 0:
            raise AugmentationError("aug config: gamma must be >= 0")
        if self.clip <= 0:
            raise AugmentationError("aug config: clip must be > 0")
        if self.steps < 1 or self.step_size <= 0:
            raise AugmentationError("aug config: steps and step_size must be positive")


# ---------------------------------------------------------------------------
# dynamics

def rollout_bicycle(init: BicycleState, controls: ControlSequence,
                    dt: float) -> np.ndarray:
    """Forward-Euler rollout; (S+1, 2) positions including the start point.

    Update order per step: v, then psi (new v, old kappa), then kappa,
    then position (new v, new psi). State bounds are checked every step and
    violations name the step index.
    """
    controls.validate()
    init.validate()
    x, y = float(init.p[0]), float(init.p[1])
    psi, v, kappa = float(init.psi), float(init.v), float(init.kappa)
    out = [(x, y)]
    for t in range(len(controls)):
        v = v + controls.accel[t] * dt
        if v < -1e-12:
            raise AugmentationError(f"rollout: v = {v:.4f} < 0 at step {t}")
        v = max(v, 0.0)
        psi = psi + v * kappa * dt
        kappa = kappa + controls.kdot[t] * dt
        if abs(kappa) > KAPPA_MAX + 1e-12:
            raise AugmentationError(
                f"rollout: |kappa| = {abs(kappa):.4f} > {KAPPA_MAX} at step {t}")
        x = x + v * np.cos(psi) * dt
        y = y + v * np.sin(psi) * dt
        out.append((x, y))
    return np.asarray(out, dtype=np.float64)


def rollout_graph(init: BicycleState, kdot_t: ad.Tensor, a_t: ad.Tensor,
                  dt: float) -> tuple:
    """Differentiable rollout via prefix-sum matrices; controls as (1, S)
    tensors. Assumes the control values are already feasible (no clamping).

    Returns (x_all, y_all) of shape (1, S+1) including the constant start.
    """
    s = kdot_t.shape[1]
    incl = ad.Tensor(np.triu(np.ones((s, s))))           # inclusive prefix sum
    excl = ad.Tensor(np.triu(np.ones((s, s)), k=1))      # exclusive prefix sum
    v = ad.shift(ad.scale(ad.matmul(a_t, incl), dt), float(init.v))
    kap_prev = ad.shift(ad.scale(ad.matmul(kdot_t, excl), dt), float(init.kappa))
    psi = ad.shift(ad.scale(ad.matmul(ad.mul(v, kap_prev), incl), dt),
                   float(init.psi))
    x = ad.shift(ad.scale(ad.matmul(ad.mul(v, ad.cos(psi)), incl), dt),
                 float(init.p[0]))
    y = ad.shift(ad.scale(ad.matmul(ad.mul(v, ad.sin(psi)), incl), dt),
                 float(init.p[1]))
    x0 = ad.Tensor(np.full((1, 1), float(init.p[0])))
    y0 = ad.Tensor(np.full((1, 1), float(init.p[1])))
    return ad.concat([x0, x], axis=1), ad.concat([y0, y], axis=1)


# ---------------------------------------------------------------------------
# objectives

def loss_deviation(X, X_aug, d) -> float:
    """Sum over timesteps of (X - X_aug) . d; minimizing pushes X_aug along d."""
    X = np.asarray(X, dtype=np.float64)
    X_aug = np.asarray(X_aug, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if X.shape != X_aug.shape or X.ndim != 2 or X.shape[1] != 2:
        raise AugmentationError(f"deviation: bad shapes {X.shape} vs {X_aug.shape}")
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise AugmentationError(f"deviation: direction {d} is not a unit vector")
    return float(np.sum((X - X_aug) @ d))


def loss_collision(X_aug, others) -> float:
    """Mean over other agents of 1 / (mean timestep distance + 1); 0 if alone."""
    X_aug = np.asarray(X_aug, dtype=np.float64)
    others = [np.asarray(o, dtype=np.float64) for o in others]
    if not others:
        return 0.0
    vals = []
    for o in others:
        if o.shape != X_aug.shape:
            raise AugmentationError(
                f"collision: track shape {o.shape} != {X_aug.shape}")
        dist = np.mean(np.linalg.norm(X_aug - o, axis=1))
        vals.append(1.0 / (dist + 1.0))
    return float(np.mean(vals))


def loss_dyn(X, X_aug, others, d, gamma: float) -> float:
    return loss_deviation(X, X_aug, d) + gamma * loss_collision(X_aug, others)


def _dyn_graph(x_all, y_all, X, others, d, gamma):
    """Graph value of L_d + gamma * L_col for a rollout (x_all, y_all)."""
    n_steps = X.shape[0]
    xc = ad.Tensor(X[:, 0].reshape(1, n_steps))
    yc = ad.Tensor(X[:, 1].reshape(1, n_steps))
    dev = ad.add(ad.scale(ad.sub(xc, x_all), float(d[0])),
                 ad.scale(ad.sub(yc, y_all), float(d[1])))
    total = ad.sum_all(dev)
    if others and gamma != 0.0:
        terms = []
        for o in others:
            dx = ad.sub(x_all, ad.Tensor(o[:, 0].reshape(1, n_steps)))
            dy = ad.sub(y_all, ad.Tensor(o[:, 1].reshape(1, n_steps)))
            step_d = ad.sqrt(ad.add(ad.mul(dx, dx), ad.mul(dy, dy)))
            mean_d = ad.scale(ad.sum_all(step_d), 1.0 / n_steps)
            terms.append(ad.reciprocal(ad.shift(ad.reshape(mean_d, (1, 1)), 1.0)))
        col = ad.scale(ad.sum_all(ad.concat(terms, axis=1)), 1.0 / len(terms))
        total = ad.add(total, ad.scale(col, gamma))
    return total


# ---------------------------------------------------------------------------
# warm start by exact inversion of the discrete model

def invert_controls(track: np.ndarray, dt: float):
    """Fit (init state, controls) whose rollout reproduces ``track`` exactly.

    Returns (init, controls); feasibility is NOT guaranteed - callers must
    check bounds (see warm_start).
    """
    track = np.asarray(track, dtype=np.float64)
    if track.ndim != 2 or track.shape[1] != 2 or track.shape[0] < 2:
        raise AugmentationError(f"invert: bad track shape {track.shape}")
    disp = np.diff(track, axis=0)
    s = len(disp)
    v = np.linalg.norm(disp, axis=1) / dt
    psi = np.zeros(s)
    prev = None
    for t in range(s):
        if v[t] > 1e-12:
            psi[t] = np.arctan2(disp[t, 1], disp[t, 0])
            prev = psi[t]
        else:
            psi[t] = prev if prev is not None else 0.0
    if prev is None:
        psi[:] = 0.0
    psi0, v0 = psi[0], v[0]
    # kappa[t] reproduces the heading change into step t+1
    kappa = np.zeros(s)
    for t in range(s - 1):
        dpsi = np.arctan2(np.sin(psi[t + 1] - psi[t]), np.cos(psi[t + 1] - psi[t]))
        kappa[t] = dpsi / (v[t + 1] * dt) if v[t + 1] > 1e-12 else 0.0
    if s >= 2:
        kappa[s - 1] = kappa[s - 2]
    kappa0 = 0.0
    accel = np.empty(s)
    accel[0] = 0.0
    accel[1:] = np.diff(v) / dt
    kdot = np.empty(s)
    kdot[0] = (kappa[0] - kappa0) / dt
    kdot[1:] = np.diff(kappa) / dt
    init = BicycleState(p=(track[0, 0], track[0, 1]), psi=psi0, v=v0,
                        kappa=kappa0, a=0.0)
    return init, ControlSequence(kdot=kdot, accel=accel)


def warm_start(track: np.ndarray, dt: float, tol: float = 1e-9):
    """Exact-inversion warm start, or None when the track is infeasible."""
    init, controls = invert_controls(track, dt)
    try:
        init.validate()
        controls.validate()
        rolled = rollout_bicycle(init, controls, dt)
    except AugmentationError:
        return None
    if np.max(np.abs(rolled - track)) > tol:
        return None
    return init, controls


def project_controls(init: BicycleState, controls: ControlSequence,
                     dt: float) -> ControlSequence:
    """Sequentially clamp controls so the rolled state stays in bounds."""
    kdot = np.clip(controls.kdot, -KDOT_MAX, KDOT_MAX)
    accel = np.clip(controls.accel, -A_MAX, A_MAX)
    v, kappa = init.v, init.kappa
    for t in range(len(kdot)):
        accel[t] = max(accel[t], -v / dt)          # keep v >= 0
        v = v + accel[t] * dt
        lo = (-KAPPA_MAX - kappa) / dt
        hi = (KAPPA_MAX - kappa) / dt
        kdot[t] = min(max(kdot[t], lo), hi)        # keep |kappa| <= KAPPA_MAX
        kappa = kappa + kdot[t] * dt
    return ControlSequence(kdot=kdot, accel=accel)


# ---------------------------------------------------------------------------
# per-agent optimization and scene augmentation

def optimize_agent(track, others, direction, dt: float, config: AugConfig):
    """Projected gradient descent on L_dyn over one agent's controls.

    Best-so-far acceptance only admits iterates whose per-coordinate
    deviation stays within config.clip, so the returned trajectory always
    satisfies the clip bound and L_dyn never exceeds the warm-start value.
    Returns (track, init, controls, value) or None when infeasible.
    """
    ws = warm_start(track, dt)
    if ws is None:
        return None
    init, controls = ws
    d = np.asarray(direction, dtype=np.float64)
    s = len(controls)

    def evaluate(ctrl):
        kdot_t = ad.Tensor(ctrl.kdot.reshape(1, s), requires_grad=True)
        a_t = ad.Tensor(ctrl.accel.reshape(1, s), requires_grad=True)
        x_all, y_all = rollout_graph(init, kdot_t, a_t, dt)
        total = _dyn_graph(x_all, y_all, track, others, d, config.gamma)
        grads = ad.backward(total)
        rolled = np.stack([x_all.values[0], y_all.values[0]], axis=1)
        return (total.item(), rolled,
                grads.get(kdot_t, np.zeros((1, s)))[0],
                grads.get(a_t, np.zeros((1, s)))[0])

    def value_of(cand):
        rolled = rollout_bicycle(init, cand, dt)
        return loss_dyn(track, rolled, others, d, config.gamma), rolled

    # Curvature-rate changes move positions ~4 orders of magnitude more than
    # acceleration changes over the horizon, so fixed-step descent either
    # stalls or blasts past the deviation clip. Normalized-direction steps
    # with a backtracking line search (feasibility + decrease) handle both.
    best_val, best_rolled = value_of(controls)
    best_ctrl = controls
    ctrl, val = controls, best_val
    trial = config.step_size
    for _ in range(config.steps):
        _, _, g_kdot, g_a = evaluate(ctrl)
        scale = max(np.max(np.abs(g_kdot)), np.max(np.abs(g_a)), 1e-12)
        step = trial
        for _ in range(12):
            cand = ControlSequence(kdot=ctrl.kdot - step * g_kdot / scale,
                                   accel=ctrl.accel - step * g_a / scale)
            cand = project_controls(init, cand, dt)
            cand_val, cand_rolled = value_of(cand)
            ok = np.max(np.abs(cand_rolled - track)) <= config.clip + 1e-12
            if ok and cand_val < val - 1e-12:
                ctrl, val = cand, cand_val
                if val < best_val:
                    best_val, best_rolled, best_ctrl = val, cand_rolled, cand
                trial = min(step * 1.5, config.step_size)
                break
            step *= 0.5
        else:
            break
    return best_rolled, init, best_ctrl, best_val


@dataclass
class AugResult:
    scene: Scene
    controls: list          # per-agent dict or None (skipped)
    skipped: list           # agent indices left unmodified


def augment_scene(scene: Scene, config: AugConfig, seed: int) -> AugResult:
    """Per-agent control-space augmentation with a seeded direction draw."""
    config.validate()
    h = scene.history_len
    tracks = scene.full_track()
    new_tracks = tracks.copy()
    controls_out, skipped = [], []
    rng = substream(seed, "augment")
    names = sorted(DIRECTION_FRAME)
    for i in range(scene.n_agents):
        name = str(rng.choice(names))
        others = [tracks[j] for j in range(scene.n_agents) if j != i]
        ws = warm_start(tracks[i], scene.dt)
        if ws is None:
            warnings.warn(f"augment: agent {i} warm start infeasible; "
                          "left unmodified")
            controls_out.append(None)
            skipped.append(i)
            continue
        init, _ = ws
        frame = DIRECTION_FRAME[name]
        c, s_ = np.cos(init.psi), np.sin(init.psi)
        d = np.array([frame[0] * c - frame[1] * s_,
                      frame[0] * s_ + frame[1] * c])
        d /= np.linalg.norm(d)
        out = optimize_agent(tracks[i], others, d, scene.dt, config)
        rolled, init, ctrl, _ = out
        new_tracks[i] = rolled
        controls_out.append({
            "direction": name,
            "init": {"p": [float(init.p[0]), float(init.p[1])],
                     "psi": float(init.psi), "v": float(init.v),
                     "kappa": float(init.kappa)},
            "kdot": ctrl.kdot.tolist(), "accel": ctrl.accel.tolist()})
    aug = Scene(history=new_tracks[:, :h], future=new_tracks[:, h:],
                dt=scene.dt, lanes=scene.lanes)
    return AugResult(scene=aug, controls=controls_out, skipped=skipped)


def reroll_controls(entry: dict, dt: float) -> np.ndarray:
    """Rebuild an augmented track from its stored controls (audit path)."""
    init = BicycleState(p=tuple(entry["init"]["p"]), psi=entry["init"]["psi"],
                        v=entry["init"]["v"], kappa=entry["init"]["kappa"])
    ctrl = ControlSequence(kdot=np.asarray(entry["kdot"]),
                           accel=np.asarray(entry["accel"]))
    return rollout_bicycle(init, ctrl, dt)
