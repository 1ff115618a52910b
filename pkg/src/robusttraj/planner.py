"""Closed-loop planning harness: lattice path sampling along the lane frame,
quadratic MPC tracking, ground-truth replay of other agents, and collision /
off-road outcome accounting under precomputed sequence attacks."""

import csv
import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import shapely

from . import attacks
from . import autodiff as ad
from . import cgan, cvae
from .scenes import PredictionSet, Scene, _points_on_road
from .seeding import derive_seed

EGO_A_MAX = 4.0       # |accel| bound, m/s^2
EGO_STEER_MAX = 0.7   # |heading rate| bound, rad/s

OUTCOMES_HEADER = ("scenario_id", "regime", "attack",
                   "collided", "offroad", "progress")


class PlannerError(RuntimeError):
    """Raised on malformed planner inputs (short scenarios, bad configs)."""


@dataclass
class EgoState:
    position: np.ndarray   # (2,) m
    heading: float         # rad
    speed: float           # m/s, >= 0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.position.shape != (2,) or not np.all(np.isfinite(self.position)):
            raise PlannerError(f"ego position {self.position} is not a finite 2-vector")
        if not np.isfinite(self.heading):
            raise PlannerError("ego heading is not finite")
        if not np.isfinite(self.speed) or self.speed < 0:
            raise PlannerError(f"ego speed {self.speed} must be finite and >= 0")


@dataclass
class LatticePath:
    waypoints: np.ndarray      # (M, 2) m
    offset_index: int          # index into the terminal-offset grid
    feasible: bool             # discrete curvature within bound
    route_s: np.ndarray        # (M,) arc position along the route centerline
    terminal_offset: float     # m, lateral at the last waypoint


@dataclass
class PlannerConfig:
    # lattice
    n_offsets: int = 5
    offset_span: float = 2.0       # max |terminal lateral offset| (m)
    lookahead: float = 30.0        # path length (m)
    waypoint_step: float = 1.0     # arc spacing (m)
    curvature_max: float = 0.2     # discrete curvature bound (1/m)
    centerline: object = None      # optional (M, 2) route override
    # path scoring
    w_collision: float = 10.0
    w_progress: float = 1.0
    w_offroad: float = 100.0
    sigma_c: float = 2.0           # collision kernel width (m)
    score_horizon: int = 4         # steps of predicted motion scored
    speed_scales: tuple = (1.0, 0.5, 0.0)
    # MPC
    horizon: int = 6
    mpc_iters: int = 30
    w_speed: float = 0.3
    w_effort: float = 0.02
    # episode
    l_p: int = 6                   # planning steps after the first
    k: int = 5                     # predictor samples per step
    target_speed: float | None = None  # default: ego's initial speed
    collision_radius: float = 1.0  # disc radius per agent (m)
    seed: int = 0

    def validate(self):
        if self.n_offsets < 1 or self.n_offsets % 2 == 0:
            raise PlannerError(f"n_offsets must be odd and >= 1, got {self.n_offsets}")
        for name in ("offset_span", "lookahead", "waypoint_step", "curvature_max",
                     "sigma_c", "collision_radius"):
            if getattr(self, name) <= 0 and name != "offset_span":
                raise PlannerError(f"{name} must be positive")
        if self.offset_span < 0:
            raise PlannerError("offset_span must be >= 0")
        if self.horizon < 1 or self.l_p < 0 or self.k < 1 or self.score_horizon < 1:
            raise PlannerError("horizon must be >= 1, l_p >= 0, k >= 1, "
                               "score_horizon >= 1")
        if not self.speed_scales:
            raise PlannerError("speed_scales must be non-empty")


@dataclass
class PlannerAttack:
    """Sequence-attack settings for an episode (precomputed, open loop)."""

    eps: float = 1.0
    steps: int = 20
    eot_draws: int = 4
    adv_index: int = 1
    seed: int = 0


# ---------------------------------------------------------------------------
# polyline helpers (route frame)

def _arc(way):
    seg = np.linalg.norm(np.diff(way, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _frame_at(way, cum, s):
    """Point, tangent, and left normal at arc position s (end-extrapolated)."""
    i = int(np.clip(np.searchsorted(cum, s) - 1, 0, len(way) - 2))
    d = way[i + 1] - way[i]
    u = d / max(np.linalg.norm(d), 1e-12)
    p = way[i] + (s - cum[i]) * u
    return p, u, np.array([-u[1], u[0]])


def _project_s(way, cum, p):
    """Arc coordinate of the closest point on the polyline; the first and last
    segments extend to infinity so progress past the lane end still counts."""
    best_d, best_s = np.inf, 0.0
    for i in range(len(way) - 1):
        d = way[i + 1] - way[i]
        length = np.linalg.norm(d)
        t = float((p - way[i]) @ d) / max(length**2, 1e-12)
        lo = -np.inf if i == 0 else 0.0
        hi = np.inf if i == len(way) - 2 else 1.0
        t = min(max(t, lo), hi)
        q = way[i] + t * d
        dist = np.linalg.norm(p - q)
        if dist < best_d:
            best_d, best_s = dist, cum[i] + t * length
    return best_s


def _max_curvature(way):
    """Max |turn angle / arc step| over interior waypoints."""
    d = np.diff(way, axis=0)
    seg = np.linalg.norm(d, axis=1)
    if len(seg) < 2:
        return 0.0
    heading = np.arctan2(d[:, 1], d[:, 0])
    dpsi = np.diff(heading)
    dpsi = (dpsi + np.pi) % (2 * np.pi) - np.pi
    ds = 0.5 * (seg[:-1] + seg[1:])
    return float(np.max(np.abs(dpsi) / np.maximum(ds, 1e-12)))


def _rect_centerline(poly):
    """Centerline segment (a, b) of a rectangular lane along its long axis."""
    p0, p1, p2, p3 = poly[:4]
    if np.linalg.norm(p1 - p0) >= np.linalg.norm(p2 - p1):
        return (p0 + p3) / 2.0, (p1 + p2) / 2.0
    return (p0 + p1) / 2.0, (p2 + p3) / 2.0


def _route_for(ego: EgoState, lanes, config: PlannerConfig):
    """Route polyline: explicit override, else the centerline of the containing
    lane best aligned with the ego heading (oriented along it). None off-map."""
    if config.centerline is not None:
        way = np.asarray(config.centerline, dtype=np.float64)
        if way.ndim != 2 or way.shape[1] != 2 or len(way) < 2:
            raise PlannerError(f"centerline has shape {way.shape}, expected (M, 2)")
        return way
    h = np.array([np.cos(ego.heading), np.sin(ego.heading)])
    point = shapely.Point(ego.position)
    best, best_align = None, -1.0
    for poly in lanes:
        if not shapely.Polygon(poly).covers(point):
            continue
        a, b = _rect_centerline(poly)
        u = (b - a) / max(np.linalg.norm(b - a), 1e-12)
        align = abs(float(u @ h))
        if align > best_align:
            best_align = align
            best = (a, b) if u @ h >= 0 else (b, a)
    if best is None:
        return None
    return np.stack(best)


# ---------------------------------------------------------------------------
# lattice sampling

def sample_lattice(ego: EgoState, lanes, config: PlannerConfig) -> list:
    """Candidate paths: cubic lateral-offset blends in the route frame.

    Odd path count; the middle path has terminal offset zero (lane
    centerline). Each path starts at the ego position. Off-map ego yields an
    empty list plus a warning.
    """
    config.validate()
    route = _route_for(ego, lanes, config)
    if route is None:
        warnings.warn(f"lattice: ego at {ego.position.tolist()} is outside "
                      "every lane; no paths sampled")
        return []
    cum = _arc(route)
    s0 = _project_s(route, cum, ego.position)
    p0, _, n0 = _frame_at(route, cum, s0)
    l0 = float((ego.position - p0) @ n0)

    if config.n_offsets == 1:
        offsets = np.array([0.0])
    else:
        offsets = np.linspace(-config.offset_span, config.offset_span,
                              config.n_offsets)
    m = max(int(round(config.lookahead / config.waypoint_step)), 1)
    s_grid = s0 + config.waypoint_step * np.arange(m + 1)
    u = np.arange(m + 1) / m
    blend = 3 * u**2 - 2 * u**3          # C1 ramp, zero slope at both ends
    paths = []
    for idx, off in enumerate(offsets):
        lat = l0 + (off - l0) * blend
        way = np.empty((m + 1, 2))
        for j, s in enumerate(s_grid):
            p, _, nrm = _frame_at(route, cum, s)
            way[j] = p + lat[j] * nrm
        feasible = _max_curvature(way) <= config.curvature_max + 1e-9
        paths.append(LatticePath(waypoints=way, offset_index=idx,
                                 feasible=feasible, route_s=s_grid.copy(),
                                 terminal_offset=float(off)))
    return paths


# ---------------------------------------------------------------------------
# path scoring

def score_path(path: LatticePath, predictions: PredictionSet, lanes, *,
               speed: float = 5.0, dt: float = 0.5,
               config: PlannerConfig | None = None) -> float:
    """Cost of driving the path at the given speed against K predicted
    candidates: w_c * (per-agent worst-candidate sum over steps of
    exp(-d^2/sigma^2)) + w_p * (-route progress) + w_o * (off-road indicator).

    The ego advances along the path arc at the given speed for
    score_horizon steps (clamped at the path end); d is the closest approach
    between the predicted position and the ego's swept segment for that
    step, so fast pass-throughs are priced the same as lingering overlaps.
    """
    config = config or PlannerConfig()
    preds = predictions.candidates                     # (K, M, T, 2)
    t_steps = min(preds.shape[2], config.score_horizon)
    pc = _arc(path.waypoints)
    arc_b = np.minimum(speed * dt * np.arange(t_steps + 1), pc[-1])
    bx = np.interp(arc_b, pc, path.waypoints[:, 0])
    by = np.interp(arc_b, pc, path.waypoints[:, 1])
    bounds = np.stack([bx, by], axis=1)                # (T'+1, 2) step bounds

    risk = 0.0
    if preds.shape[1]:
        kernel = np.zeros(preds.shape[:2])             # (K, M)
        for k in range(t_steps):
            a, b = bounds[k], bounds[k + 1]
            ab = b - a
            denom = max(float(ab @ ab), 1e-12)
            q = preds[:, :, k, :]
            t = np.clip(((q - a) @ ab) / denom, 0.0, 1.0)
            closest = a + t[..., None] * ab
            d2 = np.sum((q - closest) ** 2, axis=-1)
            kernel += np.exp(-d2 / config.sigma_c**2)
        risk = float(kernel.max(axis=0).sum())  # worst candidate per agent

    progress = float(np.interp(arc_b[-1], pc, path.route_s) - path.route_s[0])
    # the indicator is a property of the whole candidate path, not of the
    # scored prefix: paths that ever leave the road are penalized outright
    offroad = 0.0 if bool(_points_on_road(path.waypoints[None], lanes)[0]) else 1.0
    return (config.w_collision * risk - config.w_progress * progress
            + config.w_offroad * offroad)


# ---------------------------------------------------------------------------
# MPC tracking

def _mpc_value(u, ego, refs, v_tgt, dt, config):
    a, r = u
    v = ego.speed + dt * np.cumsum(a)
    psi = ego.heading + dt * np.cumsum(r)
    x = ego.position[0] + dt * np.cumsum(v * np.cos(psi))
    y = ego.position[1] + dt * np.cumsum(v * np.sin(psi))
    track = np.sum((x - refs[:, 0]) ** 2 + (y - refs[:, 1]) ** 2)
    return float(track + config.w_speed * np.sum((v - v_tgt) ** 2)
                 + config.w_effort * np.sum(a**2 + r**2))


def _mpc_grad(u, ego, refs, v_tgt, dt, config):
    hc = u.shape[1]
    a_t = ad.Tensor(u[0].reshape(1, hc), requires_grad=True)
    r_t = ad.Tensor(u[1].reshape(1, hc), requires_grad=True)
    incl = ad.Tensor(np.triu(np.ones((hc, hc))))
    v = ad.shift(ad.scale(ad.matmul(a_t, incl), dt), float(ego.speed))
    psi = ad.shift(ad.scale(ad.matmul(r_t, incl), dt), float(ego.heading))
    x = ad.shift(ad.scale(ad.matmul(ad.mul(v, ad.cos(psi)), incl), dt),
                 float(ego.position[0]))
    y = ad.shift(ad.scale(ad.matmul(ad.mul(v, ad.sin(psi)), incl), dt),
                 float(ego.position[1]))
    rx = ad.Tensor(refs[:, 0].reshape(1, hc))
    ry = ad.Tensor(refs[:, 1].reshape(1, hc))
    track = ad.add(ad.sqnorm(ad.sub(x, rx)), ad.sqnorm(ad.sub(y, ry)))
    v_err = ad.sqnorm(ad.shift(v, -float(v_tgt)))
    effort = ad.add(ad.sqnorm(a_t), ad.sqnorm(r_t))
    total = ad.add(track, ad.add(ad.scale(v_err, config.w_speed),
                                 ad.scale(effort, config.w_effort)))
    grads = ad.backward(total)
    return np.stack([grads[a_t][0], grads[r_t][0]])


def _clip_controls(u):
    out = np.empty_like(u)
    out[0] = np.clip(u[0], -EGO_A_MAX, EGO_A_MAX)
    out[1] = np.clip(u[1], -EGO_STEER_MAX, EGO_STEER_MAX)
    return out


def mpc_track(ego: EgoState, path, horizon: int, *,
              target_speed: float | None = None, dt: float = 0.5,
              seed: int = 0, config: PlannerConfig | None = None) -> tuple:
    """First (accel, steering-rate) of a receding-horizon quadratic tracker.

    References advance along the path at the target speed from the ego's
    closest point; the control sequence is found by seeded projected gradient
    descent (normalized steps, backtracking on the exact objective). An empty
    path falls back to a full brake.
    """
    config = config or PlannerConfig()
    if path is None or len(np.atleast_2d(getattr(path, "waypoints", []))) < 2:
        return (-EGO_A_MAX, 0.0)
    way = path.waypoints
    v_tgt = ego.speed if target_speed is None else float(target_speed)
    pc = _arc(way)
    s0 = _project_s(way, pc, ego.position)
    refs = np.empty((horizon, 2))
    for k in range(horizon):
        s = min(max(s0 + v_tgt * dt * (k + 1), 0.0), pc[-1])
        refs[k] = _frame_at(way, pc, s)[0]

    rng = np.random.default_rng(derive_seed(seed, "mpc-init"))
    u = _clip_controls(1e-4 * rng.standard_normal((2, horizon)))
    val = _mpc_value(u, ego, refs, v_tgt, dt, config)
    trial = 1.0
    for _ in range(config.mpc_iters):
        g = _mpc_grad(u, ego, refs, v_tgt, dt, config)
        scale = max(float(np.max(np.abs(g))), 1e-12)
        step = trial
        for _ in range(10):
            cand = _clip_controls(u - step * g / scale)
            cand_val = _mpc_value(cand, ego, refs, v_tgt, dt, config)
            if cand_val < val - 1e-12:
                u, val = cand, cand_val
                trial = min(step * 1.5, 1.0)
                break
            step *= 0.5
        else:
            break
    return (float(u[0, 0]), float(u[1, 0]))


def step_ego(ego: EgoState, control, dt: float) -> EgoState:
    """Integrate one step; controls are clipped to the dynamic bounds and
    speed is clamped at zero (same update order as the bicycle rollout)."""
    a = float(np.clip(control[0], -EGO_A_MAX, EGO_A_MAX))
    r = float(np.clip(control[1], -EGO_STEER_MAX, EGO_STEER_MAX))
    v = max(0.0, ego.speed + a * dt)
    psi = ego.heading + r * dt
    p = ego.position + v * dt * np.array([np.cos(psi), np.sin(psi)])
    return EgoState(position=p, heading=psi, speed=v)


# ---------------------------------------------------------------------------
# episodes

@dataclass
class SimOutcome:
    collided: bool
    collision_step: int | None
    offroad: bool
    progress: float
    log: list                        # per-step dicts (JSONL schema)
    controls: list = field(default_factory=list)   # applied (a, r) per step
    others: np.ndarray | None = None  # replayed positions, (L_p+1, N-1, 2)

    def as_row(self, scenario_id: str, regime: str, attack: str) -> dict:
        return {"scenario_id": scenario_id, "regime": regime, "attack": attack,
                "collided": int(self.collided), "offroad": int(self.offroad),
                "progress": float(self.progress)}


def _ego_from_history(hist, dt):
    d = hist[-1] - hist[-2]
    speed = float(np.linalg.norm(d)) / dt
    heading = float(np.arctan2(d[1], d[0])) if speed > 1e-9 else 0.0
    return EgoState(position=hist[-1].copy(), heading=heading, speed=speed)


def _predict(predictor, obs, k, seed) -> PredictionSet:
    if hasattr(predictor, "kind"):
        if predictor.kind == "cvae":
            return cvae.sample_predictions(predictor, obs, k, seed)
        if predictor.kind == "cgan":
            return cgan.sample_predictions(predictor, obs, k, seed)
        raise PlannerError(f"unknown predictor family {predictor.kind!r}")
    return PredictionSet(candidates=np.asarray(predictor(obs, k, seed),
                                               dtype=np.float64))


def ground_truth_predictor(scene: Scene, future_len: int):
    """Perfect predictor: returns each agent's true future by matching the
    observed (unattacked) window of the first replayed agent to the track."""
    full = scene.full_track()
    h = scene.history_len

    def predict(obs, k, seed):
        obs = np.asarray(obs)
        n = obs.shape[0]
        t = 0
        if n > 1 and full.shape[0] > 1:
            span = full.shape[1] - h - future_len
            errs = [np.sum((full[1, s:s + h] - obs[1]) ** 2)
                    for s in range(span + 1)]
            t = int(np.argmin(errs))
        out = np.zeros((k, n, future_len, 2))
        for j in range(n):
            out[:, j] = full[j, t + h:t + h + future_len]
        return out

    return predict


def run_episode(scene: Scene, predictor, config: PlannerConfig,
                attacker: PlannerAttack | None = None) -> SimOutcome:
    """Replanning loop: per step, (optionally) perturb the adversary's
    observed history with the precomputed sequence delta, predict, sample and
    score the lattice, MPC-track the best (path, speed) pair, integrate the
    ego one dt, and replay every other agent from ground truth."""
    config.validate()
    h, lp, dt = scene.history_len, config.l_p, scene.dt
    n = scene.n_agents
    if scene.future_len < lp + 1:
        raise PlannerError(f"scenario too short: future has {scene.future_len} "
                           f"steps, episode needs {lp + 1}")
    full = scene.full_track()
    ego = _ego_from_history(scene.history[0], dt)
    target = ego.speed if config.target_speed is None else config.target_speed

    delta_seq = None
    if attacker is not None:
        if not hasattr(predictor, "params"):
            raise PlannerError("sequence attack needs a differentiable predictor")
        arch = predictor.arch
        need = arch.history_len + lp + arch.future_len
        if full.shape[1] < need:
            raise PlannerError(f"scenario too short for the sequence attack: "
                               f"{full.shape[1]} < H + L_p + T = {need} steps")
        if not 0 <= attacker.adv_index < n:
            raise PlannerError(f"bad adversary index {attacker.adv_index}")
        threat = attacks.ThreatModel(eps=attacker.eps)
        acfg = attacks.AttackConfig(steps=attacker.steps,
                                    eot_draws=attacker.eot_draws,
                                    seed=attacker.seed)
        delta_seq, _, _ = attacks.pgd_sequence(predictor, full, threat, acfg,
                                               lp, attacker.adv_index)

    route0 = _route_for(ego, scene.lanes, config)
    p_start, dir0 = ego.position.copy(), np.array([np.cos(ego.heading),
                                                   np.sin(ego.heading)])
    ego_hist = [p.copy() for p in scene.history[0]]
    log, applied, replay = [], [], []
    collided, col_step, offroad_flag = False, None, False

    for t in range(lp + 1):
        obs = np.empty((n, h, 2))
        obs[0] = np.stack(ego_hist[-h:])
        for j in range(1, n):
            obs[j] = full[j, t:t + h]
        if delta_seq is not None:
            obs[attacker.adv_index] = obs[attacker.adv_index] + delta_seq[t:t + h]
        preds = _predict(predictor, obs, config.k,
                         derive_seed(config.seed, "plan-sample", t))
        digest = hashlib.sha256(preds.candidates.tobytes()).hexdigest()[:12]
        others_pred = PredictionSet(candidates=preds.candidates[:, 1:]) \
            if n > 1 else PredictionSet(
                candidates=np.zeros((1, 0, config.score_horizon, 2)))

        paths = sample_lattice(ego, scene.lanes, config)
        paths = sorted(paths, key=lambda p: (abs(p.terminal_offset),
                                             p.terminal_offset))
        best = None
        for path in paths:
            if not path.feasible:
                continue
            for scale in config.speed_scales:
                cost = score_path(path, others_pred, scene.lanes,
                                  speed=scale * target, dt=dt, config=config)
                if best is None or cost < best[0]:
                    best = (cost, path, scale)
        if best is None:
            u, chosen = (-EGO_A_MAX, 0.0), -1
        else:
            _, path, scale = best
            u = mpc_track(ego, path, config.horizon,
                          target_speed=scale * target, dt=dt,
                          seed=derive_seed(config.seed, "mpc", t),
                          config=config)
            chosen = path.offset_index
        u = (float(np.clip(u[0], -EGO_A_MAX, EGO_A_MAX)),
             float(np.clip(u[1], -EGO_STEER_MAX, EGO_STEER_MAX)))
        applied.append(u)
        ego = step_ego(ego, u, dt)
        ego_hist.append(ego.position.copy())

        others_now = full[1:, h + t, :] if n > 1 else np.zeros((0, 2))
        replay.append(others_now.copy())
        hit = bool(others_now.size) and bool(
            np.min(np.linalg.norm(others_now - ego.position, axis=1))
            < 2 * config.collision_radius)
        if hit and not collided:
            collided, col_step = True, t
        off_now = not bool(_points_on_road(ego.position[None, None],
                                           scene.lanes)[0])
        offroad_flag = offroad_flag or off_now
        log.append({"step": t,
                    "ego": {"p": [float(ego.position[0]), float(ego.position[1])],
                            "psi": float(ego.heading), "v": float(ego.speed)},
                    "chosen_path_idx": int(chosen),
                    "predictions_digest": digest,
                    "collision_flag": hit})

    if route0 is not None:
        cum0 = _arc(route0)
        progress = _project_s(route0, cum0, ego.position) \
            - _project_s(route0, cum0, p_start)
    else:
        progress = float((ego.position - p_start) @ dir0)
    return SimOutcome(collided=collided, collision_step=col_step,
                      offroad=offroad_flag, progress=float(progress),
                      log=log, controls=applied,
                      others=np.stack(replay) if replay else None)


# ---------------------------------------------------------------------------
# scenario suite

@dataclass
class Scenario:
    scenario_id: str
    scene: Scene
    adv_index: int = 1


def _track_cv(p0, vel, steps, dt):
    """Constant-velocity straight track, (steps, 2)."""
    t = np.arange(steps)[:, None] * dt
    return np.asarray(p0, float) + t * np.asarray(vel, float)


def _track_speeds(p0, direction, speeds, dt):
    """Straight track from per-step speeds (speed applies to the step taken)."""
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    disp = np.concatenate([[0.0], np.cumsum(np.asarray(speeds) * dt)])
    return np.asarray(p0, float) + disp[:, None] * d


def _brake_profile(v0, t_brake, decel, steps, dt):
    """Per-step speeds: cruise, then decelerate to zero, then hold."""
    speeds = []
    v = v0
    for i in range(steps - 1):
        if i * dt >= t_brake:
            v = max(0.0, v - decel * dt)
        speeds.append(v)
    return speeds


def _straight_lanes(width=3.5, half=70.0):
    lo, hi = -width, 0.0
    return [np.array([[-half, lo], [half, lo], [half, hi], [-half, hi]]) + [0, off]
            for off in (0.0, width)]


def _cross_lanes(width=3.5, half=70.0):
    lanes = _straight_lanes(width, half)
    for xc in (-width / 2, width / 2):
        lanes.append(np.array([[xc - width / 2, -half], [xc + width / 2, -half],
                               [xc + width / 2, half], [xc - width / 2, half]]))
    return lanes


def build_scenario_suite(dt: float = 0.5, history_len: int = 4,
                         steps: int = 22) -> list:
    """Ten deterministic scenarios (ego is agent 0, cruising +x in the lower
    lane): rear-end and crossing conflicts that require yielding, plus benign
    traffic that never conflicts. Tracks are long enough for a sequence
    attack over the whole episode."""
    ego_v, lane_y = 6.0, -1.75
    lanes_s, lanes_x = _straight_lanes(), _cross_lanes()

    def ego_track(x0):
        return _track_cv((x0, lane_y), (ego_v, 0.0), steps, dt)

    def scene_of(tracks, lanes):
        tracks = np.stack(tracks)
        return Scene(history=tracks[:, :history_len],
                     future=tracks[:, history_len:], dt=dt, lanes=lanes)

    out = []

    lead = _track_speeds((2.0, lane_y), (1, 0),
                         _brake_profile(6.0, 1.0, 4.0, steps, dt), dt)
    out.append(Scenario("lead_brake", scene_of([ego_track(-10.0), lead], lanes_s)))

    lead = _track_speeds((2.0, lane_y), (1, 0),
                         _brake_profile(5.5, 0.5, 2.5, steps, dt), dt)
    out.append(Scenario("lead_brake_near",
                        scene_of([ego_track(-10.0), lead], lanes_s)))

    lead = _track_cv((4.0, lane_y), (2.0, 0.0), steps, dt)
    out.append(Scenario("lead_slow", scene_of([ego_track(-10.0), lead], lanes_s)))

    # crossing agent reaches the conflict point (1.75, lane_y) when the ego
    # would at full speed (3.5 s after scene start)
    crosser = _track_cv((1.75, lane_y + 4.0 * 3.5), (0.0, -4.0), steps, dt)
    out.append(Scenario("crossing",
                        scene_of([ego_track(1.75 - ego_v * 3.5), crosser],
                                 lanes_x)))

    crosser = _track_cv((1.75, lane_y - 3.8 * 4.2), (0.0, 3.8), steps, dt)
    out.append(Scenario("crossing_late",
                        scene_of([ego_track(1.75 - ego_v * 4.2), crosser],
                                 lanes_x)))

    other = _track_cv((-5.0, 1.75), (5.5, 0.0), steps, dt)
    out.append(Scenario("adjacent_cruise",
                        scene_of([ego_track(-10.0), other], lanes_s)))

    other = _track_cv((25.0, 1.75), (-6.0, 0.0), steps, dt)
    out.append(Scenario("oncoming", scene_of([ego_track(-10.0), other], lanes_s)))

    a = _track_cv((-4.0, 1.75), (6.0, 0.0), steps, dt)
    b = _track_cv((20.0, lane_y), (6.5, 0.0), steps, dt)
    out.append(Scenario("two_lane", scene_of([ego_track(-10.0), a, b], lanes_s)))

    lead = _track_cv((20.0, lane_y), (6.0, 0.0), steps, dt)
    out.append(Scenario("far_lead", scene_of([ego_track(-10.0), lead], lanes_s)))

    # crossing agent clears the ego lane a full two seconds before the ego
    crosser = _track_cv((1.75, lane_y + 5.0), (0.0, -5.0), steps, dt)
    out.append(Scenario("clear_cross",
                        scene_of([ego_track(-18.0), crosser], lanes_x)))
    return out


def run_suite(scenarios, predictor, config: PlannerConfig, regime: str,
              attacker: PlannerAttack | None = None, log_dir=None) -> list:
    """Episode per scenario; returns outcome rows for the summary CSV.

    With log_dir set, each episode's step log is written there as
    `<scenario_id>-<attack>.jsonl`.
    """
    attack = "none" if attacker is None else "sequence"
    if log_dir is not None:
        os.makedirs(log_dir, exist_ok=True)
    rows = []
    for sc in scenarios:
        att = None if attacker is None else replace(attacker,
                                                    adv_index=sc.adv_index)
        outcome = run_episode(sc.scene, predictor, config, att)
        rows.append(outcome.as_row(sc.scenario_id, regime, attack))
        if log_dir is not None:
            write_episode_log(outcome, os.path.join(
                log_dir, f"{sc.scenario_id}-{attack}.jsonl"))
    return rows


# ---------------------------------------------------------------------------
# artifacts

def write_episode_log(outcome: SimOutcome, path):
    with open(path, "w") as f:
        for entry in outcome.log:
            f.write(json.dumps(entry) + "\n")


def write_outcomes(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=OUTCOMES_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
