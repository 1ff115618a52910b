"""Scenes, synthetic scene generation, trajectory metrics, and persistence.

A scene is a fixed-rate snapshot of N agents: observed history, ground-truth
future, and drivable-area lane polygons, all in a world frame (meters) whose
origin sits at the centroid of the observed positions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import shapely

from .seeding import substream

FORMAT_VERSION = 1

SPLITS = ("train", "val", "test")
PROVENANCES = ("real", "synthetic", "augmented")


class SceneValidationError(ValueError):
    """Raised when a scene violates structural or kinematic constraints."""


class DatasetFormatError(ValueError):
    """Raised on malformed dataset files, naming the offending line/field."""


@dataclass
class Scene:
    """N-agent snapshot: history (N, H, 2), future (N, T, 2), lane polygons."""

    history: np.ndarray
    future: np.ndarray
    dt: float
    lanes: list = field(default_factory=list)

    def __post_init__(self):
        self.history = np.asarray(self.history, dtype=np.float64)
        self.future = np.asarray(self.future, dtype=np.float64)
        self.lanes = [np.asarray(l, dtype=np.float64) for l in self.lanes]

    @property
    def n_agents(self) -> int:
        return self.history.shape[0]

    @property
    def history_len(self) -> int:
        return self.history.shape[1]

    @property
    def future_len(self) -> int:
        return self.future.shape[1]

    def full_track(self) -> np.ndarray:
        """History and future concatenated, (N, H+T, 2)."""
        return np.concatenate([self.history, self.future], axis=1)

    def translated(self, offset) -> "Scene":
        off = np.asarray(offset, dtype=np.float64)
        return Scene(self.history + off, self.future + off, self.dt,
                     [l + off for l in self.lanes])


def validate_scene(scene: Scene, v_max: float = 16.0):
    """Check shapes, finiteness, and per-step displacement <= v_max * dt."""
    h, f = scene.history, scene.future
    if h.ndim != 3 or h.shape[2] != 2:
        raise SceneValidationError(f"history has shape {h.shape}, expected (N, H, 2)")
    if f.ndim != 3 or f.shape[2] != 2:
        raise SceneValidationError(f"future has shape {f.shape}, expected (N, T, 2)")
    if h.shape[0] != f.shape[0]:
        raise SceneValidationError("history and future disagree on agent count")
    if h.shape[0] < 1:
        raise SceneValidationError("scene has no agents")
    if h.shape[1] < 2:
        raise SceneValidationError("history must have at least 2 steps")
    if f.shape[1] < 1:
        raise SceneValidationError("future is empty")
    if scene.dt <= 0:
        raise SceneValidationError(f"dt must be positive, got {scene.dt}")
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(f))):
        raise SceneValidationError("non-finite coordinates")
    track = scene.full_track()
    step = np.linalg.norm(np.diff(track, axis=1), axis=2)
    limit = v_max * scene.dt + 1e-9
    if step.size and step.max() > limit:
        raise SceneValidationError(
            f"displacement {step.max():.3f} m exceeds v_max*dt = {limit:.3f} m")
    for k, lane in enumerate(scene.lanes):
        if lane.ndim != 2 or lane.shape[1] != 2 or lane.shape[0] < 3:
            raise SceneValidationError(f"lane {k} is not a polygon (shape {lane.shape})")


# ---------------------------------------------------------------------------
# dataset container and persistence

@dataclass
class SceneRecord:
    """A scene plus bookkeeping: split label, provenance, optional controls."""

    scene: Scene
    split: str = "train"
    provenance: str = "synthetic"
    scene_id: str = ""
    controls: list | None = None  # per-agent control records for augmented scenes


@dataclass
class Dataset:
    """Ordered scene records with split labels and provenance tags."""

    records: list

    def __len__(self):
        return len(self.records)

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def scenes(self, split: str | None = None) -> list:
        if split is None:
            return [r.scene for r in self.records]
        return [r.scene for r in self.records if r.split == split]


def save_dataset(dataset: Dataset, path):
    """Write one JSON object per line; floats round-trip exactly via repr."""
    with open(path, "w") as fh:
        for rec in dataset.records:
            s = rec.scene
            row = {
                "format_version": FORMAT_VERSION,
                "scene_id": rec.scene_id,
                "split": rec.split,
                "provenance": rec.provenance,
                "dt": s.dt,
                "history": s.history.tolist(),
                "future": s.future.tolist(),
                "lanes": [l.tolist() for l in s.lanes],
            }
            if rec.controls is not None:
                row["controls"] = rec.controls
            fh.write(json.dumps(row) + "\n")


def load_dataset(path) -> Dataset:
    """Parse and validate a JSONL dataset file."""
    records = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"line {ln}: malformed JSON ({e.msg})") from e
            records.append(_parse_record(row, ln))
    return Dataset(records)


def _parse_record(row: dict, ln: int) -> SceneRecord:
    for key in ("format_version", "dt", "history", "future", "lanes"):
        if key not in row:
            raise DatasetFormatError(f"line {ln}: missing field '{key}'")
    if row["format_version"] != FORMAT_VERSION:
        raise DatasetFormatError(
            f"line {ln}: format_version {row['format_version']} unsupported "
            f"(expected {FORMAT_VERSION})")
    history = np.asarray(row["history"], dtype=np.float64)
    future = np.asarray(row["future"], dtype=np.float64)
    if history.ndim != 3:
        raise DatasetFormatError(f"line {ln}: field 'history' is not (N, H, 2)")
    if future.ndim != 3 or future.shape[1] == 0:
        raise DatasetFormatError(f"line {ln}: field 'future' is empty or malformed")
    split = row.get("split", "train")
    if split not in SPLITS:
        raise DatasetFormatError(f"line {ln}: unknown split '{split}'")
    provenance = row.get("provenance", "synthetic")
    if provenance not in PROVENANCES:
        raise DatasetFormatError(f"line {ln}: unknown provenance '{provenance}'")
    scene = Scene(history, future, float(row["dt"]),
                  [np.asarray(l, dtype=np.float64) for l in row["lanes"]])
    try:
        validate_scene(scene)
    except SceneValidationError as e:
        raise DatasetFormatError(f"line {ln}: {e}") from e
    return SceneRecord(scene=scene, split=split, provenance=provenance,
                       scene_id=row.get("scene_id", f"scene_{ln:05d}"),
                       controls=row.get("controls"))


# ---------------------------------------------------------------------------
# synthetic generation

@dataclass
class GenConfig:
    """Knobs for the synthetic scene generator."""

    n_agents_min: int = 1
    n_agents_max: int = 4
    history_len: int = 4
    future_len: int = 12
    dt: float = 0.5
    lane_families: tuple = ("straight", "intersection")
    behavior_weights: dict = field(default_factory=lambda: {
        "cruise": 0.4, "slow_down": 0.2, "lane_change": 0.2, "turn": 0.2})
    speed_min: float = 3.0
    speed_max: float = 10.0
    v_max: float = 16.0
    noise_std: float = 0.03
    lane_width: float = 3.5
    n_lanes: int = 2
    lane_length: float = 120.0
    rotate: bool = True

    def validate(self):
        if self.history_len < 2:
            raise SceneValidationError("config: history_len must be >= 2")
        if self.future_len < 1:
            raise SceneValidationError("config: future_len must be >= 1")
        if not self.lane_families:
            raise SceneValidationError("config: lane_families is empty")
        for fam in self.lane_families:
            if fam not in ("straight", "intersection"):
                raise SceneValidationError(f"config: unknown lane family '{fam}'")
        if not 0 < self.speed_min <= self.speed_max < self.v_max:
            raise SceneValidationError("config: need 0 < speed_min <= speed_max < v_max")
        if self.dt <= 0:
            raise SceneValidationError("config: dt must be positive")
        if self.n_agents_min < 1 or self.n_agents_max < self.n_agents_min:
            raise SceneValidationError("config: bad agent count range")


def generate_scenes(cfg: GenConfig, n_scenes: int, seed: int) -> list:
    """Seeded batch of plausible scenes; same (cfg, seed, n) => identical output."""
    cfg.validate()
    return [generate_scene(cfg, substream(seed, "scene", i)) for i in range(n_scenes)]


def generate_scene(cfg: GenConfig, rng: np.random.Generator) -> Scene:
    """One scene: lanes from a sampled family, agents with sampled behaviors."""
    family = str(rng.choice(list(cfg.lane_families)))
    lanes = _build_lanes(cfg, family)
    n_agents = int(rng.integers(cfg.n_agents_min, cfg.n_agents_max + 1))
    steps = cfg.history_len + cfg.future_len

    behaviors = list(cfg.behavior_weights)
    weights = np.array([cfg.behavior_weights[b] for b in behaviors], dtype=np.float64)
    weights = weights / weights.sum()

    used_starts = {}  # lane index -> list of start x
    tracks = []
    for _ in range(n_agents):
        behavior = str(rng.choice(behaviors, p=weights))
        if behavior == "turn" and family != "intersection":
            behavior = "lane_change"
        if behavior == "lane_change" and cfg.n_lanes < 2:
            behavior = "cruise"
        lane_idx = int(rng.integers(cfg.n_lanes))
        x0 = _spaced_start(rng, used_starts.setdefault(lane_idx, []))
        v = float(rng.uniform(cfg.speed_min, cfg.speed_max))
        tracks.append(_agent_track(cfg, rng, behavior, lane_idx, x0, v, steps))

    track = np.stack(tracks)  # (N, steps, 2)
    track = track + rng.normal(0.0, cfg.noise_std, size=track.shape)

    if cfg.rotate:
        theta = rng.uniform(0.0, 2.0 * math.pi)
        rot = np.array([[math.cos(theta), -math.sin(theta)],
                        [math.sin(theta), math.cos(theta)]])
        track = track @ rot.T
        lanes = [l @ rot.T for l in lanes]

    history = track[:, :cfg.history_len]
    future = track[:, cfg.history_len:]
    center = history.reshape(-1, 2).mean(axis=0)
    scene = Scene(history - center, future - center, cfg.dt,
                  [l - center for l in lanes])
    validate_scene(scene, cfg.v_max)
    return scene


def _spaced_start(rng, taken, gap=8.0, lo=-50.0, hi=10.0):
    for _ in range(40):
        x0 = float(rng.uniform(lo, hi))
        if all(abs(x0 - t) >= gap for t in taken):
            taken.append(x0)
            return x0
    x0 = (min(taken) - gap) if taken else lo
    taken.append(x0)
    return x0


def _lane_center(cfg, j):
    return (j - (cfg.n_lanes - 1) / 2.0) * cfg.lane_width


def _build_lanes(cfg: GenConfig, family: str) -> list:
    half = cfg.lane_length / 2.0
    lanes = []
    for j in range(cfg.n_lanes):
        yc = _lane_center(cfg, j)
        lanes.append(np.array([
            [-half, yc - cfg.lane_width / 2], [half, yc - cfg.lane_width / 2],
            [half, yc + cfg.lane_width / 2], [-half, yc + cfg.lane_width / 2]]))
    if family == "intersection":
        for j in range(cfg.n_lanes):
            xc = _lane_center(cfg, j)
            lanes.append(np.array([
                [xc - cfg.lane_width / 2, -half], [xc + cfg.lane_width / 2, -half],
                [xc + cfg.lane_width / 2, half], [xc - cfg.lane_width / 2, half]]))
    return lanes


def _agent_track(cfg, rng, behavior, lane_idx, x0, v, steps):
    """Waypoints (steps, 2) for one agent; speeds stay within [0, speed_max]."""
    t = np.arange(steps) * cfg.dt
    y0 = _lane_center(cfg, lane_idx)

    if behavior == "cruise":
        return np.stack([x0 + v * t, np.full(steps, y0)], axis=1)

    if behavior == "slow_down":
        a = float(rng.uniform(-2.0, -0.5))
        # integrate v(t) = max(0.5, v + a t) exactly on the step grid
        vs = np.maximum(0.5, v + a * t)
        xs = x0 + np.concatenate([[0.0], np.cumsum(0.5 * (vs[1:] + vs[:-1]) * cfg.dt)])
        return np.stack([xs, np.full(steps, y0)], axis=1)

    if behavior == "lane_change":
        target = lane_idx + (1 if lane_idx + 1 < cfg.n_lanes else -1)
        dy = _lane_center(cfg, target) - y0
        dur = float(rng.uniform(2.5, 4.0))
        t_start = float(rng.uniform(0.0, max(0.1, t[-1] - dur)))
        u = np.clip((t - t_start) / dur, 0.0, 1.0)
        ys = y0 + dy * (3.0 * u ** 2 - 2.0 * u ** 3)
        return np.stack([x0 + v * t, ys], axis=1)

    if behavior == "turn":
        return _turn_track(cfg, rng, lane_idx, x0, min(v, 6.0), steps)

    raise SceneValidationError(f"unknown behavior '{behavior}'")


def _turn_track(cfg, rng, lane_idx, x0, v, steps):
    """Straight approach, quarter-circle arc at the intersection, straight exit."""
    y0 = _lane_center(cfg, lane_idx)
    radius = float(rng.uniform(8.0, 14.0))
    sign = 1.0 if rng.uniform() < 0.5 else -1.0  # +1 turns left (+y)
    x_target = _lane_center(cfg, int(rng.integers(cfg.n_lanes)))
    arc_x0 = x_target - radius  # arc start so the exit aligns with a cross lane
    if x0 > arc_x0 - 2.0:
        x0 = arc_x0 - 2.0 - abs(x0 - arc_x0)
    s0 = arc_x0 - x0
    arc_len = math.pi * radius / 2.0

    pts = []
    for k in range(steps):
        s = v * k * cfg.dt
        if s <= s0:
            pts.append((x0 + s, y0))
        elif s <= s0 + arc_len:
            phi = (s - s0) / radius
            cx, cy = arc_x0, y0 + sign * radius
            pts.append((cx + radius * math.sin(phi),
                        cy - sign * radius * math.cos(phi)))
        else:
            extra = s - s0 - arc_len
            pts.append((arc_x0 + radius, y0 + sign * (radius + extra)))
    return np.array(pts)


# ---------------------------------------------------------------------------
# trajectory metrics (best-of-K)

@dataclass
class PredictionSet:
    """K candidate futures, (K, N, T, 2) meters."""

    candidates: np.ndarray

    def __post_init__(self):
        self.candidates = np.asarray(self.candidates, dtype=np.float64)
        if self.candidates.ndim != 4 or self.candidates.shape[0] < 1:
            raise SceneValidationError(
                f"candidates have shape {self.candidates.shape}, expected (K, N, T, 2)")
        if not np.all(np.isfinite(self.candidates)):
            raise SceneValidationError("candidates contain non-finite values")

    @property
    def k(self) -> int:
        return self.candidates.shape[0]


@dataclass
class Metrics:
    """Pooled per-agent prediction metrics."""

    ade: float
    fde: float
    miss_rate: float
    offroad_rate: float
    n_agents: int

    def as_dict(self) -> dict:
        return {"ade": self.ade, "fde": self.fde, "mr": self.miss_rate,
                "orr": self.offroad_rate}


def _check_pred(pred, gt):
    pred = np.asarray(getattr(pred, "candidates", pred), dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim != 4 or pred.shape[1:] != gt.shape:
        raise SceneValidationError(
            f"predictions {pred.shape} do not match ground truth {gt.shape}")
    return pred, gt


def _displacements(pred, gt):
    return np.linalg.norm(pred - gt[None], axis=3)  # (K, N, T)


def _select_best(pred, gt):
    """Per-agent candidate with minimal mean displacement (ties: lowest index).

    Returns the selected displacements (N, T) and candidate indices (N,).
    All four metrics evaluate this one candidate per agent.
    """
    disp = _displacements(pred, gt)
    sel = disp.mean(axis=2).argmin(axis=0)  # (N,)
    chosen = np.take_along_axis(disp, sel[None, :, None], axis=0)[0]
    return chosen, sel


def ade(pred, gt) -> float:
    """Best-of-K average displacement error, meters, averaged over agents."""
    pred, gt = _check_pred(pred, gt)
    chosen, _ = _select_best(pred, gt)
    return float(chosen.mean())


def fde(pred, gt) -> float:
    """Final displacement of the best-of-K candidate, averaged over agents."""
    pred, gt = _check_pred(pred, gt)
    chosen, _ = _select_best(pred, gt)
    return float(chosen[:, -1].mean())


def miss_rate(pred, gt, threshold: float = 2.0) -> float:
    """Fraction of agents whose best candidate ends > threshold from the truth."""
    pred, gt = _check_pred(pred, gt)
    chosen, _ = _select_best(pred, gt)
    return float((chosen[:, -1] > threshold).mean())


def offroad_rate(pred, gt, lanes) -> float:
    """Fraction of agents whose best candidate leaves the drivable area."""
    pred, gt = _check_pred(pred, gt)
    _, sel = _select_best(pred, gt)
    chosen = np.take_along_axis(pred, sel[None, :, None, None], axis=0)[0]  # (N, T, 2)
    return float(np.mean(~_points_on_road(chosen, lanes)))


def _points_on_road(points, lanes):
    """For (N, T, 2) waypoints: per-agent bool, True if every point is on a lane."""
    n, t, _ = points.shape
    if not lanes:
        return np.zeros(n, dtype=bool)
    area = shapely.union_all([shapely.Polygon(l) for l in lanes])
    flat = shapely.points(points.reshape(-1, 2))
    covered = shapely.covers(area, flat).reshape(n, t)
    return covered.all(axis=1)


def compute_metrics(preds, scenes, miss_threshold: float = 2.0) -> Metrics:
    """Pool per-agent metrics over (prediction, scene) pairs."""
    if len(preds) != len(scenes) or not scenes:
        raise SceneValidationError("compute_metrics: empty or mismatched inputs")
    ade_v, fde_v, miss_v, orr_v = [], [], [], []
    for pred, scene in zip(preds, scenes):
        pred, gt = _check_pred(pred, scene.future)
        chosen, sel = _select_best(pred, gt)
        ade_v.append(chosen.mean(axis=1))
        fde_v.append(chosen[:, -1])
        miss_v.append(chosen[:, -1] > miss_threshold)
        waypoints = np.take_along_axis(pred, sel[None, :, None, None], axis=0)[0]
        orr_v.append(~_points_on_road(waypoints, scene.lanes))
    total = sum(len(v) for v in ade_v)
    return Metrics(ade=float(np.concatenate(ade_v).mean()),
                   fde=float(np.concatenate(fde_v).mean()),
                   miss_rate=float(np.concatenate(miss_v).mean()),
                   offroad_rate=float(np.concatenate(orr_v).mean()),
                   n_agents=total)
