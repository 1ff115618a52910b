"""Condition-degeneration probe for trajectory predictors.

Measures how much a conditional model's samples actually depend on the
observed history, via a retrieval score: decode K candidates for each of M
probe scenes and count how often a candidate lands closer (in ADE) to its own
ground-truth future than to every other scene's future. A model that ignores
its conditioning scores at chance (1/M); a model that memorizes the probe set
scores 1.0.

run_probe sweeps a noise level applied to the training conditions — random
salt-and-pepper coordinate corruption, or a worst-case perturbation of the
same corruption range produced by the deterministic attack — retraining a
fresh model per level and scoring each one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import cvae
from . import training
from .scenes import GenConfig, Scene, SceneRecord, generate_scenes
from .seeding import derive_seed, substream

NOISE_KINDS = ("salt_pepper", "adversarial")
PROBE_M = 32
PROBE_K = 10
SALT_MAGNITUDE = 4.0
PROBE_INNER_STEPS = 10
DEFAULT_LEVELS = (0.0, 0.25, 0.5, 0.75)
PROBE_CSV_HEADER = ("noise_kind", "level", "seed", "score")


class ProbeError(ValueError):
    """Invalid probe input (bad noise level, degenerate probe set, ...)."""


# noise injection

def salt_pepper(X, p: float, seed: int, magnitude: float = SALT_MAGNITUDE):
    """Replace each coordinate of X independently with +-magnitude w.p. p.

    Unchanged coordinates keep their exact bit pattern; p=0 returns a copy of
    X and p=1 replaces everything.
    """
    if not 0.0 <= p <= 1.0:
        raise ProbeError(f"salt_pepper: p must be in [0, 1], got {p}")
    X = np.asarray(X, dtype=np.float64)
    out = X.copy()
    if p == 0.0:
        return out
    rng = substream(seed, "salt-pepper")
    hit = rng.random(X.shape) < p
    signs = np.where(rng.random(X.shape) < 0.5, -magnitude, magnitude)
    out[hit] = signs[hit]
    return out


# probe set

def anchor_scene(scene: Scene) -> Scene:
    """Translate a scene so the first agent's last observed point is the
    origin.

    The shared anchor matters: decoded candidates are emitted relative to the
    last observed position, so without re-anchoring a model that ignores its
    context entirely would still retrieve scenes through absolute placement.
    """
    return scene.translated(-scene.history[0, -1])


def build_probe_scenes(m: int, seed: int, history_len: int = 4,
                       future_len: int = 12) -> list:
    """M freshly generated single-agent scenes, origin-anchored."""
    cfg = GenConfig(n_agents_min=1, n_agents_max=1,
                    history_len=history_len, future_len=future_len)
    scenes = generate_scenes(cfg, m, derive_seed(seed, "probe-scenes"))
    return [anchor_scene(s) for s in scenes]


def zero_context(model: cvae.CvaeModel) -> cvae.CvaeModel:
    """Copy of a CVAE whose context code is identically zero.

    Zeroing the encoder output layer kills both the own-agent embedding and
    the pooled-neighbor term, so prior and decoder see the same (zero)
    conditioning for every scene.
    """
    if getattr(model, "kind", None) != "cvae":
        raise ProbeError("zero_context expects a cvae model")
    params = {k: v.copy() for k, v in model.params.items()}
    params["enc2_w"][:] = 0.0
    params["enc2_b"][:] = 0.0
    return cvae.CvaeModel(arch=model.arch, params=params)


# retrieval score

def _candidates(model, X, k, seed):
    if getattr(model, "kind", None) == "cvae":
        return cvae.sample_predictions(model, X, k, seed).candidates
    if callable(model):
        return np.asarray(model(X, k, seed), dtype=np.float64)
    raise ProbeError("condition_dependence_score: model must be a cvae model "
                     "or a callable (X, k, seed) -> (K, N, T, 2)")


def condition_dependence_score(model, scenes, k: int = PROBE_K,
                               seed: int = 0) -> float:
    """Retrieval accuracy over M*K decoded candidates.

    For each probe scene, decode k candidates conditioned on its history; a
    candidate is a hit when its ADE to the scene's own future is strictly
    smaller than its ADE to every other future in the set.
    """
    m = len(scenes)
    if m < 2:
        raise ProbeError("condition_dependence_score: need at least 2 scenes")
    hist_keys = {s.history.tobytes() for s in scenes}
    fut_keys = {s.future.tobytes() for s in scenes}
    if len(hist_keys) < m or len(fut_keys) < m:
        raise ProbeError("condition_dependence_score: duplicate scenes make "
                         "retrieval ill-posed")
    futures = np.stack([s.future[0] for s in scenes])  # (M, T, 2)
    # one shared sampling seed: candidate noise is common across scenes, so a
    # context-blind model decodes the same set everywhere and scores 1/M
    sample_seed = derive_seed(seed, "probe-sample")
    hits = 0
    for i, scene in enumerate(scenes):
        cands = _candidates(model, scene.history, k, sample_seed)[:, 0]
        ade = np.linalg.norm(cands[:, None] - futures[None], axis=-1).mean(axis=-1)
        own = ade[:, i]
        others = np.min(np.delete(ade, i, axis=1), axis=1)
        hits += int(np.sum(own < others))
    return hits / float(m * k)


# level sweep

@dataclass
class ProbeReport:
    """Per-level retrieval scores for one noise kind and seed."""

    noise_kind: str
    levels: tuple
    scores: tuple
    seed: int
    budget: int          # training epochs per level
    m: int
    k: int
    budget_flag: bool    # lowest-level score indistinguishable from chance
    score_var: float     # binomial variance estimate at the lowest level

    def __post_init__(self):
        if len(self.scores) != len(self.levels):
            raise ProbeError("probe report: one score per level")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ProbeError("probe report: levels must be strictly increasing")
        if any(not 0.0 <= s <= 1.0 for s in self.scores):
            raise ProbeError("probe report: scores must lie in [0, 1]")

    def rows(self) -> list:
        return [{"noise_kind": self.noise_kind, "level": float(lvl),
                 "seed": self.seed, "score": float(s)}
                for lvl, s in zip(self.levels, self.scores)]


def write_probe_csv(reports, path):
    """Plot-ready CSV, one row per (kind, level, seed)."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PROBE_CSV_HEADER)
        writer.writeheader()
        for report in reports:
            for row in report.rows():
                writer.writerow(row)


def run_probe(family: str, noise_kind: str, levels, budget: int, seed: int,
              m: int = PROBE_M, k: int = PROBE_K, n_train: int = 64,
              arch: cvae.CvaeArch | None = None,
              magnitude: float = SALT_MAGNITUDE) -> ProbeReport:
    """Train one fresh model per noise level and score each.

    Levels are dimensionless fractions of one shared corruption scale. For
    salt_pepper, the level is the probability of replacing a coordinate with
    a +-magnitude spike (corruption range 2*magnitude wide). For adversarial,
    the level buys a worst-case perturbation of the same range: a
    deterministic inner attack, recomputed every training step, with
    eps = level * 2 * magnitude. Level 0 trains identically for both kinds.

    The probe set is the first m training scenes (clean, origin-anchored):
    the question is whether the fitted model still uses the conditions it was
    trained on, so memorized structure counts as dependence.
    """
    if family != "cvae":
        raise ProbeError(f"run_probe: unsupported model family '{family}'")
    if noise_kind not in NOISE_KINDS:
        raise ProbeError(f"run_probe: unknown noise kind '{noise_kind}'")
    levels = tuple(float(lvl) for lvl in levels)
    if not levels:
        raise ProbeError("run_probe: need at least one level")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ProbeError("run_probe: levels must be strictly increasing")
    if levels[0] < 0.0:
        raise ProbeError("run_probe: levels must be >= 0")
    if levels[-1] > 1.0:
        raise ProbeError("run_probe: levels are fractions in [0, 1]")
    if budget < 1:
        raise ProbeError("run_probe: train budget must be >= 1 epoch")
    if n_train < m:
        raise ProbeError("run_probe: need at least m training scenes")

    arch = arch or cvae.CvaeArch(hidden_dim=32, embed_dim=16, latent_dim=4)
    cfg = GenConfig(n_agents_min=1, n_agents_max=1,
                    history_len=arch.history_len, future_len=arch.future_len)
    base = generate_scenes(cfg, n_train, derive_seed(seed, "probe-train-data"))
    probe_scenes = [anchor_scene(s) for s in base[:m]]

    scores = []
    for li, level in enumerate(levels):
        scenes = base
        if noise_kind == "salt_pepper" and level > 0.0:
            scenes = [Scene(salt_pepper(s.history, level,
                                        derive_seed(seed, "salt", li, i),
                                        magnitude),
                            s.future, s.dt, s.lanes)
                      for i, s in enumerate(base)]
        records = [SceneRecord(scene=s, scene_id=f"probe-{i:03d}")
                   for i, s in enumerate(scenes)]
        attacked = noise_kind == "adversarial" and level > 0.0
        config = training.TrainConfig(
            regime="naive_at" if attacked else "clean",
            epochs=budget, batch_size=8, k=k,
            eps=2.0 * magnitude * level if attacked else 0.0,
            inner_steps=PROBE_INNER_STEPS,
            inner_objective="deterministic" if attacked else None,
            seed=derive_seed(seed, "probe-fit"))
        model, _ = training.train(records, config, arch=arch)
        scores.append(condition_dependence_score(model, probe_scenes, k, seed))

    chance = 1.0 / m
    p_hat = max(scores[0], chance)
    var = p_hat * (1.0 - p_hat) / float(m * k)
    flagged = scores[0] < chance + 3.0 * np.sqrt(var)
    return ProbeReport(noise_kind=noise_kind, levels=levels,
                       scores=tuple(scores), seed=seed, budget=budget,
                       m=m, k=k, budget_flag=bool(flagged),
                       score_var=float(var))
