"""Attack family: L-inf projection, adaptive-step PGD, and the objectives.

Objectives are maximized over a history perturbation delta restricted to the
designated adversarial agents. The deterministic objective routes gradients
through the model's most-likely latent (prior mean / zero) instead of through
stochastic samples, which is what removes gradient obfuscation; the latent and
context objectives target the posterior and the context encoder respectively.

All objectives run batched: scenes of equal agent count share one graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import cgan, cvae, nets
from .seeding import derive_seed

EPS_SLACK = 1e-12


class UnsupportedAttackError(ValueError):
    """Raised for (attack kind, model family) combinations without a definition."""


@dataclass
class ThreatModel:
    """L-inf ball of radius eps over the attacked agents' history coordinates."""

    eps: float
    norm: str = "linf"
    attacked_agents: object = (0,)  # tuple of agent indices, or "all"

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError(f"threat model: eps must be >= 0, got {self.eps}")
        if self.norm != "linf":
            raise UnsupportedAttackError(f"threat model: unsupported norm '{self.norm}'")

    def agent_mask(self, n_agents: int) -> np.ndarray:
        if self.attacked_agents == "all":
            return np.ones(n_agents, dtype=bool)
        mask = np.zeros(n_agents, dtype=bool)
        for i in self.attacked_agents:
            if not 0 <= i < n_agents:
                raise ValueError(f"threat model: agent index {i} out of range")
            mask[i] = True
        return mask


@dataclass
class AttackConfig:
    """PGD schedule: adaptive step with halving on stalls."""

    steps: int = 20
    alpha: float | None = None   # defaults to eps / 4
    patience: int = 5
    random_init: bool = False
    seed: int = 0
    k: int = 5                   # candidate count for the stochastic objective
    eot_draws: int = 4           # sequence attack only

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("attack config: steps must be >= 1")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("attack config: alpha must be positive")


@dataclass
class ThreatCounter:
    """Per-step projection audit; violations must stay at zero."""

    checked: int = 0
    violations: int = 0

    def reset(self):
        self.checked = 0
        self.violations = 0


threat_counter = ThreatCounter()


def project_linf(delta: np.ndarray, eps: float) -> np.ndarray:
    """Componentwise clamp onto the L-inf ball; idempotent."""
    return np.clip(delta, -eps, eps)


@dataclass
class AttackResult:
    delta: np.ndarray        # (N, H, 2) meters, zero outside attacked agents
    trace: list              # best-so-far objective per step (len steps + 1)
    objective: float         # final best objective
    scene_id: str = ""
    attack_kind: str = ""
    eps: float = 0.0
    steps: int = 0

    def as_dict(self) -> dict:
        return {"scene_id": self.scene_id, "attack_kind": self.attack_kind,
                "eps": self.eps, "steps": self.steps,
                "delta": self.delta.tolist(), "trace": list(self.trace)}


# ---------------------------------------------------------------------------
# objective builders
#
# A builder closes over the batch constants and exposes
#   evaluate(delta_flat, step) -> (per_scene_objective (B,), grad (B*N, 2H))
# rebuilding the graph each call so PGD can iterate on fresh values.

def _family(model):
    return model.kind


def _graphs(model):
    if model.kind == "cvae":
        return cvae, model.arch
    if model.kind == "cgan":
        return cgan, model.arch
    raise UnsupportedAttackError(f"unknown model family '{model.kind}'")


class _Builder:
    def __init__(self, model, batch, threat):
        self.model = model
        self.batch = batch
        self.threat = threat
        self.pt = nets.const_tensors(model.params)
        mask = threat.agent_mask(batch.n_agents)
        self.row_mask = np.tile(mask, batch.n_scenes)[:, None].astype(np.float64)
        self.fut_t = ad.Tensor(batch.fut)

    def hist_tensor(self, delta_flat):
        leaf = ad.Tensor(delta_flat, requires_grad=True)
        return leaf, ad.add(ad.Tensor(self.batch.hist), leaf)

    def finish(self, leaf, obj_scene):
        grads = ad.backward(ad.sum_all(obj_scene))
        grad = grads.get(leaf, np.zeros_like(self.batch.hist))
        if not np.all(np.isfinite(grad)):
            raise RuntimeError("attack: non-finite gradient")
        return obj_scene.values.copy(), grad * self.row_mask


class DeterministicObjective(_Builder):
    """Squared error of the most-likely decode at the perturbed input (Eq.-5 style)."""

    def evaluate(self, delta_flat, step):
        leaf, hist_t = self.hist_tensor(delta_flat)
        mod, arch = _graphs(self.model)
        if self.model.kind == "cvae":
            ctx = cvae.context_graph(self.pt, hist_t, self.batch, arch)
            mu, _ = cvae.prior_graph(self.pt, ctx, arch)
            traj = cvae.decode_graph(self.pt, ctx, mu, hist_t, self.batch)
        else:
            ctx = cgan.gen_context_graph(self.pt, hist_t, self.batch, arch)
            z0 = ad.Tensor(np.zeros((self.batch.rows, arch.latent_dim)))
            traj = cgan.generate_graph(self.pt, ctx, z0, hist_t, self.batch)
        obj = nets.scene_sums(nets.row_sqerr(traj, self.fut_t), self.batch)
        return self.finish(leaf, obj)


class NaiveObjective(_Builder):
    """Best-of-K squared error with fresh latent draws every PGD step.

    The per-step resampling is the point: it reproduces the gradient
    obfuscation that makes this baseline weak.
    """

    def __init__(self, model, batch, threat, k, seed):
        super().__init__(model, batch, threat)
        self.k = k
        self.seed = seed

    def evaluate(self, delta_flat, step):
        leaf, hist_t = self.hist_tensor(delta_flat)
        mod, arch = _graphs(self.model)
        rng = np.random.default_rng(derive_seed(self.seed, "naive-draw", step))
        u = rng.standard_normal((self.k, self.batch.rows, arch.latent_dim))
        if self.model.kind == "cvae":
            ctx = cvae.context_graph(self.pt, hist_t, self.batch, arch)
            mu, ls = cvae.prior_graph(self.pt, ctx, arch)
            zs = [cvae.reparam(mu, ls, u[i]) for i in range(self.k)]
            dec = lambda z: cvae.decode_graph(self.pt, ctx, z, hist_t, self.batch)
        else:
            ctx = cgan.gen_context_graph(self.pt, hist_t, self.batch, arch)
            zs = [ad.Tensor(u[i]) for i in range(self.k)]
            dec = lambda z: cgan.generate_graph(self.pt, ctx, z, hist_t, self.batch)
        errs = []
        for z in zs:
            err = nets.scene_sums(nets.row_sqerr(dec(z), self.fut_t), self.batch)
            errs.append(ad.reshape(err, (self.batch.n_scenes, 1)))
        obj = ad.min_over_axis(ad.concat(errs, axis=1), 1)
        return self.finish(leaf, obj)


class LatentObjective(_Builder):
    """KL between the clean posterior and the posterior at the perturbed input."""

    def __init__(self, model, batch, threat):
        if model.kind != "cvae":
            raise UnsupportedAttackError(
                "latent attack requires a posterior encoder; "
                f"model family '{model.kind}' has none")
        super().__init__(model, batch, threat)
        hist_t = ad.Tensor(batch.hist)
        ctx = cvae.context_graph(self.pt, hist_t, batch, model.arch)
        mu, ls = cvae.posterior_graph(self.pt, ctx, hist_t, batch, model.arch)
        self.clean_q = (ad.Tensor(mu.values.copy()), ad.Tensor(ls.values.copy()))

    def evaluate(self, delta_flat, step):
        leaf, hist_t = self.hist_tensor(delta_flat)
        arch = self.model.arch
        ctx = cvae.context_graph(self.pt, hist_t, self.batch, arch)
        q_pert = cvae.posterior_graph(self.pt, ctx, hist_t, self.batch, arch)
        kl_rows = ad.sum_over_axis(cvae.kl_graph(self.clean_q, q_pert), 1)
        obj = nets.scene_sums(kl_rows, self.batch)
        return self.finish(leaf, obj)


class ContextObjective(_Builder):
    """L2 distance between clean and perturbed context codes."""

    def __init__(self, model, batch, threat):
        super().__init__(model, batch, threat)
        mod, arch = _graphs(model)
        hist_t = ad.Tensor(batch.hist)
        self.clean_ctx = ad.Tensor(self._context(hist_t).values.copy())

    def _context(self, hist_t):
        if self.model.kind == "cvae":
            return cvae.context_graph(self.pt, hist_t, self.batch, self.model.arch)
        return cgan.gen_context_graph(self.pt, hist_t, self.batch, self.model.arch)

    def evaluate(self, delta_flat, step):
        leaf, hist_t = self.hist_tensor(delta_flat)
        ctx = self._context(hist_t)
        sq = nets.scene_sums(nets.row_sqerr(ctx, self.clean_ctx), self.batch)
        obj = ad.sqrt(sq)
        return self.finish(leaf, obj)


ATTACK_KINDS = ("naive", "deterministic", "latent", "context")

# Zero-init PGD cannot move on objectives that are exactly stationary at
# delta = 0 (their minimum); those kinds get a seeded random init instead.
RANDOM_INIT_KINDS = ("latent", "context")


def make_objective(kind: str, model, batch, threat, config: AttackConfig):
    if kind == "deterministic":
        return DeterministicObjective(model, batch, threat)
    if kind == "naive":
        return NaiveObjective(model, batch, threat, config.k, config.seed)
    if kind == "latent":
        return LatentObjective(model, batch, threat)
    if kind == "context":
        return ContextObjective(model, batch, threat)
    raise UnsupportedAttackError(f"unknown attack kind '{kind}'")


# ---------------------------------------------------------------------------
# PGD driver

def pgd_batch(builder, batch, threat, config: AttackConfig):
    """Sign-gradient ascent with per-scene adaptive steps and best-so-far.

    Returns (delta (B*N, 2H), traces (B, steps+1), best objective (B,)).
    """
    eps = threat.eps
    b, rows = batch.n_scenes, batch.rows
    mask = builder.row_mask
    rng = np.random.default_rng(derive_seed(config.seed, "pgd-init"))

    use_random = config.random_init
    if use_random and eps > 0:
        delta = rng.uniform(-eps, eps, size=batch.hist.shape) * mask
    else:
        delta = np.zeros_like(batch.hist)
    delta = _project_masked(delta, eps, mask)

    alpha0 = config.alpha if config.alpha is not None else eps / 4.0
    alpha = np.full(b, alpha0)
    floor = eps / 100.0
    stall = np.zeros(b, dtype=int)

    obj, grad = builder.evaluate(delta, 0)
    best_obj = obj.copy()
    best_delta = delta.copy()
    traces = [best_obj.copy()]

    for step in range(1, config.steps + 1):
        step_sizes = np.repeat(alpha, batch.n_agents)[:, None]
        delta = _project_masked(delta + step_sizes * np.sign(grad), eps, mask)
        obj, grad = builder.evaluate(delta, step)

        improved = obj > best_obj + EPS_SLACK
        for i in np.nonzero(improved)[0]:
            best_obj[i] = obj[i]
            lo, hi = i * batch.n_agents, (i + 1) * batch.n_agents
            best_delta[lo:hi] = delta[lo:hi]
        stall = np.where(improved, 0, stall + 1)
        halve = stall >= config.patience
        alpha = np.where(halve, np.maximum(alpha / 2.0, floor), alpha)
        stall = np.where(halve, 0, stall)
        traces.append(best_obj.copy())

    return best_delta, np.stack(traces, axis=1), best_obj


def _project_masked(delta, eps, mask):
    out = project_linf(delta, eps) * mask
    threat_counter.checked += 1
    if np.max(np.abs(out)) > eps + EPS_SLACK:
        threat_counter.violations += 1
    return out


def pgd(model, scene, objective: str, threat: ThreatModel,
        config: AttackConfig, scene_id: str = "") -> AttackResult:
    """Attack one scene; returns the best perturbation and its trace."""
    batch = nets.stack_scenes([scene])
    cfg = config
    if objective in RANDOM_INIT_KINDS and not cfg.random_init:
        cfg = AttackConfig(steps=config.steps, alpha=config.alpha,
                           patience=config.patience, random_init=True,
                           seed=config.seed, k=config.k, eot_draws=config.eot_draws)
    builder = make_objective(objective, model, batch, threat, cfg)
    delta, traces, best = pgd_batch(builder, batch, threat, cfg)
    return AttackResult(delta=nets.unflatten_track(delta), trace=traces[0].tolist(),
                        objective=float(best[0]), scene_id=scene_id,
                        attack_kind=objective, eps=threat.eps, steps=cfg.steps)


# ---------------------------------------------------------------------------
# single-scene objective values (array in, scalar out)

_EVAL_THREAT = ThreatModel(eps=1e9, attacked_agents="all")


def _value_batch(model, X, Y=None):
    from .scenes import Scene
    X = np.asarray(X, dtype=np.float64)
    arch = model.arch
    if X.ndim != 3 or X.shape[1] != arch.history_len or X.shape[2] != 2:
        raise ad.ShapeError(f"history shape {X.shape} != (N, {arch.history_len}, 2)")
    if Y is None:
        Y = np.broadcast_to(X[:, -1:], (X.shape[0], arch.future_len, 2)).copy()
    else:
        Y = np.asarray(Y, dtype=np.float64)
        if Y.shape != (X.shape[0], arch.future_len, 2):
            raise ad.ShapeError(
                f"future shape {Y.shape} != ({X.shape[0]}, {arch.future_len}, 2)")
    return nets.stack_scenes([Scene(X, Y, 0.5)])


def _flat_delta(X, delta):
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != np.shape(X):
        raise ad.ShapeError(
            f"delta shape {delta.shape} != history shape {np.shape(X)}")
    return nets.flatten_track(delta)


def objective_naive(model, X, delta, Y, k: int, seed: int) -> float:
    batch = _value_batch(model, X, Y)
    builder = NaiveObjective(model, batch, _EVAL_THREAT, k, seed)
    obj, _ = builder.evaluate(_flat_delta(X, delta), 0)
    return float(obj[0])


def objective_deterministic(model, X, delta, Y) -> float:
    batch = _value_batch(model, X, Y)
    builder = DeterministicObjective(model, batch, _EVAL_THREAT)
    obj, _ = builder.evaluate(_flat_delta(X, delta), 0)
    return float(obj[0])


def objective_latent(model, X, delta, Y) -> float:
    batch = _value_batch(model, X, Y)
    builder = LatentObjective(model, batch, _EVAL_THREAT)
    obj, _ = builder.evaluate(_flat_delta(X, delta), 0)
    return float(obj[0])


def objective_context(model, X, delta) -> float:
    batch = _value_batch(model, X)
    builder = ContextObjective(model, batch, _EVAL_THREAT)
    obj, _ = builder.evaluate(_flat_delta(X, delta), 0)
    return float(obj[0])


# ---------------------------------------------------------------------------
# sequence attack (shared perturbation over overlapping frames, EOT)

class SequenceObjective:
    """Sum over L_p+1 sliding windows of the per-window prediction error,
    averaged over EOT draws; one delta_seq shared by all windows.

    Draw 1 per window is the most-likely latent (zero noise); draws 2..E are
    seeded standard normals, fixed across PGD steps (common random numbers).
    """

    def __init__(self, model, tracks, adv_index: int, l_p: int,
                 history_len: int, future_len: int, eot_draws: int, seed: int):
        tracks = np.asarray(tracks, dtype=np.float64)
        need = history_len + l_p + future_len
        if tracks.ndim != 3 or tracks.shape[1] < need:
            raise ad.ShapeError(
                f"sequence attack: tracks shape {tracks.shape} too short for "
                f"H + L_p + T = {need} steps")
        if not 0 <= adv_index < tracks.shape[0]:
            raise ValueError(f"sequence attack: bad adversary index {adv_index}")
        if eot_draws < 1:
            raise ValueError("sequence attack: eot_draws must be >= 1")
        self.model = model
        self.tracks = tracks
        self.adv = adv_index
        self.l_p = l_p
        self.h = history_len
        self.t = future_len
        self.eot = eot_draws
        self.pt = nets.const_tensors(model.params)
        self.n = tracks.shape[0]
        rng = np.random.default_rng(derive_seed(seed, "seq-eot"))
        lat = model.arch.latent_dim
        # u[w, e] noise for window w, draw e (draw 0 is zero noise)
        self.u = rng.standard_normal((l_p + 1, eot_draws, self.n, lat))
        self.u[:, 0] = 0.0
        from .scenes import Scene
        self.windows = []
        for w in range(l_p + 1):
            x = tracks[:, w:w + self.h]
            y = tracks[:, w + self.h:w + self.h + self.t]
            self.windows.append(nets.stack_scenes([Scene(x, y, 0.5)]))

    def evaluate(self, delta_seq_values, step):
        leaf = ad.Tensor(delta_seq_values, requires_grad=True)
        total = None
        for w, batch in enumerate(self.windows):
            dx = ad.slice_axis(leaf, 0, w, w + self.h)
            row = ad.concat([ad.reshape(ad.slice_axis(dx, 1, 0, 1), (1, self.h)),
                             ad.reshape(ad.slice_axis(dx, 1, 1, 2), (1, self.h))], axis=1)
            rows = [row if i == self.adv else ad.Tensor(np.zeros((1, 2 * self.h)))
                    for i in range(self.n)]
            hist_t = ad.add(ad.Tensor(batch.hist), ad.concat(rows, axis=0))
            fut_t = ad.Tensor(batch.fut)
            errs = []
            for e in range(self.eot):
                traj = self._decode(hist_t, batch, self.u[w, e])
                errs.append(nets.row_sqerr(traj, fut_t))
            win = ad.scale(ad.sum_all(ad.concat(errs, axis=0)), 1.0 / self.eot)
            total = win if total is None else ad.add(total, win)
        grads = ad.backward(total)
        grad = grads.get(leaf, np.zeros_like(delta_seq_values))
        if not np.all(np.isfinite(grad)):
            raise RuntimeError("attack: non-finite gradient")
        return np.array([total.item()]), grad

    def _decode(self, hist_t, batch, u):
        arch = self.model.arch
        if self.model.kind == "cvae":
            ctx = cvae.context_graph(self.pt, hist_t, batch, arch)
            mu, ls = cvae.prior_graph(self.pt, ctx, arch)
            z = cvae.reparam(mu, ls, u)
            return cvae.decode_graph(self.pt, ctx, z, hist_t, batch)
        ctx = cgan.gen_context_graph(self.pt, hist_t, batch, arch)
        return cgan.generate_graph(self.pt, ctx, ad.Tensor(u), hist_t, batch)


def objective_sequence(model, tracks, delta_seq, l_p: int, adv_index: int = 0,
                       eot_draws: int = 1, seed: int = 0) -> float:
    """Value of the shared-perturbation objective at a given delta_seq."""
    arch = model.arch
    builder = SequenceObjective(model, tracks, adv_index, l_p,
                                arch.history_len, arch.future_len, eot_draws, seed)
    delta_seq = np.asarray(delta_seq, dtype=np.float64)
    if delta_seq.shape != (arch.history_len + l_p, 2):
        raise ad.ShapeError(
            f"delta_seq shape {delta_seq.shape} != ({arch.history_len + l_p}, 2)")
    obj, _ = builder.evaluate(delta_seq, 0)
    return float(obj[0])


def pgd_sequence(model, tracks, threat: ThreatModel, config: AttackConfig,
                 l_p: int, adv_index: int = 0):
    """PGD over one shared delta_seq of shape (H + L_p, 2)."""
    arch = model.arch
    builder = SequenceObjective(model, tracks, adv_index, l_p, arch.history_len,
                                arch.future_len, config.eot_draws, config.seed)
    eps = threat.eps
    delta = np.zeros((arch.history_len + l_p, 2))
    if config.random_init and eps > 0:
        rng = np.random.default_rng(derive_seed(config.seed, "seq-init"))
        delta = rng.uniform(-eps, eps, size=delta.shape)
    delta = _project_masked(delta, eps, np.ones_like(delta))

    alpha = config.alpha if config.alpha is not None else eps / 4.0
    floor = eps / 100.0
    stall = 0
    obj, grad = builder.evaluate(delta, 0)
    best_obj, best_delta = obj[0], delta.copy()
    trace = [best_obj]
    for step in range(1, config.steps + 1):
        delta = _project_masked(delta + alpha * np.sign(grad), eps,
                                np.ones_like(delta))
        obj, grad = builder.evaluate(delta, step)
        if obj[0] > best_obj + EPS_SLACK:
            best_obj, best_delta = obj[0], delta.copy()
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                alpha = max(alpha / 2.0, floor)
                stall = 0
        trace.append(best_obj)
    return best_delta, trace, float(best_obj)
