"""Conditional GAN predictor: generator/discriminator over the shared scene
graph helpers, with a best-of-K diversity term on the generator.

The generator and discriminator each own a context encoder (prefixes "genc"
and "denc"); the discriminator scores (context, future-relative-to-anchor)
pairs through a sigmoid head. Log-scores are computed as -softplus(-/+logit)
so losses stay finite for any logit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import cvae, nets
from .optim import Adam
from .scenes import PredictionSet
from .seeding import derive_seed, substream


@dataclass
class CganArch:
    history_len: int = 4
    future_len: int = 12
    hidden_dim: int = 64
    embed_dim: int = 32
    latent_dim: int = 8

    @property
    def context_dim(self) -> int:
        return 2 * self.embed_dim

    def as_dict(self) -> dict:
        return {"family": "cgan", "history_len": self.history_len,
                "future_len": self.future_len, "hidden_dim": self.hidden_dim,
                "embed_dim": self.embed_dim, "latent_dim": self.latent_dim}


@dataclass
class CganModel:
    arch: CganArch
    params: dict
    kind: str = field(default="cgan", init=False)

    @property
    def gen_names(self) -> list:
        return [n for n in self.params if n.startswith(("genc", "gdec"))]

    @property
    def disc_names(self) -> list:
        return [n for n in self.params if n.startswith(("denc", "dhead"))]


def init_cgan(arch: CganArch, seed: int) -> CganModel:
    rng = substream(seed, "cgan-init")
    feat = 2 * (arch.history_len - 1)
    p = {}

    def lin(name, n_in, n_out):
        p[name + "_w"] = nets.glorot(rng, n_in, n_out)
        p[name + "_b"] = np.zeros(n_out)

    lin("genc1", feat, arch.hidden_dim)
    lin("genc2", arch.hidden_dim, arch.embed_dim)
    lin("gdec1", arch.context_dim + arch.latent_dim, arch.hidden_dim)
    lin("gdec2", arch.hidden_dim, 2 * arch.future_len)
    lin("denc1", feat, arch.hidden_dim)
    lin("denc2", arch.hidden_dim, arch.embed_dim)
    lin("dhead1", arch.context_dim + 2 * arch.future_len, arch.hidden_dim)
    lin("dhead2", arch.hidden_dim, 1)
    return CganModel(arch=arch, params=p)


# ---------------------------------------------------------------------------
# graph builders

def gen_context_graph(pt, hist_t, batch, arch) -> ad.Tensor:
    return cvae.context_graph(pt, hist_t, batch, arch, prefix="genc")


def disc_context_graph(pt, hist_t, batch, arch) -> ad.Tensor:
    return cvae.context_graph(pt, hist_t, batch, arch, prefix="denc")


def generate_graph(pt, ctx, z, hist_t, batch) -> ad.Tensor:
    """(context, latent) -> absolute positions (B*N, 2T)."""
    disp = nets.mlp2(pt, "gdec", ad.concat([ctx, z], axis=1))
    return nets.positions_from_disp(disp, hist_t, batch)


def relative_future(traj_t: ad.Tensor, hist_t: ad.Tensor, batch) -> ad.Tensor:
    """Future positions re-anchored to the last observed position (B*N, 2T)."""
    return nets.relative_track(traj_t, hist_t, batch)


def disc_logit_graph(pt, hist_t, traj_t, batch, arch) -> ad.Tensor:
    """Raw discriminator logit (B*N, 1); sigmoid of this is the score."""
    ctx = disc_context_graph(pt, hist_t, batch, arch)
    rel = relative_future(traj_t, hist_t, batch)
    return nets.mlp2(pt, "dhead", ad.concat([ctx, rel], axis=1))


def _log_sigmoid(logit: ad.Tensor) -> ad.Tensor:
    return ad.scale(ad.softplus(ad.scale(logit, -1.0)), -1.0)


def _log_one_minus_sigmoid(logit: ad.Tensor) -> ad.Tensor:
    return ad.scale(ad.softplus(logit), -1.0)


def gan_loss_graphs(pt, hist_t, batch, arch, u: np.ndarray) -> dict:
    """Both losses on one graph; u is (K, B*N, latent) constant noise.

    disc = -(mean log D(real) + mean log(1-D(fake)))
    gen  = -mean log D(fake) + mean over scenes of min_k scene error
    """
    if u.ndim != 3 or u.shape[1] != batch.rows or u.shape[2] != arch.latent_dim:
        raise ad.ShapeError(f"gan noise shape {u.shape} incompatible with batch")
    k = u.shape[0]
    ctx_g = gen_context_graph(pt, hist_t, batch, arch)
    fut_t = ad.Tensor(batch.fut)
    fakes = [generate_graph(pt, ctx_g, ad.Tensor(u[i]), hist_t, batch)
             for i in range(k)]
    logit_real = disc_logit_graph(pt, hist_t, fut_t, batch, arch)
    logit_fake = ad.concat(
        [disc_logit_graph(pt, hist_t, f, batch, arch) for f in fakes], axis=0)

    d_loss = ad.scale(ad.add(ad.mean_all(_log_sigmoid(logit_real)),
                             ad.mean_all(_log_one_minus_sigmoid(logit_fake))), -1.0)

    g_adv = ad.scale(ad.mean_all(_log_sigmoid(logit_fake)), -1.0)
    per_k = [ad.reshape(nets.scene_sums(nets.row_sqerr(f, fut_t), batch),
                        (batch.n_scenes, 1)) for f in fakes]
    g_div = ad.mean_all(ad.min_over_axis(ad.concat(per_k, axis=1), 1))
    g_loss = ad.add(g_adv, g_div)
    return {"disc": d_loss, "gen": g_loss, "gen_adv": g_adv, "gen_div": g_div,
            "logit_real": logit_real, "logit_fake": logit_fake}


# ---------------------------------------------------------------------------
# public API

def _single_batch(model, X, Y=None) -> nets.Batch:
    X = np.asarray(X, dtype=np.float64)
    arch = model.arch
    if X.ndim != 3 or X.shape[1] != arch.history_len or X.shape[2] != 2:
        raise ad.ShapeError(
            f"history shape {X.shape} != (N, {arch.history_len}, 2)")
    if Y is None:
        n = X.shape[0]
        last = X[:, -1:, :]
        Y = np.broadcast_to(last, (n, arch.future_len, 2)).copy()
    else:
        Y = np.asarray(Y, dtype=np.float64)
        if Y.shape != (X.shape[0], arch.future_len, 2):
            raise ad.ShapeError(
                f"future shape {Y.shape} != ({X.shape[0]}, {arch.future_len}, 2)")
    from .scenes import Scene
    return nets.stack_scenes([Scene(X, Y, 0.5)])


def _sigmoid(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise RuntimeError("discriminator: non-finite logit")
    return 0.5 * (1.0 + np.tanh(0.5 * logits))


def generate(model: CganModel, X, Z) -> np.ndarray:
    """Decode latents Z (N, latent_dim) at history X -> (N, T, 2) positions."""
    batch = _single_batch(model, X)
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape != (batch.rows, model.arch.latent_dim):
        raise ad.ShapeError(
            f"latent shape {Z.shape} != ({batch.rows}, {model.arch.latent_dim})")
    pt = nets.const_tensors(model.params)
    hist_t = ad.Tensor(batch.hist)
    ctx = gen_context_graph(pt, hist_t, batch, model.arch)
    traj = generate_graph(pt, ctx, ad.Tensor(Z), hist_t, batch)
    return nets.unflatten_track(traj.values)


def deterministic_latent(model: CganModel, X) -> np.ndarray:
    """The most-likely latent under the N(0,1) prior: zero."""
    X = np.asarray(X, dtype=np.float64)
    return np.zeros((X.shape[0], model.arch.latent_dim))


def discriminator_score(model: CganModel, X, Y) -> np.ndarray:
    """Per-agent scores in (0,1) for a (history, future) pair."""
    batch = _single_batch(model, X, Y)
    pt = nets.const_tensors(model.params)
    hist_t = ad.Tensor(batch.hist)
    logit = disc_logit_graph(pt, hist_t, ad.Tensor(batch.fut), batch, model.arch)
    return _sigmoid(logit.values[:, 0])


def sample_predictions(model: CganModel, X, k: int, seed: int,
                       u: np.ndarray | None = None) -> PredictionSet:
    """K decodes at N(0,1) latent draws (or a caller-supplied (K, N, L) u)."""
    batch = _single_batch(model, X)
    lat = model.arch.latent_dim
    if u is None:
        rng = substream(seed, "cgan-sample")
        u = rng.standard_normal((k, batch.rows, lat))
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (k, batch.rows, lat):
        raise ad.ShapeError(f"noise shape {u.shape} != ({k}, {batch.rows}, {lat})")
    pt = nets.const_tensors(model.params)
    hist_t = ad.Tensor(batch.hist)
    ctx = gen_context_graph(pt, hist_t, batch, model.arch)
    trajs = [nets.unflatten_track(
        generate_graph(pt, ctx, ad.Tensor(u[i]), hist_t, batch).values)
        for i in range(k)]
    return PredictionSet(np.stack(trajs, axis=0))


def loss_gan(model: CganModel, X, Y, k: int, seed: int) -> tuple:
    """(discriminator loss, generator loss) at seeded latent draws."""
    batch = _single_batch(model, X, Y)
    rng = substream(seed, "gan-draw")
    u = rng.standard_normal((k, batch.rows, model.arch.latent_dim))
    pt = nets.const_tensors(model.params)
    graphs = gan_loss_graphs(pt, ad.Tensor(batch.hist), batch, model.arch, u)
    return float(graphs["disc"].item()), float(graphs["gen"].item())


def train_step_alternating(model: CganModel, scenes, opt_d: Adam, opt_g: Adam,
                           k: int, seed: int, step: int) -> dict:
    """One discriminator update, then one generator update on fresh draws.

    Mutates model.params in place; returns the scalar losses observed.
    """
    batch = nets.stack_scenes(scenes)
    arch = model.arch

    def one_side(tag, loss_key, names, opt):
        rng = np.random.default_rng(derive_seed(seed, "gan-step", step, tag))
        u = rng.standard_normal((k, batch.rows, arch.latent_dim))
        pt = nets.param_tensors(model.params)
        graphs = gan_loss_graphs(pt, ad.Tensor(batch.hist), batch, arch, u)
        loss = graphs[loss_key]
        if not np.isfinite(loss.item()):
            raise RuntimeError(f"gan training: non-finite {loss_key} loss at step {step}")
        grads = ad.backward(loss)
        opt.step(model.params, {n: grads[pt[n]] for n in names if pt[n] in grads})
        return graphs

    d_graphs = one_side("d", "disc", model.disc_names, opt_d)
    g_graphs = one_side("g", "gen", model.gen_names, opt_g)
    _sigmoid(g_graphs["logit_real"].values)   # finite-logit check
    _sigmoid(g_graphs["logit_fake"].values)
    return {"disc": float(d_graphs["disc"].item()),
            "gen": float(g_graphs["gen"].item()),
            "gen_adv": float(g_graphs["gen_adv"].item()),
            "gen_div": float(g_graphs["gen_div"].item())}


def train_cgan(scenes, arch: CganArch, steps: int, k: int, seed: int,
               lr: float = 1e-3, log_every: int = 0) -> tuple:
    """Seeded alternating loop over the full scene list each step.

    Returns (model, history) where history is the per-step loss dict list.
    """
    model = init_cgan(arch, seed)
    opt_d, opt_g = Adam(lr=lr), Adam(lr=lr)
    history = []
    for step in range(steps):
        losses = train_step_alternating(model, scenes, opt_d, opt_g, k, seed, step)
        history.append(losses)
    return model, history
