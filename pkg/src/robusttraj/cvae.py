"""CVAE trajectory predictor: conditional prior, posterior, decoder, ELBO.

The model factorizes as p(Y|X) = integral p(Y|Z, X) p(Z|X) dZ with a
conditional Gaussian prior over per-agent latents and an approximate posterior
conditioned on the future. Training minimizes reconstruction + KL + a
best-of-K diversity term; all three pieces are built as one autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets
from .scenes import PredictionSet, Scene
from .seeding import substream

LOGSIG_CLAMP = 9.2


@dataclass
class CvaeArch:
    """Architecture hyperparameters; fixed after construction."""

    history_len: int = 4
    future_len: int = 12
    hidden_dim: int = 64
    embed_dim: int = 32
    latent_dim: int = 8
    logsig_clamp: float = LOGSIG_CLAMP

    @property
    def context_dim(self) -> int:
        return 2 * self.embed_dim  # own embedding + pooled neighbors

    def as_dict(self) -> dict:
        return {"family": "cvae", "history_len": self.history_len,
                "future_len": self.future_len, "hidden_dim": self.hidden_dim,
                "embed_dim": self.embed_dim, "latent_dim": self.latent_dim,
                "logsig_clamp": self.logsig_clamp}


@dataclass
class CvaeModel:
    """Parameter store. theta: encoder/prior/decoder; phi: posterior."""

    arch: CvaeArch
    params: dict

    kind = "cvae"

    def theta_names(self) -> list:
        return [k for k in self.params if not k.startswith("post")]

    def phi_names(self) -> list:
        return [k for k in self.params if k.startswith("post")]

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class GaussianParams:
    """Diagonal Gaussian over per-agent latents."""

    mean: np.ndarray  # (N, latent_dim)
    std: np.ndarray   # (N, latent_dim), strictly positive

    def __post_init__(self):
        if np.any(self.std <= 0):
            raise ad.DomainError("gaussian: std must be strictly positive")


@dataclass
class ContextCode:
    """Per-agent context code plus the anchor needed to decode absolutely."""

    code: np.ndarray      # (N, context_dim)
    last_pos: np.ndarray  # (N, 2) last observed positions


@dataclass
class LatentSample:
    z: np.ndarray         # (N, latent_dim)
    provenance: str       # "deterministic" or "sampled(<seed>)"


def init_cvae(arch: CvaeArch, seed: int) -> CvaeModel:
    """Seeded Glorot init; log-sigma heads start at zero (unit sigma)."""
    rng = substream(seed, "cvae-init")
    h, t = arch.history_len, arch.future_len
    hid, emb, lat, ctx = arch.hidden_dim, arch.embed_dim, arch.latent_dim, arch.context_dim
    p = {}

    def lin(name, n_in, n_out, zero=False):
        p[f"{name}_w"] = np.zeros((n_in, n_out)) if zero else nets.glorot(rng, n_in, n_out)
        p[f"{name}_b"] = np.zeros(n_out)

    lin("enc1", 2 * (h - 1), hid)
    lin("enc2", hid, emb)
    lin("prior_mu", ctx, lat)
    lin("prior_ls", ctx, lat, zero=True)
    lin("post1", ctx + 2 * t, hid)
    lin("post_mu", hid, lat)
    lin("post_ls", hid, lat, zero=True)
    lin("dec1", ctx + lat, hid)
    lin("dec2", hid, 2 * t)
    return CvaeModel(arch=arch, params=p)


# ---------------------------------------------------------------------------
# graph builders (batched; hist_t may be a perturbed graph node)

def context_graph(pt: dict, hist_t: ad.Tensor, batch: nets.Batch, arch: CvaeArch,
                  prefix: str = "enc") -> ad.Tensor:
    """Per-agent embedding of history displacements, concatenated with the
    mean-pooled neighbor embedding (zero vector for single-agent scenes)."""
    feats = nets.history_features(hist_t, arch.history_len)
    e = nets.mlp2(pt, prefix, feats)
    pooled = ad.matmul(ad.Tensor(batch.pool), e)
    return ad.concat([e, pooled], axis=1)


def prior_graph(pt: dict, ctx: ad.Tensor, arch: CvaeArch) -> tuple:
    mu = nets.linear(pt, "prior_mu", ctx)
    ls = ad.clip(nets.linear(pt, "prior_ls", ctx), -arch.logsig_clamp, arch.logsig_clamp)
    return mu, ls


def posterior_graph(pt: dict, ctx: ad.Tensor, hist_t: ad.Tensor,
                    batch: nets.Batch, arch: CvaeArch) -> tuple:
    fut_feats = nets.future_disp_features(hist_t, batch)
    hidden = ad.tanh(nets.linear(pt, "post1", ad.concat([ctx, fut_feats], axis=1)))
    mu = nets.linear(pt, "post_mu", hidden)
    ls = ad.clip(nets.linear(pt, "post_ls", hidden), -arch.logsig_clamp, arch.logsig_clamp)
    return mu, ls


def decode_graph(pt: dict, ctx: ad.Tensor, z: ad.Tensor, hist_t: ad.Tensor,
                 batch: nets.Batch) -> ad.Tensor:
    """(context, latent) -> absolute positions (B*N, 2T) via displacement cumsum."""
    disp = nets.mlp2(pt, "dec", ad.concat([ctx, z], axis=1))
    return nets.positions_from_disp(disp, hist_t, batch)


def reparam(mu: ad.Tensor, ls: ad.Tensor, u: np.ndarray) -> ad.Tensor:
    """z = mu + exp(ls) * u with a constant standard-normal draw."""
    return ad.add(mu, ad.mul(ad.exp(ls), ad.Tensor(u)))


def kl_graph(q: tuple, p: tuple) -> ad.Tensor:
    """Elementwise KL(q || p) between diagonal Gaussians given (mu, log-sigma)."""
    mu_q, ls_q = q
    mu_p, ls_p = p
    d_ls = ad.sub(ls_q, ls_p)
    t1 = ad.scale(d_ls, -1.0)
    t2 = ad.scale(ad.exp(ad.scale(d_ls, 2.0)), 0.5)
    dmu = ad.sub(mu_q, mu_p)
    t3 = ad.scale(ad.mul(ad.mul(dmu, dmu), ad.exp(ad.scale(ls_p, -2.0))), 0.5)
    return ad.shift(ad.add(ad.add(t1, t2), t3), -0.5)


@dataclass
class Latents:
    """Pre-drawn standard-normal noise, shared across loss terms when needed."""

    u_post: np.ndarray  # (B*N, latent)
    u_div: np.ndarray   # (K, B*N, latent)


def draw_latents(batch: nets.Batch, seeds, k: int, latent_dim: int) -> Latents:
    """Per-scene seeded draws: posterior noise first, then K diversity draws."""
    u_post, u_div = [], []
    for s in seeds:
        rng = np.random.default_rng(s)
        u_post.append(rng.standard_normal((batch.n_agents, latent_dim)))
        u_div.append(rng.standard_normal((k, batch.n_agents, latent_dim)))
    return Latents(u_post=np.concatenate(u_post, axis=0),
                   u_div=np.concatenate(u_div, axis=1))


def elbo_graph(pt: dict, hist_t: ad.Tensor, batch: nets.Batch, arch: CvaeArch,
               lat: Latents) -> dict:
    """Reconstruction + KL + best-of-K diversity, per scene and batch mean.

    Returns the loss pieces plus reusable intermediates (context, prior).
    """
    k = lat.u_div.shape[0]
    ctx = context_graph(pt, hist_t, batch, arch)
    p_mu, p_ls = prior_graph(pt, ctx, arch)
    q_mu, q_ls = posterior_graph(pt, ctx, hist_t, batch, arch)
    fut_t = ad.Tensor(batch.fut)

    z_q = reparam(q_mu, q_ls, lat.u_post)
    traj = decode_graph(pt, ctx, z_q, hist_t, batch)
    recon = nets.scene_sums(nets.row_sqerr(traj, fut_t), batch)

    kl_rows = ad.sum_over_axis(kl_graph((q_mu, q_ls), (p_mu, p_ls)), 1)
    kl = nets.scene_sums(kl_rows, batch)

    cand_errs = []
    for i in range(k):
        z_i = reparam(p_mu, p_ls, lat.u_div[i])
        traj_i = decode_graph(pt, ctx, z_i, hist_t, batch)
        err_i = nets.scene_sums(nets.row_sqerr(traj_i, fut_t), batch)
        cand_errs.append(ad.reshape(err_i, (batch.n_scenes, 1)))
    div = ad.min_over_axis(ad.concat(cand_errs, axis=1), 1)

    # per-agent-per-step normalization: scenes with different agent counts
    # contribute comparably, and auxiliary terms added to the objective keep
    # a stable relative weight
    counts = batch.group.sum(axis=1)
    w_step = ad.Tensor(1.0 / (counts * batch.future_len))
    recon = ad.mul(recon, w_step)
    kl = ad.mul(kl, ad.Tensor(1.0 / counts))
    div = ad.mul(div, w_step)

    per_scene = ad.add(ad.add(recon, kl), div)
    return {"total": ad.mean_all(per_scene), "per_scene": per_scene,
            "recon": recon, "kl": kl, "div": div,
            "context": ctx, "prior": (p_mu, p_ls), "posterior": (q_mu, q_ls)}


# ---------------------------------------------------------------------------
# public single-scene operations

def _single_batch(model, X, Y=None) -> nets.Batch:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1] != model.arch.history_len or X.shape[2] != 2:
        raise ad.ShapeError(
            f"history shape {X.shape} does not match model (N, {model.arch.history_len}, 2)")
    if Y is None:
        Y = np.zeros((X.shape[0], model.arch.future_len, 2))
    else:
        Y = np.asarray(Y, dtype=np.float64)
        if Y.shape != (X.shape[0], model.arch.future_len, 2):
            raise ad.ShapeError(
                f"future shape {Y.shape} does not match model "
                f"(N, {model.arch.future_len}, 2)")
    return nets.stack_scenes([Scene(X, Y, 0.5)])


def encode_context(model: CvaeModel, X) -> ContextCode:
    """Deterministic per-agent context code f(X)."""
    batch = _single_batch(model, X)
    pt = nets.const_tensors(model.params)
    ctx = context_graph(pt, ad.Tensor(batch.hist), batch, model.arch)
    return ContextCode(code=ctx.values.copy(),
                       last_pos=np.asarray(X, dtype=np.float64)[:, -1, :].copy())


def prior(model: CvaeModel, X) -> GaussianParams:
    batch = _single_batch(model, X)
    pt = nets.const_tensors(model.params)
    ctx = context_graph(pt, ad.Tensor(batch.hist), batch, model.arch)
    mu, ls = prior_graph(pt, ctx, model.arch)
    return GaussianParams(mean=mu.values.copy(), std=np.exp(ls.values))


def posterior(model: CvaeModel, X, Y) -> GaussianParams:
    batch = _single_batch(model, X, Y)
    pt = nets.const_tensors(model.params)
    hist_t = ad.Tensor(batch.hist)
    ctx = context_graph(pt, hist_t, batch, model.arch)
    mu, ls = posterior_graph(pt, ctx, hist_t, batch, model.arch)
    return GaussianParams(mean=mu.values.copy(), std=np.exp(ls.values))


def decode(model: CvaeModel, code: ContextCode, z) -> np.ndarray:
    """Decode one latent set against a context code -> (N, T, 2) positions."""
    z = np.asarray(z, dtype=np.float64)
    n = code.code.shape[0]
    if z.shape != (n, model.arch.latent_dim):
        raise ad.ShapeError(f"latent shape {z.shape} != ({n}, {model.arch.latent_dim})")
    pt = nets.const_tensors(model.params)
    t = model.arch.future_len
    # rebuild a minimal hist tensor holding only the anchor columns
    hist = np.zeros((n, 2 * model.arch.history_len))
    hist[:, model.arch.history_len - 1] = code.last_pos[:, 0]
    hist[:, -1] = code.last_pos[:, 1]
    batch = nets.Batch(scenes=[], n_scenes=1, n_agents=n,
                       history_len=model.arch.history_len, future_len=t, dt=0.5,
                       hist=hist, fut=np.zeros((n, 2 * t)),
                       pool=np.zeros((n, n)), group=np.ones((1, n)),
                       cumsum=np.triu(np.ones((t, t))),
                       fut_dx_rest=np.zeros((n, t - 1)), fut_dy_rest=np.zeros((n, t - 1)))
    traj = decode_graph(pt, ad.Tensor(code.code), ad.Tensor(z), ad.Tensor(hist), batch)
    return nets.unflatten_track(traj.values)


def deterministic_latent(model: CvaeModel, X) -> LatentSample:
    """Most-likely latent: the conditional prior mean."""
    return LatentSample(z=prior(model, X).mean, provenance="deterministic")


def sample_predictions(model: CvaeModel, X, k: int, seed: int,
                       u=None) -> PredictionSet:
    """K prior-sampled decodes; same seed gives an identical candidate set."""
    if k < 1:
        raise ad.ShapeError(f"sample_predictions: K must be >= 1, got {k}")
    batch = _single_batch(model, X)
    pt = nets.const_tensors(model.params)
    hist_t = ad.Tensor(batch.hist)
    ctx = context_graph(pt, hist_t, batch, model.arch)
    mu, ls = prior_graph(pt, ctx, model.arch)
    if u is None:
        rng = np.random.default_rng(seed)
        u = rng.standard_normal((k, batch.rows, model.arch.latent_dim))
    cands = []
    for i in range(k):
        traj = decode_graph(pt, ctx, reparam(mu, ls, u[i]), hist_t, batch)
        cands.append(nets.unflatten_track(traj.values))
    return PredictionSet(candidates=np.stack(cands))


def loss_total(model: CvaeModel, X, Y, k: int, seed: int) -> float:
    """Scalar training loss on one scene (reconstruction + KL + diversity)."""
    batch = _single_batch(model, X, Y)
    lat = draw_latents(batch, [seed], k, model.arch.latent_dim)
    pt = nets.const_tensors(model.params)
    out = elbo_graph(pt, ad.Tensor(batch.hist), batch, model.arch, lat)
    return out["total"].item()


def kl_divergence(q: GaussianParams, p: GaussianParams) -> float:
    """Total KL(q || p), summed over agents and latent dimensions."""
    lq, lp = np.log(q.std), np.log(p.std)
    per = (lp - lq) + 0.5 * np.exp(2.0 * (lq - lp)) \
        + 0.5 * (q.mean - p.mean) ** 2 * np.exp(-2.0 * lp) - 0.5
    return float(per.sum())
