"""Training regimes and the evaluation harness.

Three regimes over the CVAE loss:
  clean      - plain descent on the full loss
  naive_at   - inner stochastic best-of-K attack, outer step on the
               perturbed loss only (standard adversarial training)
  robusttraj - inner deterministic attack, outer step on
               L(X+delta) + L(X) + beta * context-drift norm

The perturbed and clean losses share posterior-sampling seeds, so at eps=0
the robusttraj outer objective is exactly twice the clean loss and the drift
term is exactly zero - both identities are bitwise-testable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attacks as atk
from . import autodiff as ad
from . import cvae, nets
from . import scenes as sc
from .checkpoints import save_checkpoint
from .optim import Adam
from .seeding import derive_seed, substream

REGIMES = ("clean", "naive_at", "robusttraj")
EVAL_EPS = (0.5, 1.0)
METRICS_HEADER = ("run_id", "split", "eps", "attack", "ade", "fde", "mr", "orr")


class TrainingError(RuntimeError):
    """Non-finite loss or other fatal condition during a run."""


@dataclass
class TrainConfig:
    regime: str = "clean"
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    k: int = 5
    seed: int = 0
    eps: float = 0.5
    inner_steps: int = 2
    beta: float = 0.1
    use_augmented: bool = False
    aug_ratio: float = 0.5
    eval_attack: str = "deterministic"
    eval_steps: int = 20
    inner_objective: str | None = None  # None -> regime default

    def validate(self):
        if self.regime not in REGIMES:
            raise ValueError(f"train config: unknown regime '{self.regime}'")
        if self.inner_objective not in (None, "naive", "deterministic"):
            raise ValueError("train config: inner_objective must be None, "
                             "'naive' or 'deterministic'")
        if self.beta < 0:
            raise ValueError("train config: beta must be >= 0")
        if self.regime != "clean" and self.inner_steps < 1:
            raise ValueError("train config: inner_steps must be >= 1 "
                             "for adversarial regimes")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("train config: epochs and batch_size must be >= 1")
        if self.eps < 0:
            raise ValueError("train config: eps must be >= 0")
        if not 0.0 <= self.aug_ratio <= 1.0:
            raise ValueError("train config: aug_ratio must be in [0, 1]")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    run_id: str
    config: dict
    epoch_logs: list
    metrics_clean: dict
    metrics_attacked: dict      # str(eps) -> metrics dict
    drift: dict                 # str(eps) -> mean context drift at attack time
    complete: bool = True

    def as_dict(self) -> dict:
        return {"run_id": self.run_id, "config": self.config,
                "epoch_logs": self.epoch_logs,
                "metrics": {"clean": self.metrics_clean,
                            "attacked": self.metrics_attacked},
                "context_drift": self.drift, "complete": self.complete,
                "metric_note": ("per-agent best-of-K candidate chosen by mean "
                                "displacement; metrics averaged over agents "
                                "pooled across scenes")}

    def csv_rows(self) -> list:
        rows = [{"run_id": self.run_id, "split": "test", "eps": 0.0,
                 "attack": "none", **_metric_cols(self.metrics_clean)}]
        for eps, m in sorted(self.metrics_attacked.items()):
            rows.append({"run_id": self.run_id, "split": "test",
                         "eps": float(eps),
                         "attack": self.config.get("eval_attack", "deterministic"),
                         **_metric_cols(m)})
        return rows


def _metric_cols(m: dict) -> dict:
    return {"ade": m["ade"], "fde": m["fde"], "mr": m["mr"], "orr": m["orr"]}


def run_id_for(config: TrainConfig) -> str:
    digest = hashlib.sha256(
        json.dumps(config.as_dict(), sort_keys=True).encode()).hexdigest()
    return f"{config.regime}-s{config.seed}-{digest[:8]}"


# ---------------------------------------------------------------------------
# losses

def _relative_prediction(model, X):
    """Deterministic decode re-anchored to each agent's current position."""
    X = np.asarray(X, dtype=np.float64)
    code = cvae.encode_context(model, X)
    pred = cvae.decode(model, code, cvae.deterministic_latent(model, X).z)
    return pred - X[:, -1][:, None, :]


def loss_reg(model, X, delta) -> float:
    """L2 norm of the deterministic-prediction drift under a perturbation.

    Predictions are re-anchored to the perturbed/clean current positions so
    the statistic measures how much the predicted path shape moves, not the
    rigid translation the perturbation itself injects.
    """
    pert = _relative_prediction(model, np.asarray(X) + np.asarray(delta))
    return float(np.sqrt(np.sum((pert - _relative_prediction(model, X)) ** 2)))


def loss_clean(model, X, Y, k: int, seed: int) -> float:
    """The model's full loss on unperturbed input (anchoring term)."""
    return cvae.loss_total(model, X, Y, k, seed)


def _det_rel_graph(pt, out, hist_t, batch):
    """Deterministic decode (prior-mean latent) re-anchored, on one graph."""
    traj = cvae.decode_graph(pt, out["context"], out["prior"][0], hist_t, batch)
    return nets.relative_track(traj, hist_t, batch)


def _batch_drift(model, batch, delta, arch) -> float:
    """Mean per-scene L2 prediction drift for a fixed perturbation (no grads)."""
    cpt = nets.const_tensors(model.params)
    rels = []
    for hist in (batch.hist, batch.hist + delta):
        h_t = ad.Tensor(hist)
        ctx = cvae.context_graph(cpt, h_t, batch, arch)
        mu, _ = cvae.prior_graph(cpt, ctx, arch)
        traj = cvae.decode_graph(cpt, ctx, mu, h_t, batch)
        rels.append(nets.relative_track(traj, h_t, batch).values)
    d = rels[1] - rels[0]
    per_scene = batch.group @ np.sum(d * d, axis=1)
    return float(np.mean(np.sqrt(per_scene)))


def _latents_for(batch, config, epoch, step, latent_dim):
    seeds = [derive_seed(config.seed, "latents", epoch, step, i)
             for i in range(batch.n_scenes)]
    return cvae.draw_latents(batch, seeds, config.k, latent_dim)


def _inner_delta(model, batch, config, epoch, step):
    if config.eps == 0.0:
        return np.zeros_like(batch.hist)
    threat = atk.ThreatModel(eps=config.eps)
    acfg = atk.AttackConfig(steps=config.inner_steps,
                            seed=derive_seed(config.seed, "inner", epoch, step),
                            k=config.k)
    kind = config.inner_objective
    if kind is None:
        kind = "naive" if config.regime == "naive_at" else "deterministic"
    if kind == "naive":
        builder = atk.NaiveObjective(model, batch, threat, config.k, acfg.seed)
    else:
        builder = atk.DeterministicObjective(model, batch, threat)
    delta, _, _ = atk.pgd_batch(builder, batch, threat, acfg)
    return delta


def _train_step(model, scenes, config, opt, epoch, step) -> dict:
    batch = nets.stack_scenes(scenes)
    arch = model.arch
    lat = _latents_for(batch, config, epoch, step, arch.latent_dim)
    pt = nets.param_tensors(model.params)
    log = {}

    if config.regime == "clean":
        out = cvae.elbo_graph(pt, ad.Tensor(batch.hist), batch, arch, lat)
        total = out["total"]
    else:
        delta = _inner_delta(model, batch, config, epoch, step)
        hist_pert = ad.Tensor(batch.hist + delta)
        out_pert = cvae.elbo_graph(pt, hist_pert, batch, arch, lat)
        if config.regime == "naive_at":
            total = out_pert["total"]
            log["drift"] = _batch_drift(model, batch, delta, arch)
        else:
            hist_clean = ad.Tensor(batch.hist)
            out_clean = cvae.elbo_graph(pt, hist_clean, batch, arch, lat)
            # squared drift summed per scene: commensurate with the
            # reconstruction terms, so the default beta carries real weight
            reg_ps = nets.scene_sums(
                nets.row_sqerr(_det_rel_graph(pt, out_pert, hist_pert, batch),
                               _det_rel_graph(pt, out_clean, hist_clean, batch)),
                batch)
            reg = ad.mean_all(ad.reshape(reg_ps, (batch.n_scenes, 1)))
            total = ad.add(ad.add(out_pert["total"], out_clean["total"]),
                           ad.scale(reg, config.beta))
            log["drift"] = float(np.mean(np.sqrt(reg_ps.values)))

    loss = total.item()
    if not np.isfinite(loss):
        raise TrainingError(
            f"training: non-finite loss at epoch {epoch} step {step}")
    grads = ad.backward(total)
    opt.step(model.params, {n: grads[pt[n]] for n in model.params if pt[n] in grads})
    log["loss"] = loss
    return log


# ---------------------------------------------------------------------------
# batching over D union D_aug

def _pools(records, config):
    pools = {}
    for rec in records:
        n = rec.scene.n_agents
        kind = "aug" if rec.provenance == "augmented" else "orig"
        pools.setdefault(n, {"orig": [], "aug": []})[kind].append(rec.scene)
    if not config.use_augmented:
        for group in pools.values():
            group["aug"] = []
    return pools


def _epoch_batches(pools, config, epoch) -> list:
    rng = substream(config.seed, "batches", epoch)
    batches = []
    for n in sorted(pools):
        orig = list(pools[n]["orig"])
        aug = list(pools[n]["aug"])
        rng.shuffle(orig)
        rng.shuffle(aug)
        if not orig:
            orig, aug = aug, []
        bs = config.batch_size
        n_aug = int(round(bs * config.aug_ratio)) if aug else 0
        n_orig = max(1, bs - n_aug)
        ai = 0
        for lo in range(0, len(orig), n_orig):
            batch = orig[lo:lo + n_orig]
            for _ in range(n_aug):
                if aug:
                    batch.append(aug[ai % len(aug)])
                    ai += 1
            batches.append(batch)
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def train(records, config: TrainConfig, arch=None, checkpoint_dir=None):
    """Run one regime end to end; returns (model, per-epoch logs)."""
    config.validate()
    arch = arch or cvae.CvaeArch()
    model = cvae.init_cvae(arch, derive_seed(config.seed, "init"))
    opt = Adam(lr=config.lr)
    pools = _pools(records, config)
    if not any(g["orig"] or g["aug"] for g in pools.values()):
        raise ValueError("training: empty dataset")
    logs = []
    for epoch in range(config.epochs):
        batches = _epoch_batches(pools, config, epoch)
        step_logs = []
        for step, scenes in enumerate(batches):
            try:
                step_logs.append(_train_step(model, scenes, config, opt,
                                             epoch, step))
            except (TrainingError, ad.DomainError) as e:
                if checkpoint_dir:
                    path = os.path.join(checkpoint_dir, "diagnostic.json")
                    save_checkpoint(model, path)
                    raise TrainingError(f"{e} (diagnostic checkpoint: {path})")
                raise
        entry = {"epoch": epoch,
                 "loss": float(np.mean([s["loss"] for s in step_logs]))}
        if config.regime != "clean":
            entry["drift"] = float(np.mean([s["drift"] for s in step_logs]))
        logs.append(entry)
        if checkpoint_dir:
            save_checkpoint(model, os.path.join(checkpoint_dir,
                                                f"epoch_{epoch:03d}.json"))
    return model, logs


# ---------------------------------------------------------------------------
# evaluation

def _sample_fn(model):
    if model.kind == "cvae":
        return cvae.sample_predictions
    from . import cgan
    return cgan.sample_predictions


def evaluate_full(model, scenes, threat, attack_kind: str, k: int = 5,
                  seed: int = 0, steps: int = 20, chunk: int = 16):
    """Attack (optionally), sample K candidates per scene with seeds shared
    between clean and attacked runs, and pool metrics over all agents.

    Returns (Metrics, info) where info carries the mean context drift and the
    per-scene attack objectives.
    """
    scenes = list(scenes)
    sample = _sample_fn(model)
    deltas = [np.zeros_like(s.history) for s in scenes]
    objectives = np.zeros(len(scenes))
    attacked = attack_kind != "none" and threat.eps > 0.0
    if attacked:
        groups = {}
        for i, s in enumerate(scenes):
            groups.setdefault(s.n_agents, []).append(i)
        for n, idxs in sorted(groups.items()):
            for lo in range(0, len(idxs), chunk):
                part = idxs[lo:lo + chunk]
                batch = nets.stack_scenes([scenes[i] for i in part])
                acfg = atk.AttackConfig(
                    steps=steps, seed=derive_seed(seed, "eval-attack", n, lo),
                    k=k, random_init=attack_kind in atk.RANDOM_INIT_KINDS)
                builder = atk.make_objective(attack_kind, model, batch,
                                             threat, acfg)
                delta, _, best = atk.pgd_batch(builder, batch, threat, acfg)
                for j, i in enumerate(part):
                    rows = slice(j * n, (j + 1) * n)
                    deltas[i] = nets.unflatten_track(delta[rows])
                    objectives[i] = best[j]

    preds, drifts = [], []
    for i, s in enumerate(scenes):
        x_adv = s.history + deltas[i]
        preds.append(sample(model, x_adv, k, derive_seed(seed, "sample", i)))
        if attacked and model.kind == "cvae":
            drifts.append(loss_reg(model, s.history, deltas[i]))
    metrics = sc.compute_metrics(preds, scenes)
    info = {"drift": float(np.mean(drifts)) if drifts else 0.0,
            "objectives": objectives.tolist()}
    return metrics, info


def evaluate(model, scenes, threat, attack_kind: str, k: int = 5,
             seed: int = 0, steps: int = 20) -> sc.Metrics:
    metrics, _ = evaluate_full(model, scenes, threat, attack_kind, k=k,
                               seed=seed, steps=steps)
    return metrics


# ---------------------------------------------------------------------------
# experiment driver

def run_experiment(config: TrainConfig, dataset, out_dir=None,
                   arch=None) -> RunReport:
    """Train one regime, evaluate clean + attacked, optionally write artifacts."""
    config.validate()
    run_id = run_id_for(config)
    ckpt_dir = None
    if out_dir:
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
    records = dataset.split("train") if hasattr(dataset, "split") else list(dataset)
    test_scenes = (dataset.scenes("test") if hasattr(dataset, "scenes")
                   else [r.scene for r in records])
    model, logs = train(records, config, arch=arch, checkpoint_dir=ckpt_dir)

    clean_m, _ = evaluate_full(model, test_scenes, atk.ThreatModel(eps=0.0),
                               "none", k=config.k, seed=config.seed)
    attacked, drift = {}, {}
    for eps in EVAL_EPS:
        m, info = evaluate_full(model, test_scenes, atk.ThreatModel(eps=eps),
                                config.eval_attack, k=config.k,
                                seed=config.seed, steps=config.eval_steps)
        attacked[str(eps)] = m.as_dict()
        drift[str(eps)] = info["drift"]

    report = RunReport(run_id=run_id, config=config.as_dict(),
                       epoch_logs=logs, metrics_clean=clean_m.as_dict(),
                       metrics_attacked=attacked, drift=drift)
    if out_dir:
        write_report(report, out_dir)
        save_checkpoint(model, os.path.join(out_dir, "model.json"))
    return report, model


def write_report(report: RunReport, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report.as_dict(), fh, indent=1)
    write_metrics_csv(report.csv_rows(), os.path.join(out_dir, "metrics.csv"))


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def comparison_rows(reports) -> list:
    """One metrics row per (report, eval point): the cross-regime table."""
    rows = []
    for rep in reports:
        rows.extend(rep.csv_rows() if isinstance(rep, RunReport)
                    else _rows_from_dict(rep))
    return rows


def _rows_from_dict(blob: dict) -> list:
    rows = [{"run_id": blob["run_id"], "split": "test", "eps": 0.0,
             "attack": "none", **_metric_cols(blob["metrics"]["clean"])}]
    for eps, m in sorted(blob["metrics"]["attacked"].items()):
        rows.append({"run_id": blob["run_id"], "split": "test", "eps": float(eps),
                     "attack": blob["config"].get("eval_attack", "deterministic"),
                     **_metric_cols(m)})
    return rows
