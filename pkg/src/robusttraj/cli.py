"""Command-line front door for the experiment pipeline.

Subcommands: gen-data, augment, train, attack, eval, probe, simulate, report.
Each reads a JSON config plus flag overrides (see config.resolve_config),
writes its artifacts under the configured output directory, and stamps every
artifact with the resolved-config digest. Exit codes: 0 success, 1 validation
error (bad flags or config), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import augmentation as aug
from . import checkpoints as ck
from . import planner as pl
from . import probe as pb
from . import scenes as sc
from . import training as tr
from .config import ConfigError, resolve_config
from .seeding import derive_seed

ATTACKS_HEADER = ("scene_id", "attack", "eps", "steps", "objective")


class UsageError(Exception):
    """Bad command line; the message includes usage text."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="robusttraj",
                     description="trajectory-prediction robustness lab")
    sub = parser.add_subparsers(dest="command", metavar="command",
                                parser_class=_Parser)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", metavar="FILE",
                        help="JSON experiment config")
        sp.add_argument("--out", metavar="DIR", help="output directory")
        sp.add_argument("--seed", type=int, help="global seed")
        sp.add_argument("--set", action="append", default=[],
                        metavar="PATH=VALUE",
                        help="override any config field by dot path")
        return sp

    add("gen-data", "generate a synthetic train/test dataset")

    p = add("augment", "add control-space augmented copies of the train split")
    p.add_argument("--data", metavar="FILE", help="input dataset")
    p.add_argument("--gamma", type=float, help="collision-term weight")

    p = add("train", "train one regime and evaluate clean + attacked")
    p.add_argument("--data", metavar="FILE", help="input dataset")
    p.add_argument("--regime", help="clean | naive_at | robusttraj")
    p.add_argument("--epochs", type=int)
    p.add_argument("--eps", type=float, help="training threat bound")
    p.add_argument("--beta", type=float, help="context-drift weight")

    p = add("attack", "run one attack over the eval split, log objectives")
    p.add_argument("--data", metavar="FILE")
    p.add_argument("--model", metavar="FILE", help="model checkpoint")
    p.add_argument("--attack", dest="attack_kind", help="attack kind")
    p.add_argument("--eps", type=float)
    p.add_argument("--steps", type=int)

    p = add("eval", "write clean + attacked metrics rows for a checkpoint")
    p.add_argument("--data", metavar="FILE")
    p.add_argument("--model", metavar="FILE")
    p.add_argument("--attack", dest="attack_kind", help="attack kind")
    p.add_argument("--eps", type=float, help="single eval eps")

    p = add("probe", "condition-degeneration sweep over noise levels")
    p.add_argument("--kind", choices=pb.NOISE_KINDS,
                   help="run a single noise kind")
    p.add_argument("--budget", type=int, help="training epochs per level")

    p = add("simulate", "closed-loop planner episodes over the scenario suite")
    p.add_argument("--model", metavar="FILE")
    p.add_argument("--attack", choices=("none", "sequence", "both"),
                   default="both")
    p.add_argument("--regime", help="regime label for the outcome rows")

    p = add("report", "cross-regime comparison table from run directories")
    p.add_argument("--runs", required=True, metavar="DIR",
                   help="directory containing run subdirectories")
    return parser


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides_from(args) -> dict:
    over = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects PATH=VALUE, got '{item}'")
        path, _, value = item.partition("=")
        over[path.strip()] = _parse_value(value.strip())
    if args.out is not None:
        over["out_dir"] = args.out
    if args.seed is not None:
        over["seed"] = args.seed
    flag_map = {
        "augment": {"gamma": "augment.gamma"},
        "train": {"regime": "train.regime", "epochs": "train.epochs",
                  "eps": "train.eps", "beta": "train.beta"},
        "attack": {"attack_kind": "attack.kind", "eps": "attack.eps",
                   "steps": "attack.steps"},
        "eval": {"attack_kind": "eval.attack"},
        "probe": {"budget": "probe.budget"},
    }
    for attr, path in flag_map.get(args.command, {}).items():
        value = getattr(args, attr, None)
        if value is not None:
            over[path] = value
    if args.command == "eval" and args.eps is not None:
        over["eval.eps"] = [args.eps]
    if args.command == "probe" and args.kind is not None:
        over["probe.kinds"] = [args.kind]
    return over


# ---------------------------------------------------------------------------
# artifact stamping

def _stamp_csv(path, digest):
    with open(path) as fh:
        body = fh.read()
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_digest={digest}\n{body}")


def _stamp_json(path, digest):
    with open(path) as fh:
        blob = json.load(fh)
    blob["config_digest"] = digest
    with open(path, "w") as fh:
        json.dump(blob, fh, indent=1)
        fh.write("\n")


def _stamp_jsonl(path, digest):
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    with open(path, "w") as fh:
        for row in rows:
            row["config_digest"] = digest
            fh.write(json.dumps(row) + "\n")


def _prepare(cfg) -> str:
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    cfg.save(os.path.join(out, "config.json"))
    return out


def _load_dataset(args, cfg, default="dataset.jsonl") -> sc.Dataset:
    path = getattr(args, "data", None) or os.path.join(cfg["out_dir"], default)
    return sc.load_dataset(path)


def _load_model(args, cfg):
    path = getattr(args, "model", None) or os.path.join(cfg["out_dir"],
                                                        "model.json")
    return ck.load_checkpoint(path)


# ---------------------------------------------------------------------------
# subcommands

def _cmd_gen_data(args, cfg) -> int:
    out = _prepare(cfg)
    gen = cfg.gen_config()
    records = []
    for split, count in (("train", cfg["data.n_train"]),
                         ("test", cfg["data.n_test"])):
        scenes = sc.generate_scenes(gen, count,
                                    derive_seed(cfg["seed"], "data", split))
        records += [sc.SceneRecord(s, split, "synthetic", f"{split}-{i:04d}")
                    for i, s in enumerate(scenes)]
    path = os.path.join(out, "dataset.jsonl")
    sc.save_dataset(sc.Dataset(records), path)
    _stamp_jsonl(path, cfg.digest)
    print(f"wrote {path} ({len(records)} scenes)")
    return 0


def _cmd_augment(args, cfg) -> int:
    out = _prepare(cfg)
    dataset = _load_dataset(args, cfg)
    acfg = cfg.aug_config()
    extra = []
    for i, rec in enumerate(dataset.split("train")):
        res = aug.augment_scene(rec.scene, acfg,
                                derive_seed(cfg["seed"], "augment", i))
        extra.append(sc.SceneRecord(res.scene, "train", "augmented",
                                    f"aug-{rec.scene_id}",
                                    controls=res.controls))
    path = os.path.join(out, "augmented.jsonl")
    sc.save_dataset(sc.Dataset(dataset.records + extra), path)
    _stamp_jsonl(path, cfg.digest)
    print(f"wrote {path} (+{len(extra)} augmented scenes)")
    return 0


def _cmd_train(args, cfg) -> int:
    if cfg["model.family"] != "cvae":
        raise ConfigError("field 'model.family': the training pipeline is "
                          "cvae-only")
    out = _prepare(cfg)
    dataset = _load_dataset(args, cfg)
    report, _ = tr.run_experiment(cfg.train_config(), dataset, out_dir=out,
                                  arch=cfg.arch())
    _stamp_json(os.path.join(out, "report.json"), cfg.digest)
    _stamp_json(os.path.join(out, "model.json"), cfg.digest)
    _stamp_csv(os.path.join(out, "metrics.csv"), cfg.digest)
    ckpt_dir = os.path.join(out, "checkpoints")
    for name in sorted(os.listdir(ckpt_dir)):
        if name.endswith(".json"):
            _stamp_json(os.path.join(ckpt_dir, name), cfg.digest)
    ade = report.metrics_clean["ade"]
    print(f"run {report.run_id}: clean ade {ade:.3f}")
    return 0


def _cmd_attack(args, cfg) -> int:
    out = _prepare(cfg)
    dataset = _load_dataset(args, cfg)
    model = _load_model(args, cfg)
    split = cfg["eval.split"]
    records = dataset.split(split)
    if not records:
        raise ConfigError(f"field 'eval.split': no '{split}' scenes in the "
                          "dataset")
    kind, eps = cfg["attack.kind"], cfg["attack.eps"]
    steps = cfg["attack.steps"]
    _, info = tr.evaluate_full(model, [r.scene for r in records],
                               cfg.threat(), kind,
                               k=cfg["train.k"],
                               seed=derive_seed(cfg["seed"], "attack-eval"),
                               steps=steps)
    rows = [{"scene_id": rec.scene_id, "attack": kind, "eps": eps,
             "steps": steps, "objective": obj}
            for rec, obj in zip(records, info["objectives"])]
    path = os.path.join(out, "attacks.csv")
    _write_csv(path, ATTACKS_HEADER, rows)
    _stamp_csv(path, cfg.digest)
    mean_obj = float(np.mean(info["objectives"]))
    print(f"wrote {path} ({len(rows)} scenes, mean objective {mean_obj:.4f}, "
          f"mean drift {info['drift']:.4f})")
    return 0


def _cmd_eval(args, cfg) -> int:
    out = _prepare(cfg)
    dataset = _load_dataset(args, cfg)
    model = _load_model(args, cfg)
    split = cfg["eval.split"]
    scenes = dataset.scenes(split)
    if not scenes:
        raise ConfigError(f"field 'eval.split': no '{split}' scenes in the "
                          "dataset")
    run_id = f"eval-{cfg.digest[:8]}"
    seed = derive_seed(cfg["seed"], "eval")
    kind = cfg["eval.attack"]
    clean = tr.evaluate(model, scenes, cfg.threat(0.0), "none",
                        k=cfg["train.k"], seed=seed)
    rows = [{"run_id": run_id, "split": split, "eps": 0.0, "attack": "none",
             **clean.as_dict()}]
    for eps in cfg["eval.eps"]:
        m = tr.evaluate(model, scenes, cfg.threat(eps), kind,
                        k=cfg["train.k"], seed=seed,
                        steps=cfg["train.eval_steps"])
        rows.append({"run_id": run_id, "split": split, "eps": eps,
                     "attack": kind, **m.as_dict()})
    path = os.path.join(out, "metrics.csv")
    tr.write_metrics_csv(rows, path)
    _stamp_csv(path, cfg.digest)
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def _cmd_probe(args, cfg) -> int:
    if cfg["model.family"] != "cvae":
        raise ConfigError("field 'model.family': the probe is cvae-only")
    out = _prepare(cfg)
    reports = []
    for kind in cfg["probe.kinds"]:
        for s in cfg["probe.seeds"]:
            rep = pb.run_probe("cvae", kind, cfg["probe.levels"],
                               cfg["probe.budget"], seed=s,
                               m=cfg["probe.m"], k=cfg["probe.k"],
                               n_train=cfg["probe.n_train"],
                               magnitude=cfg["probe.magnitude"])
            if rep.budget_flag:
                print(f"warning: probe budget too small to resolve "
                      f"dependence ({kind}, seed {s}; score variance "
                      f"{rep.score_var:.2e})", file=sys.stderr)
            reports.append(rep)
    path = os.path.join(out, "probe.csv")
    pb.write_probe_csv(reports, path)
    _stamp_csv(path, cfg.digest)
    print(f"wrote {path} ({len(reports)} sweeps)")
    return 0


def _cmd_simulate(args, cfg) -> int:
    out = _prepare(cfg)
    model = _load_model(args, cfg)
    suite = pl.build_scenario_suite()
    pcfg = cfg.planner_config()
    regime = args.regime or cfg["train.regime"]
    log_dir = os.path.join(out, "episodes")
    rows = []
    if args.attack in ("none", "both"):
        rows += pl.run_suite(suite, model, pcfg, regime, attacker=None,
                             log_dir=log_dir)
    if args.attack in ("sequence", "both"):
        rows += pl.run_suite(suite, model, pcfg, regime,
                             attacker=cfg.planner_attack(), log_dir=log_dir)
    path = os.path.join(out, "outcomes.csv")
    pl.write_outcomes(rows, path)
    _stamp_csv(path, cfg.digest)
    for name in sorted(os.listdir(log_dir)):
        if name.endswith(".jsonl"):
            _stamp_jsonl(os.path.join(log_dir, name), cfg.digest)
    collided = sum(r["collided"] for r in rows)
    print(f"wrote {path} ({len(rows)} episodes, {collided} collisions)")
    return 0


def _cmd_report(args, cfg) -> int:
    runs_dir = args.runs
    if not os.path.isdir(runs_dir):
        raise ConfigError(f"report: '{runs_dir}' is not a directory")
    blobs = []
    for name in sorted(os.listdir(runs_dir)):
        path = os.path.join(runs_dir, name, "report.json")
        if os.path.isfile(path):
            with open(path) as fh:
                blobs.append(json.load(fh))
    if not blobs:
        raise ConfigError(f"report: no run reports under '{runs_dir}'")
    blobs.sort(key=_regime_order)
    csv_path = os.path.join(runs_dir, "comparison.csv")
    tr.write_metrics_csv(tr.comparison_rows(blobs), csv_path)
    _stamp_csv(csv_path, cfg.digest)
    text = _format_table(blobs)
    txt_path = os.path.join(runs_dir, "comparison.txt")
    with open(txt_path, "w") as fh:
        fh.write(text + "\n")
    print(text)
    return 0


_REGIMES_ORDER = {"clean": 0, "naive_at": 1, "robusttraj": 2}


def _regime_label(blob: dict) -> str:
    conf = blob.get("config", {})
    label = conf.get("regime", "?")
    if conf.get("use_augmented"):
        label += "+aug"
    return label


def _regime_order(blob: dict):
    conf = blob.get("config", {})
    return (_REGIMES_ORDER.get(conf.get("regime"), 9),
            bool(conf.get("use_augmented")), blob.get("run_id", ""))


def _format_table(blobs) -> str:
    """Aligned text table: one row per run, clean ADE plus attacked ADE and
    FDE columns per eval eps."""
    eps_keys = sorted({e for b in blobs
                       for e in b["metrics"]["attacked"]}, key=float)
    headers = (["run", "regime", "ade", "fde"]
               + [f"ade@{e}" for e in eps_keys]
               + [f"fde@{e}" for e in eps_keys])
    rows = []
    for blob in blobs:
        clean = blob["metrics"]["clean"]
        attacked = blob["metrics"]["attacked"]
        row = [blob.get("run_id", "?"), _regime_label(blob),
               f"{clean['ade']:.3f}", f"{clean['fde']:.3f}"]
        for metric in ("ade", "fde"):
            for e in eps_keys:
                cell = attacked.get(e)
                row.append(f"{cell[metric]:.3f}" if cell else "-")
        rows.append(row)
    widths = [max(len(h), *(len(r[i]) for r in rows))
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.ljust(w)
                               for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "augment": _cmd_augment,
    "train": _cmd_train,
    "attack": _cmd_attack,
    "eval": _cmd_eval,
    "probe": _cmd_probe,
    "simulate": _cmd_simulate,
    "report": _cmd_report,
}


def cli_dispatch(argv) -> int:
    """Parse argv and run one subcommand; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(list(argv))
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    if not args.command:
        print(parser.format_usage(), file=sys.stderr)
        return 1
    try:
        cfg = resolve_config(args.config, _overrides_from(args))
        return _HANDLERS[args.command](args, cfg)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return cli_dispatch(sys.argv[1:] if argv is None else argv)


def entry():  # console script
    sys.exit(main())
