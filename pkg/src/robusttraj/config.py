"""Experiment configuration: schema, defaults, overrides, digests.

One JSON document drives every pipeline stage. resolve_config() deep-merges a
config file and flag overrides onto the schema defaults, validates types and
bounds (naming the offending field path), and returns an ExperimentConfig
whose accessors build the per-module config objects. Every defaulted field is
echoed into the resolved output, so a saved resolved config re-resolves to
itself.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass

from . import attacks as atk
from . import augmentation as aug
from . import cgan, cvae
from . import planner as pl
from . import probe as pb
from . import scenes as sc
from . import training as tr
from .seeding import derive_seed

FORMAT_VERSION = 1
OUT_ENV = "ROBUSTTRAJ_OUT"


class ConfigError(ValueError):
    """Schema violation; the message names the field path."""


@dataclass(frozen=True)
class _Field:
    default: object
    kind: type
    item: type | None = None          # element type for lists
    choices: tuple | None = None
    lo: float | None = None
    hi: float | None = None
    nullable: bool = False


_SCHEMA = {
    "format_version": _Field(FORMAT_VERSION, int, choices=(FORMAT_VERSION,)),
    "seed": _Field(0, int, lo=0),
    "out_dir": _Field("runs/exp", str),
    "data": {
        "n_train": _Field(64, int, lo=1),
        "n_test": _Field(16, int, lo=1),
        "n_agents_min": _Field(1, int, lo=1),
        "n_agents_max": _Field(4, int, lo=1),
        "history_len": _Field(4, int, lo=2),
        "future_len": _Field(12, int, lo=1),
        "dt": _Field(0.5, float, lo=1e-6),
        "noise_std": _Field(0.03, float, lo=0.0),
    },
    "model": {
        "family": _Field("cvae", str, choices=("cvae", "cgan")),
        "hidden_dim": _Field(64, int, lo=1),
        "embed_dim": _Field(32, int, lo=1),
        "latent_dim": _Field(8, int, lo=1),
    },
    "train": {
        "regime": _Field("clean", str, choices=tr.REGIMES),
        "epochs": _Field(20, int, lo=1),
        "batch_size": _Field(8, int, lo=1),
        "lr": _Field(1e-3, float, lo=1e-12),
        "k": _Field(5, int, lo=1),
        "eps": _Field(0.5, float, lo=0.0),
        "inner_steps": _Field(2, int, lo=1),
        "beta": _Field(0.1, float, lo=0.0),
        "use_augmented": _Field(False, bool),
        "aug_ratio": _Field(0.5, float, lo=0.0, hi=1.0),
        "eval_attack": _Field("deterministic", str, choices=atk.ATTACK_KINDS),
        "eval_steps": _Field(20, int, lo=1),
    },
    "attack": {
        "kind": _Field("deterministic", str, choices=atk.ATTACK_KINDS),
        "eps": _Field(0.5, float, lo=0.0),
        "steps": _Field(20, int, lo=1),
        "eot_draws": _Field(4, int, lo=1),
        "patience": _Field(5, int, lo=1),
        "random_init": _Field(False, bool),
    },
    "augment": {
        "gamma": _Field(1.0, float, lo=0.0),
        "clip": _Field(1.0, float, lo=1e-9),
        "steps": _Field(60, int, lo=1),
        "step_size": _Field(0.02, float, lo=1e-12),
    },
    "planner": {
        "n_offsets": _Field(5, int, lo=1),
        "offset_span": _Field(2.0, float, lo=0.0),
        "horizon": _Field(6, int, lo=1),
        "l_p": _Field(6, int, lo=1),
        "k": _Field(5, int, lo=1),
        "target_speed": _Field(None, float, nullable=True),
        "attack_eps": _Field(1.0, float, lo=0.0),
        "attack_steps": _Field(20, int, lo=1),
        "eot_draws": _Field(4, int, lo=1),
        "adv_index": _Field(1, int, lo=0),
    },
    "probe": {
        "kinds": _Field(list(pb.NOISE_KINDS), list, item=str),
        "levels": _Field(list(pb.DEFAULT_LEVELS), list, item=float),
        "budget": _Field(12, int, lo=1),
        "m": _Field(pb.PROBE_M, int, lo=2),
        "k": _Field(pb.PROBE_K, int, lo=1),
        "n_train": _Field(64, int, lo=2),
        "seeds": _Field([0, 1, 2], list, item=int),
        "magnitude": _Field(pb.SALT_MAGNITUDE, float, lo=1e-9),
    },
    "eval": {
        "attack": _Field("deterministic", str, choices=atk.ATTACK_KINDS),
        "eps": _Field(list(tr.EVAL_EPS), list, item=float),
        "split": _Field("test", str, choices=sc.SPLITS),
    },
}


def _defaults(schema: dict) -> dict:
    out = {}
    for key, spec in schema.items():
        out[key] = (_defaults(spec) if isinstance(spec, dict)
                    else copy.deepcopy(spec.default))
    return out


def _check_scalar(value, spec: _Field, path: str):
    if value is None:
        if spec.nullable:
            return None
        raise ConfigError(f"field '{path}': may not be null")
    if spec.kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"field '{path}': expected a boolean, "
                              f"got {value!r}")
        return value
    if isinstance(value, bool):
        raise ConfigError(f"field '{path}': expected {spec.kind.__name__}, "
                          f"got a boolean")
    if spec.kind is int:
        if not isinstance(value, int):
            raise ConfigError(f"field '{path}': expected an integer, "
                              f"got {value!r}")
    elif spec.kind is float:
        if not isinstance(value, (int, float)):
            raise ConfigError(f"field '{path}': expected a number, "
                              f"got {value!r}")
        value = float(value)
    elif spec.kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"field '{path}': expected a string, "
                              f"got {value!r}")
    if spec.choices is not None and value not in spec.choices:
        opts = ", ".join(repr(c) for c in spec.choices)
        raise ConfigError(f"field '{path}': {value!r} not one of [{opts}]")
    if spec.lo is not None and value < spec.lo:
        raise ConfigError(f"field '{path}': {value!r} below minimum {spec.lo}")
    if spec.hi is not None and value > spec.hi:
        raise ConfigError(f"field '{path}': {value!r} above maximum {spec.hi}")
    return value


def _check(value, spec: _Field, path: str):
    if spec.kind is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"field '{path}': expected a list, got {value!r}")
        item_spec = _Field(None, spec.item)
        return [_check_scalar(v, item_spec, f"{path}[{i}]")
                for i, v in enumerate(value)]
    return _check_scalar(value, spec, path)


def _merge(base: dict, incoming: dict, schema: dict, prefix: str = ""):
    for key, value in incoming.items():
        path = f"{prefix}{key}"
        if prefix == "" and key == "config_digest":
            continue  # digest annotation from a stamped config; recomputed
        if key not in schema:
            raise ConfigError(f"unknown field '{path}'")
        spec = schema[key]
        if isinstance(spec, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"field '{path}': expected an object, "
                                  f"got {value!r}")
            _merge(base[key], value, spec, f"{path}.")
        else:
            base[key] = _check(value, spec, path)


def _apply_override(values: dict, path: str, value):
    parts = path.split(".")
    schema, node = _SCHEMA, values
    for i, part in enumerate(parts):
        if part not in schema:
            raise ConfigError(f"unknown field '{'.'.join(parts[:i + 1])}'")
        spec = schema[part]
        last = i == len(parts) - 1
        if isinstance(spec, dict):
            if last:
                raise ConfigError(f"field '{path}': is a section, not a value")
            schema, node = spec, node[part]
        else:
            if not last:
                raise ConfigError(f"unknown field '{path}'")
            node[part] = _check(value, spec, path)


def _cross_validate(v: dict):
    if v["data"]["n_agents_max"] < v["data"]["n_agents_min"]:
        raise ConfigError("field 'data.n_agents_max': below data.n_agents_min")
    for i, kind in enumerate(v["probe"]["kinds"]):
        if kind not in pb.NOISE_KINDS:
            raise ConfigError(f"field 'probe.kinds[{i}]': {kind!r} not one of "
                              f"{list(pb.NOISE_KINDS)}")
    levels = v["probe"]["levels"]
    if not levels:
        raise ConfigError("field 'probe.levels': may not be empty")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ConfigError("field 'probe.levels': must be strictly increasing")
    if levels[0] < 0.0 or levels[-1] > 1.0:
        raise ConfigError("field 'probe.levels': entries must lie in [0, 1]")
    if v["probe"]["n_train"] < v["probe"]["m"]:
        raise ConfigError("field 'probe.n_train': below probe.m")
    if not v["probe"]["seeds"]:
        raise ConfigError("field 'probe.seeds': may not be empty")
    if not v["eval"]["eps"]:
        raise ConfigError("field 'eval.eps': may not be empty")
    if any(e < 0 for e in v["eval"]["eps"]):
        raise ConfigError("field 'eval.eps': entries must be >= 0")


@dataclass
class ExperimentConfig:
    """Fully resolved configuration; values carry every defaulted field."""

    values: dict

    def __getitem__(self, path: str):
        node = self.values
        for part in path.split("."):
            if not isinstance(node, dict) or part not in node:
                raise KeyError(path)
            node = node[part]
        return copy.deepcopy(node) if isinstance(node, (dict, list)) else node

    def as_dict(self) -> dict:
        return copy.deepcopy(self.values)

    @property
    def digest(self) -> str:
        blob = json.dumps(self.values, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, path) -> None:
        blob = self.as_dict()
        blob["config_digest"] = self.digest
        with open(path, "w") as fh:
            json.dump(blob, fh, indent=1, sort_keys=True)
            fh.write("\n")

    # per-module views

    def gen_config(self) -> sc.GenConfig:
        d = self.values["data"]
        return sc.GenConfig(n_agents_min=d["n_agents_min"],
                            n_agents_max=d["n_agents_max"],
                            history_len=d["history_len"],
                            future_len=d["future_len"],
                            dt=d["dt"], noise_std=d["noise_std"])

    def arch(self):
        m, d = self.values["model"], self.values["data"]
        cls = cvae.CvaeArch if m["family"] == "cvae" else cgan.CganArch
        return cls(history_len=d["history_len"], future_len=d["future_len"],
                   hidden_dim=m["hidden_dim"], embed_dim=m["embed_dim"],
                   latent_dim=m["latent_dim"])

    def train_config(self) -> tr.TrainConfig:
        t = self.values["train"]
        return tr.TrainConfig(regime=t["regime"], epochs=t["epochs"],
                              batch_size=t["batch_size"], lr=t["lr"],
                              k=t["k"], seed=self.values["seed"],
                              eps=t["eps"], inner_steps=t["inner_steps"],
                              beta=t["beta"],
                              use_augmented=t["use_augmented"],
                              aug_ratio=t["aug_ratio"],
                              eval_attack=t["eval_attack"],
                              eval_steps=t["eval_steps"])

    def attack_config(self) -> atk.AttackConfig:
        a = self.values["attack"]
        return atk.AttackConfig(steps=a["steps"], patience=a["patience"],
                                random_init=a["random_init"],
                                seed=derive_seed(self.values["seed"], "attack"),
                                k=self.values["train"]["k"],
                                eot_draws=a["eot_draws"])

    def threat(self, eps: float | None = None) -> atk.ThreatModel:
        return atk.ThreatModel(eps=self.values["attack"]["eps"]
                               if eps is None else float(eps))

    def aug_config(self) -> aug.AugConfig:
        a = self.values["augment"]
        return aug.AugConfig(gamma=a["gamma"], clip=a["clip"],
                             steps=a["steps"], step_size=a["step_size"])

    def planner_config(self) -> pl.PlannerConfig:
        p = self.values["planner"]
        return pl.PlannerConfig(n_offsets=p["n_offsets"],
                                offset_span=p["offset_span"],
                                horizon=p["horizon"], l_p=p["l_p"], k=p["k"],
                                target_speed=p["target_speed"],
                                seed=self.values["seed"])

    def planner_attack(self) -> pl.PlannerAttack:
        p = self.values["planner"]
        return pl.PlannerAttack(eps=p["attack_eps"], steps=p["attack_steps"],
                                eot_draws=p["eot_draws"],
                                adv_index=p["adv_index"],
                                seed=derive_seed(self.values["seed"],
                                                 "sim-attack"))


def resolve_config(source=None, overrides: dict | None = None
                   ) -> ExperimentConfig:
    """Defaults <- config file/dict <- dot-path overrides <- ROBUSTTRAJ_OUT.

    source may be a path to a JSON file, an already-parsed dict, or None for
    pure defaults. overrides map dot paths ("train.eps") to values. A
    "config_digest" annotation in the source is ignored and recomputed.
    """
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = source
    else:
        try:
            with open(source) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {source}: malformed JSON "
                              f"({e.msg}, line {e.lineno})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {source}: top level must be an "
                              "object")
    values = _defaults(_SCHEMA)
    _merge(values, raw, _SCHEMA)
    for path, value in (overrides or {}).items():
        _apply_override(values, path, value)
    env_out = os.environ.get(OUT_ENV)
    if env_out:
        values["out_dir"] = env_out
    _cross_validate(values)
    return ExperimentConfig(values=values)
