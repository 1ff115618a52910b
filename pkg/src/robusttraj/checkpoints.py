"""Flat JSON checkpoints shared by both predictor families."""

from __future__ import annotations

import json

import numpy as np

from . import cgan, cvae

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


def save_checkpoint(model, path) -> None:
    blob = {"format_version": FORMAT_VERSION, "arch": model.arch.as_dict(),
            "params": {n: {"shape": list(v.shape), "values": v.ravel().tolist()}
                       for n, v in model.params.items()}}
    with open(path, "w") as fh:
        json.dump(blob, fh)


def _arch_from_dict(d: dict):
    d = dict(d)
    family = d.pop("family", None)
    try:
        if family == "cvae":
            return family, cvae.CvaeArch(**d)
        if family == "cgan":
            return family, cgan.CganArch(**d)
    except TypeError as e:
        raise CheckpointError(f"checkpoint: bad arch fields: {e}") from None
    raise CheckpointError(f"checkpoint: unknown model family '{family}'")


def load_checkpoint(path):
    """Rebuild a model, validating names and shapes against the arch."""
    try:
        with open(path) as fh:
            blob = json.load(fh)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint: malformed JSON: {e}") from None
    if blob.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint: format_version {blob.get('format_version')!r}, "
            f"expected {FORMAT_VERSION}")
    family, arch = _arch_from_dict(blob.get("arch", {}))
    init = cvae.init_cvae if family == "cvae" else cgan.init_cgan
    expected = init(arch, 0).params
    stored = blob.get("params", {})
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise CheckpointError(
            f"checkpoint: param names mismatch (missing {missing}, extra {extra})")
    params = {}
    for name, ref in expected.items():
        entry = stored[name]
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != ref.shape:
            raise CheckpointError(
                f"checkpoint: '{name}' shape {arr.shape}, arch expects {ref.shape}")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"checkpoint: non-finite values in '{name}'")
        params[name] = arr
    if family == "cvae":
        return cvae.CvaeModel(arch=arch, params=params)
    return cgan.CganModel(arch=arch, params=params)
