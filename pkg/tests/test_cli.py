"""Config schema, resolution, digests, and the CLI front door."""

import csv
import json
import os

import numpy as np
import pytest

from robusttraj import checkpoints as ck
from robusttraj import cvae
from robusttraj import scenes as sc
from robusttraj.cli import cli_dispatch
from robusttraj.config import ConfigError, resolve_config

TINY = ["--set", "data.n_train=12", "--set", "data.n_test=4",
        "--set", "train.epochs=3", "--set", "model.hidden_dim=16",
        "--set", "model.embed_dim=8", "--set", "model.latent_dim=4"]


def read_csv(path):
    """Rows of a digest-stamped CSV."""
    with open(path) as fh:
        lines = [l for l in fh.read().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def digest_line(path):
    with open(path) as fh:
        first = fh.readline().strip()
    assert first.startswith("# config_digest=")
    return first.split("=", 1)[1]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data + train once; shared by the artifact-inspecting tests."""
    out = str(tmp_path_factory.mktemp("cli") / "run")
    args = ["--out", out, "--seed", "11", *TINY]
    assert cli_dispatch(["gen-data", *args]) == 0
    assert cli_dispatch(["train", *args]) == 0
    return out, args


# ---------------------------------------------------------------------------
# config resolution


def test_defaults_echoed():
    cfg = resolve_config()
    assert cfg["train.beta"] == 0.1
    assert cfg["train.inner_steps"] == 2
    assert cfg["train.eval_steps"] == 20
    assert cfg["train.k"] == 5
    assert cfg["eval.eps"] == [0.5, 1.0]
    for section in ("data", "model", "train", "attack", "augment", "planner",
                    "probe", "eval"):
        assert section in cfg.as_dict()


def test_unknown_fields_named_by_path():
    with pytest.raises(ConfigError, match="train.bogus"):
        resolve_config({"train": {"bogus": 1}})
    with pytest.raises(ConfigError, match="unknown field 'wheels'"):
        resolve_config({"wheels": 4})
    with pytest.raises(ConfigError, match="'train': expected an object"):
        resolve_config({"train": 5})


def test_type_and_bound_errors_named_by_path():
    with pytest.raises(ConfigError, match="train.epochs.*integer"):
        resolve_config({"train": {"epochs": "many"}})
    with pytest.raises(ConfigError, match="train.epochs.*below minimum"):
        resolve_config({"train": {"epochs": 0}})
    with pytest.raises(ConfigError, match="train.regime"):
        resolve_config({"train": {"regime": "overcooked"}})
    with pytest.raises(ConfigError, match="use_augmented.*boolean"):
        resolve_config({"train": {"use_augmented": 1}})
    with pytest.raises(ConfigError, match="eval.eps\\[1\\]"):
        resolve_config({"eval": {"eps": [0.5, "one"]}})


def test_nullable_target_speed():
    assert resolve_config({"planner": {"target_speed": None}}) is not None
    cfg = resolve_config({"planner": {"target_speed": 6.0}})
    assert cfg["planner.target_speed"] == 6.0
    with pytest.raises(ConfigError, match="planner.target_speed"):
        resolve_config({"planner": {"target_speed": "fast"}})
    with pytest.raises(ConfigError, match="train.lr.*may not be null"):
        resolve_config({"train": {"lr": None}})


def test_override_beats_file():
    cfg = resolve_config({"train": {"eps": 0.7}}, {"train.eps": 1.0})
    assert cfg["train.eps"] == 1.0


def test_override_path_errors():
    with pytest.raises(ConfigError, match="'train': is a section"):
        resolve_config(None, {"train": 3})
    with pytest.raises(ConfigError, match="train.epochs.deep"):
        resolve_config(None, {"train.epochs.deep": 3})
    with pytest.raises(ConfigError, match="unknown field 'nope'"):
        resolve_config(None, {"nope.x": 3})


def test_cross_field_validation():
    with pytest.raises(ConfigError, match="n_agents_max"):
        resolve_config({"data": {"n_agents_min": 3, "n_agents_max": 2}})
    with pytest.raises(ConfigError, match="strictly increasing"):
        resolve_config({"probe": {"levels": [0.5, 0.25]}})
    with pytest.raises(ConfigError, match="lie in \\[0, 1\\]"):
        resolve_config({"probe": {"levels": [0.0, 1.5]}})
    with pytest.raises(ConfigError, match="probe.n_train"):
        resolve_config({"probe": {"m": 32, "n_train": 8}})
    with pytest.raises(ConfigError, match="probe.kinds\\[0\\]"):
        resolve_config({"probe": {"kinds": ["gaussian"]}})
    with pytest.raises(ConfigError, match="eval.eps"):
        resolve_config({"eval": {"eps": []}})


def test_resolved_config_reresolves_to_itself(tmp_path):
    cfg = resolve_config({"train": {"epochs": 7}}, {"seed": 3})
    path = tmp_path / "config.json"
    cfg.save(path)
    again = resolve_config(str(path))
    assert again.values == cfg.values
    assert again.digest == cfg.digest
    # the saved file carries its own digest annotation
    assert json.loads(path.read_text())["config_digest"] == cfg.digest


def test_digest_tracks_content_not_key_order():
    a = resolve_config({"train": {"epochs": 5, "k": 5}})
    b = resolve_config({"train": {"k": 5, "epochs": 5}})
    c = resolve_config({"train": {"epochs": 6, "k": 5}})
    assert a.digest == b.digest
    assert a.digest != c.digest


def test_env_var_overrides_out_dir(monkeypatch, tmp_path):
    monkeypatch.setenv("ROBUSTTRAJ_OUT", str(tmp_path / "forced"))
    cfg = resolve_config(None, {"out_dir": "ignored"})
    assert cfg["out_dir"] == str(tmp_path / "forced")


def test_malformed_config_file(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="malformed JSON"):
        resolve_config(str(path))


def test_accessors_build_module_configs():
    cfg = resolve_config({"data": {"history_len": 5, "future_len": 9},
                          "model": {"family": "cgan", "hidden_dim": 24},
                          "seed": 13})
    arch = cfg.arch()
    assert type(arch).__name__ == "CganArch"
    assert (arch.history_len, arch.future_len, arch.hidden_dim) == (5, 9, 24)
    assert cfg.train_config().seed == 13
    assert cfg.gen_config().history_len == 5
    assert cfg.planner_config().target_speed is None
    assert cfg.planner_attack().eps == 1.0
    assert cfg.threat(0.25).eps == 0.25


# ---------------------------------------------------------------------------
# dispatch and exit codes


def test_unknown_subcommand_exits_1_with_usage(capsys):
    assert cli_dispatch(["frobnicate"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_unknown_flag_exits_1_with_usage(capsys):
    assert cli_dispatch(["train", "--warp-speed", "9"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_no_subcommand_exits_1(capsys):
    assert cli_dispatch([]) == 1
    assert "usage:" in capsys.readouterr().err


def test_help_exits_0(capsys):
    assert cli_dispatch(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out


def test_invalid_config_field_exits_1_naming_path(capsys):
    assert cli_dispatch(["gen-data", "--set", "train.bogus=1"]) == 1
    assert "train.bogus" in capsys.readouterr().err


def test_malformed_set_flag_exits_1(capsys):
    assert cli_dispatch(["gen-data", "--set", "no-equals-sign"]) == 1
    assert "PATH=VALUE" in capsys.readouterr().err


def test_missing_dataset_is_runtime_failure(tmp_path, capsys):
    code = cli_dispatch(["train", "--out", str(tmp_path / "x"),
                         "--data", str(tmp_path / "missing.jsonl"), *TINY])
    assert code == 2


# ---------------------------------------------------------------------------
# artifact-producing subcommands


def test_gen_data_writes_stamped_dataset(pipeline):
    out, _ = pipeline
    path = os.path.join(out, "dataset.jsonl")
    dataset = sc.load_dataset(path)
    assert len(dataset.split("train")) == 12
    assert len(dataset.split("test")) == 4
    cfg_blob = json.load(open(os.path.join(out, "config.json")))
    for line in open(path):
        assert json.loads(line)["config_digest"] == cfg_blob["config_digest"]


def test_gen_data_bitwise_reproducible(tmp_path):
    out = str(tmp_path / "repro")
    args = ["gen-data", "--out", out, "--seed", "4", *TINY]
    assert cli_dispatch(args) == 0
    first = open(os.path.join(out, "dataset.jsonl"), "rb").read()
    assert cli_dispatch(args) == 0
    assert open(os.path.join(out, "dataset.jsonl"), "rb").read() == first


def test_train_artifacts_stamped_and_loadable(pipeline):
    out, _ = pipeline
    report = json.load(open(os.path.join(out, "report.json")))
    model_blob = json.load(open(os.path.join(out, "model.json")))
    digest = digest_line(os.path.join(out, "metrics.csv"))
    assert report["config_digest"] == digest == model_blob["config_digest"]
    model = ck.load_checkpoint(os.path.join(out, "model.json"))
    assert model.kind == "cvae"
    assert model.arch.hidden_dim == 16
    rows = read_csv(os.path.join(out, "metrics.csv"))
    assert rows[0]["attack"] == "none"
    ckpts = os.listdir(os.path.join(out, "checkpoints"))
    assert any(n.startswith("epoch_") for n in ckpts)


def test_eval_writes_metrics_row(pipeline, tmp_path):
    out, args = pipeline
    eval_out = str(tmp_path / "eval")
    code = cli_dispatch(["eval", *args[2:], "--out", eval_out,
                         "--data", os.path.join(out, "dataset.jsonl"),
                         "--model", os.path.join(out, "model.json"),
                         "--attack", "deterministic", "--eps", "0.5"])
    assert code == 0
    rows = read_csv(os.path.join(eval_out, "metrics.csv"))
    assert len(rows) == 2  # clean + the one requested attack point
    assert rows[1]["attack"] == "deterministic"
    assert float(rows[1]["eps"]) == 0.5
    assert float(rows[1]["ade"]) >= float(rows[0]["ade"]) - 1e-9


def test_attack_writes_objectives(pipeline, tmp_path):
    out, args = pipeline
    atk_out = str(tmp_path / "atk")
    code = cli_dispatch(["attack", *args[2:], "--out", atk_out,
                         "--data", os.path.join(out, "dataset.jsonl"),
                         "--model", os.path.join(out, "model.json"),
                         "--attack", "naive", "--eps", "0.5", "--steps", "3"])
    assert code == 0
    rows = read_csv(os.path.join(atk_out, "attacks.csv"))
    assert len(rows) == 4  # one per test scene
    assert {r["attack"] for r in rows} == {"naive"}
    assert all(float(r["objective"]) >= 0.0 for r in rows)


def test_augment_appends_augmented_records(pipeline, tmp_path):
    out, args = pipeline
    aug_out = str(tmp_path / "aug")
    code = cli_dispatch(["augment", *args[2:], "--out", aug_out,
                         "--data", os.path.join(out, "dataset.jsonl"),
                         "--gamma", "2.0", "--set", "augment.steps=8"])
    assert code == 0
    dataset = sc.load_dataset(os.path.join(aug_out, "augmented.jsonl"))
    originals = [r for r in dataset.records if r.provenance == "synthetic"]
    augmented = [r for r in dataset.records if r.provenance == "augmented"]
    assert len(originals) == 16
    assert len(augmented) == 12  # one per train scene
    assert all(r.split == "train" for r in augmented)


def test_probe_command_writes_csv(tmp_path):
    out = str(tmp_path / "probe")
    code = cli_dispatch(["probe", "--out", out, "--seed", "3",
                         "--kind", "salt_pepper", "--budget", "2",
                         "--set", "probe.m=8", "--set", "probe.k=4",
                         "--set", "probe.n_train=16",
                         "--set", "probe.levels=[0.0,0.5]",
                         "--set", "probe.seeds=[0]"])
    assert code == 0
    rows = read_csv(os.path.join(out, "probe.csv"))
    assert [r["noise_kind"] for r in rows] == ["salt_pepper"] * 2
    assert [float(r["level"]) for r in rows] == [0.0, 0.5]


def test_simulate_writes_outcomes_and_logs(tmp_path):
    out = str(tmp_path / "sim")
    model_path = str(tmp_path / "m.json")
    arch = cvae.CvaeArch(hidden_dim=16, embed_dim=8, latent_dim=4)
    ck.save_checkpoint(cvae.init_cvae(arch, seed=0), model_path)
    code = cli_dispatch(["simulate", "--out", out, "--model", model_path,
                         "--attack", "none", "--regime", "clean"])
    assert code == 0
    rows = read_csv(os.path.join(out, "outcomes.csv"))
    assert len(rows) == 10
    assert {r["attack"] for r in rows} == {"none"}
    logs = os.listdir(os.path.join(out, "episodes"))
    assert len(logs) == 10
    first = os.path.join(out, "episodes", sorted(logs)[0])
    entries = [json.loads(l) for l in open(first)]
    assert all("config_digest" in e for e in entries)


def test_report_builds_comparison_table(pipeline, tmp_path, capsys):
    out, _ = pipeline
    runs = tmp_path / "allruns"
    blob = json.load(open(os.path.join(out, "report.json")))
    other = json.loads(json.dumps(blob))
    other["run_id"] = "naive_at-s11-aaaaaaaa"
    other["config"]["regime"] = "naive_at"
    for name, b in (("c", blob), ("n", other)):
        (runs / name).mkdir(parents=True)
        (runs / name / "report.json").write_text(json.dumps(b))
    assert cli_dispatch(["report", "--runs", str(runs)]) == 0
    shown = capsys.readouterr().out
    assert "clean" in shown and "naive_at" in shown
    table = (runs / "comparison.txt").read_text()
    assert "ade@0.5" in table and "ade@1.0" in table
    rows = read_csv(runs / "comparison.csv")
    assert len(rows) == 6  # 2 runs x (clean + two attacked points)
    # clean sorts before naive_at regardless of directory order
    assert rows[0]["run_id"].startswith("clean")


def test_report_missing_dir_exits_1(tmp_path, capsys):
    assert cli_dispatch(["report", "--runs", str(tmp_path / "nope")]) == 1
    assert cli_dispatch(["report", "--runs", str(tmp_path)]) == 1
    assert "report" in capsys.readouterr().err
