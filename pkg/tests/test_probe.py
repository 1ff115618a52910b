"""Condition-degeneration probe: noise injection, retrieval score, sweeps."""

import csv

import numpy as np
import pytest

from robusttraj import cvae
from robusttraj import probe as pb
from robusttraj import scenes as sc
from robusttraj import training as tr
from robusttraj.seeding import derive_seed

ARCH = cvae.CvaeArch(hidden_dim=32, embed_dim=16, latent_dim=4)


def probe_set(m=16, seed=3):
    return pb.build_probe_scenes(m, seed)


def memorizer(scenes):
    """Callable predictor that returns each scene's own future exactly."""

    def predict(X, k, seed):
        for s in scenes:
            if np.array_equal(s.history, X):
                return np.tile(s.future[None], (k, 1, 1, 1))
        raise AssertionError("unknown probe history")

    return predict


@pytest.fixture(scope="module")
def fitted():
    """Small clean-trained model plus the probe set drawn from its train set."""
    seed = 5
    cfg = sc.GenConfig(n_agents_min=1, n_agents_max=1)
    base = sc.generate_scenes(cfg, 48, derive_seed(seed, "probe-train-data"))
    records = [sc.SceneRecord(s, "train", "synthetic", f"p{i}")
               for i, s in enumerate(base)]
    config = tr.TrainConfig(regime="clean", epochs=12, batch_size=8, k=10,
                            seed=derive_seed(seed, "probe-fit"))
    model, _ = tr.train(records, config, arch=ARCH)
    return model, [pb.anchor_scene(s) for s in base[:16]]


# ---------------------------------------------------------------------------
# salt-and-pepper noise


def test_salt_pepper_zero_p_is_identity():
    X = np.random.default_rng(0).normal(size=(2, 4, 2))
    out = pb.salt_pepper(X, 0.0, seed=1)
    assert np.array_equal(out, X)
    out[0, 0, 0] = 99.0  # a copy, not a view
    assert X[0, 0, 0] != 99.0


def test_salt_pepper_full_p_replaces_everything():
    X = np.random.default_rng(1).normal(size=(3, 4, 2))
    out = pb.salt_pepper(X, 1.0, seed=2, magnitude=4.0)
    assert np.all(np.isin(out, (-4.0, 4.0)))
    assert np.any(out == 4.0) and np.any(out == -4.0)


def test_salt_pepper_fraction_matches_p():
    p = 0.3
    X = np.zeros((50, 100, 2))  # 10^4 coordinates
    out = pb.salt_pepper(X, p, seed=7)
    frac = np.mean(out != 0.0)
    sigma = np.sqrt(p * (1 - p) / X.size)
    assert abs(frac - p) < 3 * sigma


def test_salt_pepper_seeded():
    X = np.random.default_rng(2).normal(size=(2, 4, 2))
    a = pb.salt_pepper(X, 0.5, seed=11)
    b = pb.salt_pepper(X, 0.5, seed=11)
    c = pb.salt_pepper(X, 0.5, seed=12)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_salt_pepper_rejects_bad_p():
    X = np.zeros((1, 4, 2))
    with pytest.raises(pb.ProbeError, match="p must be in"):
        pb.salt_pepper(X, -0.1, seed=0)
    with pytest.raises(pb.ProbeError, match="p must be in"):
        pb.salt_pepper(X, 1.5, seed=0)


def test_salt_pepper_untouched_coordinates_exact():
    X = np.random.default_rng(3).normal(size=(4, 4, 2))
    out = pb.salt_pepper(X, 0.4, seed=5, magnitude=50.0)
    keep = out != 50.0
    keep &= out != -50.0
    assert np.array_equal(out[keep], X[keep])


# ---------------------------------------------------------------------------
# retrieval score


def test_probe_scenes_are_origin_anchored():
    scenes = probe_set()
    for s in scenes:
        assert s.history.shape[0] == 1
        np.testing.assert_allclose(s.history[0, -1], 0.0, atol=1e-12)


def test_score_requires_two_scenes():
    scenes = probe_set()
    with pytest.raises(pb.ProbeError, match="at least 2"):
        pb.condition_dependence_score(memorizer(scenes), scenes[:1])


def test_score_rejects_duplicate_scenes():
    scenes = probe_set()
    dup = scenes + [sc.Scene(scenes[0].history.copy(), scenes[0].future.copy(),
                             scenes[0].dt, scenes[0].lanes)]
    with pytest.raises(pb.ProbeError, match="duplicate"):
        pb.condition_dependence_score(memorizer(scenes), dup)


def test_score_rejects_shared_future():
    scenes = probe_set()
    clash = sc.Scene(scenes[1].history + 0.5, scenes[0].future.copy(),
                     scenes[0].dt, scenes[0].lanes)
    with pytest.raises(pb.ProbeError, match="duplicate"):
        pb.condition_dependence_score(memorizer(scenes), scenes[:4] + [clash])


def test_score_rejects_unknown_model():
    with pytest.raises(pb.ProbeError, match="callable"):
        pb.condition_dependence_score(42, probe_set())


def test_memorizer_scores_one():
    scenes = probe_set()
    score = pb.condition_dependence_score(memorizer(scenes), scenes, k=5, seed=0)
    assert score == 1.0


def test_zeroed_context_scores_exactly_chance():
    # with the context forced to zero every scene decodes the same candidate
    # set, and each candidate retrieves exactly one scene: score = 1/M
    scenes = probe_set(m=16)
    model = pb.zero_context(cvae.init_cvae(ARCH, seed=0))
    score = pb.condition_dependence_score(model, scenes, k=10, seed=1)
    assert score == pytest.approx(1.0 / 16, abs=1e-12)


def test_zero_context_rejects_non_cvae():
    with pytest.raises(pb.ProbeError, match="cvae"):
        pb.zero_context(lambda X, k, seed: None)


def test_chance_floor_holds_for_arbitrary_models():
    # candidates within a scene share one context code, so the binomial
    # sanity floor counts scenes, not samples, as trials
    scenes = probe_set(m=16)
    m, k = 16, 10
    chance = 1.0 / m
    floor = chance - 3 * np.sqrt(chance * (1 - chance) / m)
    for seed in (0, 1, 2):
        model = cvae.init_cvae(ARCH, seed=seed)
        score = pb.condition_dependence_score(model, scenes, k=k, seed=seed)
        assert floor <= score <= 1.0


def test_trained_model_beats_chance_and_zeroed_context(fitted):
    model, scenes = fitted
    m, k = len(scenes), 10
    trained = pb.condition_dependence_score(model, scenes, k=k, seed=5)
    zeroed = pb.condition_dependence_score(pb.zero_context(model), scenes,
                                           k=k, seed=5)
    assert trained > 3.0 / m
    assert trained > zeroed


def test_score_deterministic(fitted):
    model, scenes = fitted
    a = pb.condition_dependence_score(model, scenes, k=6, seed=9)
    b = pb.condition_dependence_score(model, scenes, k=6, seed=9)
    assert a == b


# ---------------------------------------------------------------------------
# level sweeps


def test_run_probe_validations():
    with pytest.raises(pb.ProbeError, match="family"):
        pb.run_probe("cgan", "salt_pepper", (0.0,), 2, 0)
    with pytest.raises(pb.ProbeError, match="noise kind"):
        pb.run_probe("cvae", "gaussian", (0.0,), 2, 0)
    with pytest.raises(pb.ProbeError, match="at least one level"):
        pb.run_probe("cvae", "salt_pepper", (), 2, 0)
    with pytest.raises(pb.ProbeError, match="strictly increasing"):
        pb.run_probe("cvae", "salt_pepper", (0.5, 0.5), 2, 0)
    with pytest.raises(pb.ProbeError, match=">= 0"):
        pb.run_probe("cvae", "salt_pepper", (-0.5, 0.0), 2, 0)
    with pytest.raises(pb.ProbeError, match="fractions"):
        pb.run_probe("cvae", "salt_pepper", (0.0, 1.5), 2, 0)
    with pytest.raises(pb.ProbeError, match="budget"):
        pb.run_probe("cvae", "salt_pepper", (0.0,), 0, 0)
    with pytest.raises(pb.ProbeError, match="training scenes"):
        pb.run_probe("cvae", "salt_pepper", (0.0,), 2, 0, m=16, n_train=8)


def test_run_probe_level_zero_shared_across_kinds():
    kw = dict(budget=3, seed=4, m=8, k=4, n_train=16, arch=ARCH)
    salt = pb.run_probe("cvae", "salt_pepper", (0.0, 0.5), **kw)
    adv = pb.run_probe("cvae", "adversarial", (0.0, 0.5), **kw)
    assert salt.scores[0] == adv.scores[0]
    assert salt.noise_kind == "salt_pepper" and adv.noise_kind == "adversarial"


def test_run_probe_deterministic():
    kw = dict(budget=3, seed=6, m=8, k=4, n_train=16, arch=ARCH)
    a = pb.run_probe("cvae", "salt_pepper", (0.0, 0.6), **kw)
    b = pb.run_probe("cvae", "salt_pepper", (0.0, 0.6), **kw)
    assert a.scores == b.scores
    assert a.levels == b.levels


def test_run_probe_flags_uninformative_scores():
    # heavy corruption at the lowest level leaves nothing to retrieve, which
    # is exactly the "budget cannot resolve dependence" condition
    rep = pb.run_probe("cvae", "salt_pepper", (0.95,), budget=2, seed=1,
                       m=12, k=5, n_train=24, arch=ARCH)
    assert rep.budget_flag
    assert rep.score_var > 0.0


def test_probe_report_validations():
    with pytest.raises(pb.ProbeError, match="one score per level"):
        pb.ProbeReport("salt_pepper", (0.0, 0.5), (0.1,), 0, 2, 8, 4,
                       False, 0.0)
    with pytest.raises(pb.ProbeError, match="strictly increasing"):
        pb.ProbeReport("salt_pepper", (0.5, 0.0), (0.1, 0.1), 0, 2, 8, 4,
                       False, 0.0)
    with pytest.raises(pb.ProbeError, match="in \\[0, 1\\]"):
        pb.ProbeReport("salt_pepper", (0.0,), (1.7,), 0, 2, 8, 4, False, 0.0)


def test_probe_csv_round_trip(tmp_path):
    r1 = pb.ProbeReport("salt_pepper", (0.0, 0.5), (0.4, 0.2), 0, 2, 8, 4,
                        False, 1e-3)
    r2 = pb.ProbeReport("adversarial", (0.0, 0.5), (0.4, 0.1), 1, 2, 8, 4,
                        False, 1e-3)
    path = tmp_path / "probe.csv"
    pb.write_probe_csv([r1, r2], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "noise_kind,level,seed,score"
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert rows[0] == {"noise_kind": "salt_pepper", "level": "0.0",
                       "seed": "0", "score": "0.4"}
    assert rows[3]["noise_kind"] == "adversarial"
    assert float(rows[3]["score"]) == 0.1


def test_inner_objective_config_validated():
    cfg = tr.TrainConfig(regime="naive_at", inner_objective="bogus")
    with pytest.raises(ValueError, match="inner_objective"):
        cfg.validate()
