"""Bicycle-model rollout, augmentation objectives, and scene augmentation."""

import numpy as np
import pytest

from robusttraj import augmentation as aug
from robusttraj import autodiff as ad
from robusttraj import scenes as sc


def state(p=(0.0, 0.0), psi=0.0, v=0.0, kappa=0.0):
    return aug.BicycleState(p=p, psi=psi, v=v, kappa=kappa)


def controls(kdot, accel):
    return aug.ControlSequence(kdot=np.asarray(kdot, float),
                               accel=np.asarray(accel, float))


# ---------------------------------------------------------------------------
# rollout

def test_rollout_zero_controls_zero_speed_is_stationary():
    track = aug.rollout_bicycle(state(p=(2.0, -1.0)),
                                controls(np.zeros(8), np.zeros(8)), dt=0.5)
    np.testing.assert_array_equal(track, np.tile([2.0, -1.0], (9, 1)))


def test_rollout_constant_accel_matches_discrete_sum():
    # v_t = 0.2 t, displacement = sum v_t * dt = 0.02 * 55 = 1.1 m
    track = aug.rollout_bicycle(state(), controls(np.zeros(10), np.full(10, 2.0)),
                                dt=0.1)
    assert track[-1, 0] == pytest.approx(1.1, abs=1e-12)
    assert track[-1, 1] == pytest.approx(0.0, abs=1e-12)
    # continuous limit for orientation: 0.5 * a * t^2 = 1.0
    assert track[-1, 0] == pytest.approx(1.0, abs=0.15)


def test_rollout_constant_curvature_traces_circle():
    dt, kappa, v = 0.01, 0.1, 5.0
    n = int((np.pi / 2) / (v * kappa * dt))
    track = aug.rollout_bicycle(state(v=v, kappa=kappa),
                                controls(np.zeros(n), np.zeros(n)), dt=dt)
    center = np.array([0.0, 1.0 / kappa])
    radii = np.linalg.norm(track - center, axis=1)
    assert np.max(np.abs(radii - 1.0 / kappa)) < 0.1


def test_rollout_curvature_bound_names_step():
    # kappa grows 0.045 per step and crosses 0.2 on step 4
    with pytest.raises(aug.AugmentationError, match="step 4"):
        aug.rollout_bicycle(state(v=5.0),
                            controls(np.full(10, 0.09), np.zeros(10)), dt=0.5)


def test_rollout_negative_speed_names_step():
    with pytest.raises(aug.AugmentationError, match="v .* step 0"):
        aug.rollout_bicycle(state(v=1.0),
                            controls(np.zeros(4), np.full(4, -4.0)), dt=0.5)


def test_control_bounds_validated():
    with pytest.raises(aug.AugmentationError, match="kdot"):
        controls([0.2, 0.0], [0.0, 0.0]).validate()
    with pytest.raises(aug.AugmentationError, match=r"\|a\|"):
        controls([0.0, 0.0], [0.0, 5.0]).validate()
    with pytest.raises(aug.AugmentationError):
        aug.BicycleState(p=(0, 0), psi=0.0, v=-0.5, kappa=0.0).validate()


def feasible_controls(rng, s):
    return controls(rng.uniform(-0.05, 0.05, s), rng.uniform(-1.0, 1.0, s))


def test_rollout_graph_matches_numpy_rollout():
    rng = np.random.default_rng(0)
    init = state(p=(1.0, 2.0), psi=0.3, v=6.0, kappa=0.05)
    ctrl = feasible_controls(rng, 12)
    want = aug.rollout_bicycle(init, ctrl, dt=0.5)
    x_all, y_all = aug.rollout_graph(init, ad.Tensor(ctrl.kdot.reshape(1, -1)),
                                     ad.Tensor(ctrl.accel.reshape(1, -1)), 0.5)
    got = np.stack([x_all.values[0], y_all.values[0]], axis=1)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_rollout_gradient_matches_fd():
    init = state(v=4.0, kappa=0.02, psi=0.5)
    s = 6
    rng = np.random.default_rng(1)
    ctrl0 = np.concatenate([rng.uniform(-0.05, 0.05, s), rng.uniform(-1, 1, s)])

    def fn(flat):
        kdot = ad.reshape(ad.slice_axis(flat, 0, 0, s), (1, s))
        a = ad.reshape(ad.slice_axis(flat, 0, s, 2 * s), (1, s))
        x_all, y_all = aug.rollout_graph(init, kdot, a, 0.5)
        return ad.sum_all(ad.add(ad.mul(x_all, x_all), ad.mul(y_all, y_all)))

    res = ad.gradient_check(fn, ctrl0, tol=1e-4)
    assert res.passed, f"max rel err {res.max_rel_err:.3g}"


# ---------------------------------------------------------------------------
# objectives

def test_deviation_zero_when_equal():
    x = np.random.default_rng(0).normal(size=(10, 2))
    assert aug.loss_deviation(x, x, (1.0, 0.0)) == 0.0


def test_deviation_unit_offset_is_minus_t():
    x = np.zeros((7, 2))
    x_aug = x + np.array([1.0, 0.0])
    assert aug.loss_deviation(x, x_aug, (1.0, 0.0)) == pytest.approx(-7.0)


def test_deviation_orthogonal_is_zero():
    x = np.zeros((5, 2))
    x_aug = x + np.array([0.0, 2.0])
    assert aug.loss_deviation(x, x_aug, (1.0, 0.0)) == 0.0


def test_deviation_rejects_non_unit_direction():
    x = np.zeros((3, 2))
    with pytest.raises(aug.AugmentationError, match="unit"):
        aug.loss_deviation(x, x, (1.0, 1.0))


def test_collision_frozen_values():
    x = np.zeros((6, 2))
    assert aug.loss_collision(x, [x.copy()]) == pytest.approx(1.0)
    other = x + np.array([1.0, 0.0])
    assert aug.loss_collision(x, [other]) == pytest.approx(0.5)
    far = x + np.array([5000.0, 0.0])
    assert aug.loss_collision(x, [far]) < 1e-3
    assert aug.loss_collision(x, []) == 0.0


def test_collision_in_unit_interval_and_monotone():
    x = np.zeros((4, 2))
    vals = [aug.loss_collision(x, [x + np.array([d, 0.0])])
            for d in (0.0, 0.5, 1.0, 3.0, 10.0)]
    assert all(0.0 < v <= 1.0 for v in vals)
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_dyn_graph_matches_numpy_losses():
    rng = np.random.default_rng(2)
    init = state(v=5.0)
    ctrl = feasible_controls(rng, 10)
    track = aug.rollout_bicycle(init, ctrl, dt=0.5)
    ref = track + rng.normal(scale=0.3, size=track.shape)
    others = [track + np.array([2.0, 1.0])]
    d = np.array([0.0, 1.0])
    x_all, y_all = aug.rollout_graph(init, ad.Tensor(ctrl.kdot.reshape(1, -1)),
                                     ad.Tensor(ctrl.accel.reshape(1, -1)), 0.5)
    got = aug._dyn_graph(x_all, y_all, ref, others, d, gamma=1.0).item()
    want = aug.loss_dyn(ref, track, others, d, gamma=1.0)
    assert got == pytest.approx(want, rel=1e-12)


# ---------------------------------------------------------------------------
# warm start

def cruise_scene(n=2, seed=0):
    cfg = sc.GenConfig(behavior_weights={"cruise": 1.0}, n_agents_min=n,
                       n_agents_max=n, noise_std=0.0, rotate=False)
    return sc.generate_scenes(cfg, 1, seed)[0]


def test_warm_start_reproduces_track_exactly():
    scene = cruise_scene()
    for i in range(scene.n_agents):
        track = scene.full_track()[i]
        ws = aug.warm_start(track, scene.dt)
        assert ws is not None
        init, ctrl = ws
        rolled = aug.rollout_bicycle(init, ctrl, scene.dt)
        assert np.max(np.abs(rolled - track)) < 1e-9


def test_warm_start_infeasible_for_sharp_turn():
    # 90-degree corner in one 0.5 s step needs kappa far beyond the bound
    track = np.array([[0.0, 0.0], [4.0, 0.0], [8.0, 0.0], [8.0, 4.0],
                      [8.0, 8.0]])
    assert aug.warm_start(track, 0.5) is None


def test_project_controls_yields_feasible_rollout():
    rng = np.random.default_rng(3)
    init = state(v=1.0)
    wild = controls(rng.uniform(-1, 1, 12), rng.uniform(-8, 8, 12))
    fixed = aug.project_controls(init, wild, dt=0.5)
    fixed.validate()
    aug.rollout_bicycle(init, fixed, dt=0.5)  # must not raise


# ---------------------------------------------------------------------------
# scene augmentation

def test_augment_scene_respects_clip_and_descent():
    scene = cruise_scene(n=2, seed=1)
    config = aug.AugConfig(gamma=1.0, clip=1.0, steps=40)
    res = aug.augment_scene(scene, config, seed=0)
    assert not res.skipped
    orig = scene.full_track()
    new = res.scene.full_track()
    assert np.max(np.abs(new - orig)) <= 1.0 + 1e-9
    assert np.max(np.abs(new - orig)) > 1e-3  # actually moved
    for i, entry in enumerate(res.controls):
        rolled = aug.reroll_controls(entry, scene.dt)
        assert np.max(np.abs(rolled - new[i])) < 1e-9


def test_augment_scene_is_seeded():
    scene = cruise_scene(n=2, seed=2)
    config = aug.AugConfig(steps=15)
    a = aug.augment_scene(scene, config, seed=5)
    b = aug.augment_scene(scene, config, seed=5)
    assert a.scene.full_track().tobytes() == b.scene.full_track().tobytes()


def test_augment_skips_infeasible_agent_with_warning():
    corner = np.array([[0.0, 0.0], [4.0, 0.0], [8.0, 0.0], [8.0, 4.0],
                       [8.0, 8.0], [8.0, 12.0], [8.0, 16.0], [8.0, 20.0],
                       [8.0, 24.0], [8.0, 28.0], [8.0, 32.0], [8.0, 36.0],
                       [8.0, 40.0], [8.0, 44.0], [8.0, 48.0], [8.0, 52.0]])
    scene = sc.Scene(corner[None, :4], corner[None, 4:], 0.5)
    with pytest.warns(UserWarning, match="agent 0"):
        res = aug.augment_scene(scene, aug.AugConfig(steps=5), seed=0)
    assert res.skipped == [0]
    assert res.controls == [None]
    np.testing.assert_array_equal(res.scene.full_track(), scene.full_track())


def test_high_gamma_pushes_near_agents_apart():
    base = cruise_scene(n=1, seed=3).full_track()[0]
    near = base + np.array([0.0, 0.6])
    scene = sc.Scene(np.stack([base[:4], near[:4]]),
                     np.stack([base[4:], near[4:]]), 0.5)
    res_lo = aug.augment_scene(scene, aug.AugConfig(gamma=0.0, steps=40), seed=1)
    res_hi = aug.augment_scene(scene, aug.AugConfig(gamma=60.0, steps=40), seed=1)

    # initial positions are pinned by the rollout, so compare the mean
    # inter-agent distance (the quantity the collision penalty acts on)
    def mean_gap(s):
        t = s.full_track()
        return np.mean(np.linalg.norm(t[0] - t[1], axis=1))

    assert mean_gap(res_hi.scene) > mean_gap(res_lo.scene) + 0.2
    assert mean_gap(res_hi.scene) > mean_gap(scene) + 0.2


def test_augmented_bounds_property_over_seeded_scenes():
    cfg_gen = sc.GenConfig(behavior_weights={"cruise": 0.6, "slow_down": 0.4},
                           noise_std=0.01)
    scenes = sc.generate_scenes(cfg_gen, 100, seed=9)
    config = aug.AugConfig(gamma=1.0, clip=1.0, steps=12)
    checked = 0
    for k, scene in enumerate(scenes):
        res = aug.augment_scene(scene, config, seed=k)
        orig = scene.full_track()
        new = res.scene.full_track()
        assert np.max(np.abs(new - orig)) <= config.clip + 1e-9
        for i, entry in enumerate(res.controls):
            if entry is None:
                np.testing.assert_array_equal(new[i], orig[i])
                continue
            ctrl = aug.ControlSequence(np.asarray(entry["kdot"]),
                                       np.asarray(entry["accel"]))
            ctrl.validate()  # |kdot| and |a| within bounds
            rolled = aug.reroll_controls(entry, scene.dt)
            assert np.max(np.abs(rolled - new[i])) < 1e-9
            checked += 1
    assert checked > 100  # plenty of agents actually augmented


def test_aug_config_validation():
    with pytest.raises(aug.AugmentationError):
        aug.AugConfig(gamma=-1.0).validate()
    with pytest.raises(aug.AugmentationError):
        aug.AugConfig(clip=0.0).validate()
    with pytest.raises(aug.AugmentationError):
        aug.AugConfig(steps=0).validate()
