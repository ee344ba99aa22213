import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from osis.model import N_DET, init_params
from osis.scene import NO_INSTANCE, SceneGenConfig, generate_scene
from osis.train import (AdamState, LossConfig, TrainConfig, TrainingError, adam_step, detection_loss,
                        detection_targets, discriminative_loss, embedding_loss, prepare_scene, prototype_ce,
                        prototype_targets, step_decay, train)
from osis.train.losses import box_iou_loss
from gradcheck import worst_rel_error
from oracles import MINI_CATALOG, MINI_GEOM, central_diff, direct_discriminative, eq1, mini_params, mini_scene


# detection --------------------------------------------------------------------

def _perfect_det_map(scene, geom, cfg):
    t = detection_targets(scene, geom, cfg)
    T = t.pos.shape[0]
    m = np.zeros((T, N_DET, geom.H * geom.W))
    m[:, 0] = np.where(t.pos.reshape(T, -1), 40.0, -40.0)
    ti, hw = np.divmod(t.pos_index, geom.H * geom.W)
    gt = t.gt
    m[ti, 1, hw] = gt[:, 0] - t.center[:, 0]
    m[ti, 2, hw] = gt[:, 1] - t.center[:, 1]
    m[ti, 3, hw] = np.log(gt[:, 2])
    m[ti, 4, hw] = np.log(gt[:, 3])
    m[ti, 5, hw] = np.sin(2 * gt[:, 4])
    m[ti, 6, hw] = np.cos(2 * gt[:, 4])
    return m.reshape(T * N_DET, geom.H, geom.W), t


def test_perfect_detection_has_zero_loss():
    scene = mini_scene()
    cfg = LossConfig(min_neg=8)
    m, t = _perfect_det_map(scene, MINI_GEOM, cfg)
    loss, parts, _ = detection_loss(m, t, cfg)
    assert len(t.pos_index) > 0
    assert loss < 1e-12 and parts["iou"] < 1e-12 and parts["rot"] == 0.0


def test_no_things_uniform_logits_give_ln2():
    scene = generate_scene(SceneGenConfig(roi=(-4, -4, -1, 4, 4, 3), thing_counts={}, unknown_count=0,
                                          catalog=MINI_CATALOG), 0)
    cfg = LossConfig(min_neg=8)
    t = detection_targets(scene, MINI_GEOM, cfg)
    loss, parts, _ = detection_loss(np.zeros((N_DET, 8, 8)), t, cfg)
    assert loss == pytest.approx(math.log(2), rel=1e-12)


def test_box_loss_identity_and_gradient():
    gt = np.array([[1.0, -0.5, 1.8, 4.2, 0.6]])
    centers = np.array([[0.5, 0.0]])
    pred = np.array([[0.5, -0.5, math.log(1.8), math.log(4.2)]])
    loss, _ = box_iou_loss(pred, gt, centers)
    assert loss[0] == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = pred + rng.normal(0, 0.6, pred.shape)
        _, g = box_iou_loss(p, gt, centers)
        for j in range(4):
            n = central_diff(lambda: box_iou_loss(p, gt, centers)[0][0], p, j, 1e-6)
            assert g[0, j] == pytest.approx(n, rel=1e-5, abs=1e-8)


# prototype cross-entropy ------------------------------------------------------------

def test_uniform_scores_give_log_k_plus_one():
    phi = np.zeros((4, 2))
    mu = np.zeros((3, 2))
    loss, *_ = prototype_ce(phi, mu, np.ones(3), 0.0, np.array([0, 1, 2, 3]))
    assert loss == pytest.approx(math.log(4), rel=1e-12)


def test_loss_drops_as_competitors_move_away():
    phi = np.array([[0.0, 0.0]])
    prev = math.log(3)
    for d in (0.5, 1.0, 2.0, 4.0):
        mu = np.array([[0.0, 0.0], [d, 0.0]])
        loss, *_ = prototype_ce(phi, mu, np.ones(2), -5.0, np.array([0]))
        scores = [eq1([0, 0], [0, 0], 1.0), eq1([0, 0], [d, 0], 1.0), -5.0]
        expected = -scores[0] + math.log(sum(math.exp(s) for s in scores))
        assert loss == pytest.approx(expected, rel=1e-12)
        assert loss < prev
        prev = loss


def test_embedding_loss_gradient_ten_points():
    rng = np.random.default_rng(4)
    phi = rng.normal(size=(10, 3))
    thing = rng.normal(size=(2, 4))
    stuff = rng.normal(size=(1, 4))
    U = [0.3]
    target = rng.integers(0, 4, 10)

    def f():
        return embedding_loss(phi, thing, stuff, U[0], target)[0]

    _, d_phi, d_thing, d_stuff, d_U = embedding_loss(phi, thing, stuff, U[0], target)
    for arr, g in ((phi, d_phi), (thing, d_thing), (stuff, d_stuff)):
        for i in range(arr.size):
            assert g.flat[i] == pytest.approx(central_diff(f, arr, i, 1e-6), rel=1e-4, abs=1e-9)
    u = np.array([U[0]])

    def fu():
        return embedding_loss(phi, thing, stuff, u[0], target)[0]

    assert d_U == pytest.approx(central_diff(fu, u, 0, 1e-6), rel=1e-4)


def test_u_gradient_nonzero_with_unknown_targets():
    rng = np.random.default_rng(5)
    _, _, _, _, d_U = embedding_loss(rng.normal(size=(5, 2)), rng.normal(size=(1, 3)), rng.normal(size=(1, 3)),
                                     0.0, np.array([0, 1, 2, 2, 2]))
    assert d_U != 0.0


def test_prototype_targets_slots():
    scene = mini_scene()
    pt = prototype_targets(scene, MINI_GEOM)
    K = len(pt.thing_ids)
    for n, (i, s) in enumerate(zip(scene.instance_ids, scene.semantics)):
        if s == 0:
            assert pt.target[n] == list(pt.thing_ids).index(i)
        elif s == 1:
            assert pt.target[n] == K
        else:
            assert pt.target[n] == K + 1


# discriminative -----------------------------------------------------------------

def test_discriminative_margins_satisfied_is_zero():
    phi = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 0.0], [5.0, 0.0]])
    loss, _ = discriminative_loss(phi, np.array([0, 0, 1, 1]), 0.5, 1.5)
    assert loss == 0.0


def test_identical_means_push_is_two_delta_squared():
    phi = np.array([[0.1, 0.0], [-0.1, 0.0], [0.0, 0.1], [0.0, -0.1]])
    loss, _ = discriminative_loss(phi, np.array([0, 0, 1, 1]), 0.5, 1.5)
    assert loss == pytest.approx((2 * 1.5) ** 2, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(2, 12))
def test_discriminative_matches_direct_sum(seed, n_inst, n):
    rng = np.random.default_rng(seed)
    phi = rng.normal(size=(n, 3))
    labels = rng.integers(-1, n_inst, n)
    if not np.any(labels >= 0):
        labels[0] = 0
    loss, g = discriminative_loss(phi, labels, 0.5, 1.5)
    assert loss == pytest.approx(direct_discriminative(phi.tolist(), labels.tolist(), 0.5, 1.5), rel=1e-10,
                                 abs=1e-12)
    assert np.all(g[labels == NO_INSTANCE] == 0)


# network-level gradient checks ------------------------------------------------------

@pytest.mark.parametrize("term", ["det", "proto", "disc", "total"])
def test_loss_gradients_through_network(term):
    assert worst_rel_error(term, h=1e-4) < 1e-4


# optimizer and loop ----------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = {"a": np.array([1.0, -2.0])}
    out, _ = adam_step(p, {"a": np.zeros(2)}, AdamState.zeros_like(p), 0.1)
    np.testing.assert_array_equal(out["a"], p["a"])


def test_adam_first_step_is_lr_sign():
    p = {"a": np.array([1.0, -2.0, 0.5])}
    g = {"a": np.array([3.0, -0.01, 1e3])}
    out, st = adam_step(p, g, AdamState.zeros_like(p), 0.01)
    np.testing.assert_allclose(out["a"] - p["a"], -0.01 * np.sign(g["a"]), rtol=1e-5)
    assert st.t == 1


def test_adam_descends_a_quadratic():
    A = np.diag([1.0, 10.0, 0.1])
    p = {"x": np.array([3.0, -2.0, 5.0])}
    st = AdamState.zeros_like(p)
    f0 = p["x"] @ A @ p["x"]
    for _ in range(100):
        p, st = adam_step(p, {"x": 2 * A @ p["x"]}, st, 0.05)
    assert p["x"] @ A @ p["x"] < f0


def test_adam_rejects_nonfinite():
    p = {"a": np.zeros(2)}
    with pytest.raises(TrainingError, match="a"):
        adam_step(p, {"a": np.array([np.nan, 0.0])}, AdamState.zeros_like(p), 0.1)


def test_step_decay():
    assert step_decay(4e-3, 4) == 4e-3
    assert step_decay(4e-3, 5) == pytest.approx(4e-4)


def _mini_scenes(n):
    return [mini_scene(s) for s in range(n)]


def test_zero_epochs_returns_init():
    p0 = mini_params()
    p, rows = train(_mini_scenes(2), p0.config, MINI_GEOM, LossConfig(min_neg=8), TrainConfig(epochs=0), 0, init=p0)
    assert rows == [] and all(np.array_equal(p[k], p0[k]) for k in p0.names())


def test_training_is_reproducible_and_descends():
    scenes = _mini_scenes(6)
    p0 = mini_params()
    cfg = TrainConfig(epochs=10, lr=4e-3)
    lc = LossConfig(min_neg=8)
    _, rows_a = train(scenes, p0.config, MINI_GEOM, lc, cfg, 0, init=p0)
    _, rows_b = train(scenes, p0.config, MINI_GEOM, lc, cfg, 0, init=p0)
    assert rows_a == rows_b
    first = np.mean([r["total"] for r in rows_a[:6]])
    last = np.mean([r["total"] for r in rows_a[-6:]])
    assert last < first
    for r in rows_a:
        assert all(r[k] >= 0 and np.isfinite(r[k]) for k in ("det", "proto", "disc", "total"))


def test_warmup_ramps_learning_rate():
    scenes = _mini_scenes(2)
    p0 = mini_params()
    _, rows = train(scenes, p0.config, MINI_GEOM, LossConfig(min_neg=8),
                    TrainConfig(epochs=2, lr=1e-3, warmup_steps=4), 0, init=p0)
    assert [r["lr"] for r in rows] == pytest.approx([2.5e-4, 5e-4, 7.5e-4, 1e-3])


def test_semantic_mode_trains():
    scenes = _mini_scenes(2)
    from osis.model import ModelConfig
    mc = ModelConfig(**{**mini_params().config.__dict__, "semantic_classes": 3})
    p, rows = train(scenes, mc, MINI_GEOM, LossConfig(min_neg=8), TrainConfig(epochs=1, mode="semantic"), 0)
    assert all(r["sem"] > 0 and r["det"] == 0 and r["proto"] == 0 for r in rows)


def test_prepare_scene_drops_out_of_roi_points():
    scene = mini_scene()
    p = init_params(mini_params().config, 0)
    st = prepare_scene(scene, MINI_GEOM, p.config.output_geometry(MINI_GEOM), LossConfig())
    assert len(st.scene) == int(MINI_GEOM.in_roi(scene.points).sum())
