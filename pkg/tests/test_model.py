import numpy as np
import pytest

from osis.model import (CheckpointError, ModelConfig, N_DET, NetworkParams, backward, forward, init_params,
                        load_checkpoint, save_checkpoint, variance, zeros_like_output)
from osis.raster import DESK_GEOMETRY
from oracles import MINI_GEOM, central_diff, mini_params, rel_err


def test_output_shapes_desk_and_tiny():
    mc = ModelConfig()
    p = init_params(mc, 0)
    out, _ = forward(np.zeros((8, 64, 64)), p, DESK_GEOMETRY)
    assert out.det_map.shape == (N_DET * 3, 16, 16)
    assert out.point_map.shape == (mc.F * mc.Z, 16, 16)
    assert out.thing_map.shape == (mc.F + 1, 16, 16)
    assert out.stuff_raw.shape == (1, mc.F + 1)
    assert out.geom.resolution == 1.0
    tiny = mini_params()
    out, _ = forward(np.zeros((2, 8, 8)), tiny)
    assert out.det_map.shape[1:] == (8, 8)


def test_input_channel_mismatch():
    with pytest.raises(ValueError):
        forward(np.zeros((3, 8, 8)), mini_params())


def test_zero_weights_give_bias_logits():
    p = mini_params()
    arrays = {k: np.zeros_like(v) for k, v in p.arrays.items()}
    arrays["det.out.b"][0] = 0.7
    out, _ = forward(np.random.default_rng(0).random((2, 8, 8)), NetworkParams(p.config, arrays))
    assert np.all(out.det_map[0] == 0.7)


def test_forward_is_deterministic():
    p = mini_params()
    x = np.random.default_rng(1).random((2, 8, 8))
    a, _ = forward(x, p)
    b, _ = forward(x, p)
    assert a.det_map.tobytes() == b.det_map.tobytes() and a.point_map.tobytes() == b.point_map.tobytes()


def test_init_determinism_and_variance():
    mc = ModelConfig()
    a, b, c = init_params(mc, 3), init_params(mc, 3), init_params(mc, 4)
    assert all(np.array_equal(a[k], b[k]) for k in a.names())
    assert not np.array_equal(a["stem1.w"], c["stem1.w"])
    assert a["u_raw"] == 0.0
    w = a["res8.a.w"]
    fan_in = int(np.prod(w.shape[1:]))
    assert fan_in >= 64
    assert abs(w.var() / (2 / fan_in) - 1) < 0.2


def test_variance_is_clamped_positive():
    s2, _ = variance(np.array([-50.0, 0.0, 50.0]))
    np.testing.assert_allclose(s2, [1e-3, 1.0, 1e3])


def _rand_cot(out, rng):
    cot = zeros_like_output(out)
    cot.det_map = rng.normal(size=out.det_map.shape)
    cot.point_map = rng.normal(size=out.point_map.shape)
    cot.thing_map = rng.normal(size=out.thing_map.shape)
    cot.stuff_raw = rng.normal(size=out.stuff_raw.shape)
    cot.U = float(rng.normal())
    return cot


def _dot(out, cot):
    return (np.sum(out.det_map * cot.det_map) + np.sum(out.point_map * cot.point_map)
            + np.sum(out.thing_map * cot.thing_map) + np.sum(out.stuff_raw * cot.stuff_raw) + out.U * cot.U)


def test_zero_cotangent_gives_zero_gradients():
    p = mini_params()
    out, cache = forward(np.random.default_rng(0).random((2, 8, 8)), p)
    g = backward(zeros_like_output(out), cache, p)
    assert all(np.all(v == 0) for v in g.values())
    assert set(g) == set(p.names())


def test_random_direction_matches_finite_differences():
    p = mini_params()
    assert p.count() <= 5000
    rng = np.random.default_rng(2)
    x = rng.random((2, 8, 8)) * 3
    out, cache = forward(x, p)
    cot = _rand_cot(out, rng)
    g = backward(cot, cache, p)
    worst = 0.0
    for name, arr in p.arrays.items():
        for i in rng.choice(arr.size, min(3, arr.size), replace=False):
            n = central_diff(lambda: _dot(forward(x, p)[0], cot), arr, int(i), 1e-5)
            worst = max(worst, rel_err(g[name].flat[i], n))
    assert worst < 1e-4


def test_doubling_a_kernel_entry_tracks_directional_derivative():
    p = mini_params()
    rng = np.random.default_rng(3)
    x = rng.random((2, 8, 8))
    out, cache = forward(x, p)
    cot = _rand_cot(out, rng)
    g = backward(cot, cache, p)
    w = p.arrays["det.0.w"]
    i = int(np.argmax(np.abs(g["det.0.w"])))
    base = _dot(out, cot)
    for t in (1e-3, 1e-4):
        old = w.flat[i]
        w.flat[i] = old * (1 + t)
        delta = _dot(forward(x, p)[0], cot) - base
        w.flat[i] = old
        assert delta == pytest.approx(g["det.0.w"].flat[i] * old * t, rel=5e-2)


def test_checkpoint_round_trip_and_shape_check(tmp_path):
    p = mini_params()
    save_checkpoint(p, tmp_path / "m.ckpt", {"note": "x"})
    q, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"note": "x"}
    assert all(np.array_equal(p[k], q[k]) for k in p.names())
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt", expect=ModelConfig())
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:-9] + b"\0" * 9)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_mini_geometry_is_tiny_mode():
    assert mini_params().config.strides(MINI_GEOM.H, MINI_GEOM.W) == (1, 1, 1, 1)
