"""Finite-difference checks of each training loss through the miniature network."""

from __future__ import annotations

import numpy as np

from osis.model import backward, forward, zeros_like_output
from osis.raster import scatter
from osis.train import LossConfig, discriminative_loss, prepare_scene, total_loss
from osis.train.losses import point_embeddings
from oracles import MINI_GEOM, central_diff, mini_params, mini_scene, rel_err

TERMS = ("det", "proto", "disc", "total")


def _setup(seed=3):
    params = mini_params()
    scene = mini_scene(seed)
    lc = LossConfig(min_neg=8)
    st = prepare_scene(scene, MINI_GEOM, params.config.output_geometry(MINI_GEOM), lc)
    return params, st, lc


def term_value_and_cot(term, params, st, lc):
    out, cache = forward(st.inputs, params)
    if term == "disc":
        phi = point_embeddings(out, st)
        val, dd = discriminative_loss(phi, st.instance_ids, lc.delta_v, lc.delta_d)
        cot = zeros_like_output(out)
        F = out.thing_map.shape[0] - 1
        cot.point_map = scatter(dd, st.point_idx, st.point_w, out.point_map.size // F).reshape(out.point_map.shape)
        return val, cot, cache
    if term == "det":
        cfg = LossConfig(**{**lc.__dict__, "lambda_emb": 0.0, "use_dl": False})
    elif term == "proto":
        cfg = LossConfig(**{**lc.__dict__, "lambda_det": 0.0, "use_dl": False})
    else:
        cfg = lc
    terms, cot = total_loss(out, st, cfg)
    return terms["total"] if term == "total" else terms[term], cot, cache


def worst_rel_error(term: str, h: float = 1e-5, per_param: int = 3, seed: int = 0) -> float:
    params, st, lc = _setup()
    val, cot, cache = term_value_and_cot(term, params, st, lc)
    assert val > 0
    grads = backward(cot, cache, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in params.arrays.items():
        for i in rng.choice(arr.size, min(per_param, arr.size), replace=False):
            n = central_diff(lambda: term_value_and_cot(term, params, st, lc)[0], arr, int(i), h)
            worst = max(worst, rel_err(grads[name].flat[i], n))
    return worst


def param_count() -> int:
    return mini_params().count()
