"""Backbone, detection head and embedding head with reverse-mode gradients."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..raster import BevTensor, GridGeometry
from .layers import (conv2d_backward, conv2d_forward, relu_backward, relu_forward,
                     upsample_backward, upsample_forward)

DET_FIELDS = ("alpha", "dx", "dy", "w", "l", "sin2t", "cos2t")
N_DET = len(DET_FIELDS)
SIGMA2_MIN, SIGMA2_MAX = 1e-3, 1e3


@dataclass(frozen=True)
class ModelConfig:
    """Network shape. ``frames`` multiplies the input channels (one per Z bin per frame)."""

    Z: int = 8
    F: int = 8
    n_things: int = 3
    n_stuff: int = 1
    widths: tuple[int, int, int] = (16, 24, 32)
    width: int = 24
    det_layers: int = 4
    emb_layers: int = 4
    frames: int = 1
    semantic_classes: int = 0
    tiny_threshold: int = 32
    alpha_prior: float = -2.0
    log_input: bool = True  # feed log(1 + occupancy) to the first layer
    head_gain: float = 0.1  # init scale of the final 1x1 layers of every head

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        if min(self.Z, self.F, self.width, *self.widths) < 1 or self.n_things < 0 or self.n_stuff < 0:
            raise ValueError(f"invalid model config: {self}")

    @property
    def in_channels(self) -> int:
        return self.Z * self.frames

    def strides(self, H: int, W: int) -> tuple[int, int, int, int]:
        """Strides of (stem1, stem2, down8, down16); all 1 on tiny grids."""
        if min(H, W) < self.tiny_threshold:
            return (1, 1, 1, 1)
        return (2, 2, 2, 2)

    def output_geometry(self, geom: GridGeometry) -> GridGeometry:
        s = self.strides(geom.H, geom.W)
        return geom.downsample(s[0] * s[1])

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    c1, c2, c3 = cfg.widths
    C = cfg.width
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cout, cin, k):
        shapes[name + ".w"] = (cout, cin, k, k)
        shapes[name + ".b"] = (cout,)

    conv("stem1", c1, cfg.in_channels, 3)
    conv("stem2", c1, c1, 3)
    conv("res4.a", c1, c1, 3)
    conv("res4.b", c1, c1, 3)
    conv("down8", c2, c1, 3)
    conv("res8.a", c2, c2, 3)
    conv("res8.b", c2, c2, 3)
    conv("down16", c3, c2, 3)
    conv("res16.a", c3, c3, 3)
    conv("res16.b", c3, c3, 3)
    conv("lat4", C, c1, 1)
    conv("lat8", C, c2, 1)
    conv("lat16", C, c3, 1)
    for i in range(cfg.det_layers):
        conv(f"det.{i}", C, C, 3)
    conv("det.out", N_DET * cfg.n_things, C, 1)
    for i in range(cfg.emb_layers):
        conv(f"emb.{i}", C, C, 3)
    conv("point.out", cfg.F * cfg.Z, C, 1)
    conv("thing.out", cfg.F + 1, C, 1)
    for j in range(cfg.n_stuff):
        shapes[f"stuff.{j}.w"] = (cfg.F + 1, C)
        shapes[f"stuff.{j}.b"] = (cfg.F + 1,)
    if cfg.semantic_classes:
        conv("sem.out", cfg.semantic_classes * cfg.Z, C, 1)
    shapes["u_raw"] = ()
    return shapes


@dataclass
class NetworkParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def count(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def check(self) -> None:
        expected = param_shapes(self.config)
        if list(expected) != list(self.arrays):
            raise ValueError("parameter names do not match the model config")
        for k, shp in expected.items():
            if self.arrays[k].shape != shp:
                raise ValueError(f"parameter {k} has shape {self.arrays[k].shape}, expected {shp}")


def _is_head_output(name: str) -> bool:
    return name.endswith(".out.w") or (name.startswith("stuff.") and name.endswith(".w"))


def init_params(cfg: ModelConfig, seed: int) -> NetworkParams:
    """He-uniform kernels (variance ``2 / fan_in``), zero biases, ``u_raw = 0``.

    The last layer of each head is scaled by ``head_gain`` so that initial
    embeddings are small; large initial embedding distances otherwise produce
    a first update big enough to silence most ReLUs.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
            if _is_head_output(name):
                arrays[name] *= cfg.head_gain
        else:
            arrays[name] = np.zeros(shape)
    b = arrays["det.out.b"].reshape(cfg.n_things, N_DET)
    b[:, 0] = cfg.alpha_prior
    return NetworkParams(cfg, arrays)


@dataclass
class NetworkOutput:
    """Head outputs. ``U`` is the no-prototype logit."""

    det_map: np.ndarray
    point_map: np.ndarray
    thing_map: np.ndarray
    stuff_raw: np.ndarray  # (n_stuff, F + 1): embedding then raw log-variance
    U: float
    sem_map: np.ndarray | None = None
    geom: GridGeometry | None = field(default=None, repr=False)

    @property
    def stuff_mu(self) -> np.ndarray:
        return self.stuff_raw[:, :-1]

    @property
    def stuff_s(self) -> np.ndarray:
        return self.stuff_raw[:, -1]


def zeros_like_output(out: NetworkOutput) -> NetworkOutput:
    return NetworkOutput(np.zeros_like(out.det_map), np.zeros_like(out.point_map),
                         np.zeros_like(out.thing_map), np.zeros_like(out.stuff_raw), 0.0,
                         None if out.sem_map is None else np.zeros_like(out.sem_map), out.geom)


def variance(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``sigma^2 = clamp(exp(s))`` and ``d sigma^2 / d s``."""
    s = np.asarray(s, dtype=np.float64)
    v = np.exp(np.clip(s, math.log(SIGMA2_MIN) - 1, math.log(SIGMA2_MAX) + 1))
    inside = (v > SIGMA2_MIN) & (v < SIGMA2_MAX)
    return np.clip(v, SIGMA2_MIN, SIGMA2_MAX), np.where(inside, v, 0.0)


def _conv(p, name, x, stride, cache, relu=True):
    y, c = conv2d_forward(x, p[name + ".w"], p[name + ".b"], stride)
    cache[name] = c
    if relu:
        y, m = relu_forward(y)
        cache[name + ".relu"] = m
    return y


def _res_block(p, name, x, cache):
    h = _conv(p, name + ".a", x, 1, cache)
    h = _conv(p, name + ".b", h, 1, cache, relu=False)
    y, m = relu_forward(x + h)
    cache[name + ".relu"] = m
    return y


def forward(inputs: BevTensor | np.ndarray, params: NetworkParams, geom: GridGeometry | None = None):
    """Run the network. Returns ``(NetworkOutput, cache)``; the cache feeds :func:`backward`."""
    cfg = params.config
    if isinstance(inputs, BevTensor):
        geom = geom or inputs.geom
        x = inputs.data
    else:
        x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != cfg.in_channels:
        raise ValueError(f"input shape {x.shape} does not match {cfg.in_channels} input channels")
    if cfg.log_input:
        x = np.log1p(x)
    p = params.arrays
    s1, s2, s3, s4 = cfg.strides(x.shape[1], x.shape[2])
    cache: dict = {"strides": (s1, s2, s3, s4), "x_shape": x.shape}

    h = _conv(p, "stem1", x, s1, cache)
    h = _conv(p, "stem2", h, s2, cache)
    f4 = _res_block(p, "res4", h, cache)
    h = _conv(p, "down8", f4, s3, cache)
    f8 = _res_block(p, "res8", h, cache)
    h = _conv(p, "down16", f8, s4, cache)
    f16 = _res_block(p, "res16", h, cache)
    hw = f4.shape[1:]
    cache["hw"] = (hw, f8.shape[1:], f16.shape[1:])
    fused = (_conv(p, "lat4", f4, 1, cache, relu=False)
             + upsample_forward(_conv(p, "lat8", f8, 1, cache, relu=False), s3, hw)
             + upsample_forward(_conv(p, "lat16", f16, 1, cache, relu=False), s3 * s4, hw))
    feat, cache["fuse.relu"] = relu_forward(fused)

    h = feat
    for i in range(cfg.det_layers):
        h = _conv(p, f"det.{i}", h, 1, cache)
    det = _conv(p, "det.out", h, 1, cache, relu=False)

    e = feat
    for i in range(cfg.emb_layers):
        e = _conv(p, f"emb.{i}", e, 1, cache)
    point = _conv(p, "point.out", e, 1, cache, relu=False)
    thing = _conv(p, "thing.out", e, 1, cache, relu=False)
    pooled = e.mean(axis=(1, 2))
    cache["pooled"] = pooled
    cache["emb_shape"] = e.shape
    stuff = np.stack([p[f"stuff.{j}.w"] @ pooled + p[f"stuff.{j}.b"] for j in range(cfg.n_stuff)]) \
        if cfg.n_stuff else np.zeros((0, cfg.F + 1))
    sem = _conv(p, "sem.out", e, 1, cache, relu=False) if cfg.semantic_classes else None
    out_geom = cfg.output_geometry(geom) if geom is not None else None
    cache["det_map_shape"], cache["point_map_shape"], cache["thing_map_shape"] = det.shape, point.shape, thing.shape
    return NetworkOutput(det, point, thing, stuff, float(p["u_raw"]), sem, out_geom), cache


def _conv_back(p, grads, name, dy, cache, relu=True):
    if relu:
        dy = relu_backward(dy, cache[name + ".relu"])
    dx, dw, db = conv2d_backward(dy, cache[name])
    grads[name + ".w"] += dw
    grads[name + ".b"] += db
    return dx


def _res_back(p, grads, name, dy, cache):
    dy = relu_backward(dy, cache[name + ".relu"])
    dh = _conv_back(p, grads, name + ".b", dy, cache, relu=False)
    dh = _conv_back(p, grads, name + ".a", dh, cache)
    return dy + dh


def backward(cot: NetworkOutput, cache: dict, params: NetworkParams) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter given output cotangents."""
    cfg = params.config
    p = params.arrays
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    for name, got in (("det_map", cot.det_map), ("point_map", cot.point_map), ("thing_map", cot.thing_map)):
        want = cache[name + "_shape"]
        if got.shape != want:
            raise ValueError(f"cotangent {name} has shape {got.shape}, expected {want}")
    s1, s2, s3, s4 = cache["strides"]
    hw, hw8, hw16 = cache["hw"]

    dh = _conv_back(p, grads, "det.out", cot.det_map, cache, relu=False)
    for i in reversed(range(cfg.det_layers)):
        dh = _conv_back(p, grads, f"det.{i}", dh, cache)
    dfeat = dh

    de = _conv_back(p, grads, "point.out", cot.point_map, cache, relu=False)
    de += _conv_back(p, grads, "thing.out", cot.thing_map, cache, relu=False)
    if cfg.semantic_classes and cot.sem_map is not None:
        de += _conv_back(p, grads, "sem.out", cot.sem_map, cache, relu=False)
    dpooled = np.zeros_like(cache["pooled"])
    for j in range(cfg.n_stuff):
        g = cot.stuff_raw[j]
        grads[f"stuff.{j}.w"] += np.outer(g, cache["pooled"])
        grads[f"stuff.{j}.b"] += g
        dpooled += p[f"stuff.{j}.w"].T @ g
    C, He, We = cache["emb_shape"]
    de = de + np.broadcast_to((dpooled / (He * We))[:, None, None], (C, He, We))
    for i in reversed(range(cfg.emb_layers)):
        de = _conv_back(p, grads, f"emb.{i}", de, cache)
    dfeat = dfeat + de
    grads["u_raw"] += cot.U

    dfused = relu_backward(dfeat, cache["fuse.relu"])
    df4 = _conv_back(p, grads, "lat4", dfused, cache, relu=False)
    df8 = _conv_back(p, grads, "lat8", upsample_backward(dfused, s3, hw8), cache, relu=False)
    df16 = _conv_back(p, grads, "lat16", upsample_backward(dfused, s3 * s4, hw16), cache, relu=False)

    df16 = _res_back(p, grads, "res16", df16, cache)
    df8 = df8 + _conv_back(p, grads, "down16", df16, cache)
    df8 = _res_back(p, grads, "res8", df8, cache)
    df4 = df4 + _conv_back(p, grads, "down8", df8, cache)
    df4 = _res_back(p, grads, "res4", df4, cache)
    dh = _conv_back(p, grads, "stem2", df4, cache)
    _conv_back(p, grads, "stem1", dh, cache)
    return grads
