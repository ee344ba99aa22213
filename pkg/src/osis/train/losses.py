"""Detection, prototype cross-entropy, discriminative and semantic losses.

Every loss returns its value together with the gradient w.r.t. its inputs;
:func:`total_loss` assembles those into cotangents for the network outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..model.network import N_DET, NetworkOutput, variance, zeros_like_output
from ..raster import GridGeometry, bilinear_weights, gather, scatter, trilinear_weights
from ..scene import NO_INSTANCE, Scene

LOG_SIZE_CLIP = 4.0


@dataclass(frozen=True)
class LossConfig:
    lambda_det: float = 1.0
    lambda_emb: float = 1.0
    lambda_disc: float = 1.0
    neg_ratio: float = 3.0
    min_neg: int = 32
    r_pos: float = 2.0
    r_neg: float = 4.0
    delta_v: float = 0.5
    delta_d: float = 1.5
    use_dl: bool = True
    use_br: bool = True
    predict_variance: bool = True

    def __post_init__(self):
        for k in ("lambda_det", "lambda_emb", "lambda_disc", "neg_ratio", "delta_v", "delta_d"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be nonnegative")
        if not (self.r_pos > 0 and self.r_neg > 0):
            raise ValueError("r_pos and r_neg must be positive")
        if self.min_neg < 0:
            raise ValueError("min_neg must be nonnegative")

    @property
    def margins_separable(self) -> bool:
        return self.delta_d > 2 * self.delta_v


# --------------------------------------------------------------------------
# detection

@dataclass
class DetectionTargets:
    """Per-class pixel assignments on the output grid.

    ``pos``/``neg`` are ``(T, H, W)`` masks; for positive pixels ``gt`` holds
    ``(cx, cy, w, l, theta)`` of the assigned box and ``center`` the pixel center.
    """

    pos: np.ndarray
    neg: np.ndarray
    pos_index: np.ndarray  # (P,) flat indices into (T, H, W)
    gt: np.ndarray  # (P, 5)
    center: np.ndarray  # (P, 2)


def detection_targets(scene: Scene, geom: GridGeometry, cfg: LossConfig) -> DetectionTargets:
    cat = scene.catalog
    T = len(cat.thing_classes)
    xs, ys = geom.node_xy()
    px, py = np.meshgrid(xs, ys)  # (H, W)
    pos = np.zeros((T, geom.H, geom.W), bool)
    neg = np.ones((T, geom.H, geom.W), bool)
    assign = np.full((T, geom.H, geom.W), -1)
    best = np.full((T, geom.H, geom.W), np.inf)
    boxes = list(scene.boxes.values())
    for b_i, b in enumerate(boxes):
        t = cat.thing_index(b.cls)
        d = np.hypot(px - b.cx, py - b.cy) / geom.resolution
        closer = (d <= cfg.r_pos) & (d < best[t])
        assign[t][closer] = b_i
        best[t] = np.minimum(best[t], d)
        pos[t] |= d <= cfg.r_pos
        neg[t] &= d > cfg.r_neg
    pos_index = np.flatnonzero(pos)
    gt = np.array([[boxes[k].cx, boxes[k].cy, boxes[k].w, boxes[k].l, boxes[k].theta]
                   for k in assign.ravel()[pos_index]]).reshape(-1, 5)
    hw = pos_index % (geom.H * geom.W)
    center = np.c_[px.ravel()[hw], py.ravel()[hw]]
    return DetectionTargets(pos, neg, pos_index, gt, center)


def _bce(logits, y):
    """Elementwise binary cross-entropy on logits and its gradient."""
    loss = np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
    sig = 0.5 * (1 + np.tanh(0.5 * logits))
    return loss, sig - y


def mine_negatives(neg_loss: np.ndarray, n_pos: int, cfg: LossConfig) -> np.ndarray:
    """Indices of the hardest negatives; ties broken by ascending index."""
    k = min(len(neg_loss), max(int(math.ceil(cfg.neg_ratio * n_pos)), cfg.min_neg))
    order = np.lexsort((np.arange(len(neg_loss)), -neg_loss))
    return order[:k]


def _smooth_l1(x, beta=1.0):
    a = np.abs(x)
    loss = np.where(a < beta, 0.5 * x * x / beta, a - 0.5 * beta)
    grad = np.where(a < beta, x / beta, np.sign(x))
    return loss, grad


def box_iou_loss(pred: np.ndarray, gt: np.ndarray, centers: np.ndarray):
    """Generalized-IoU loss ``1 - IoU + (C - union) / C`` in each ground-truth box frame.

    ``C`` is the area of the smallest box enclosing both, which keeps a
    gradient on the center offsets when the boxes do not overlap. ``pred``
    rows are raw ``(dx, dy, log_w, log_l)``; returns per-row losses and their
    gradients w.r.t. ``pred``.
    """
    dx, dy, rw, rl = pred.T
    cw, cl = np.clip(rw, -LOG_SIZE_CLIP, LOG_SIZE_CLIP), np.clip(rl, -LOG_SIZE_CLIP, LOG_SIZE_CLIP)
    hw, hl = 0.5 * np.exp(cw), 0.5 * np.exp(cl)
    gcx, gcy, gw, gl, gth = gt.T
    c, s = np.cos(gth), np.sin(gth)
    ox, oy = centers[:, 0] + dx - gcx, centers[:, 1] + dy - gcy
    u, v = c * ox + s * oy, -s * ox + c * oy  # along / across the gt heading
    ghl, ghw = 0.5 * gl, 0.5 * gw

    def extent(p, h, g):
        """Overlap and enclosing lengths on one axis with their (d/dp, d/dh)."""
        hi_in, lo_in = p + h < g, p - h > -g
        right = np.where(hi_in, p + h, g)
        left = np.where(lo_in, p - h, -g)
        live = right > left
        ov = np.where(live, right - left, 0.0)
        d_ov = (np.where(live, hi_in.astype(float) - lo_in, 0.0), np.where(live, hi_in.astype(float) + lo_in, 0.0))
        hi_out, lo_out = p + h > g, p - h < -g
        enc = np.where(hi_out, p + h, g) - np.where(lo_out, p - h, -g)
        d_enc = (hi_out.astype(float) - lo_out, hi_out.astype(float) + lo_out)
        return ov, d_ov, enc, d_enc

    iu, (iu_p, iu_h), cu, (cu_p, cu_h) = extent(u, hl, ghl)
    iv, (iv_p, iv_h), cv, (cv_p, cv_h) = extent(v, hw, ghw)
    inter = iu * iv
    area_p, area_g = 4 * hl * hw, 4 * ghl * ghw
    union = area_p + area_g - inter
    enc = cu * cv
    loss = 2.0 - inter / union - union / enc
    # partials of (inter, area_p, enc) w.r.t. (u, v, hl, hw)
    d_inter = (iv * iu_p, iu * iv_p, iv * iu_h, iu * iv_h)
    d_area = (0.0, 0.0, 4 * hw, 4 * hl)
    d_enc = (cv * cu_p, cu * cv_p, cv * cu_h, cu * cv_h)
    g = []
    for di, da, de in zip(d_inter, d_area, d_enc):
        du = da - di
        d_iou = di / union - inter * du / union ** 2
        d_ratio = du / enc - union * de / enc ** 2
        g.append(-d_iou - d_ratio)
    g_u, g_v, g_hl, g_hw = g
    grad = np.empty_like(pred)
    grad[:, 0] = g_u * c - g_v * s
    grad[:, 1] = g_u * s + g_v * c
    grad[:, 2] = g_hw * hw * (np.abs(rw) < LOG_SIZE_CLIP)
    grad[:, 3] = g_hl * hl * (np.abs(rl) < LOG_SIZE_CLIP)
    return loss, grad


def detection_loss(det_map: np.ndarray, targets: DetectionTargets, cfg: LossConfig):
    """Return ``(loss, parts, d_det_map)``.

    Classification is BCE over positives plus mined hard negatives,
    averaged over the selected pixels. Box regression (if enabled) averages
    ``1 - IoU`` and SmoothL1 on ``(sin 2t, cos 2t)`` over positive pixels.
    """
    T = targets.pos.shape[0]
    H, W = det_map.shape[1:]
    maps = det_map.reshape(T, N_DET, H, W)
    grad = np.zeros_like(maps)
    logits = maps[:, 0]
    loss_all, g_all = _bce(logits, targets.pos.astype(float))
    pos_flat = targets.pos_index
    neg_flat = np.flatnonzero(targets.neg & ~targets.pos)
    mined = neg_flat[mine_negatives(loss_all.ravel()[neg_flat], len(pos_flat), cfg)]
    chosen = np.concatenate([pos_flat, mined])
    parts = {"cls": 0.0, "iou": 0.0, "rot": 0.0}
    if len(chosen):
        parts["cls"] = float(loss_all.ravel()[chosen].sum() / len(chosen))
        g_logit = np.zeros(logits.size)
        g_logit[chosen] = g_all.ravel()[chosen] / len(chosen)
        grad[:, 0] = g_logit.reshape(logits.shape)
    if cfg.use_br and len(pos_flat):
        P = len(pos_flat)
        t_idx, hw_idx = np.divmod(pos_flat, H * W)
        flat = maps.reshape(T, N_DET, H * W)
        reg = flat[t_idx, :, hw_idx]  # (P, 7)
        iou_loss, g_box = box_iou_loss(reg[:, [1, 2, 3, 4]], targets.gt, targets.center)
        two_t = 2 * targets.gt[:, 4]
        rot_loss, g_rot = _smooth_l1(reg[:, 5:7] - np.c_[np.sin(two_t), np.cos(two_t)])
        parts["iou"] = float(iou_loss.mean())
        parts["rot"] = float(rot_loss.sum(axis=1).mean())
        g = np.zeros((P, N_DET))
        g[:, 1:5] = g_box / P
        g[:, 5:7] = g_rot / P
        gflat = grad.reshape(T, N_DET, H * W)
        np.add.at(gflat, (t_idx, slice(None), hw_idx), g)
    total = parts["cls"] + parts["iou"] + parts["rot"]
    return total, parts, grad.reshape(det_map.shape)


# --------------------------------------------------------------------------
# prototype association

def association_scores(phi: np.ndarray, mu: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    """Point-to-prototype scores ``-|phi - mu|^2 / (2 s2) - F/2 log s2`` -> ``(N, K)``."""
    F = phi.shape[1]
    d2 = ((phi[:, None, :] - mu[None, :, :]) ** 2).sum(-1)
    return -d2 / (2 * sigma2[None, :]) - 0.5 * F * np.log(sigma2)[None, :]


def prototype_ce(phi: np.ndarray, mu: np.ndarray, sigma2: np.ndarray, U: float, target: np.ndarray):
    """Mean cross-entropy of softmax(scores ++ [U]) against slot targets.

    Slot ``K = len(mu)`` is the no-prototype slot. Returns
    ``(loss, d_phi, d_mu, d_sigma2, d_U)``.
    """
    N, F = phi.shape
    K = len(mu)
    if N == 0:
        return 0.0, np.zeros_like(phi), np.zeros_like(mu), np.zeros(K), 0.0
    if K == 0 and np.any(target != 0):
        raise ValueError("targets reference prototypes but none were given")
    diff = phi[:, None, :] - mu[None, :, :]
    d2 = (diff ** 2).sum(-1)
    scores = np.empty((N, K + 1))
    scores[:, :K] = -d2 / (2 * sigma2) - 0.5 * F * np.log(sigma2)
    scores[:, K] = U
    m = scores.max(axis=1, keepdims=True)
    z = scores - m
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float((lse - z[np.arange(N), target]).mean())
    G = np.exp(z - lse[:, None])
    G[np.arange(N), target] -= 1.0
    G /= N
    Gk = G[:, :K]
    inv = 1.0 / sigma2
    d_phi = -(Gk * inv).sum(1)[:, None] * phi + (Gk * inv) @ mu
    d_mu = (Gk * inv).T @ phi - (Gk * inv).sum(0)[:, None] * mu
    d_sigma2 = (Gk * (d2 * 0.5 * inv ** 2 - 0.5 * F * inv)).sum(0)
    return loss, d_phi, d_mu, d_sigma2, float(G[:, K].sum())


def embedding_loss(phi, thing_raw, stuff_raw, U, target, predict_variance=True):
    """Prototype cross-entropy over thing prototypes then stuff prototypes.

    ``thing_raw``/``stuff_raw`` rows are ``(mu, s)`` with ``sigma^2 = clamp(exp(s))``
    (or 1 when variances are not predicted). Returns the loss and gradients
    w.r.t. ``phi``, ``thing_raw``, ``stuff_raw`` and ``U``.
    """
    raw = np.concatenate([thing_raw, stuff_raw]) if len(stuff_raw) else thing_raw
    if len(raw) == 0 and len(target) and np.any(target != 0):
        raise ValueError("empty prototype set with points that need a prototype")
    mu, s = raw[:, :-1], raw[:, -1]
    if predict_variance:
        sigma2, dsig = variance(s)
    else:
        sigma2, dsig = np.ones(len(s)), np.zeros(len(s))
    loss, d_phi, d_mu, d_s2, d_U = prototype_ce(phi, mu, sigma2, U, target)
    d_raw = np.concatenate([d_mu, (d_s2 * dsig)[:, None]], axis=1)
    k = len(thing_raw)
    return loss, d_phi, d_raw[:k], d_raw[k:], d_U


# --------------------------------------------------------------------------
# discriminative

def discriminative_loss(phi: np.ndarray, labels: np.ndarray, delta_v: float, delta_d: float):
    """Pull/push hinge loss on embeddings; points with ``NO_INSTANCE`` are ignored.

    Pull: mean over instances of the mean of ``max(0, |mu_c - phi_i| - delta_v)^2``.
    Push: mean over instance pairs of ``max(0, 2 delta_d - |mu_a - mu_b|)^2``.
    """
    d_phi = np.zeros_like(phi)
    ids = np.unique(labels[labels != NO_INSTANCE])
    C = len(ids)
    if C == 0:
        return 0.0, d_phi
    members = [np.flatnonzero(labels == i) for i in ids]
    mus = np.stack([phi[m].mean(axis=0) for m in members])
    d_mus = np.zeros_like(mus)
    pull = 0.0
    for c, m in enumerate(members):
        r = mus[c] - phi[m]
        n = np.linalg.norm(r, axis=1)
        h = np.maximum(n - delta_v, 0.0)
        pull += (h ** 2).mean() / C
        coef = np.where(n > 0, 2 * h / np.where(n > 0, n, 1.0), 0.0) / (len(m) * C)
        g_r = coef[:, None] * r
        d_phi[m] -= g_r
        d_mus[c] += g_r.sum(axis=0)
    push = 0.0
    if C > 1:
        pairs = C * (C - 1) / 2
        for a in range(C):
            for b in range(a + 1, C):
                diff = mus[a] - mus[b]
                n = float(np.linalg.norm(diff))
                h = max(2 * delta_d - n, 0.0)
                push += h * h / pairs
                if h > 0 and n > 0:
                    g = -2 * h * diff / n / pairs
                    d_mus[a] += g
                    d_mus[b] -= g
    for c, m in enumerate(members):
        d_phi[m] += d_mus[c] / len(m)
    return float(pull + push), d_phi


# --------------------------------------------------------------------------
# semantic (baseline branch)

def semantic_ce(logits: np.ndarray, target: np.ndarray):
    """Mean softmax cross-entropy over points; returns ``(loss, d_logits)``."""
    N = len(logits)
    if N == 0:
        return 0.0, np.zeros_like(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float((lse - z[np.arange(N), target]).mean())
    g = np.exp(z - lse[:, None])
    g[np.arange(N), target] -= 1.0
    return loss, g / N


# --------------------------------------------------------------------------
# per-scene assembly

@dataclass
class PrototypeTargets:
    """Ground-truth prototype slots for every point.

    ``center_idx``/``center_w`` interpolate the thing map at ground-truth
    object centers (one row per thing instance in ``thing_ids`` order). Point
    targets index thing slots, then stuff slots, then the no-prototype slot.
    """

    thing_ids: np.ndarray
    center_idx: np.ndarray
    center_w: np.ndarray
    target: np.ndarray
    n_stuff: int

    @property
    def n_slots(self) -> int:
        return len(self.thing_ids) + self.n_stuff


def prototype_targets(scene: Scene, geom: GridGeometry) -> PrototypeTargets:
    cat = scene.catalog
    thing_ids = np.array(scene.thing_instances(), dtype=np.int64)
    centers = np.array([[scene.boxes[i].cx, scene.boxes[i].cy] for i in thing_ids]).reshape(-1, 2)
    c_idx, c_w = bilinear_weights(centers, geom)
    K, S = len(thing_ids), len(cat.stuff_classes)
    target = np.full(len(scene), K + S, dtype=np.int64)
    slot = {int(i): k for k, i in enumerate(thing_ids)}
    for n, (inst, sem) in enumerate(zip(scene.instance_ids, scene.semantics)):
        if cat.is_thing(int(sem)) and int(inst) in slot:
            target[n] = slot[int(inst)]
        elif cat.is_stuff(int(sem)):
            target[n] = K + cat.stuff_index(int(sem))
    return PrototypeTargets(thing_ids, c_idx, c_w, target, S)


def semantic_targets(scene: Scene) -> np.ndarray:
    """Per-point class slot: thing classes, stuff classes, then unknown."""
    cat = scene.catalog
    lut = {c: k for k, c in enumerate(cat.known_classes)}
    return np.array([lut.get(int(s), len(lut)) for s in scene.semantics], dtype=np.int64)


@dataclass
class SceneTargets:
    """Everything a training step needs from one scene, independent of the weights."""

    scene: Scene
    inputs: np.ndarray
    out_geom: GridGeometry
    point_idx: np.ndarray
    point_w: np.ndarray
    det: DetectionTargets
    proto: PrototypeTargets
    semantic: np.ndarray
    instance_ids: np.ndarray


def prepare_scene(scene: Scene, geom: GridGeometry, out_geom: GridGeometry, cfg: LossConfig,
                  frames: int = 1) -> SceneTargets:
    from ..raster import voxelize
    from ..scene import subset

    inside = geom.in_roi(scene.points)
    if not inside.all():
        scene = subset(scene, inside)
    bev = voxelize(scene.points, geom).data
    if frames > 1:
        bev = np.concatenate([bev] + [np.zeros_like(bev)] * (frames - 1))
    p_idx, p_w = trilinear_weights(scene.points, out_geom)
    return SceneTargets(scene, bev, out_geom, p_idx, p_w, detection_targets(scene, out_geom, cfg),
                        prototype_targets(scene, out_geom), semantic_targets(scene),
                        np.asarray(scene.instance_ids))


def point_embeddings(out: NetworkOutput, st: SceneTargets) -> np.ndarray:
    F = out.thing_map.shape[0] - 1
    return gather(out.point_map.reshape(F, -1), st.point_idx, st.point_w)


def total_loss(out: NetworkOutput, st: SceneTargets, cfg: LossConfig, mode: str = "osis"):
    """Weighted loss for one scene and its cotangents w.r.t. ``out``.

    ``mode="osis"``: detection + prototype CE (+ discriminative). ``mode="semantic"``:
    per-point semantic CE (+ discriminative), used by the bottom-up baselines.
    """
    cot = zeros_like_output(out)
    F = out.thing_map.shape[0] - 1
    phi = point_embeddings(out, st)
    d_phi = np.zeros_like(phi)
    terms = {"det": 0.0, "proto": 0.0, "disc": 0.0, "sem": 0.0}

    if mode == "osis":
        det, _, d_det = detection_loss(out.det_map, st.det, cfg)
        terms["det"] = det
        cot.det_map = cfg.lambda_det * d_det
        thing_flat = out.thing_map.reshape(F + 1, -1)
        thing_raw = gather(thing_flat, st.proto.center_idx, st.proto.center_w)
        proto, dp, d_thing_raw, d_stuff_raw, d_U = embedding_loss(
            phi, thing_raw, out.stuff_raw, out.U, st.proto.target, cfg.predict_variance)
        terms["proto"] = proto
        d_phi += cfg.lambda_emb * dp
        cot.thing_map = cfg.lambda_emb * scatter(d_thing_raw, st.proto.center_idx, st.proto.center_w,
                                                 thing_flat.shape[1]).reshape(out.thing_map.shape)
        cot.stuff_raw = cfg.lambda_emb * d_stuff_raw
        cot.U = cfg.lambda_emb * d_U
    elif mode == "semantic":
        S = out.sem_map.shape[0] // (out.point_map.shape[0] // F)
        sem_flat = out.sem_map.reshape(S, -1)
        logits = gather(sem_flat, st.point_idx, st.point_w)
        sem, d_logits = semantic_ce(logits, st.semantic)
        terms["sem"] = sem
        cot.sem_map = scatter(d_logits, st.point_idx, st.point_w, sem_flat.shape[1]).reshape(out.sem_map.shape)
    else:
        raise ValueError(f"unknown loss mode {mode!r}")

    if cfg.use_dl:
        disc, dd = discriminative_loss(phi, st.instance_ids, cfg.delta_v, cfg.delta_d)
        terms["disc"] = disc
        d_phi += cfg.lambda_emb * cfg.lambda_disc * dd
    cot.point_map = scatter(d_phi, st.point_idx, st.point_w, out.point_map.size // F).reshape(out.point_map.shape)
    terms["total"] = (cfg.lambda_det * terms["det"]
                      + cfg.lambda_emb * (terms["proto"] + cfg.lambda_disc * terms["disc"]) + terms["sem"])
    return terms, cot
