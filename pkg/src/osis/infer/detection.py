"""Anchor decoding and class-wise non-maximum suppression."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..model.network import N_DET
from ..raster import GridGeometry

LOG_SIZE_CLIP = 4.0


@dataclass(frozen=True)
class Anchor:
    cls: int
    score: float
    cx: float
    cy: float
    w: float
    l: float
    theta: float
    pixel: int  # flat (row * W + col) index on the output grid

    def footprint(self, fixed_size: float | None = None) -> tuple[float, float, float, float]:
        """Axis-aligned bounds of the (rotated) box, or a fixed square if given."""
        if fixed_size is not None:
            h = 0.5 * fixed_size
            return (self.cx - h, self.cy - h, self.cx + h, self.cy + h)
        c, s = abs(math.cos(self.theta)), abs(math.sin(self.theta))
        hx = 0.5 * (self.l * c + self.w * s)
        hy = 0.5 * (self.l * s + self.w * c)
        return (self.cx - hx, self.cy - hy, self.cx + hx, self.cy + hy)


def sigmoid(x):
    return 0.5 * (1 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def extract_anchors(det_map: np.ndarray, geom: GridGeometry, tau: float,
                    thing_classes: tuple[int, ...] | None = None) -> list[Anchor]:
    """Every (pixel, class) with ``sigmoid(alpha) >= tau``, in (class, pixel) order."""
    T = det_map.shape[0] // N_DET
    classes = thing_classes if thing_classes is not None else tuple(range(T))
    maps = det_map.reshape(T, N_DET, geom.H * geom.W)
    xs, ys = geom.node_xy()
    px, py = np.meshgrid(xs, ys)
    px, py = px.ravel(), py.ravel()
    out = []
    for t in range(T):
        score = sigmoid(maps[t, 0])
        for i in np.flatnonzero(score >= tau):
            _, dx, dy, rw, rl, s2, c2 = maps[t, :, i]
            out.append(Anchor(classes[t], float(score[i]), float(px[i] + dx), float(py[i] + dy),
                              float(np.exp(np.clip(rw, -LOG_SIZE_CLIP, LOG_SIZE_CLIP))),
                              float(np.exp(np.clip(rl, -LOG_SIZE_CLIP, LOG_SIZE_CLIP))),
                              0.5 * math.atan2(s2, c2), int(i)))
    return out


def box_iou(a: tuple[float, float, float, float], b: tuple[float, float, float, float]) -> float:
    """IoU of two axis-aligned ``(xmin, ymin, xmax, ymax)`` boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms(anchors: list[Anchor], iou_threshold: float = 0.5, fixed_size: float | None = None) -> list[Anchor]:
    """Greedy class-wise suppression in (score desc, pixel asc) order."""
    order = sorted(anchors, key=lambda a: (-a.score, a.pixel, a.cls))
    kept: list[Anchor] = []
    kept_fp: list[tuple] = []
    for a in order:
        fa = a.footprint(fixed_size)
        if all(k.cls != a.cls or box_iou(fa, fk) <= iou_threshold for k, fk in zip(kept, kept_fp)):
            kept.append(a)
            kept_fp.append(fa)
    return kept
