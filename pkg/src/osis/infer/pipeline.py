"""Two-stage open-set inference: prototypes for known classes, then clustering."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..model import NetworkParams, forward, variance
from ..raster import GridGeometry, bilinear_sample, trilinear_sample, voxelize
from ..scene import NO_INSTANCE, UNKNOWN, Scene
from .association import Prototype, assign_points
from .clustering import ClusteringConfig, cluster_unknowns
from .detection import Anchor, extract_anchors, nms

CLOSED_SET = 0
CLUSTERED = 1
RESULT_FORMAT = "osis-segmentation v1"


@dataclass(frozen=True)
class InferenceConfig:
    tau: float = 0.5
    k: int = 5
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    nms_iou: float = 0.5
    fixed_box: float | None = None  # square NMS footprint (m) when boxes are not regressed
    predict_variance: bool = True

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


@dataclass
class SegmentationResult:
    """Per-point open-set labels. ``provenance`` is CLOSED_SET or CLUSTERED."""

    instance_ids: np.ndarray
    semantics: np.ndarray
    provenance: np.ndarray
    instance_classes: dict[int, int] = field(default_factory=dict)
    anchors: list[Anchor] = field(default_factory=list, repr=False)
    embeddings: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.instance_ids)

    def check(self) -> list[str]:
        """Consistency problems (empty when valid)."""
        problems = []
        n = len(self.instance_ids)
        if len(self.semantics) != n or len(self.provenance) != n:
            problems.append("array lengths differ")
            return problems
        seen: dict[int, int] = {}
        for i, s in zip(self.instance_ids, self.semantics):
            i, s = int(i), int(s)
            if i == NO_INSTANCE:
                continue
            if seen.setdefault(i, s) != s:
                problems.append(f"instance {i} maps to {seen[i]} and {s}")
        for i, s in seen.items():
            if self.instance_classes.get(i) != s:
                problems.append(f"instance {i} class map says {self.instance_classes.get(i)}, points say {s}")
        clustered = self.provenance == CLUSTERED
        if np.any(self.semantics[clustered] != UNKNOWN):
            problems.append("clustered points must be unknown")
        if np.any(self.instance_ids[clustered] == NO_INSTANCE):
            problems.append("clustered points must carry an instance id")
        return problems


def empty_result() -> SegmentationResult:
    z = np.zeros(0, dtype=np.int64)
    return SegmentationResult(z, z.copy(), z.copy())


def segment_scene(scene: Scene, params: NetworkParams, geom: GridGeometry, cfg: InferenceConfig,
                  U_override: float | None = None) -> SegmentationResult:
    """Voxelize, run the network, associate points to prototypes, cluster the rest."""
    if len(scene) == 0:
        return empty_result()
    mc = params.config
    cat = scene.catalog
    bev = voxelize(scene.points, geom)
    x = bev.data
    if mc.frames > 1:
        x = np.concatenate([x] + [np.zeros_like(x)] * (mc.frames - 1))
    out, _ = forward(x, params)
    og = mc.output_geometry(geom)
    phi = trilinear_sample(out.point_map.reshape(mc.F, mc.Z, og.H, og.W), scene.points, og)

    kept = nms(extract_anchors(out.det_map, og, cfg.tau, cat.thing_classes), cfg.nms_iou, cfg.fixed_box)
    centers = np.array([[a.cx, a.cy] for a in kept]).reshape(-1, 2)
    raw = bilinear_sample(out.thing_map, centers, og)
    stuff_raw = out.stuff_raw
    if cfg.predict_variance:
        t_s2, s_s2 = variance(raw[:, -1])[0], variance(stuff_raw[:, -1])[0]
    else:
        t_s2, s_s2 = np.ones(len(raw)), np.ones(len(stuff_raw))
    things = [Prototype(raw[j, :-1], float(t_s2[j]), a.cls, "thing", j) for j, a in enumerate(kept)]
    stuff = [Prototype(stuff_raw[j, :-1], float(s_s2[j]), c, "stuff") for j, c in enumerate(cat.stuff_classes)]
    U = out.U if U_override is None else U_override
    asg = assign_points(scene.points, phi, things, centers, stuff, U, cfg.k)
    return compose_result(scene.points, phi, asg.slot, kept, cat.stuff_classes, cfg.clustering, anchors=kept)


def compose_result(xyz, phi, slot, kept, stuff_classes, ccfg: ClusteringConfig, anchors=()) -> SegmentationResult:
    """Turn prototype slots into instance/semantic labels and cluster the unknown slot."""
    n = len(xyz)
    T, S = len(kept), len(stuff_classes)
    inst = np.full(n, NO_INSTANCE, dtype=np.int64)
    sem = np.full(n, UNKNOWN, dtype=np.int64)
    prov = np.full(n, CLOSED_SET, dtype=np.int64)
    classes: dict[int, int] = {}
    is_thing = slot < T
    inst[is_thing] = slot[is_thing]
    thing_cls = np.array([a.cls for a in kept], dtype=np.int64)
    sem[is_thing] = thing_cls[slot[is_thing]]
    for j in np.unique(slot[is_thing]):
        classes[int(j)] = int(thing_cls[j])
    is_stuff = (slot >= T) & (slot < T + S)
    sem[is_stuff] = np.asarray(stuff_classes, dtype=np.int64)[slot[is_stuff] - T]
    unk = np.flatnonzero(slot == T + S)
    if len(unk):
        labels = cluster_unknowns(xyz[unk], phi[unk], ccfg) + T
        inst[unk] = labels
        prov[unk] = CLUSTERED
        for j in np.unique(labels):
            classes[int(j)] = UNKNOWN
    return SegmentationResult(inst, sem, prov, classes, list(anchors), phi)


def with_clustering(result: SegmentationResult, xyz: np.ndarray, ccfg: ClusteringConfig) -> SegmentationResult:
    """Re-cluster the unknown points of an existing result with new clustering settings."""
    unk = np.flatnonzero(result.semantics == UNKNOWN)
    inst = result.instance_ids.copy()
    classes = {i: c for i, c in result.instance_classes.items() if c != UNKNOWN}
    base = max(classes, default=-1) + 1
    base = max(base, len(result.anchors))
    if len(unk):
        labels = cluster_unknowns(xyz[unk], result.embeddings[unk], ccfg) + base
        inst[unk] = labels
        for j in np.unique(labels):
            classes[int(j)] = UNKNOWN
    return replace(result, instance_ids=inst, instance_classes=classes)


def write_result(result: SegmentationResult, path: str | Path) -> None:
    """Text export: one line per point, then an instance summary block."""
    lines = [f"# {RESULT_FORMAT}", f"points {len(result)}"]
    prov_name = {CLOSED_SET: "closed", CLUSTERED: "clustered"}
    for n, (i, s, p) in enumerate(zip(result.instance_ids, result.semantics, result.provenance)):
        lines.append(f"{n} {int(i)} {int(s)} {prov_name[int(p)]}")
    ids, counts = np.unique(result.instance_ids[result.instance_ids != NO_INSTANCE], return_counts=True)
    lines.append(f"instances {len(ids)}")
    for i, c in zip(ids, counts):
        lines.append(f"{int(i)} {result.instance_classes[int(i)]} {int(c)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_result(path: str | Path) -> SegmentationResult:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != f"# {RESULT_FORMAT}":
        raise ValueError(f"{path}: not a segmentation result ({RESULT_FORMAT})")
    n = int(text[1].split()[1])
    rows = [ln.split() for ln in text[2:2 + n]]
    prov_code = {"closed": CLOSED_SET, "clustered": CLUSTERED}
    inst = np.array([int(r[1]) for r in rows], dtype=np.int64)
    sem = np.array([int(r[2]) for r in rows], dtype=np.int64)
    prov = np.array([prov_code[r[3]] for r in rows], dtype=np.int64)
    m = int(text[2 + n].split()[1])
    classes = {}
    for ln in text[3 + n:3 + n + m]:
        i, c, _ = ln.split()
        classes[int(i)] = int(c)
    return SegmentationResult(inst, sem, prov, classes)
