"""Panoptic quality for known classes and recall-based unknown quality.

Segments are point-index sets. Matches require IoU > 0.5, which makes
them unique for non-overlapping segments. Scene results are pooled by
summing TP/FP/FN counts and TP IoUs before any ratio is taken.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .scene import NO_INSTANCE, UNKNOWN, ClassCatalog, Scene

MATCH_IOU = 0.5


def segment_iou(pred: Iterable[int], gt: Iterable[int]) -> float:
    a, b = set(int(i) for i in pred), set(int(i) for i in gt)
    if not a and not b:
        raise ValueError("IoU of two empty segments is undefined")
    return len(a & b) / len(a | b)


@dataclass
class MatchSet:
    tp: list[tuple[int, int, float]] = field(default_factory=list)
    fp: list[int] = field(default_factory=list)
    fn: list[int] = field(default_factory=list)


def match_instances(preds: Mapping[int, Iterable[int]], gts: Mapping[int, Iterable[int]]) -> MatchSet:
    """Pair predicted and ground-truth segments of one class with IoU > 0.5."""
    pred_sets = {k: set(int(i) for i in v) for k, v in preds.items()}
    gt_sets = {k: set(int(i) for i in v) for k, v in gts.items()}
    owner: dict[int, int] = {}
    for g, pts in gt_sets.items():
        for i in pts:
            owner[i] = g
    ms = MatchSet()
    matched_gt: set[int] = set()
    for p in sorted(pred_sets):
        pts = pred_sets[p]
        overlap: dict[int, int] = {}
        for i in pts:
            g = owner.get(i)
            if g is not None:
                overlap[g] = overlap.get(g, 0) + 1
        hit = None
        for g in sorted(overlap):
            inter = overlap[g]
            iou = inter / (len(pts) + len(gt_sets[g]) - inter)
            if iou > MATCH_IOU and g not in matched_gt:
                hit = (p, g, iou)
                break
        if hit is None:
            ms.fp.append(p)
        else:
            ms.tp.append(hit)
            matched_gt.add(hit[1])
    ms.fn = [g for g in sorted(gt_sets) if g not in matched_gt]
    return ms


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    def __add__(self, other: "ClassCounts") -> "ClassCounts":
        return ClassCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                           self.iou_sum + other.iou_sum)

    @classmethod
    def from_matches(cls, ms: MatchSet) -> "ClassCounts":
        return cls(len(ms.tp), len(ms.fp), len(ms.fn), float(sum(t[2] for t in ms.tp)))


def _sq(c: ClassCounts) -> float:
    return c.iou_sum / c.tp if c.tp else 0.0


def panoptic_quality(ms: MatchSet | ClassCounts) -> tuple[float, float, float] | None:
    """``(PQ, RQ, SQ)``; ``None`` when the class has neither predictions nor ground truth."""
    c = ms if isinstance(ms, ClassCounts) else ClassCounts.from_matches(ms)
    denom = c.tp + 0.5 * c.fp + 0.5 * c.fn
    if denom == 0:
        return None
    sq, rq = _sq(c), c.tp / denom
    return sq * rq, rq, sq


def unknown_quality(ms: MatchSet | ClassCounts) -> tuple[float, float, float] | None:
    """``(UQ, RQ, SQ)`` with recall in place of RQ; false positives are ignored.

    ``None`` when there are no annotated unknown instances.
    """
    c = ms if isinstance(ms, ClassCounts) else ClassCounts.from_matches(ms)
    if c.tp + c.fn == 0:
        return None
    sq, rq = _sq(c), c.tp / (c.tp + c.fn)
    return sq * rq, rq, sq


def _segments(inst: np.ndarray, sem: np.ndarray, cls: int) -> dict[int, np.ndarray]:
    sel = np.flatnonzero((sem == cls) & (inst != NO_INSTANCE))
    if len(sel) == 0:
        return {}
    ids = inst[sel]
    order = np.argsort(ids, kind="stable")
    ids, sel = ids[order], sel[order]
    uniq, starts = np.unique(ids, return_index=True)
    return {int(u): seg for u, seg in zip(uniq, np.split(sel, starts[1:]))}


def evaluate_scene(scene: Scene, pred_instance: np.ndarray, pred_semantic: np.ndarray) -> dict[int, ClassCounts]:
    """Per-class counts for one scene, keyed by class id (``UNKNOWN`` for unknowns).

    Thing and unknown classes are matched instance-wise; each stuff class is a
    single segment per scene.
    """
    cat = scene.catalog
    pi, ps = np.asarray(pred_instance), np.asarray(pred_semantic)
    if len(pi) != len(scene) or len(ps) != len(scene):
        raise ValueError(f"prediction covers {len(pi)} points, scene has {len(scene)}")
    gi, gs = scene.instance_ids, scene.semantics
    out: dict[int, ClassCounts] = {}
    for c in cat.thing_classes + (UNKNOWN,):
        out[c] = ClassCounts.from_matches(match_instances(_segments(pi, ps, c), _segments(gi, gs, c)))
    for c in cat.stuff_classes:
        p, g = np.flatnonzero(ps == c), np.flatnonzero(gs == c)
        out[c] = ClassCounts.from_matches(match_instances({0: p} if len(p) else {}, {0: g} if len(g) else {}))
    return out


def pool(per_scene: Iterable[Mapping[int, ClassCounts]]) -> dict[int, ClassCounts]:
    total: dict[int, ClassCounts] = {}
    for counts in per_scene:
        for c, v in counts.items():
            total[c] = total.get(c, ClassCounts()) + v
    return total


@dataclass(frozen=True)
class ClassRow:
    cls: int
    name: str
    kind: str  # thing | stuff | unknown
    quality: float  # PQ for known classes, UQ for unknown
    rq: float
    sq: float
    tp: int
    fp: int
    fn: int


@dataclass
class PanopticReport:
    rows: list[ClassRow]
    excluded: list[str] = field(default_factory=list)
    scenes: int = 0
    scenes_without_unknowns: int = 0

    def row(self, kind: str, cls: int | None = None) -> ClassRow | None:
        for r in self.rows:
            if r.kind == kind and (cls is None or r.cls == cls):
                return r
        return None

    def mean(self, kind: str) -> tuple[float, float, float] | None:
        rows = [r for r in self.rows if r.kind == kind]
        if not rows:
            return None
        return tuple(float(np.mean([getattr(r, a) for r in rows])) for a in ("quality", "rq", "sq"))

    @property
    def thing_pq(self) -> float:
        m = self.mean("thing")
        return m[0] if m else float("nan")

    @property
    def uq(self) -> float:
        r = self.row("unknown")
        return r.quality if r else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "kind", "quality", "RQ", "SQ", "TP", "FP", "FN"])
        for r in self.rows:
            w.writerow([r.name, r.kind, f"{r.quality:.6f}", f"{r.rq:.6f}", f"{r.sq:.6f}", r.tp, r.fp, r.fn])
        for kind in ("thing", "stuff"):
            m = self.mean(kind)
            if m:
                w.writerow([f"mean_{kind}", "summary", *(f"{v:.6f}" for v in m), "", "", ""])
        return buf.getvalue()

    def to_table(self) -> str:
        def fmt(m):
            return " ".join(f"{100 * v:6.1f}" for v in m) if m else "   n/a    n/a    n/a"
        unk = self.row("unknown")
        head = f"{'':14}| {'Unknown':^20} | {'Known Thing':^20} | {'Known Stuff':^20}"
        sub = f"{'':14}| {'UQ':>6} {'RQ':>6} {'SQ':>6} | {'PQ':>6} {'RQ':>6} {'SQ':>6} | {'PQ':>6} {'RQ':>6} {'SQ':>6}"
        body = (f"{'overall':14}| {fmt((unk.quality, unk.rq, unk.sq) if unk else None)} | "
                f"{fmt(self.mean('thing'))} | {fmt(self.mean('stuff'))}")
        lines = [head, sub, "-" * len(sub), body, "", "per class:"]
        for r in self.rows:
            lines.append(f"  {r.name:12} {r.kind:8} q={100 * r.quality:6.1f} rq={100 * r.rq:6.1f} "
                         f"sq={100 * r.sq:6.1f}  tp={r.tp} fp={r.fp} fn={r.fn}")
        if self.excluded:
            lines.append(f"excluded (no predictions or ground truth): {', '.join(self.excluded)}")
        lines.append(f"scenes={self.scenes} scenes_without_unknowns={self.scenes_without_unknowns}")
        return "\n".join(lines) + "\n"


def build_report(pooled: Mapping[int, ClassCounts], catalog: ClassCatalog, scenes: int = 0,
                 scenes_without_unknowns: int = 0) -> PanopticReport:
    rows, excluded = [], []
    for kind, classes in (("thing", catalog.thing_classes), ("stuff", catalog.stuff_classes),
                          ("unknown", (UNKNOWN,))):
        for c in classes:
            counts = pooled.get(c, ClassCounts())
            q = unknown_quality(counts) if kind == "unknown" else panoptic_quality(counts)
            if q is None:
                excluded.append(catalog.name(c))
                continue
            rows.append(ClassRow(c, catalog.name(c), kind, q[0], q[1], q[2],
                                 counts.tp, counts.fp, counts.fn))
    return PanopticReport(rows, excluded, scenes, scenes_without_unknowns)


def evaluate(scenes: list[Scene], predictions: list[tuple[np.ndarray, np.ndarray]],
             catalog: ClassCatalog | None = None) -> PanopticReport:
    """Pooled report over scenes given ``(instance_ids, semantics)`` predictions."""
    if len(scenes) != len(predictions):
        raise ValueError("one prediction per scene is required")
    catalog = catalog or (scenes[0].catalog if scenes else None)
    per_scene = [evaluate_scene(s, pi, ps) for s, (pi, ps) in zip(scenes, predictions)]
    no_unk = sum(1 for s in scenes if not s.unknown_instances())
    if catalog is None:
        return PanopticReport([], [], 0, 0)
    return build_report(pool(per_scene), catalog, len(scenes), no_unk)
