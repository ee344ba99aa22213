"""Experiment orchestration: datasets, training, inference, evaluation, baselines."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..infer import ClusteringConfig, SegmentationResult, cluster_unknowns, empty_result, segment_scene
from ..infer.pipeline import CLOSED_SET, CLUSTERED, with_clustering
from ..metrics import PanopticReport, evaluate
from ..model import NetworkParams, forward, load_checkpoint, save_checkpoint
from ..raster import trilinear_sample, voxelize
from ..scene import NO_INSTANCE, UNKNOWN, Scene, generate_scene, load_scene, save_scene
from ..train import train, write_log
from .config import BaselineSpec, ExperimentConfig, Toggles, ABLATION_ROWS

log = logging.getLogger(__name__)

SCENE_SUFFIX = ".scene"


class BaselineError(ValueError):
    pass


# datasets ------------------------------------------------------------------

@dataclass
class Dataset:
    train: list[Scene]
    test: list[Scene]


def generate_dataset(cfg: ExperimentConfig) -> Dataset:
    return Dataset([generate_scene(cfg.train_scenes, s) for s in cfg.train_seeds()],
                   [generate_scene(cfg.test_scenes, s) for s in cfg.test_seeds()])


def save_dataset(ds: Dataset, directory: str | Path) -> None:
    root = Path(directory)
    for split, scenes in (("train", ds.train), ("test", ds.test)):
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(scenes):
            save_scene(s, d / f"{i:05d}{SCENE_SUFFIX}")


def load_split(directory: str | Path) -> list[Scene]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: no such dataset split")
    return [load_scene(p) for p in sorted(d.glob(f"*{SCENE_SUFFIX}"))]


def load_dataset(directory: str | Path) -> Dataset:
    root = Path(directory)
    return Dataset(load_split(root / "train"), load_split(root / "test"))


# OSIS ----------------------------------------------------------------------

def train_osis(cfg: ExperimentConfig, scenes: Sequence[Scene]) -> tuple[NetworkParams, list[dict]]:
    t = time.perf_counter()
    params, rows = train(scenes, cfg.model, cfg.geometry, cfg.loss_config(), cfg.train, cfg.train_seed)
    log.info("trained %s on %d scenes in %.1fs", cfg.toggles.label(), len(scenes), time.perf_counter() - t)
    return params, rows


def save_model(params: NetworkParams, rows: list[dict], cfg: ExperimentConfig, directory: str | Path,
               name: str = "model") -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"{name}.ckpt"
    save_checkpoint(params, path, {"toggles": cfg.toggles.label(), "use_dl": cfg.toggles.dl,
                                   "mode": cfg.train.mode})
    write_log(rows, d / f"{name}_log.csv")
    return path


def _segment_job(args):
    scene, params, geom, icfg = args
    return segment_scene(scene, params, geom, icfg)


def _map(fn, jobs: list, workers: int) -> list:
    """Order-preserving map, fanned out over processes when ``workers > 1``."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def infer_all(cfg: ExperimentConfig, params: NetworkParams, scenes: Sequence[Scene]) -> list[SegmentationResult]:
    icfg = cfg.inference_config()
    return _map(_segment_job, [(s, params, cfg.geometry, icfg) for s in scenes], cfg.workers)


def report_for(scenes: Sequence[Scene], results: Sequence[SegmentationResult]) -> PanopticReport:
    return evaluate(list(scenes), [(r.instance_ids, r.semantics) for r in results])


def recluster(results: Sequence[SegmentationResult], scenes: Sequence[Scene],
              ccfg: ClusteringConfig) -> list[SegmentationResult]:
    return [with_clustering(r, s.points, ccfg) if len(s) else r for r, s in zip(results, scenes)]


@dataclass
class SweepRow:
    beta: float
    uq: float
    rq: float
    sq: float


def beta_sweep(results: Sequence[SegmentationResult], scenes: Sequence[Scene], base: ClusteringConfig,
               betas: Sequence[float]) -> list[SweepRow]:
    """Unknown quality as a function of the location/embedding weight."""
    rows = []
    for b in betas:
        rep = report_for(scenes, recluster(results, scenes, replace(base, beta=float(b))))
        unk = rep.row("unknown")
        rows.append(SweepRow(float(b), *(map(float, (unk.quality, unk.rq, unk.sq)) if unk
                                        else (float("nan"),) * 3)))
    return rows


def interior_peak(rows: Sequence[SweepRow], slack: float = 0.02) -> bool:
    """True if some 0 < beta < 1 reaches the better endpoint within ``slack``."""
    ends = [r.uq for r in rows if r.beta in (0.0, 1.0)]
    inner = [r.uq for r in rows if 0.0 < r.beta < 1.0]
    return bool(inner) and len(ends) == 2 and max(inner) >= max(ends) - slack


@dataclass
class AblationRow:
    toggles: Toggles
    report: PanopticReport


def ablate(cfg: ExperimentConfig, ds: Dataset, rows: Sequence[Toggles] = ABLATION_ROWS,
           out: str | Path | None = None) -> list[AblationRow]:
    result = []
    for t in rows:
        c = cfg.with_toggles(t)
        params, logs = train_osis(c, ds.train)
        rep = report_for(ds.test, infer_all(c, params, ds.test))
        if out is not None:
            save_model(params, logs, c, Path(out) / _toggle_dir(t))
        result.append(AblationRow(t, rep))
    return result


def _toggle_dir(t: Toggles) -> str:
    return "_".join(f"{k}{int(getattr(t, k))}" for k in ("dl", "br", "var"))


def ablation_divergence(rows: Sequence[AblationRow]) -> list[str]:
    """Messages for every place where enabling DL lowered unknown UQ."""
    by = {r.toggles: r.report.uq for r in rows}
    msgs = []
    for t, uq in by.items():
        if not t.dl:
            on = by.get(replace(t, dl=True))
            if on is not None and on < uq:
                msgs.append(f"DL lowers UQ ({uq:.4f} -> {on:.4f}) with BR={t.br} var={t.var}")
    return msgs


def ablation_table(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'DL':>3} {'BR':>3} {'var':>3} | {'UQ':>6} {'RQ':>6} {'SQ':>6} | {'PQ':>6} {'RQ':>6} {'SQ':>6}"]
    for r in rows:
        unk, th = r.report.row("unknown"), r.report.mean("thing")
        u = (unk.quality, unk.rq, unk.sq) if unk else (float("nan"),) * 3
        k = th or (float("nan"),) * 3
        mark = lambda b: "x" if b else ""  # noqa: E731
        lines.append(f"{mark(r.toggles.dl):>3} {mark(r.toggles.br):>3} {mark(r.toggles.var):>3} | "
                     + " ".join(f"{100 * v:6.1f}" for v in u) + " | " + " ".join(f"{100 * v:6.1f}" for v in k))
    for m in ablation_divergence(rows):
        lines.append(f"DIVERGENCE: {m}")
    return "\n".join(lines) + "\n"


# bottom-up baselines ---------------------------------------------------------

def semantic_experiment(cfg: ExperimentConfig) -> ExperimentConfig:
    """Config of the shared baseline model: a semantic branch trained with CE plus the discriminative loss."""
    n_sem = len(cfg.train_scenes.catalog.known_classes) + 1
    return replace(cfg, model=replace(cfg.model, semantic_classes=n_sem),
                   train=replace(cfg.train, mode="semantic"), toggles=Toggles(dl=True, br=False, var=False))


def train_semantic(cfg: ExperimentConfig, scenes: Sequence[Scene]) -> tuple[NetworkParams, list[dict]]:
    return train_osis(semantic_experiment(cfg), scenes)


def semantic_predict(scene: Scene, params: NetworkParams, geom) -> tuple[np.ndarray, np.ndarray]:
    """Per-point semantic labels (class ids, unknown last) and embeddings."""
    mc = params.config
    if not mc.semantic_classes:
        raise BaselineError("the model has no semantic branch")
    x = voxelize(scene.points, geom).data
    if mc.frames > 1:
        x = np.concatenate([x] + [np.zeros_like(x)] * (mc.frames - 1))
    out, _ = forward(x, params)
    og = mc.output_geometry(geom)
    logits = trilinear_sample(out.sem_map.reshape(mc.semantic_classes, mc.Z, og.H, og.W), scene.points, og)
    phi = trilinear_sample(out.point_map.reshape(mc.F, mc.Z, og.H, og.W), scene.points, og)
    labels = np.array(scene.catalog.known_classes + (UNKNOWN,), dtype=np.int64)
    return labels[np.argmax(logits, axis=1)], phi


def bottomup_segment(xyz: np.ndarray, semantics: np.ndarray, phi: np.ndarray | None, stuff_classes,
                     spec: BaselineSpec) -> SegmentationResult:
    """Cluster every non-stuff class separately on the variant's features."""
    n = len(xyz)
    if n == 0:
        return empty_result()
    sem = np.asarray(semantics, dtype=np.int64)
    if spec.features == "embeddings" and phi is None:
        raise BaselineError("bottomup_e needs learned embeddings")
    feats = np.asarray(phi, dtype=np.float64) if phi is not None else np.zeros((n, 1))
    ccfg = spec.clustering
    inst = np.full(n, NO_INSTANCE, dtype=np.int64)
    prov = np.full(n, CLOSED_SET, dtype=np.int64)
    classes: dict[int, int] = {}
    nxt = 0
    for c in np.unique(sem):
        if int(c) in stuff_classes:
            continue
        sel = np.flatnonzero(sem == c)
        labels = cluster_unknowns(xyz[sel], feats[sel], ccfg) + nxt
        inst[sel] = labels
        for j in np.unique(labels):
            classes[int(j)] = int(c)
        nxt = int(labels.max()) + 1
        if c == UNKNOWN:
            prov[sel] = CLUSTERED
    return SegmentationResult(inst, sem, prov, classes, [], feats if phi is not None else None)


def _baseline_job(args):
    scene, params, geom, spec = args
    if len(scene) == 0:
        return empty_result()
    sem, phi = semantic_predict(scene, params, geom)
    return bottomup_segment(scene.points, sem, phi, scene.catalog.stuff_classes, spec)


def load_baseline_model(spec: BaselineSpec, checkpoint: str | Path | None) -> NetworkParams | None:
    if checkpoint is None:
        return None
    if not Path(checkpoint).is_file():
        raise BaselineError(f"{checkpoint}: checkpoint not found")
    params, meta = load_checkpoint(checkpoint)
    if spec.variant == "bottomup_e" and not meta.get("use_dl", False):
        raise BaselineError(f"{checkpoint}: bottomup_e needs embeddings trained with the discriminative loss")
    return params


def run_baseline(spec: BaselineSpec, scenes: Sequence[Scene], params: NetworkParams | None,
                 cfg: ExperimentConfig) -> tuple[list[SegmentationResult], PanopticReport]:
    """Segment and evaluate ``scenes`` with a bottom-up baseline."""
    scenes = list(scenes)
    if all(len(s) == 0 for s in scenes):
        results = [empty_result() for _ in scenes]
        return results, report_for(scenes, results)
    if params is None:
        what = "embedding" if spec.variant == "bottomup_e" else "semantic"
        raise BaselineError(f"{spec.variant} needs a trained {what} model checkpoint")
    results = _map(_baseline_job, [(s, params, cfg.geometry, spec) for s in scenes], cfg.workers)
    return results, report_for(scenes, results)


# full desk experiment --------------------------------------------------------

@dataclass
class DeskResult:
    osis: PanopticReport
    bottomup: PanopticReport
    bottomup_e: PanopticReport
    sweep: list[SweepRow]
    osis_results: list[SegmentationResult]
    dataset: Dataset
    seconds: float


def desk_experiment(cfg: ExperimentConfig) -> DeskResult:
    """OSIS and both bottom-up baselines on one dataset, plus the beta sweep."""
    t = time.perf_counter()
    ds = generate_dataset(cfg)
    params, _ = train_osis(cfg, ds.train)
    results = infer_all(cfg, params, ds.test)
    osis = report_for(ds.test, results)
    sem_params, _ = train_semantic(cfg, ds.train)
    bu = run_baseline(BaselineSpec("bottomup", cfg.baseline.eps, cfg.baseline.min_pts), ds.test, sem_params, cfg)[1]
    bue = run_baseline(BaselineSpec("bottomup_e", cfg.baseline.eps, cfg.baseline.min_pts), ds.test, sem_params,
                       cfg)[1]
    sweep = beta_sweep(results, ds.test, cfg.inference.clustering, cfg.sweep_betas)
    return DeskResult(osis, bu, bue, sweep, results, ds, time.perf_counter() - t)
