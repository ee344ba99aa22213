"""Acceptance criteria. Each test records one PASS/FAIL line (see the terminal summary)."""

import math
import time

import numpy as np
import pytest

from osis.harness import ABLATION_ROWS, ExperimentConfig, ablate, ablation_table, desk_experiment, interior_peak
from osis.harness.cli import main
from osis.harness.plots import curve_csv, emit_plot_data
from osis.infer import Prototype, assign_points, association_score, cluster_unknowns, ClusteringConfig
from osis.metrics import evaluate
from osis.scene import NO_INSTANCE, UNKNOWN, Scene
from gradcheck import TERMS, param_count, worst_rel_error
from oracles import MINI_CATALOG, check_dbscan_partition, eq1
from test_metrics import STUFF, THING, hand_quality, oracle_counts, perturb, random_labels


@pytest.fixture(scope="session")
def desk():
    return desk_experiment(ExperimentConfig())


def test_gradient_fidelity(verdicts):
    t = time.perf_counter()
    errs = {term: worst_rel_error(term, h=1e-4) for term in TERMS}
    secs = time.perf_counter() - t
    worst = max(errs.values())
    ok = worst < 1e-4 and secs < 60 and param_count() <= 5000
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    verdicts.record("gradient fidelity", ok, f"max rel err {worst:.1e} ({detail}); {param_count()} params; {secs:.1f}s")
    assert ok


def test_clustering_oracle(verdicts):
    rng = np.random.default_rng(2024)
    t = time.perf_counter()
    failures = 0
    for _ in range(100):
        n = int(rng.integers(1, 201))
        xyz = rng.uniform(0, 4, (n, 3))
        phi = rng.uniform(0, 4, (n, int(rng.integers(1, 4))))
        eps = float(rng.uniform(0.3, 1.0))
        min_pts = int(rng.integers(1, 6))
        for beta in (0.0, 0.25, 0.5, 0.75, 1.0):
            labels = cluster_unknowns(xyz, phi, ClusteringConfig(beta=beta, eps=eps, min_pts=min_pts))
            if not check_dbscan_partition(labels.tolist(), xyz.tolist(), phi.tolist(), beta, eps, min_pts):
                failures += 1
    secs = time.perf_counter() - t
    ok = failures == 0 and secs < 60
    verdicts.record("clustering oracle", ok, f"{failures} mismatches in 100 instances x 5 betas; {secs:.1f}s")
    assert ok


def test_metric_oracle(verdicts):
    rng = np.random.default_rng(7)
    bad, fp_bad = 0, 0
    for _ in range(100):
        inst, sem = random_labels(rng, int(rng.integers(5, 80)), int(rng.integers(0, 4)), int(rng.integers(1, 4)))
        pi, ps = perturb(rng, inst, sem, flip=float(rng.uniform(0, 0.6)))
        # spare ground points that injected unknown false positives can claim
        inst = np.concatenate([inst, np.full(5, NO_INSTANCE)])
        sem = np.concatenate([sem, np.full(5, STUFF)])
        pi = np.concatenate([pi, np.full(5, NO_INSTANCE)])
        ps = np.concatenate([ps, np.full(5, STUFF)])
        scene = Scene(np.zeros((len(inst), 3)), inst, sem, {}, MINI_CATALOG)
        rep = evaluate([scene], [(pi, ps)])
        for c, kind, (tp, fp, fn, s) in ((c, k, oracle_counts(inst, sem, pi, ps)[c])
                                         for c, k in ((THING, "thing"), (STUFF, "stuff"), (UNKNOWN, "unknown"))):
            row = rep.row(kind, c)
            defined = (tp + fn > 0) if kind == "unknown" else (tp + fp + fn > 0)
            if (row is not None) != defined:
                bad += 1
                continue
            if row is None:
                continue
            exp = hand_quality(tp, fp, fn, s, recall=kind == "unknown")
            got = (row.quality, row.rq, row.sq)
            if (row.tp, row.fp, row.fn) != (tp, fp, fn) or max(abs(a - b) for a, b in zip(got, exp)) > 1e-12:
                bad += 1
        base = rep.row("unknown")
        top = int(pi.max()) + 1
        k = int(rng.integers(1, 6))
        for j in range(k):
            pi[-1 - j], ps[-1 - j] = top + j, UNKNOWN
        after = evaluate([scene], [(pi, ps)]).row("unknown")
        if base is None:
            fp_bad += after is not None
        elif (after.quality, after.rq, after.sq) != (base.quality, base.rq, base.sq) or after.fp != base.fp + k:
            fp_bad += 1
    ok = bad == 0 and fp_bad == 0
    verdicts.record("metric oracle", ok, f"{bad} count/value mismatches, {fp_bad} UQ changes under injected FPs "
                                         f"over 100 scenes")
    assert ok


def test_association_soundness(verdicts):
    mu = np.zeros(2)
    examples = [(association_score(np.zeros(2), Prototype(mu, 1.0, 0, "thing")), 0.0),
                (association_score(np.array([1.0, 0.0]), Prototype(mu, 1.0, 0, "thing")), -0.5),
                (association_score(np.zeros(2), Prototype(mu, math.e, 0, "thing")), -1.0)]
    ex_err = max(abs(a - b) for a, b in examples)
    rng = np.random.default_rng(11)
    mism = 0
    for _ in range(100):
        T, S, F, N = int(rng.integers(1, 8)), int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 40))
        things = [Prototype(rng.normal(size=F), float(rng.uniform(1e-3, 5)), 0, "thing") for _ in range(T)]
        stuff = [Prototype(rng.normal(size=F), float(rng.uniform(1e-3, 5)), 1, "stuff") for _ in range(S)]
        xyz, phi = rng.uniform(-5, 5, (N, 3)), rng.normal(size=(N, F))
        U = float(rng.normal(-2, 2))
        asg = assign_points(xyz, phi, things, rng.uniform(-5, 5, (T, 2)), stuff, U, T)
        for i in range(N):
            scores = [eq1(phi[i], p.mu, p.sigma2) for p in things + stuff] + [U]
            if asg.slot[i] != int(np.argmax(scores)):
                mism += 1
    ok = ex_err <= 1e-12 and mism == 0
    verdicts.record("association soundness", ok, f"{mism} argmax mismatches in 100 cases; example error {ex_err:.1e}")
    assert ok


def test_desk_experiment(desk, verdicts):
    pq, uq, bu, bue = desk.osis.thing_pq, desk.osis.uq, desk.bottomup.uq, desk.bottomup_e.uq
    ok = pq >= 0.5 and uq > bu and desk.seconds < 1800
    verdicts.record("desk experiment", ok,
                    f"OSIS thing PQ {pq:.3f} (>= 0.5), OSIS UQ {uq:.3f} vs BottomUp {bu:.3f} (BottomUp+E {bue:.3f}); "
                    f"{len(desk.dataset.train)}/{len(desk.dataset.test)} scenes; {desk.seconds:.0f}s")
    print(desk.osis.to_table())
    assert pq >= 0.5
    assert desk.seconds < 1800
    assert uq > bu


def test_beta_sweep(desk, verdicts, tmp_path):
    rows = desk.sweep
    emit_plot_data("uq_vs_beta", rows, tmp_path)
    print(curve_csv(rows))
    ok = interior_peak(rows)
    best = max(rows, key=lambda r: r.uq)
    curve = " ".join(f"{r.beta:.1f}:{r.uq:.3f}" for r in rows)
    verdicts.record("beta sweep", ok, f"best interior-or-end beta {best.beta} UQ {best.uq:.3f}; curve {curve}")
    assert ok


def test_ablation_trend(desk, verdicts, tmp_path):
    cfg = ExperimentConfig()
    rows = ablate(cfg, desk.dataset, ABLATION_ROWS)
    table = ablation_table(rows)
    print(table)
    by = {r.toggles: r.report.uq for r in rows}
    off, on = by[ABLATION_ROWS[0]], by[ABLATION_ROWS[1]]
    ok = on >= off
    summary = "; ".join(f"{r.toggles.label()} UQ {r.report.uq:.3f}" for r in rows)
    flag = "" if "DIVERGENCE" not in table else " [divergence flagged]"
    verdicts.record("ablation trend", ok, f"DL off {off:.3f} -> on {on:.3f}; {summary}{flag}")
    assert len(rows) == 4
    assert ok


def test_reproducibility(desk, verdicts, tmp_path):
    data, run, inf, ev = (tmp_path / d for d in ("data", "run", "inf", "ev"))
    codes = [main(["generate", "--out", str(data)]),
             main(["train", "--data", str(data), "--out", str(run)]),
             main(["infer", "--data", str(data), "--checkpoint", str(run / "model.ckpt"), "--out", str(inf)]),
             main(["eval", "--data", str(data), "--results", str(inf / "results"), "--out", str(ev)])]
    ok = codes == [0, 0, 0, 0] and (ev / "report.csv").read_text() == desk.osis.to_csv()
    verdicts.record("reproducibility", ok, "CLI generate/train/infer/eval report.csv "
                    + ("byte-identical to" if ok else "differs from") + " the in-process desk run")
    assert ok
