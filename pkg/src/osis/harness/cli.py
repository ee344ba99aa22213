"""Command line entry point: ``osis <command> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..infer import read_result, write_result
from ..model import CheckpointError, load_checkpoint
from ..scene import SceneFormatError
from .config import ABLATION_ROWS, ConfigError, ExperimentConfig, Toggles, load_config
from .experiments import (BaselineError, Dataset, ablate, ablation_table, beta_sweep, generate_dataset,
                          infer_all, load_baseline_model, load_dataset, load_split, report_for, run_baseline,
                          save_dataset, save_model, semantic_experiment, train_osis,
                          train_semantic)
from .plots import emit_plot_data

COMMANDS = ("generate", "train", "infer", "eval", "sweep", "ablate", "baseline")
RESULT_SUFFIX = ".seg"


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON); defaults to the built-in desk setup")
    common.add_argument("--seed", type=int, help="seed for both data generation and training")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--beta", type=float, help="weight of the 3D location distance when clustering")
    common.add_argument("--tau", type=float, help="detection confidence threshold")
    common.add_argument("--k", type=int, help="nearest anchors considered per point")
    common.add_argument("--eps", type=float, help="DBSCAN radius")
    common.add_argument("--min-pts", type=int, help="DBSCAN core-point count")
    for t in ("dl", "br", "var"):
        common.add_argument(f"--toggle-{t}", action="store_true", help=f"flip the {t.upper()} ablation switch")
    common.add_argument("--data", help="dataset directory (generated from the config when omitted)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="osis", description="Open-set instance segmentation on synthetic LiDAR.")
    sub = p.add_subparsers(dest="command", metavar="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a train/test dataset")
    sub.add_parser("train", parents=[common], help="train the OSIS network")
    sp = sub.add_parser("infer", parents=[common], help="segment the test split")
    sp.add_argument("--checkpoint", required=True)
    sp = sub.add_parser("eval", parents=[common], help="evaluate result files against the test split")
    sp.add_argument("--results", required=True, help="directory of result files")
    sp = sub.add_parser("sweep", parents=[common], help="unknown quality over a beta grid")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--betas", type=float, nargs="+", help="beta grid (default: from config)")
    sub.add_parser("ablate", parents=[common], help="train and evaluate the four toggle rows")
    sp = sub.add_parser("baseline", parents=[common], help="run a bottom-up baseline")
    sp.add_argument("--variant", choices=("bottomup", "bottomup_e"), default="bottomup")
    sp.add_argument("--checkpoint", help="semantic model; required for bottomup_e")
    return p


def build_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    try:
        if args.seed is not None:
            cfg = replace(cfg, data_seed=args.seed, train_seed=args.seed)
        t = cfg.toggles
        cfg = cfg.with_toggles(Toggles(t.dl ^ args.toggle_dl, t.br ^ args.toggle_br, t.var ^ args.toggle_var))
        inf = cfg.inference
        cl = inf.clustering
        cl = replace(cl, **{k: v for k, v in (("beta", args.beta), ("eps", args.eps), ("min_pts", args.min_pts))
                            if v is not None})
        inf = replace(inf, clustering=cl, **{k: v for k, v in (("tau", args.tau), ("k", args.k)) if v is not None})
        bl = replace(cfg.baseline, **{k: v for k, v in (("eps", args.eps), ("min_pts", args.min_pts))
                                      if v is not None})
        if getattr(args, "variant", None):
            bl = replace(bl, variant=args.variant)
        return replace(cfg, inference=inf, baseline=bl)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _dataset(args, cfg) -> Dataset:
    return load_dataset(args.data) if args.data else generate_dataset(cfg)


def _test_split(args, cfg):
    return load_split(Path(args.data) / "test") if args.data else generate_dataset(cfg).test


def _write_report(rep, out: Path, name: str = "report") -> None:
    (out / f"{name}.csv").write_text(rep.to_csv())
    (out / f"{name}.txt").write_text(rep.to_table())


def _write_results(results, out: Path) -> None:
    d = out / "results"
    d.mkdir(parents=True, exist_ok=True)
    for i, r in enumerate(results):
        write_result(r, d / f"{i:05d}{RESULT_SUFFIX}")


def run(args) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out)
    cmd = args.command
    if cmd == "generate":
        ds = generate_dataset(cfg)
        save_dataset(ds, out)
        print(f"wrote {len(ds.train)} train and {len(ds.test)} test scenes to {out}")
    elif cmd == "train":
        params, rows = train_osis(cfg, _dataset(args, cfg).train)
        print(f"wrote {save_model(params, rows, cfg, out)}")
    elif cmd == "infer":
        params, _ = load_checkpoint(args.checkpoint, cfg.model)
        scenes = _test_split(args, cfg)
        _write_results(infer_all(cfg, params, scenes), out)
        print(f"wrote {len(scenes)} results to {out / 'results'}")
    elif cmd == "eval":
        scenes = _test_split(args, cfg)
        files = sorted(Path(args.results).glob(f"*{RESULT_SUFFIX}"))
        if len(files) != len(scenes):
            raise ConfigError(f"--results: found {len(files)} result files for {len(scenes)} scenes")
        rep = report_for(scenes, [read_result(f) for f in files])
        _write_report(rep, out)
        print(rep.to_table(), end="")
    elif cmd == "sweep":
        params, _ = load_checkpoint(args.checkpoint, cfg.model)
        scenes = _test_split(args, cfg)
        betas = args.betas if args.betas else cfg.sweep_betas
        if any(not 0.0 <= b <= 1.0 for b in betas):
            raise ConfigError("--betas: values must lie in [0, 1]")
        rows = beta_sweep(infer_all(cfg, params, scenes), scenes, cfg.inference.clustering, betas)
        csv_path, png_path = emit_plot_data("uq_vs_beta", rows, out)
        print(csv_path.read_text(), end="")
        print(f"chart: {png_path}")
    elif cmd == "ablate":
        rows = ablate(cfg, _dataset(args, cfg), ABLATION_ROWS, out)
        for r in rows:
            _write_report(r.report, out, "report_" + "_".join(
                f"{k}{int(getattr(r.toggles, k))}" for k in ("dl", "br", "var")))
        table = ablation_table(rows)
        (out / "ablation.txt").write_text(table)
        print(table, end="")
    elif cmd == "baseline":
        spec = cfg.baseline
        ds = _dataset(args, cfg)
        params = None
        if args.checkpoint is not None:
            params = load_baseline_model(spec, args.checkpoint)
        elif any(len(s) for s in ds.test):
            if spec.variant == "bottomup_e":
                raise BaselineError("bottomup_e needs --checkpoint with a discriminatively trained model")
            params, logs = train_semantic(cfg, ds.train)
            save_model(params, logs, semantic_experiment(cfg), out, "semantic")
        results, rep = run_baseline(spec, ds.test, params, cfg)
        _write_results(results, out)
        _write_report(rep, out)
        print(rep.to_table(), end="")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return run(args)
    except (ConfigError, BaselineError, CheckpointError, SceneFormatError, FileNotFoundError) as e:
        print(f"osis {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
