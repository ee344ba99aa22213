"""Configuration, experiment orchestration, baselines, plots and the CLI."""

from .config import (ABLATION_ROWS, FIXED_NMS_BOX, BaselineSpec, ConfigError, ExperimentConfig, Toggles,
                     config_from_dict, load_config)
from .experiments import (AblationRow, BaselineError, Dataset, DeskResult, SweepRow, ablate, ablation_divergence,
                          ablation_table, beta_sweep, bottomup_segment, desk_experiment, generate_dataset,
                          infer_all, interior_peak, load_dataset, report_for, run_baseline, save_dataset,
                          train_osis, train_semantic)
from .plots import curve_csv, emit_plot_data, read_curve

__all__ = [
    "ABLATION_ROWS", "AblationRow", "BaselineError", "BaselineSpec", "ConfigError", "Dataset", "DeskResult",
    "ExperimentConfig", "FIXED_NMS_BOX", "SweepRow", "Toggles", "ablate", "ablation_divergence",
    "ablation_table", "beta_sweep", "bottomup_segment", "config_from_dict", "curve_csv", "desk_experiment",
    "emit_plot_data", "generate_dataset", "infer_all", "interior_peak", "load_config", "load_dataset",
    "read_curve", "report_for", "run_baseline", "save_dataset", "train_osis", "train_semantic",
]
