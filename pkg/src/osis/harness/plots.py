"""CSV and chart emission for curves such as unknown quality versus beta."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

CURVE_HEADER = ("beta", "UQ", "RQ", "SQ")


def curve_csv(rows: Sequence) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_HEADER)
    for r in rows:
        w.writerow([repr(float(r.beta))] + [f"{float(v):.6f}" for v in (r.uq, r.rq, r.sq)])
    return buf.getvalue()


def read_curve(path: str | Path) -> list[tuple[float, float, float, float]]:
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd)
        if tuple(header) != CURVE_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [tuple(float(v) for v in row) for row in rd]


def draw_curve(name: str, rows: Sequence):
    """Line chart of UQ against beta on a fixed [0, 1] beta axis."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=100)
    ax.plot([r.beta for r in rows], [r.uq for r in rows], marker="o")
    ax.set_xlim(0.0, 1.0)
    ax.set_xlabel("beta (weight of 3D location distance)")
    ax.set_ylabel("UQ")
    ax.set_title(name)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return fig


def emit_plot_data(name: str, rows: Sequence, directory: str | Path) -> tuple[Path, Path]:
    """Write ``<name>.csv`` and a ``<name>.png`` line chart of UQ against beta."""
    if not rows:
        raise ValueError("cannot plot an empty curve")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    csv_path, png_path = d / f"{name}.csv", d / f"{name}.png"
    csv_path.write_text(curve_csv(rows))
    fig = draw_curve(name, rows)
    fig.savefig(png_path, metadata={"Software": None})
    plt.close(fig)
    return csv_path, png_path
