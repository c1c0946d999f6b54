"""Delimited tables and rendered figures written into run directories.

Grids, curves, metrics and training histories go to CSV; each CSV with a
natural plot gets a matplotlib-rendered SVG next to it.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import SparsificationCurve

GRID_FMT = "%.8e"
METRIC_COLUMNS = ("estimator", "snr_db", "n", "si_sdr_mean", "si_sdr_ci95")


# ---------------------------------------------------------------------------
# CSV


def write_grid(path: str | Path, grid: np.ndarray) -> None:
    """Time-frequency grid, one frame per row."""
    np.savetxt(path, np.asarray(grid), fmt=GRID_FMT, delimiter=",")


def read_grid(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_curve_csv(path: str | Path, measured: SparsificationCurve,
                    oracle: SparsificationCurve, ause: float) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# ause: {ause!r}\n")
        writer = csv.writer(fh)
        writer.writerow(["fraction", "rmse_measured", "rmse_oracle"])
        for f, m, o in zip(measured.fractions, measured.rmse, oracle.rmse):
            writer.writerow([repr(float(f)), repr(float(m)), repr(float(o))])


def read_curve_csv(path: str | Path):
    """Returns (measured, oracle, ause) as written by ``write_curve_csv``."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# ause:"):
        raise ValueError(f"{path}: missing ause header")
    ause = float(lines[0].split(":", 1)[1])
    rows = list(csv.reader(lines[1:]))
    if rows[0] != ["fraction", "rmse_measured", "rmse_oracle"]:
        raise ValueError(f"{path}: unexpected curve columns {rows[0]}")
    data = np.array([[float(v) for v in row] for row in rows[1:]])
    measured = SparsificationCurve(data[:, 0], data[:, 1], label="measured")
    oracle = SparsificationCurve(data[:, 0], data[:, 2], label="oracle")
    return measured, oracle, ause


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRIC_COLUMNS})


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected metric columns "
                             f"{reader.fieldnames}")
        rows = []
        for raw in reader:
            rows.append({"estimator": raw["estimator"],
                         "snr_db": raw["snr_db"],
                         "n": int(raw["n"]),
                         "si_sdr_mean": float(raw["si_sdr_mean"]),
                         "si_sdr_ci95": float(raw["si_sdr_ci95"])})
        return rows


def write_history_csv(path: str | Path, history: list[dict]) -> None:
    columns = list(history[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in history:
            writer.writerow(row)


def read_history_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for raw in csv.DictReader(fh):
            rows.append({k: (int(v) if k == "epoch" else float(v))
                         for k, v in raw.items()})
        return rows


# ---------------------------------------------------------------------------
# figures


def sparsification_figure(path: str | Path, measured: SparsificationCurve,
                          oracle: SparsificationCurve, title: str) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(measured.fractions, measured.rmse, label="measured", lw=1.5)
    ax.plot(oracle.fractions, oracle.rmse, label="oracle", lw=1.5, ls="--")
    ax.set_xlabel("fraction of bins removed")
    ax.set_ylabel("normalized RMSE")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def sisdr_figure(path: str | Path, series: dict[str, tuple], title: str) -> None:
    """One errorbar trace per estimator: (snrs, means, ci95s)."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for name, (snrs, means, cis) in series.items():
        ax.errorbar(snrs, means, yerr=cis, label=name, marker="o",
                    capsize=3, lw=1.2)
    ax.set_xlabel("input SNR [dB]")
    ax.set_ylabel("SI-SDR [dB]")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def history_figure(path: str | Path, history: list[dict], title: str) -> None:
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(epochs, [row["train_loss"] for row in history], label="train")
    ax.plot(epochs, [row["val_loss"] for row in history], label="val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
