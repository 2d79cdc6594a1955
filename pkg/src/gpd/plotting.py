"""Accuracy-curve rendering from training record CSVs."""

from __future__ import annotations

import csv
import os
import tempfile

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import GpdError


def read_records_csv(path: str):
    """Epoch series (epochs, student acc, teacher acc, gap), last row per epoch."""
    rows = {}
    with open(path) as f:
        reader = csv.DictReader(f)
        required = {"epoch", "acc_s", "acc_t", "gap"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise GpdError(f"{path}: missing record columns {sorted(required)}")
        for row in reader:
            rows[int(row["epoch"])] = (float(row["acc_s"]), float(row["acc_t"]), float(row["gap"]))
    if not rows:
        raise GpdError(f"{path}: no record rows")
    epochs = sorted(rows)
    acc_s = [rows[e][0] for e in epochs]
    acc_t = [rows[e][1] for e in epochs]
    gap = [rows[e][2] for e in epochs]
    return epochs, acc_s, acc_t, gap


def plot_records(records_csv: str, out_path: str) -> int:
    """Render the two accuracy curves with a shaded gap band.

    Returns the number of epoch points plotted. The file is written
    atomically; the format follows the output suffix (.svg by default).
    """
    epochs, acc_s, acc_t, gap = read_records_csv(records_csv)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, acc_s, marker="o", label="student accuracy")
    ax.plot(epochs, acc_t, marker="s", label="dynamic teacher accuracy")
    ax.fill_between(epochs, acc_s, acc_t, alpha=0.2, label="gap")
    ax.set_xlabel("epoch")
    ax.set_ylabel("eval accuracy")
    ax.set_title("student vs dynamic teacher")
    ax.legend(loc="lower right")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()

    directory = os.path.dirname(os.path.abspath(out_path)) or "."
    os.makedirs(directory, exist_ok=True)
    suffix = os.path.splitext(out_path)[1] or ".svg"
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=suffix)
    os.close(fd)
    try:
        fig.savefig(tmp, format=suffix.lstrip("."))
        os.replace(tmp, out_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    finally:
        plt.close(fig)
    return len(epochs)
